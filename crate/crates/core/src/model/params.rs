use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;

/// Affine map `x W + b` with `W: in × out`, `b: 1 × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub gamma: T,
    pub beta: T,
}

/// Projections for one attention stage, followed by residual + layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub query: T,
    pub key: T,
    pub value: T,
    pub output: T,
    pub norm: Norm<T>,
}

/// One hierarchical block: node self-attention, then subgraph-token
/// cross-attention over the updated nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub node: Attention<T>,
    pub subgraph: Attention<T>,
}

/// Every learnable tensor of the network.
///
/// Generic over the leaf type so the same layout can hold values, tape
/// handles, gradients or optimizer moments. Traversal order is fixed and
/// defines tensor names like `blocks.0.subgraph.query`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = Array2<f64>> {
    pub input_projection: Linear<T>,
    pub subgraph_tokens: T,
    pub graph_token: T,
    pub blocks: Vec<Block<T>>,
    pub graph_attention: Attention<T>,
    pub classifier_hidden: Linear<T>,
    pub classifier_out: Linear<T>,
    pub aux_head: Linear<T>,
}

impl<T> Linear<T> {
    fn map<'a, U>(&'a self, p: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> Linear<U> {
        Linear {
            weight: f(&format!("{p}.weight"), &self.weight),
            bias: f(&format!("{p}.bias"), &self.bias),
        }
    }

    fn for_each_mut<'a>(&'a mut self, p: &str, f: &mut impl FnMut(&str, &'a mut T)) {
        f(&format!("{p}.weight"), &mut self.weight);
        f(&format!("{p}.bias"), &mut self.bias);
    }
}

impl<T> Attention<T> {
    fn map<'a, U>(&'a self, p: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> Attention<U> {
        Attention {
            query: f(&format!("{p}.query"), &self.query),
            key: f(&format!("{p}.key"), &self.key),
            value: f(&format!("{p}.value"), &self.value),
            output: f(&format!("{p}.output"), &self.output),
            norm: Norm {
                gamma: f(&format!("{p}.norm.gamma"), &self.norm.gamma),
                beta: f(&format!("{p}.norm.beta"), &self.norm.beta),
            },
        }
    }

    fn for_each_mut<'a>(&'a mut self, p: &str, f: &mut impl FnMut(&str, &'a mut T)) {
        f(&format!("{p}.query"), &mut self.query);
        f(&format!("{p}.key"), &mut self.key);
        f(&format!("{p}.value"), &mut self.value);
        f(&format!("{p}.output"), &mut self.output);
        f(&format!("{p}.norm.gamma"), &mut self.norm.gamma);
        f(&format!("{p}.norm.beta"), &mut self.norm.beta);
    }
}

impl<T> ModelParams<T> {
    /// Structure-preserving map; `f` receives each tensor's name.
    pub fn map<'a, U>(&'a self, mut f: impl FnMut(&str, &'a T) -> U) -> ModelParams<U> {
        let f = &mut f;
        ModelParams {
            input_projection: self.input_projection.map("input_projection", f),
            subgraph_tokens: f("subgraph_tokens", &self.subgraph_tokens),
            graph_token: f("graph_token", &self.graph_token),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| Block {
                    node: b.node.map(&format!("blocks.{i}.node"), f),
                    subgraph: b.subgraph.map(&format!("blocks.{i}.subgraph"), f),
                })
                .collect(),
            graph_attention: self.graph_attention.map("graph_attention", f),
            classifier_hidden: self.classifier_hidden.map("classifier_hidden", f),
            classifier_out: self.classifier_out.map("classifier_out", f),
            aux_head: self.aux_head.map("aux_head", f),
        }
    }

    pub fn for_each_mut<'a>(&'a mut self, mut f: impl FnMut(&str, &'a mut T)) {
        let f = &mut f;
        self.input_projection.for_each_mut("input_projection", f);
        f("subgraph_tokens", &mut self.subgraph_tokens);
        f("graph_token", &mut self.graph_token);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.node.for_each_mut(&format!("blocks.{i}.node"), f);
            b.subgraph.for_each_mut(&format!("blocks.{i}.subgraph"), f);
        }
        self.graph_attention.for_each_mut("graph_attention", f);
        self.classifier_hidden.for_each_mut("classifier_hidden", f);
        self.classifier_out.for_each_mut("classifier_out", f);
        self.aux_head.for_each_mut("aux_head", f);
    }

    pub fn for_each(&self, mut f: impl FnMut(&str, &T)) {
        let _ = self.map(|name, t| f(name, t));
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each(|name, _| out.push(name.to_string()));
        out
    }

    /// Leaves in traversal order.
    pub fn refs(&self) -> Vec<&T> {
        let mut out = Vec::new();
        let _ = self.map(|_, t| out.push(t));
        out
    }

    /// Mutable leaves in traversal order.
    pub fn refs_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.for_each_mut(|_, t| out.push(t));
        out
    }

    /// Pairs each tensor with the same-position tensor of `other`.
    pub fn zip<'a, U>(&'a self, other: &'a ModelParams<U>) -> ModelParams<(&'a T, &'a U)> {
        let mut rhs = other.refs().into_iter();
        self.map(|_, t| (t, rhs.next().expect("identical layouts")))
    }
}

impl ModelParams<Array2<f64>> {
    /// Tensor shapes implied by `cfg`.
    pub fn shapes(cfg: &ModelConfig) -> ModelParams<(usize, usize)> {
        let d = cfg.d;
        let attention = || Attention {
            query: (d, d),
            key: (d, d),
            value: (d, d),
            output: (d, d),
            norm: Norm {
                gamma: (1, d),
                beta: (1, d),
            },
        };
        let linear = |i, o| Linear {
            weight: (i, o),
            bias: (1, o),
        };
        ModelParams {
            input_projection: linear(cfg.n, d),
            subgraph_tokens: (cfg.k, d),
            graph_token: (1, d),
            blocks: (0..cfg.layers)
                .map(|_| Block {
                    node: attention(),
                    subgraph: attention(),
                })
                .collect(),
            graph_attention: attention(),
            classifier_hidden: linear(3 * d, cfg.ffn_multiplier * d),
            classifier_out: linear(cfg.ffn_multiplier * d, cfg.class_count),
            aux_head: linear(d, cfg.class_count),
        }
    }

    /// Normal(0, init_std) weights and tokens, zero biases, unit norm scales.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        Self::init_with_std(cfg, seed, cfg.init_std)
    }

    pub fn init_with_std(cfg: &ModelConfig, seed: u64, std: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("init std must be finite and non-negative");
        Self::shapes(cfg).map(|name, &shape| {
            if name.ends_with("gamma") {
                Array2::ones(shape)
            } else if name.ends_with("bias") || name.ends_with("beta") {
                Array2::zeros(shape)
            } else {
                Array2::from_shape_fn(shape, |_| normal.sample(&mut rng))
            }
        })
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_, t| Array2::zeros(t.dim()))
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|_, t| ok &= t.iter().all(|v| v.is_finite()));
        ok
    }

    pub fn tensor_count(&self) -> usize {
        let mut count = 0;
        self.for_each(|_, _| count += 1);
        count
    }

    pub fn parameter_count(&self) -> usize {
        let mut count = 0;
        self.for_each(|_, t| count += t.len());
        count
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig::tiny()
    }

    #[test]
    fn shapes_follow_config() {
        let p = ModelParams::init(&tiny(), 0);
        assert_eq!(p.input_projection.weight.dim(), (6, 8));
        assert_eq!(p.subgraph_tokens.dim(), (3, 8));
        assert_eq!(p.graph_token.dim(), (1, 8));
        assert_eq!(p.classifier_hidden.weight.dim(), (24, 32));
        assert_eq!(p.aux_head.weight.dim(), (8, 2));
        assert_eq!(p.blocks.len(), 1);
    }

    #[test]
    fn names_are_unique_and_ordered() {
        let p = ModelParams::init(&tiny(), 0);
        let names = p.names();
        let unique: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        assert_eq!(names[0], "input_projection.weight");
        assert!(names.contains(&"blocks.0.subgraph.key".to_string()));
        assert_eq!(names.len(), p.tensor_count());
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(ModelParams::init(&tiny(), 4), ModelParams::init(&tiny(), 4));
        assert_ne!(ModelParams::init(&tiny(), 4), ModelParams::init(&tiny(), 5));
        let p = ModelParams::init(&tiny(), 4);
        assert!(p.blocks[0].node.norm.gamma.iter().all(|&v| v == 1.0));
        assert!(p.input_projection.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zip_pairs_same_names() {
        let p = ModelParams::init(&tiny(), 1);
        let names = p.map(|name, _| name.to_string());
        let zipped = p.zip(&names);
        zipped.for_each(|name, (t, n)| {
            assert_eq!(name, n.as_str());
            assert!(t.len() > 0);
        });
    }
}
