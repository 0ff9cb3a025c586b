use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, SubgraphActivation};
use super::params::{Attention, Linear, ModelParams};
use crate::autograd::{Graph, Matrix, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, masks drawn from `dropout_seed`.
    Train { dropout_seed: u64 },
    Eval,
}

/// Dropout mask source for one forward pass.
pub struct Dropout {
    p: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn new(p: f64, mode: Mode) -> Self {
        let rng = match mode {
            Mode::Train { dropout_seed } if p > 0.0 => Some(ChaCha8Rng::seed_from_u64(dropout_seed)),
            _ => None,
        };
        Self { p, rng }
    }

    pub fn disabled() -> Self {
        Self { p: 0.0, rng: None }
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - p)`.
    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        let Some(rng) = self.rng.as_mut() else {
            return x;
        };
        let keep = 1.0 - self.p;
        let mask = Array2::from_shape_fn(g.shape(x), |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        g.mask(x, mask)
    }
}

/// Node→subgraph attention of one block, averaged over heads.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// K × n; every row lies on the simplex.
    pub node_to_subgraph: Matrix,
    /// Per-head K × n maps, only when `per_head_traces` is set.
    pub per_head: Option<Vec<Matrix>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub layers: Vec<LayerTrace>,
    /// Graph-token attention over `[graph token, subgraph tokens...]`, length K + 1.
    pub subgraph_to_graph: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub z_g: Vec<f64>,
    pub z_n: Vec<f64>,
    pub subgraph_tokens: Matrix,
    pub node_tokens: Matrix,
    pub graph_token: Matrix,
    pub trace: AttentionTrace,
}

/// Tape handles for the outputs of one forward pass.
pub struct ForwardVars {
    pub z_g: Var,
    pub z_n: Var,
    pub subgraph_tokens: Var,
    pub node_tokens: Var,
    pub graph_token: Var,
    pub trace: AttentionTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScoreNorm {
    Softmax,
    Sparsemax,
}

struct Attended {
    output: Var,
    head_mean: Matrix,
    per_head: Vec<Matrix>,
}

fn ensure_finite(g: &Graph, v: Var, stage: &str) -> Result<()> {
    if g.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation(stage.to_string()))
    }
}

/// Places every parameter on the tape as a leaf.
pub fn bind(g: &mut Graph, params: &ModelParams) -> ModelParams<Var> {
    params.map(|_, t| g.leaf(t.clone()))
}

fn linear(g: &mut Graph, x: Var, p: &Linear<Var>) -> Var {
    let y = g.matmul(x, p.weight);
    g.add_row(y, p.bias)
}

/// Multi-head attention of `queries` over `context`, then
/// `LN(queries + concat_heads · W_O)`.
fn attend(
    g: &mut Graph,
    queries: Var,
    context: Var,
    p: &Attention<Var>,
    heads: usize,
    norm: ScoreNorm,
    dropout: &mut Dropout,
) -> Result<Attended> {
    let d = g.shape(queries).1;
    let dh = d / heads;
    let q = g.matmul(queries, p.query);
    let k = g.matmul(context, p.key);
    let v = g.matmul(context, p.value);
    let scale = 1.0 / (dh as f64).sqrt();

    let mut outputs = Vec::with_capacity(heads);
    let mut per_head = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let raw = g.matmul_bt(qh, kh);
        let scores = g.scale(raw, scale);
        let weights = match norm {
            ScoreNorm::Softmax => g.softmax_rows(scores),
            ScoreNorm::Sparsemax => g.sparsemax_rows(scores)?,
        };
        per_head.push(g.value(weights).clone());
        let dropped = dropout.apply(g, weights);
        outputs.push(g.matmul(dropped, vh));
    }
    let concat = g.concat_cols(&outputs);
    let projected = g.matmul(concat, p.output);
    let residual = g.add(queries, projected);
    let output = g.layer_norm(residual, p.norm.gamma, p.norm.beta);

    let mut head_mean = Matrix::zeros(per_head[0].dim());
    for w in &per_head {
        head_mean += w;
    }
    head_mean /= heads as f64;
    Ok(Attended {
        output,
        head_mean,
        per_head,
    })
}

/// PCC rows → node tokens, `X_n = M W + b`.
pub fn embed_nodes(g: &mut Graph, input: Var, proj: &Linear<Var>) -> Result<Var> {
    let (rows, cols) = g.shape(input);
    let expected = g.shape(proj.weight).0;
    if cols != expected || rows != cols {
        return Err(Error::ShapeMismatch(format!(
            "input is {rows}x{cols}, model expects {expected}x{expected}"
        )));
    }
    let x = linear(g, input, proj);
    ensure_finite(g, x, "embed_nodes")?;
    Ok(x)
}

/// Node self-attention with residual and layer norm.
pub fn node_to_node(
    g: &mut Graph,
    nodes: Var,
    p: &Attention<Var>,
    cfg: &ModelConfig,
    dropout: &mut Dropout,
) -> Result<Var> {
    let out = attend(g, nodes, nodes, p, cfg.heads, ScoreNorm::Softmax, dropout)?;
    ensure_finite(g, out.output, "node_to_node")?;
    Ok(out.output)
}

/// Subgraph tokens query the nodes through a sparse (Sparsemax) attention.
/// Returns the updated tokens, the head-mean K × n map and the per-head maps.
pub fn node_to_subgraph(
    g: &mut Graph,
    subgraph_tokens: Var,
    nodes: Var,
    p: &Attention<Var>,
    cfg: &ModelConfig,
    dropout: &mut Dropout,
) -> Result<(Var, Matrix, Vec<Matrix>)> {
    let norm = match cfg.subgraph_activation {
        SubgraphActivation::Sparsemax => ScoreNorm::Sparsemax,
        SubgraphActivation::Softmax => ScoreNorm::Softmax,
    };
    let out = attend(g, subgraph_tokens, nodes, p, cfg.heads, norm, dropout)?;
    ensure_finite(g, out.output, "node_to_subgraph")?;
    Ok((out.output, out.head_mean, out.per_head))
}

/// The graph token attends over itself and the subgraph tokens.
/// Returns the updated graph token and its head-mean weights (length K + 1).
pub fn subgraph_to_graph(
    g: &mut Graph,
    graph_token: Var,
    subgraph_tokens: Var,
    p: &Attention<Var>,
    cfg: &ModelConfig,
    dropout: &mut Dropout,
) -> Result<(Var, Vec<f64>)> {
    let context = g.concat_rows(&[graph_token, subgraph_tokens]);
    let out = attend(
        g,
        graph_token,
        context,
        p,
        cfg.heads,
        ScoreNorm::Softmax,
        dropout,
    )?;
    ensure_finite(g, out.output, "subgraph_to_graph")?;
    Ok((out.output, out.head_mean.row(0).to_vec()))
}

/// `[X_g ‖ mean(X_sg) ‖ mean(X_n)]`, the classifier input.
pub fn classifier_features(g: &mut Graph, graph: Var, subgraphs: Var, nodes: Var) -> Var {
    let sg = g.mean_rows(subgraphs);
    let n = g.mean_rows(nodes);
    g.concat_cols(&[graph, sg, n])
}

pub fn forward_graph(
    g: &mut Graph,
    vars: &ModelParams<Var>,
    cfg: &ModelConfig,
    input: ArrayView2<'_, f64>,
    mode: Mode,
) -> Result<ForwardVars> {
    let mut dropout = Dropout::new(cfg.dropout, mode);
    let x = g.leaf(input.to_owned());
    let mut nodes = embed_nodes(g, x, &vars.input_projection)?;
    let mut subgraphs = vars.subgraph_tokens;
    let mut layers = Vec::with_capacity(vars.blocks.len());
    for block in &vars.blocks {
        nodes = node_to_node(g, nodes, &block.node, cfg, &mut dropout)?;
        let (next, mean, heads) =
            node_to_subgraph(g, subgraphs, nodes, &block.subgraph, cfg, &mut dropout)?;
        subgraphs = next;
        layers.push(LayerTrace {
            node_to_subgraph: mean,
            per_head: cfg.per_head_traces.then_some(heads),
        });
    }
    let (graph, graph_weights) = subgraph_to_graph(
        g,
        vars.graph_token,
        subgraphs,
        &vars.graph_attention,
        cfg,
        &mut dropout,
    )?;

    let features = classifier_features(g, graph, subgraphs, nodes);
    let hidden = linear(g, features, &vars.classifier_hidden);
    let hidden = g.gelu(hidden);
    let hidden = dropout.apply(g, hidden);
    let z_g = linear(g, hidden, &vars.classifier_out);

    let pooled = g.mean_rows(nodes);
    let z_n = linear(g, pooled, &vars.aux_head);
    ensure_finite(g, z_g, "classifier")?;
    ensure_finite(g, z_n, "aux_head")?;

    Ok(ForwardVars {
        z_g,
        z_n,
        subgraph_tokens: subgraphs,
        node_tokens: nodes,
        graph_token: graph,
        trace: AttentionTrace {
            layers,
            subgraph_to_graph: graph_weights,
        },
    })
}

impl ForwardVars {
    pub fn to_output(&self, g: &Graph) -> ForwardOutput {
        ForwardOutput {
            z_g: g.value(self.z_g).row(0).to_vec(),
            z_n: g.value(self.z_n).row(0).to_vec(),
            subgraph_tokens: g.value(self.subgraph_tokens).clone(),
            node_tokens: g.value(self.node_tokens).clone(),
            graph_token: g.value(self.graph_token).clone(),
            trace: self.trace.clone(),
        }
    }
}

/// Runs the network on one input matrix (PCC rows, possibly Mixup-blended).
pub fn forward(
    input: ArrayView2<'_, f64>,
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: Mode,
) -> Result<ForwardOutput> {
    let mut g = Graph::new();
    let vars = bind(&mut g, params);
    let out = forward_graph(&mut g, &vars, cfg, input, mode)?;
    Ok(out.to_output(&g))
}

/// Softmax probability of class 1 from graph-head logits.
pub fn positive_probability(z_g: &[f64]) -> f64 {
    let max = z_g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z_g.iter().map(|v| (v - max).exp()).collect();
    exps[1] / exps.iter().sum::<f64>()
}

/// Mean pairwise cosine similarity between distinct rows.
pub fn mean_pairwise_cosine(tokens: &Matrix) -> f64 {
    let norms: Vec<f64> = tokens
        .axis_iter(Axis(0))
        .map(|r| r.dot(&r).sqrt().max(f64::MIN_POSITIVE))
        .collect();
    let k = tokens.nrows();
    let mut sum = 0.0;
    let mut count = 0.0;
    for i in 0..k {
        for j in (i + 1)..k {
            sum += tokens.row(i).dot(&tokens.row(j)) / (norms[i] * norms[j]);
            count += 1.0;
        }
    }
    if count == 0.0 {
        0.0
    } else {
        sum / count
    }
}
