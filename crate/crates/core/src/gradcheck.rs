//! Central finite-difference check of every parameter gradient of the full
//! objective on a small model.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{FaultInjection, Graph};
use crate::error::Result;
use crate::losses::{total_loss_graph, LossWeights, Target};
use crate::model::{bind, forward_graph, ModelConfig, ModelParams, Mode};
use crate::train::backward;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub model: ModelConfig,
    pub seed: u64,
    /// Parameter init scale; larger than training init so every path carries
    /// gradient well above finite-difference noise.
    pub init_std: f64,
    pub step: f64,
    pub tolerance: f64,
    pub beta_t: f64,
    pub fault: FaultInjection,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            model: ModelConfig::tiny(),
            seed: 7,
            init_std: 0.3,
            step: 1e-5,
            tolerance: 1e-3,
            beta_t: 0.15,
            fault: FaultInjection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub elements: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the tensor.
    pub relative_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn max_relative_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.relative_error)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.tensors
            .iter()
            .filter(|t| !t.passed)
            .map(|t| t.name.as_str())
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = format!("{:<40} {:>8} {:>12}  status\n", "tensor", "size", "rel_error");
        for t in &self.tensors {
            out.push_str(&format!(
                "{:<40} {:>8} {:>12.3e}  {}\n",
                t.name,
                t.elements,
                t.relative_error,
                if t.passed { "ok" } else { "FAIL" }
            ));
        }
        out.push_str(&format!(
            "max relative error {:.3e} (tolerance {:.0e}): {}\n",
            self.max_relative_error(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        ));
        out
    }
}

/// A symmetric unit-diagonal input with entries in (-1, 1).
fn sample_input(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let normal = Normal::new(0.0, 0.4).unwrap();
    let mut m = Array2::from_shape_fn((n, n), |_| normal.sample(rng));
    m = (&m + &m.t()) / 2.0;
    m.mapv_inplace(f64::tanh);
    m.diag_mut().fill(1.0);
    m
}

pub fn gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let cfg = &opts.model;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let input = sample_input(cfg.n, &mut rng);
    let params = ModelParams::init_with_std(cfg, opts.seed, opts.init_std);
    // soft target exercises the Mixup label path
    let target = Target::Soft(vec![0.3, 0.7]);
    let weights = LossWeights::default();

    let mut g = Graph::with_fault(opts.fault);
    let vars = bind(&mut g, &params);
    let out = forward_graph(&mut g, &vars, cfg, input.view(), Mode::Eval)?;
    let teacher = g.value(out.z_g).row(0).to_vec();
    let (loss, _) = total_loss_graph(&mut g, &out, &target, opts.beta_t, &weights, None)?;
    let analytic = backward(&g, loss, &vars)?;

    // the teacher is detached, so finite differences hold it at its baseline
    let eval = |p: &ModelParams| -> Result<f64> {
        let mut g = Graph::new();
        let vars = bind(&mut g, p);
        let out = forward_graph(&mut g, &vars, cfg, input.view(), Mode::Eval)?;
        let (loss, _) =
            total_loss_graph(&mut g, &out, &target, opts.beta_t, &weights, Some(&teacher))?;
        Ok(g.value(loss)[[0, 0]])
    };

    let names = params.names();
    let shapes: Vec<(usize, usize)> = params.refs().iter().map(|t| t.dim()).collect();
    let analytic_refs = analytic.refs();
    let mut tensors = Vec::with_capacity(names.len());
    for (idx, name) in names.iter().enumerate() {
        let (rows, cols) = shapes[idx];
        let mut numeric = Array2::<f64>::zeros((rows, cols));
        for r in 0..rows {
            for c in 0..cols {
                let shifted = |delta: f64| {
                    let mut p = params.clone();
                    let mut i = 0;
                    p.for_each_mut(|_, t| {
                        if i == idx {
                            t[[r, c]] += delta;
                        }
                        i += 1;
                    });
                    eval(&p)
                };
                numeric[[r, c]] = (shifted(opts.step)? - shifted(-opts.step)?) / (2.0 * opts.step);
            }
        }
        let a = analytic_refs[idx];
        let diff = (a - &numeric).mapv(|v| v * v).sum().sqrt();
        let scale = a
            .mapv(|v| v * v)
            .sum()
            .sqrt()
            .max(numeric.mapv(|v| v * v).sum().sqrt())
            .max(1e-12);
        let rel = diff / scale;
        tensors.push(TensorCheck {
            name: name.clone(),
            elements: rows * cols,
            relative_error: rel,
            passed: rel <= opts.tolerance,
        });
    }
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        tensors,
    })
}
