//! Stage-level checks of the network against plain-loop reference code.

use brainho::autograd::{Graph, Matrix, Var};
use brainho::model::{
    embed_nodes, forward, node_to_node, node_to_subgraph, subgraph_to_graph, Attention, Dropout,
    Linear, ModelConfig, ModelParams, Mode, Norm, SubgraphActivation,
};
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Array2::from_shape_fn((rows, cols), |_| scale * rng.random_range(-1.0..1.0))
}

fn random_attention(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Attention<Matrix> {
    Attention {
        query: random(rng, d, d, scale),
        key: random(rng, d, d, scale),
        value: random(rng, d, d, scale),
        output: random(rng, d, d, scale),
        norm: Norm {
            gamma: random(rng, 1, d, 1.0) + 1.0,
            beta: random(rng, 1, d, 0.1),
        },
    }
}

fn leaf_attention(g: &mut Graph, p: &Attention<Matrix>) -> Attention<Var> {
    Attention {
        query: g.leaf(p.query.clone()),
        key: g.leaf(p.key.clone()),
        value: g.leaf(p.value.clone()),
        output: g.leaf(p.output.clone()),
        norm: Norm {
            gamma: g.leaf(p.norm.gamma.clone()),
            beta: g.leaf(p.norm.beta.clone()),
        },
    }
}

fn cfg(d: usize, heads: usize, activation: SubgraphActivation) -> ModelConfig {
    ModelConfig {
        n: 4,
        d,
        heads,
        layers: 1,
        k: 3,
        dropout: 0.0,
        subgraph_activation: activation,
        ..ModelConfig::default()
    }
}

fn ref_layer_norm(x: &Matrix, gamma: &Matrix, beta: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.nrows() {
        let row: Vec<f64> = x.row(r).to_vec();
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
        for c in 0..x.ncols() {
            out[[r, c]] = (row[c] - mean) / (var + 1e-5).sqrt() * gamma[[0, c]] + beta[[0, c]];
        }
    }
    out
}

fn ref_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    for i in 0..a.nrows() {
        for j in 0..b.ncols() {
            let mut acc = 0.0;
            for k in 0..a.ncols() {
                acc += a[[i, k]] * b[[k, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

fn ref_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Dense softmax multi-head attention, written out loop by loop.
fn ref_attention(queries: &Matrix, context: &Matrix, p: &Attention<Matrix>, heads: usize) -> Matrix {
    let d = queries.ncols();
    let dh = d / heads;
    let q = ref_matmul(queries, &p.query);
    let k = ref_matmul(context, &p.key);
    let v = ref_matmul(context, &p.value);
    let mut concat = Array2::zeros((queries.nrows(), d));
    for h in 0..heads {
        for i in 0..queries.nrows() {
            let scores: Vec<f64> = (0..context.nrows())
                .map(|j| {
                    (0..dh).map(|c| q[[i, h * dh + c]] * k[[j, h * dh + c]]).sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let w = ref_softmax(&scores);
            for c in 0..dh {
                concat[[i, h * dh + c]] = (0..context.nrows()).map(|j| w[j] * v[[j, h * dh + c]]).sum();
            }
        }
    }
    let residual = queries + &ref_matmul(&concat, &p.output);
    ref_layer_norm(&residual, &p.norm.gamma, &p.norm.beta)
}

fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
    assert_eq!(a.dim(), b.dim());
    for (x, y) in a.iter().zip(b.iter()) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

#[test]
fn embedding_of_zero_input_is_bias() {
    let mut g = Graph::new();
    let x = g.leaf(Array2::zeros((5, 5)));
    let bias = Array2::from_shape_fn((1, 3), |(_, c)| c as f64 - 0.5);
    let proj = Linear {
        weight: g.leaf(Array2::zeros((5, 3))),
        bias: g.leaf(bias.clone()),
    };
    let out = embed_nodes(&mut g, x, &proj).unwrap();
    for r in g.value(out).rows() {
        assert_eq!(r, bias.row(0));
    }
}

#[test]
fn identity_embedding_returns_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = random(&mut rng, 6, 6, 1.0);
    let mut g = Graph::new();
    let x = g.leaf(m.clone());
    let proj = Linear {
        weight: g.leaf(Array2::eye(6)),
        bias: g.leaf(Array2::zeros((1, 6))),
    };
    let out = embed_nodes(&mut g, x, &proj).unwrap();
    assert_eq!(g.value(out), &m);
}

#[test]
fn embedding_matches_plain_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = random(&mut rng, 8, 8, 1.0);
    let w = random(&mut rng, 8, 5, 1.0);
    let b = random(&mut rng, 1, 5, 1.0);
    let mut g = Graph::new();
    let x = g.leaf(m.clone());
    let proj = Linear {
        weight: g.leaf(w.clone()),
        bias: g.leaf(b.clone()),
    };
    let out = embed_nodes(&mut g, x, &proj).unwrap();
    let mut expected = ref_matmul(&m, &w);
    for mut r in expected.rows_mut() {
        r += &b.row(0);
    }
    assert_close(g.value(out), &expected, 1e-12);
}

#[test]
fn embedding_rejects_wrong_size() {
    let mut g = Graph::new();
    let x = g.leaf(Array2::zeros((4, 4)));
    let proj = Linear {
        weight: g.leaf(Array2::zeros((5, 3))),
        bias: g.leaf(Array2::zeros((1, 3))),
    };
    assert!(embed_nodes(&mut g, x, &proj).is_err());
}

#[test]
fn single_node_self_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = random_attention(&mut rng, 8, 0.4);
    let x0 = random(&mut rng, 1, 8, 1.0);
    let mut g = Graph::new();
    let x = g.leaf(x0.clone());
    let pv = leaf_attention(&mut g, &p);
    let out = node_to_node(&mut g, x, &pv, &cfg(8, 2, SubgraphActivation::Sparsemax), &mut Dropout::disabled()).unwrap();
    let v = ref_matmul(&ref_matmul(&x0, &p.value), &p.output);
    let expected = ref_layer_norm(&(&x0 + &v), &p.norm.gamma, &p.norm.beta);
    assert_close(g.value(out), &expected, 1e-12);
}

#[test]
fn self_attention_matches_dense_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = random_attention(&mut rng, 8, 0.5);
    let x0 = random(&mut rng, 4, 8, 1.0);
    let mut g = Graph::new();
    let x = g.leaf(x0.clone());
    let pv = leaf_attention(&mut g, &p);
    let out = node_to_node(&mut g, x, &pv, &cfg(8, 2, SubgraphActivation::Sparsemax), &mut Dropout::disabled()).unwrap();
    assert_close(g.value(out), &ref_attention(&x0, &x0, &p, 2), 1e-10);
}

#[test]
fn self_attention_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = random_attention(&mut rng, 8, 0.5);
    let x0 = random(&mut rng, 5, 8, 1.0);
    let perm = [3, 0, 4, 1, 2];
    let permuted = Array2::from_shape_fn((5, 8), |(r, c)| x0[[perm[r], c]]);
    let run = |x0: &Matrix| {
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let pv = leaf_attention(&mut g, &p);
        let out = node_to_node(&mut g, x, &pv, &cfg(8, 2, SubgraphActivation::Sparsemax), &mut Dropout::disabled()).unwrap();
        g.value(out).clone()
    };
    let a = run(&x0);
    let b = run(&permuted);
    for (r, &src) in perm.iter().enumerate() {
        for c in 0..8 {
            assert!((b[[r, c]] - a[[src, c]]).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_nodes_give_uniform_sparse_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = random_attention(&mut rng, 8, 0.5);
    let token = random(&mut rng, 1, 8, 1.0);
    let nodes = Array2::from_shape_fn((6, 8), |(_, c)| token[[0, c]]);
    let mut g = Graph::new();
    let sg = g.leaf(random(&mut rng, 3, 8, 1.0));
    let x = g.leaf(nodes);
    let pv = leaf_attention(&mut g, &p);
    let (_, mean, heads) = node_to_subgraph(&mut g, sg, x, &pv, &cfg(8, 2, SubgraphActivation::Sparsemax), &mut Dropout::disabled()).unwrap();
    for h in heads.iter().chain(std::iter::once(&mean)) {
        for v in h.iter() {
            assert!((v - 1.0 / 6.0).abs() < 1e-12);
        }
    }
}

#[test]
fn dominant_key_gives_one_hot_row() {
    // one head, identity projections: scores are plain dot products / sqrt(d)
    let d = 4;
    let p = Attention {
        query: Array2::eye(d),
        key: Array2::eye(d),
        value: Array2::eye(d),
        output: Array2::eye(d),
        norm: Norm {
            gamma: Array2::ones((1, d)),
            beta: Array2::zeros((1, d)),
        },
    };
    let query = ndarray::array![[2.0, 0.0, 0.0, 0.0]];
    // score of node 2 is 3.0 / 2 = 1.5 against 0.0 / 0.25 for the others
    let nodes = ndarray::array![
        [0.0, 1.0, 0.0, 0.0],
        [0.25, 0.0, 1.0, 0.0],
        [1.5, 0.0, 0.0, 1.0],
        [0.0, 0.0, 0.0, 0.0]
    ];
    let mut g = Graph::new();
    let sg = g.leaf(query);
    let x = g.leaf(nodes);
    let pv = leaf_attention(&mut g, &p);
    let c = ModelConfig { d, heads: 1, ..cfg(d, 1, SubgraphActivation::Sparsemax) };
    let (_, mean, _) = node_to_subgraph(&mut g, sg, x, &pv, &c, &mut Dropout::disabled()).unwrap();
    assert_eq!(mean.row(0).to_vec(), vec![0.0, 0.0, 1.0, 0.0]);
}

#[test]
fn softmax_variant_matches_dense_cross_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = random_attention(&mut rng, 8, 0.5);
    let tokens = random(&mut rng, 3, 8, 1.0);
    let nodes = random(&mut rng, 5, 8, 1.0);
    let mut g = Graph::new();
    let sg = g.leaf(tokens.clone());
    let x = g.leaf(nodes.clone());
    let pv = leaf_attention(&mut g, &p);
    let (out, mean, _) = node_to_subgraph(&mut g, sg, x, &pv, &cfg(8, 2, SubgraphActivation::Softmax), &mut Dropout::disabled()).unwrap();
    assert_close(g.value(out), &ref_attention(&tokens, &nodes, &p, 2), 1e-10);
    for r in mean.rows() {
        assert!((r.sum() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn sparse_rows_lie_on_the_simplex() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let p = random_attention(&mut rng, 8, 2.0);
        let mut g = Graph::new();
        let sg = g.leaf(random(&mut rng, 3, 8, 2.0));
        let x = g.leaf(random(&mut rng, 7, 8, 2.0));
        let pv = leaf_attention(&mut g, &p);
        let (_, mean, heads) = node_to_subgraph(&mut g, sg, x, &pv, &cfg(8, 2, SubgraphActivation::Sparsemax), &mut Dropout::disabled()).unwrap();
        for m in heads.iter().chain(std::iter::once(&mean)) {
            for r in m.rows() {
                assert!((r.sum() - 1.0).abs() < 1e-9);
                assert!(r.iter().all(|&v| v >= 0.0));
            }
        }
    }
}

#[test]
fn graph_attention_over_identical_keys_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = random_attention(&mut rng, 8, 0.5);
    let token = random(&mut rng, 1, 8, 1.0);
    let sgs = Array2::from_shape_fn((8, 8), |(_, c)| token[[0, c]]);
    let mut g = Graph::new();
    let gt = g.leaf(token);
    let sg = g.leaf(sgs);
    let pv = leaf_attention(&mut g, &p);
    let (_, w) = subgraph_to_graph(&mut g, gt, sg, &pv, &cfg(8, 2, SubgraphActivation::Sparsemax), &mut Dropout::disabled()).unwrap();
    assert_eq!(w.len(), 9);
    for v in &w {
        assert!((v - 1.0 / 9.0).abs() < 1e-12);
    }
}

#[test]
fn graph_attention_matches_dense_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let p = random_attention(&mut rng, 8, 0.3);
    let token = random(&mut rng, 1, 8, 1.0);
    let sgs = random(&mut rng, 8, 8, 1.0);
    let mut g = Graph::new();
    let gt = g.leaf(token.clone());
    let sg = g.leaf(sgs.clone());
    let pv = leaf_attention(&mut g, &p);
    let (out, w) = subgraph_to_graph(&mut g, gt, sg, &pv, &cfg(8, 2, SubgraphActivation::Sparsemax), &mut Dropout::disabled()).unwrap();
    let mut context = Array2::zeros((9, 8));
    context.slice_mut(s![0..1, ..]).assign(&token);
    context.slice_mut(s![1.., ..]).assign(&sgs);
    assert_close(g.value(out), &ref_attention(&token, &context, &p, 2), 1e-10);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn forward_shapes_and_eval_determinism() {
    let c = ModelConfig { n: 10, d: 16, heads: 4, layers: 2, k: 4, dropout: 0.1, ..ModelConfig::default() };
    let params = ModelParams::init_with_std(&c, 3, 0.2);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let input = random(&mut rng, 10, 10, 1.0);
    let a = forward(input.view(), &params, &c, Mode::Eval).unwrap();
    let b = forward(input.view(), &params, &c, Mode::Eval).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.z_g.len(), 2);
    assert_eq!(a.z_n.len(), 2);
    assert_eq!(a.subgraph_tokens.dim(), (4, 16));
    assert_eq!(a.node_tokens.dim(), (10, 16));
    assert_eq!(a.trace.layers.len(), 2);
    assert_eq!(a.trace.subgraph_to_graph.len(), 5);
    for l in &a.trace.layers {
        assert_eq!(l.node_to_subgraph.dim(), (4, 10));
        assert!(l.per_head.is_none());
    }

    let t1 = forward(input.view(), &params, &c, Mode::Train { dropout_seed: 5 }).unwrap();
    let t2 = forward(input.view(), &params, &c, Mode::Train { dropout_seed: 5 }).unwrap();
    let t3 = forward(input.view(), &params, &c, Mode::Train { dropout_seed: 6 }).unwrap();
    assert_eq!(t1, t2);
    assert_ne!(t1.z_g, t3.z_g);
    assert_ne!(t1.z_g, a.z_g);
}

#[test]
fn per_head_traces_on_request() {
    let c = ModelConfig { per_head_traces: true, ..ModelConfig::tiny() };
    let params = ModelParams::init(&c, 0);
    let input = Array2::eye(c.n);
    let out = forward(input.view(), &params, &c, Mode::Eval).unwrap();
    let heads = out.trace.layers[0].per_head.as_ref().unwrap();
    assert_eq!(heads.len(), c.heads);
    let mut mean = Array2::zeros(heads[0].dim());
    for h in heads {
        mean += h;
    }
    mean /= c.heads as f64;
    assert_close(&mean, &out.trace.layers[0].node_to_subgraph, 1e-15);
}
