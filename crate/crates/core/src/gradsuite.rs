//! Finite-difference verification of every differentiable piece of the lab:
//! the tensor ops, the metric losses, the two-branch joint objective and the
//! six FLF objectives.
//!
//! Each case draws random points, skips any point where a relu-type input
//! lies within `MIN_KINK_MARGIN` of its kink, and compares reverse-mode
//! gradients with central differences on every coordinate.

use disent_tensor::{finite_difference_check, Axis, Graph, NodeId, ParamStore, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::embeddings::{connecting_layer_graph, joint_objective_graph, JointWeights, MahalanobisMetric, TwoBranchConfig, TwoBranchNet};
use crate::error::{CoreError, Result};
use crate::flf::{Component, FlfBatch, FlfDims, FlfModel, TrainSchedule};
use crate::metric_losses::{
    adaptive_graph, ccl_graph, n_plus_one_graph, triplet_graph, tuple_clusters_graph, AdaptiveParams, CenterMode,
};
use crate::nn::Mode;

pub const FD_STEP: f64 = 1e-6;
pub const MAX_REL_ERROR: f64 = 1e-5;
pub const POINTS_PER_CASE: usize = 10;
/// Pre-activations closer than this to zero make a point "on the boundary".
pub const MIN_KINK_MARGIN: f64 = 1e-3;
const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub points: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradSuiteReport {
    pub tolerance: f64,
    pub cases: Vec<CaseResult>,
}

impl GradSuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

type Builder = Box<dyn Fn(&mut Graph, &ParamStore) -> std::result::Result<NodeId, TensorError>>;
type Draw = fn(&mut ChaCha8Rng) -> Result<(ParamStore, Builder)>;

fn builder<F>(f: F) -> Builder
where
    F: Fn(&mut Graph, &ParamStore) -> std::result::Result<NodeId, TensorError> + 'static,
{
    Box::new(f)
}

fn tensor_err(e: CoreError) -> TensorError {
    match e {
        CoreError::Tensor(t) => t,
        other => TensorError::Contract(other.to_string()),
    }
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

fn store(entries: Vec<(&str, Tensor)>) -> ParamStore {
    let mut p = ParamStore::new();
    for (k, v) in entries {
        p.insert(k, v);
    }
    p
}

/// `Σ w ⊙ y` with a fixed random `w`, so every output coordinate matters.
fn weighted_sum(g: &mut Graph, y: NodeId, w: &Tensor) -> std::result::Result<NodeId, TensorError> {
    let w = g.input(w.clone())?;
    let p = g.mul(y, w)?;
    g.sum(p, None)
}

/// A random symmetric positive-definite metric.
fn random_metric(rng: &mut ChaCha8Rng, d: usize) -> MahalanobisMetric {
    let a = randn(rng, d, d, 1.0);
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            m[i * d + j] = (0..d).map(|k| a.get(i, k) * a.get(j, k)).sum::<f64>() / d as f64;
        }
        m[i * d + i] += 0.5;
    }
    MahalanobisMetric::new(Tensor::matrix(d, d, m).expect("square")).expect("positive definite")
}

fn unary(rng: &mut ChaCha8Rng, positive: bool, op: fn(&mut Graph, NodeId) -> std::result::Result<NodeId, TensorError>) -> Result<(ParamStore, Builder)> {
    let a = if positive { uniform(rng, 3, 4, 0.3, 2.0) } else { randn(rng, 3, 4, 1.0) };
    let mut g = Graph::new();
    let an = g.input(a.clone())?;
    let out = op(&mut g, an)?;
    let shape = g.shape(out).to_vec();
    let w = randn(rng, shape[0], shape[1], 1.0);
    Ok((
        store(vec![("a", a)]),
        builder(move |g, p| {
            let a = g.param(p, "a")?;
            let y = op(g, a)?;
            weighted_sum(g, y, &w)
        }),
    ))
}

fn binary(rng: &mut ChaCha8Rng, b_rows: usize, b_cols: usize, op: fn(&mut Graph, NodeId, NodeId) -> std::result::Result<NodeId, TensorError>) -> Result<(ParamStore, Builder)> {
    let a = randn(rng, 3, 4, 1.0);
    let b = randn(rng, b_rows, b_cols, 1.0);
    let mut g = Graph::new();
    let (an, bn) = (g.input(a.clone())?, g.input(b.clone())?);
    let out = op(&mut g, an, bn)?;
    let out_shape = g.shape(out).to_vec();
    let w = randn(rng, out_shape[0], out_shape[1], 1.0);
    Ok((
        store(vec![("a", a), ("b", b)]),
        builder(move |g, p| {
            let a = g.param(p, "a")?;
            let b = g.param(p, "b")?;
            let y = op(g, a, b)?;
            weighted_sum(g, y, &w)
        }),
    ))
}

fn op_cases() -> Vec<(&'static str, Draw)> {
    vec![
        ("op.matmul", |r| binary(r, 4, 2, |g, a, b| g.matmul(a, b))),
        ("op.add", |r| binary(r, 3, 4, |g, a, b| g.add(a, b))),
        ("op.broadcast_add_row", |r| binary(r, 1, 4, |g, a, b| g.broadcast_add(a, b))),
        ("op.broadcast_add_col", |r| binary(r, 3, 1, |g, a, b| g.broadcast_add(a, b))),
        ("op.mul", |r| binary(r, 3, 4, |g, a, b| g.mul(a, b))),
        ("op.sub", |r| binary(r, 3, 4, |g, a, b| g.sub(a, b))),
        ("op.concat_cols", |r| binary(r, 3, 2, |g, a, b| g.concat(&[a, b], Axis::Cols))),
        ("op.concat_rows", |r| binary(r, 2, 4, |g, a, b| g.concat(&[a, b], Axis::Rows))),
        ("op.scale", |r| unary(r, false, |g, a| g.scale(a, -1.7))),
        ("op.add_scalar", |r| unary(r, false, |g, a| {
            let y = g.add_scalar(a, 0.4)?;
            g.square(y)
        })),
        ("op.relu", |r| unary(r, false, |g, a| g.relu(a))),
        ("op.leaky_relu", |r| unary(r, false, |g, a| g.leaky_relu(a, 0.2))),
        ("op.sigmoid", |r| unary(r, false, |g, a| g.sigmoid(a))),
        ("op.tanh", |r| unary(r, false, |g, a| g.tanh(a))),
        ("op.exp", |r| unary(r, false, |g, a| g.exp(a))),
        ("op.log", |r| unary(r, true, |g, a| g.log(a))),
        ("op.square", |r| unary(r, false, |g, a| g.square(a))),
        ("op.mean_rows", |r| unary(r, false, |g, a| {
            let m = g.mean(a, Some(Axis::Rows))?;
            g.square(m)
        })),
        ("op.mean_cols", |r| unary(r, false, |g, a| {
            let m = g.mean(a, Some(Axis::Cols))?;
            g.square(m)
        })),
        ("op.mean_all", |r| unary(r, false, |g, a| {
            let m = g.mean(a, None)?;
            g.square(m)
        })),
        ("op.sum_rows", |r| unary(r, false, |g, a| {
            let m = g.sum(a, Some(Axis::Rows))?;
            g.square(m)
        })),
        ("op.sum_cols", |r| unary(r, false, |g, a| {
            let m = g.sum(a, Some(Axis::Cols))?;
            g.square(m)
        })),
        ("op.slice_rows", |r| unary(r, false, |g, a| g.slice(a, Axis::Rows, 1, 3))),
        ("op.slice_cols", |r| unary(r, false, |g, a| g.slice(a, Axis::Cols, 2, 3))),
        ("op.softmax_cross_entropy", |r| unary(r, false, |g, a| g.softmax_cross_entropy(a, &[0, 3, 1]))),
        ("op.binary_cross_entropy", |r| {
            let t = Tensor::matrix(3, 4, vec![1., 0., 0., 1., 1., 1., 0., 0., 0., 1., 0., 1.])?;
            let a = randn(r, 3, 4, 1.5);
            Ok((
                store(vec![("a", a)]),
                builder(move |g, p| {
                    let a = g.param(p, "a")?;
                    g.binary_cross_entropy(a, &t)
                }),
            ))
        }),
        ("op.squared_error", |r| {
            let t = randn(r, 3, 4, 1.0);
            let a = randn(r, 3, 4, 1.0);
            Ok((
                store(vec![("a", a)]),
                builder(move |g, p| {
                    let a = g.param(p, "a")?;
                    g.squared_error(a, &t)
                }),
            ))
        }),
    ]
}

const EMBED: usize = 4;

fn loss_cases() -> Vec<(&'static str, Draw)> {
    vec![
        ("metric.mahalanobis", |r| {
            let metric = random_metric(r, EMBED);
            let w = randn(r, 3, 1, 1.0);
            Ok((
                store(vec![("rows", randn(r, 3, EMBED, 1.0)), ("center", randn(r, 1, EMBED, 1.0))]),
                builder(move |g, p| {
                    let rows = g.param(p, "rows")?;
                    let c = g.param(p, "center")?;
                    let d = metric.distances_to(g, rows, c).map_err(tensor_err)?;
                    weighted_sum(g, d, &w)
                }),
            ))
        }),
        ("loss.triplet", |r| {
            let metric = random_metric(r, EMBED);
            let tau = r.random_range(0.5..2.0);
            Ok((
                store(vec![
                    ("anchor", randn(r, 1, EMBED, 1.0)),
                    ("positive", randn(r, 1, EMBED, 1.0)),
                    ("negative", randn(r, 1, EMBED, 1.0)),
                ]),
                builder(move |g, p| {
                    let a = g.param(p, "anchor")?;
                    let pos = g.param(p, "positive")?;
                    let neg = g.param(p, "negative")?;
                    triplet_graph(g, a, pos, neg, tau, &metric).map_err(tensor_err)
                }),
            ))
        }),
        ("loss.n_plus_one_tuplet", |r| {
            let metric = random_metric(r, EMBED);
            let tau = r.random_range(0.5..2.0);
            Ok((
                store(vec![
                    ("query", randn(r, 1, EMBED, 1.0)),
                    ("positive", randn(r, 1, EMBED, 1.0)),
                    ("negatives", randn(r, 4, EMBED, 1.0)),
                ]),
                builder(move |g, p| {
                    let q = g.param(p, "query")?;
                    let pos = g.param(p, "positive")?;
                    let neg = g.param(p, "negatives")?;
                    n_plus_one_graph(g, q, pos, neg, tau, &metric).map_err(tensor_err)
                }),
            ))
        }),
        ("loss.coupled_clusters", |r| {
            let metric = MahalanobisMetric::identity(EMBED);
            let tau = r.random_range(0.5..2.0);
            // The nearest negative is selected discretely, so keep the two
            // closest negatives well separated.
            let (pos, neg) = loop {
                let pos = randn(r, 3, EMBED, 1.0);
                let neg = randn(r, 3, EMBED, 1.5);
                let c: Vec<f64> = (0..EMBED).map(|j| (0..3).map(|i| pos.get(i, j)).sum::<f64>() / 3.0).collect();
                let mut d: Vec<f64> = (0..3)
                    .map(|i| (0..EMBED).map(|j| (neg.get(i, j) - c[j]).powi(2)).sum())
                    .collect();
                d.sort_by(f64::total_cmp);
                if d[1] - d[0] > 0.05 {
                    break (pos, neg);
                }
            };
            Ok((
                store(vec![("pos", pos), ("neg", neg)]),
                builder(move |g, p| {
                    let pos = g.param(p, "pos")?;
                    let neg = g.param(p, "neg")?;
                    ccl_graph(g, pos, neg, tau, &metric).map_err(tensor_err)
                }),
            ))
        }),
        ("loss.tuple_clusters", |r| tuple_clusters_case(r, CenterMode::Mined)),
        ("loss.tuple_clusters_all_center", |r| tuple_clusters_case(r, CenterMode::All)),
        ("loss.adaptive_tuple_clusters", |r| {
            let mut p = store(vec![("pos", randn(r, 3, EMBED, 1.0)), ("neg", randn(r, 3, EMBED, 1.0))]);
            let b0 = r.random_range(-1.0..1.0);
            let mut ap = AdaptiveParams::init(EMBED, 2, 2, b0, 0.7, r);
            ap.c = (0..EMBED).map(|_| 0.3 * r.sample::<f64, _>(StandardNormal)).collect();
            ap.write_to(&mut p);
            let kept = [true, true, false];
            Ok((
                p,
                builder(move |g, p| {
                    let nodes = AdaptiveParams::nodes(g, p, true).map_err(tensor_err)?;
                    let pos = g.param(p, "pos")?;
                    let neg = g.param(p, "neg")?;
                    adaptive_graph(g, pos, neg, &kept, &nodes, CenterMode::Mined).map_err(tensor_err)
                }),
            ))
        }),
        ("net.connecting_layer", |r| {
            let w = randn(r, 2, 3, 1.0);
            Ok((
                store(vec![
                    ("fc2", randn(r, 2, 4, 1.0)),
                    ("fc3", randn(r, 2, 4, 1.0)),
                    ("p1", randn(r, 4, 3, 1.0)),
                    ("p2", randn(r, 4, 3, 1.0)),
                ]),
                builder(move |g, p| {
                    let ids = ["fc2", "fc3", "p1", "p2"].map(|n| g.param(p, n));
                    let [a, b, p1, p2] = ids;
                    let y = connecting_layer_graph(g, a?, b?, p1?, p2?).map_err(tensor_err)?;
                    weighted_sum(g, y, &w)
                }),
            ))
        }),
        ("net.two_branch_joint", |r| {
            let net = TwoBranchNet::new(TwoBranchConfig {
                input_dim: 5,
                trunk_hidden: 6,
                trunk_out: 6,
                d_input: 5,
                d_output: 5,
                embed_dim: 3,
                num_classes: 3,
            });
            let params = net.init(r);
            let (m, n) = (2, 2);
            let x = randn(r, 1 + m + n, 5, 1.0);
            let labels: Vec<usize> = (0..1 + m + n).map(|_| r.random_range(0..3)).collect();
            let metric = MahalanobisMetric::identity(3);
            let weights = JointWeights::new(1.0, 0.5)?;
            let t = r.random_range(0.2..1.5);
            Ok((
                params,
                builder(move |g, p| {
                    let xin = g.input(x.clone())?;
                    let out = net.forward(g, p, xin, Mode::Train).map_err(tensor_err)?;
                    let ce = g.softmax_cross_entropy(out.logits, &labels)?;
                    let pos = g.slice(out.embedding, Axis::Rows, 1, 1 + m)?;
                    let neg = g.slice(out.embedding, Axis::Rows, 1 + m, 1 + m + n)?;
                    let tn = g.constant_scalar(t)?;
                    let metric_loss = tuple_clusters_graph(g, pos, neg, &[true, false], tn, 0.5, &metric, CenterMode::Mined)
                        .map_err(tensor_err)?;
                    joint_objective_graph(g, ce, metric_loss, &weights).map_err(tensor_err)
                }),
            ))
        }),
    ]
}

fn tuple_clusters_case(r: &mut ChaCha8Rng, center: CenterMode) -> Result<(ParamStore, Builder)> {
    let metric = random_metric(r, EMBED);
    let tau = r.random_range(0.5..2.0);
    let t = uniform(r, 1, 1, 1.0, 6.0);
    let kept = [true, false, true];
    Ok((
        store(vec![("pos", randn(r, 3, EMBED, 1.0)), ("neg", randn(r, 3, EMBED, 1.5)), ("t", t)]),
        builder(move |g, p| {
            let pos = g.param(p, "pos")?;
            let neg = g.param(p, "neg")?;
            let t = g.param(p, "t")?;
            tuple_clusters_graph(g, pos, neg, &kept, t, tau, &metric, center).map_err(tensor_err)
        }),
    ))
}

fn flf_case(r: &mut ChaCha8Rng, component: Component) -> Result<(ParamStore, Builder)> {
    let dims = FlfDims {
        input_dim: 5,
        num_attrs: 2,
        num_classes: 3,
        dim_d: 3,
        dim_l: 3,
        hidden: 6,
    };
    let model = FlfModel::new(dims, r)?;
    let rows = 4;
    let s: Vec<f64> = (0..rows * 2).map(|_| f64::from(r.random_range(0..2u8))).collect();
    let batch = FlfBatch {
        x: randn(r, rows, 5, 1.0),
        s: Tensor::matrix(rows, 2, s)?,
        y: (0..rows).map(|_| r.random_range(0..3)).collect(),
    };
    let alpha = r.random_range(0.1..0.5);
    let schedule = TrainSchedule::default();
    let own = model.params.filter_prefix(component.prefix());
    Ok((
        own,
        builder(move |g, p| {
            let mut full = model.params.clone();
            for (k, v) in p.iter() {
                full.insert(k.clone(), v.clone());
            }
            model
                .record_objective(g, &full, component, &batch, alpha, &schedule)
                .map_err(tensor_err)
        }),
    ))
}

fn flf_cases() -> Vec<(&'static str, Draw)> {
    vec![
        ("flf.dis", |r| flf_case(r, Component::Dis)),
        ("flf.c_l", |r| flf_case(r, Component::CL)),
        ("flf.c_d", |r| flf_case(r, Component::CD)),
        ("flf.e_d", |r| flf_case(r, Component::ED)),
        ("flf.e_l", |r| flf_case(r, Component::EL)),
        ("flf.dec", |r| flf_case(r, Component::Dec)),
    ]
}

fn all_cases() -> Vec<(&'static str, Draw)> {
    let mut v = op_cases();
    v.extend(loss_cases());
    v.extend(flf_cases());
    v
}

pub fn case_names() -> Vec<&'static str> {
    all_cases().into_iter().map(|(n, _)| n).collect()
}

fn run_case(name: &str, draw: Draw, rng: &mut ChaCha8Rng) -> Result<CaseResult> {
    let mut result = CaseResult {
        name: name.to_string(),
        points: 0,
        coordinates: 0,
        max_rel_error: 0.0,
        passed: true,
    };
    let mut attempts = 0;
    while result.points < POINTS_PER_CASE {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(CoreError::InvalidArgument(format!(
                "{name}: no point off the kinks after {MAX_ATTEMPTS} draws"
            )));
        }
        let (params, build) = draw(rng)?;
        let mut g = Graph::new();
        build(&mut g, &params)?;
        if g.kink_margin() < MIN_KINK_MARGIN {
            continue;
        }
        let report = finite_difference_check(|g, p| build(g, p), &params, FD_STEP)?;
        result.points += 1;
        result.coordinates += report.coordinates;
        result.max_rel_error = result.max_rel_error.max(report.max_rel_error);
    }
    result.passed = result.max_rel_error <= MAX_REL_ERROR;
    Ok(result)
}

/// Runs every case at `POINTS_PER_CASE` random points.
pub fn run_gradient_suite(seed: u64) -> Result<GradSuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = all_cases()
        .into_iter()
        .map(|(name, draw)| run_case(name, draw, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradSuiteReport {
        tolerance: MAX_REL_ERROR,
        cases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covers_losses_networks_and_flf_objectives() {
        let names = case_names();
        for expected in [
            "loss.triplet",
            "loss.n_plus_one_tuplet",
            "loss.coupled_clusters",
            "loss.tuple_clusters",
            "loss.adaptive_tuple_clusters",
            "net.two_branch_joint",
            "flf.e_d",
            "flf.dec",
            "op.matmul",
        ] {
            assert!(names.contains(&expected), "{expected} missing");
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // Σa routed through a constant copy of `a`: the analytic gradient is
        // zero while the numeric one is one.
        let draw: Draw = |r| {
            let a = randn(r, 2, 2, 1.0);
            Ok((
                store(vec![("a", a)]),
                builder(|g, p| {
                    let a = g.param(p, "a")?;
                    let frozen = g.input(g.value(a).clone())?;
                    let zero = g.scale(a, 0.0)?;
                    let s = g.add(zero, frozen)?;
                    g.sum(s, None)
                }),
            ))
        };
        let r = run_case("broken", draw, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_error > 0.5);
    }

    #[test]
    fn single_case_passes() {
        let (_, draw) = loss_cases().into_iter().find(|(n, _)| *n == "loss.tuple_clusters").unwrap();
        let r = run_case("loss.tuple_clusters", draw, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.points, POINTS_PER_CASE);
    }
}
