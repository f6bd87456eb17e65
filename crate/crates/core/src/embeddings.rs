//! Encoders, the Mahalanobis distance, and the two-branch network whose
//! classification and metric branches meet in a linear connecting layer.

use disent_tensor::{Axis, Graph, NodeId, ParamStore, Tensor};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::{Mlp, Mode, DEFAULT_SLOPE};

/// Symmetric PSD matrix defining `D(f1, f2) = (f1 − f2)ᵀ M (f1 − f2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MahalanobisMetric {
    m: Tensor,
    is_identity: bool,
}

impl MahalanobisMetric {
    pub fn identity(dim: usize) -> Self {
        Self {
            m: Tensor::identity(dim),
            is_identity: true,
        }
    }

    pub fn new(m: Tensor) -> Result<Self> {
        let n = m.rows();
        if m.shape().len() != 2 || m.cols() != n {
            return Err(CoreError::InvalidArgument(format!(
                "metric must be square, got {:?}",
                m.shape()
            )));
        }
        for i in 0..n {
            for j in 0..i {
                if (m.get(i, j) - m.get(j, i)).abs() > 1e-12 {
                    return Err(CoreError::InvalidArgument(format!(
                        "metric not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        let min_eig = DMatrix::from_row_slice(n, n, m.data())
            .symmetric_eigenvalues()
            .min();
        if min_eig < -1e-10 {
            return Err(CoreError::InvalidArgument(format!(
                "metric not positive semi-definite (min eigenvalue {min_eig:e})"
            )));
        }
        let is_identity = m == Tensor::identity(n);
        Ok(Self { m, is_identity })
    }

    pub fn dim(&self) -> usize {
        self.m.rows()
    }

    pub fn matrix(&self) -> &Tensor {
        &self.m
    }

    /// Squared distances `[n, 1]` from each row of `rows` to the single row
    /// `center`.
    pub fn distances_to(&self, g: &mut Graph, rows: NodeId, center: NodeId) -> Result<NodeId> {
        let neg = g.scale(center, -1.0)?;
        let diff = g.broadcast_add(rows, neg)?;
        let weighted = if self.is_identity {
            g.square(diff)?
        } else {
            let m = g.input(self.m.clone())?;
            let dm = g.matmul(diff, m)?;
            g.mul(dm, diff)?
        };
        Ok(g.sum(weighted, Some(Axis::Cols))?)
    }
}

pub fn mahalanobis_distance(f1: &[f64], f2: &[f64], metric: &MahalanobisMetric) -> Result<f64> {
    let d = metric.dim();
    if f1.len() != d || f2.len() != d {
        return Err(CoreError::InvalidArgument(format!(
            "embedding sizes {} and {} do not match metric dimension {d}",
            f1.len(),
            f2.len()
        )));
    }
    let diff: Vec<f64> = f1.iter().zip(f2).map(|(a, b)| a - b).collect();
    let m = metric.matrix();
    let mut total = 0.0;
    for i in 0..d {
        let row: f64 = (0..d).map(|j| m.get(i, j) * diff[j]).sum();
        total += diff[i] * row;
    }
    Ok(total)
}

/// Runs an encoder MLP on one input vector.
pub fn encoder_forward(encoder: &Mlp, params: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != encoder.input_dim() {
        return Err(CoreError::InvalidArgument(format!(
            "encoder expects {} inputs, got {}",
            encoder.input_dim(),
            x.len()
        )));
    }
    Ok(encoder.apply(params, &[x.to_vec()])?.remove(0))
}

/// `FC4 = FC2·P1 + FC3·P2` on row batches, i.e. `P1ᵀfc2 + P2ᵀfc3` per sample.
pub fn connecting_layer_graph(
    g: &mut Graph,
    fc2: NodeId,
    fc3: NodeId,
    p1: NodeId,
    p2: NodeId,
) -> Result<NodeId> {
    if g.shape(fc2) != g.shape(fc3) {
        return Err(CoreError::InvalidArgument(format!(
            "FC2 {:?} and FC3 {:?} must have equal shapes",
            g.shape(fc2),
            g.shape(fc3)
        )));
    }
    if g.shape(p1) != g.shape(p2) {
        return Err(CoreError::InvalidArgument(format!(
            "P1 {:?} and P2 {:?} must have equal shapes",
            g.shape(p1),
            g.shape(p2)
        )));
    }
    let a = g.matmul(fc2, p1)?;
    let b = g.matmul(fc3, p2)?;
    Ok(g.add(a, b)?)
}

pub fn connecting_layer(fc2: &[f64], fc3: &[f64], p1: &Tensor, p2: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let a = g.input(Tensor::row(fc2)?)?;
    let b = g.input(Tensor::row(fc3)?)?;
    let p1 = g.input(p1.clone())?;
    let p2 = g.input(p2.clone())?;
    let out = connecting_layer_graph(&mut g, a, b, p1, p2)?;
    Ok(g.value(out).data().to_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwoBranchConfig {
    pub input_dim: usize,
    pub trunk_hidden: usize,
    pub trunk_out: usize,
    /// Width of FC2 and FC3.
    pub d_input: usize,
    /// Width of FC4.
    pub d_output: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl Default for TwoBranchConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            trunk_hidden: 16,
            trunk_out: 16,
            d_input: 16,
            d_output: 16,
            embed_dim: 8,
            num_classes: 4,
        }
    }
}

/// Shared 2-layer trunk; classification branch FC2 → logits; metric branch
/// FC3, connecting layer FC4 = P1ᵀFC2 + P2ᵀFC3, then FC5 → embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoBranchNet {
    pub config: TwoBranchConfig,
    pub trunk: Mlp,
    pub fc2: Mlp,
    pub head: Mlp,
    pub fc3: Mlp,
    pub fc5: Mlp,
}

pub const P1: &str = "conn.p1";
pub const P2: &str = "conn.p2";

pub struct TwoBranchOutput {
    pub logits: NodeId,
    pub embedding: NodeId,
}

impl TwoBranchNet {
    pub fn new(config: TwoBranchConfig) -> Self {
        let c = &config;
        Self {
            trunk: Mlp::new("trunk", &[c.input_dim, c.trunk_hidden, c.trunk_out]),
            fc2: Mlp::new("fc2", &[c.trunk_out, c.d_input]),
            head: Mlp::new("head", &[c.d_input, c.num_classes]),
            fc3: Mlp::new("fc3", &[c.trunk_out, c.d_input]),
            fc5: Mlp::new("fc5", &[c.d_output, c.embed_dim]),
            config,
        }
    }

    pub fn init<R: Rng>(&self, rng: &mut R) -> ParamStore {
        let mut p = ParamStore::new();
        for m in [&self.trunk, &self.fc2, &self.head, &self.fc3, &self.fc5] {
            m.init(&mut p, rng);
        }
        let (din, dout) = (self.config.d_input, self.config.d_output);
        let std = (1.0 / din as f64).sqrt();
        for name in [P1, P2] {
            let data = (0..din * dout)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            p.insert(name, Tensor::matrix(din, dout, data).unwrap());
        }
        p
    }

    /// Names of parameters that only the metric branch uses.
    pub fn metric_only_prefixes() -> [&'static str; 4] {
        ["fc3.", P1, P2, "fc5."]
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamStore, x: NodeId, mode: Mode) -> Result<TwoBranchOutput> {
        let h = self.trunk.forward(g, params, x, mode)?;
        let h = g.leaky_relu(h, DEFAULT_SLOPE)?;
        let fc2 = self.fc2.forward(g, params, h, mode)?;
        let fc2 = g.leaky_relu(fc2, DEFAULT_SLOPE)?;
        let logits = self.head.forward(g, params, fc2, mode)?;
        let fc3 = self.fc3.forward(g, params, h, mode)?;
        let fc3 = g.leaky_relu(fc3, DEFAULT_SLOPE)?;
        let (p1, p2) = match mode {
            Mode::Train => (g.param(params, P1)?, g.param(params, P2)?),
            Mode::Frozen => (g.frozen(params, P1)?, g.frozen(params, P2)?),
        };
        let fc4 = connecting_layer_graph(g, fc2, fc3, p1, p2)?;
        let fc4 = g.leaky_relu(fc4, DEFAULT_SLOPE)?;
        let embedding = self.fc5.forward(g, params, fc4, mode)?;
        Ok(TwoBranchOutput { logits, embedding })
    }

    /// Embeddings of plain input rows.
    pub fn embed(&self, params: &ParamStore, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_rows(rows)?)?;
        let out = self.forward(&mut g, params, x, Mode::Frozen)?;
        Ok(crate::nn::rows_of(g.value(out.embedding)))
    }
}

/// Class logits and metric embedding for one input vector.
pub fn two_branch_forward(
    net: &TwoBranchNet,
    params: &ParamStore,
    x: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let xin = g.input(Tensor::row(x)?)?;
    let out = net.forward(&mut g, params, xin, Mode::Frozen)?;
    Ok((
        g.value(out.logits).data().to_vec(),
        g.value(out.embedding).data().to_vec(),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointWeights {
    pub w_softmax: f64,
    pub w_metric: f64,
}

impl Default for JointWeights {
    fn default() -> Self {
        Self {
            w_softmax: 1.0,
            w_metric: 1.0,
        }
    }
}

impl JointWeights {
    pub fn new(w_softmax: f64, w_metric: f64) -> Result<Self> {
        let w = Self { w_softmax, w_metric };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.w_softmax) || !ok(self.w_metric) || self.w_softmax + self.w_metric == 0.0 {
            return Err(CoreError::InvalidArgument(format!(
                "joint weights must be finite, non-negative and not both zero: {self:?}"
            )));
        }
        Ok(())
    }
}

pub fn joint_objective(softmax_loss: f64, metric_loss: f64, w: &JointWeights) -> f64 {
    w.w_softmax * softmax_loss + w.w_metric * metric_loss
}

pub fn joint_objective_graph(
    g: &mut Graph,
    softmax_loss: NodeId,
    metric_loss: NodeId,
    w: &JointWeights,
) -> Result<NodeId> {
    let a = g.scale(softmax_loss, w.w_softmax)?;
    let b = g.scale(metric_loss, w.w_metric)?;
    Ok(g.add(a, b)?)
}
