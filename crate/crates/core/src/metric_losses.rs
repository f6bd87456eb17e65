//! Metric-learning losses: triplet, (N+1)-tuplet, coupled clusters, the
//! (N+M)-tuple clusters loss with a fixed reference distance, and its
//! adaptive form where the threshold is a learned symmetric quadratic.
//!
//! Every loss exists as a graph builder (for training and gradient checks)
//! and as a plain function on embedding vectors. All distances live on the
//! squared scale `D(f1, f2) = (f1 − f2)ᵀM(f1 − f2)`, so `T` and `τ` are in
//! squared units too.

use disent_tensor::{log_sum_exp, Axis, Graph, NodeId, ParamStore, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embeddings::MahalanobisMetric;
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Triplet,
    NPlusOne,
    Ccl,
    TupleClusters,
    AdaptiveTupleClusters,
}

/// Which positives define `c⁺` inside the tuple-clusters losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterMode {
    /// Center over the positives kept by online mining.
    #[default]
    Mined,
    /// Center over every sampled positive.
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TupleBatch {
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
    pub query: Option<Vec<f64>>,
    pub metric: MahalanobisMetric,
}

impl TupleBatch {
    pub fn new(
        positives: Vec<Vec<f64>>,
        negatives: Vec<Vec<f64>>,
        query: Option<Vec<f64>>,
        metric: MahalanobisMetric,
    ) -> Result<Self> {
        if positives.is_empty() || negatives.is_empty() {
            return Err(CoreError::InvalidArgument(
                "a tuple needs at least one positive and one negative".into(),
            ));
        }
        let d = metric.dim();
        let all_match = positives
            .iter()
            .chain(&negatives)
            .chain(query.iter())
            .all(|f| f.len() == d);
        if !all_match {
            return Err(CoreError::InvalidArgument(format!(
                "all embeddings must have dimension {d}"
            )));
        }
        Ok(Self {
            positives,
            negatives,
            query,
            metric,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedThreshold {
    /// Reference distance T.
    pub t: f64,
    /// Margin τ.
    pub tau: f64,
}

impl FixedThreshold {
    pub fn new(t: f64, tau: f64) -> Result<Self> {
        let th = Self { t, tau };
        th.validate()?;
        Ok(th)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t > 0.0 && self.tau > 0.0 && self.t > self.tau / 2.0)
            || !self.t.is_finite()
            || !self.tau.is_finite()
        {
            return Err(CoreError::InvalidArgument(format!(
                "threshold needs T > 0, tau > 0 and T > tau/2, got T={} tau={}",
                self.t, self.tau
            )));
        }
        Ok(())
    }
}

/// Parameters of `H(f1, f2) = ½‖L_A f1‖² + ½‖L_A f2‖² − (L_B f1)·(L_B f2)
/// + cᵀ(f1 + f2) + b`. `A = L_AᵀL_A` is PSD and `B = −L_BᵀL_B` is NSD by
/// construction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveParams {
    /// `[r_A, d]`
    pub l_a: Tensor,
    /// `[r_B, d]`
    pub l_b: Tensor,
    pub c: Vec<f64>,
    pub b: f64,
}

pub const ADAPTIVE_PREFIX: &str = "adaptive.";
const L_A_T: &str = "adaptive.l_a_t";
const L_B_T: &str = "adaptive.l_b_t";
const C_VEC: &str = "adaptive.c";
const BIAS: &str = "adaptive.b";

/// Graph handles for [`AdaptiveParams`].
#[derive(Clone, Copy, Debug)]
pub struct AdaptiveNodes {
    /// `L_Aᵀ`, `[d, r_A]`
    pub l_a_t: NodeId,
    /// `L_Bᵀ`, `[d, r_B]`
    pub l_b_t: NodeId,
    /// `[d, 1]`
    pub c: NodeId,
    /// `[1, 1]`
    pub b: NodeId,
}

impl AdaptiveParams {
    pub fn new(l_a: Tensor, l_b: Tensor, c: Vec<f64>, b: f64) -> Result<Self> {
        let d = c.len();
        if l_a.cols() != d || l_b.cols() != d || l_a.shape().len() != 2 || l_b.shape().len() != 2 {
            return Err(CoreError::InvalidArgument(format!(
                "L_A {:?} and L_B {:?} must have {d} columns",
                l_a.shape(),
                l_b.shape()
            )));
        }
        Ok(Self { l_a, l_b, c, b })
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    /// Random factors; `b` starts at `b0`.
    pub fn init<R: Rng>(dim: usize, rank_a: usize, rank_b: usize, b0: f64, scale: f64, rng: &mut R) -> Self {
        let mut mat = |r: usize| {
            let data = (0..r * dim)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Tensor::matrix(r, dim, data).unwrap()
        };
        let l_a = mat(rank_a);
        let l_b = mat(rank_b);
        Self {
            l_a,
            l_b,
            c: vec![0.0; dim],
            b: b0,
        }
    }

    /// Stores the parameters (factors transposed) under `adaptive.*`.
    pub fn write_to(&self, store: &mut ParamStore) {
        store.insert(L_A_T, self.l_a.transpose());
        store.insert(L_B_T, self.l_b.transpose());
        store.insert(C_VEC, Tensor::column(&self.c).unwrap());
        store.insert(BIAS, Tensor::scalar(self.b).unwrap());
    }

    pub fn read_from(store: &ParamStore) -> Result<Self> {
        Self::new(
            store.get(L_A_T)?.transpose(),
            store.get(L_B_T)?.transpose(),
            store.get(C_VEC)?.data().to_vec(),
            store.get(BIAS)?.item()?,
        )
    }

    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        self.write_to(&mut s);
        s
    }

    pub fn nodes(g: &mut Graph, store: &ParamStore, trainable: bool) -> Result<AdaptiveNodes> {
        let mut get = |name: &str| -> Result<NodeId> {
            Ok(if trainable {
                g.param(store, name)?
            } else {
                g.frozen(store, name)?
            })
        };
        Ok(AdaptiveNodes {
            l_a_t: get(L_A_T)?,
            l_b_t: get(L_B_T)?,
            c: get(C_VEC)?,
            b: get(BIAS)?,
        })
    }
}

fn rows(g: &mut Graph, vs: &[Vec<f64>]) -> Result<NodeId> {
    Ok(g.input(Tensor::from_rows(vs)?)?)
}

fn check_dims(vs: &[&[Vec<f64>]], d: usize) -> Result<()> {
    if vs.iter().flat_map(|s| s.iter()).any(|f| f.len() != d) {
        return Err(CoreError::InvalidArgument(format!(
            "embedding dimension must be {d}"
        )));
    }
    Ok(())
}

/// `c⁺` as a `[1, d]` node: the plain mean of `pos`, or the mean over the
/// rows flagged in `kept`.
pub fn center_graph(g: &mut Graph, pos: NodeId, kept: Option<&[bool]>) -> Result<NodeId> {
    match kept {
        None => Ok(g.mean(pos, Some(Axis::Rows))?),
        Some(kept) => {
            let weights = mask_weights(kept, g.shape(pos)[0])?;
            let w = g.input(Tensor::column(&weights)?)?;
            let weighted = g.mul(pos, w)?;
            Ok(g.sum(weighted, Some(Axis::Rows))?)
        }
    }
}

/// `1/M*` for kept rows, 0 otherwise.
fn mask_weights(kept: &[bool], m: usize) -> Result<Vec<f64>> {
    let m_star = kept.iter().filter(|&&k| k).count();
    if kept.len() != m || m_star == 0 {
        return Err(CoreError::InvalidArgument(format!(
            "mask of length {} with {m_star} kept entries for {m} positives",
            kept.len()
        )));
    }
    Ok(kept
        .iter()
        .map(|&k| if k { 1.0 / m_star as f64 } else { 0.0 })
        .collect())
}

pub fn positive_center(positives: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = positives.first() else {
        return Err(CoreError::InvalidArgument("empty positive set".into()));
    };
    check_dims(&[positives], first.len())?;
    let m = positives.len() as f64;
    Ok((0..first.len())
        .map(|j| positives.iter().map(|p| p[j]).sum::<f64>() / m)
        .collect())
}

/// `max(0, D(a,p) + τ − D(a,n))` for single-row nodes.
pub fn triplet_graph(
    g: &mut Graph,
    anchor: NodeId,
    positive: NodeId,
    negative: NodeId,
    tau: f64,
    metric: &MahalanobisMetric,
) -> Result<NodeId> {
    let dp = metric.distances_to(g, positive, anchor)?;
    let dn = metric.distances_to(g, negative, anchor)?;
    let diff = g.sub(dp, dn)?;
    let z = g.add_scalar(diff, tau)?;
    Ok(g.relu(z)?)
}

pub fn triplet_loss(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    tau: f64,
    metric: &MahalanobisMetric,
) -> Result<f64> {
    check_dims(&[&[anchor.to_vec(), positive.to_vec(), negative.to_vec()]], metric.dim())?;
    let mut g = Graph::new();
    let a = g.input(Tensor::row(anchor)?)?;
    let p = g.input(Tensor::row(positive)?)?;
    let n = g.input(Tensor::row(negative)?)?;
    let out = triplet_graph(&mut g, a, p, n, tau, metric)?;
    Ok(g.scalar(out)?)
}

/// `log(1 + Σ_j exp(D(f,f⁺) + τ − D(f,f_j⁻)))`, evaluated as a shifted
/// log-sum-exp so large exponents cannot overflow.
pub fn n_plus_one_graph(
    g: &mut Graph,
    query: NodeId,
    positive: NodeId,
    negatives: NodeId,
    tau: f64,
    metric: &MahalanobisMetric,
) -> Result<NodeId> {
    let dp = metric.distances_to(g, positive, query)?;
    let dn = metric.distances_to(g, negatives, query)?;
    let neg_dn = g.scale(dn, -1.0)?;
    let z = g.broadcast_add(neg_dn, dp)?;
    let z = g.add_scalar(z, tau)?;
    // shift = max(0, max_j z_j); treated as a constant, which leaves the
    // value and gradient of the log-sum-exp unchanged.
    let shift = g.value(z).data().iter().cloned().fold(0.0, f64::max);
    let shifted = g.add_scalar(z, -shift)?;
    let e = g.exp(shifted)?;
    let s = g.sum(e, None)?;
    let s = g.add_scalar(s, (-shift).exp())?;
    let l = g.log(s)?;
    Ok(g.add_scalar(l, shift)?)
}

pub fn n_plus_one_tuplet_loss(
    query: &[f64],
    positive: &[f64],
    negatives: &[Vec<f64>],
    tau: f64,
    metric: &MahalanobisMetric,
) -> Result<f64> {
    if negatives.is_empty() {
        return Err(CoreError::InvalidArgument("need at least one negative".into()));
    }
    check_dims(&[&[query.to_vec(), positive.to_vec()], negatives], metric.dim())?;
    let mut g = Graph::new();
    let q = g.input(Tensor::row(query)?)?;
    let p = g.input(Tensor::row(positive)?)?;
    let n = rows(&mut g, negatives)?;
    let out = n_plus_one_graph(&mut g, q, p, n, tau, metric)?;
    Ok(g.scalar(out)?)
}

/// Mean over positives of `max(0, D(f_i⁺,c⁺) + τ − min_j D(f_j⁻,c⁺))`.
pub fn ccl_graph(
    g: &mut Graph,
    pos: NodeId,
    neg: NodeId,
    tau: f64,
    metric: &MahalanobisMetric,
) -> Result<NodeId> {
    let c = center_graph(g, pos, None)?;
    let dp = metric.distances_to(g, pos, c)?;
    let dn = metric.distances_to(g, neg, c)?;
    let nearest = argmin(g.value(dn).data());
    let dmin = g.slice(dn, Axis::Rows, nearest, nearest + 1)?;
    let neg_min = g.scale(dmin, -1.0)?;
    let z = g.broadcast_add(dp, neg_min)?;
    let z = g.add_scalar(z, tau)?;
    let h = g.relu(z)?;
    Ok(g.mean(h, None)?)
}

pub fn coupled_clusters_loss(
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
    tau: f64,
    metric: &MahalanobisMetric,
) -> Result<f64> {
    let batch = TupleBatch::new(positives.to_vec(), negatives.to_vec(), None, metric.clone())?;
    let mut g = Graph::new();
    let p = rows(&mut g, &batch.positives)?;
    let n = rows(&mut g, &batch.negatives)?;
    let out = ccl_graph(&mut g, p, n, tau, metric)?;
    Ok(g.scalar(out)?)
}

fn argmin(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, &x)| if x < bv { (i, x) } else { (bi, bv) })
        .0
}

/// `(1/M*) Σ_kept max(0, D(f_i⁺,c⁺) − T + τ/2) + (1/N) Σ_j max(0, T + τ/2 − D(f_j⁻,c⁺))`.
///
/// Distances are computed for every positive row, including those the
/// mask drops, so a tuple always costs `N + M` distance evaluations here.
/// `t` is a `[1,1]` node so the reference distance may be trainable.
#[allow(clippy::too_many_arguments)]
pub fn tuple_clusters_graph(
    g: &mut Graph,
    pos: NodeId,
    neg: NodeId,
    kept: &[bool],
    t: NodeId,
    tau: f64,
    metric: &MahalanobisMetric,
    center: CenterMode,
) -> Result<NodeId> {
    let m = g.shape(pos)[0];
    let c = match center {
        CenterMode::Mined => center_graph(g, pos, Some(kept))?,
        CenterMode::All => center_graph(g, pos, None)?,
    };
    let dp = metric.distances_to(g, pos, c)?;
    let dn = metric.distances_to(g, neg, c)?;
    let neg_t = g.scale(t, -1.0)?;
    let zp = g.broadcast_add(dp, neg_t)?;
    let zp = g.add_scalar(zp, tau / 2.0)?;
    let hp = g.relu(zp)?;
    let w = g.input(Tensor::column(&mask_weights(kept, m)?)?)?;
    let hp = g.mul(hp, w)?;
    let lp = g.sum(hp, None)?;
    let neg_dn = g.scale(dn, -1.0)?;
    let zn = g.broadcast_add(neg_dn, t)?;
    let zn = g.add_scalar(zn, tau / 2.0)?;
    let hn = g.relu(zn)?;
    let ln = g.mean(hn, None)?;
    Ok(g.add(lp, ln)?)
}

/// Fixed-threshold tuple clusters loss over already-mined positives; `c⁺`
/// is their mean.
pub fn tuple_clusters_loss(
    positives_mined: &[Vec<f64>],
    negatives: &[Vec<f64>],
    threshold: &FixedThreshold,
    metric: &MahalanobisMetric,
) -> Result<f64> {
    threshold.validate()?;
    let batch = TupleBatch::new(positives_mined.to_vec(), negatives.to_vec(), None, metric.clone())?;
    let mut g = Graph::new();
    let p = rows(&mut g, &batch.positives)?;
    let n = rows(&mut g, &batch.negatives)?;
    let t = g.constant_scalar(threshold.t)?;
    let kept = vec![true; batch.positives.len()];
    let out = tuple_clusters_graph(&mut g, p, n, &kept, t, threshold.tau, metric, CenterMode::Mined)?;
    Ok(g.scalar(out)?)
}

fn check_symmetric(m: &Tensor, d: usize, name: &str) -> Result<()> {
    if m.shape() != [d, d] {
        return Err(CoreError::InvalidArgument(format!(
            "{name} must be {d}x{d}, got {:?}",
            m.shape()
        )));
    }
    for i in 0..d {
        for j in 0..i {
            if (m.get(i, j) - m.get(j, i)).abs() > 1e-12 {
                return Err(CoreError::InvalidArgument(format!(
                    "{name} is not symmetric at ({i},{j})"
                )));
            }
        }
    }
    Ok(())
}

fn quad(m: &Tensor, u: &[f64], v: &[f64]) -> f64 {
    let d = u.len();
    (0..d)
        .map(|i| u[i] * (0..d).map(|j| m.get(i, j) * v[j]).sum::<f64>())
        .sum()
}

/// `T(f1,f2) = ½f1ᵀÃf1 + ½f2ᵀÃf2 + f1ᵀB̃f2 + cᵀ(f1+f2) + b` with symmetric Ã, B̃.
pub fn reference_distance(
    f1: &[f64],
    f2: &[f64],
    a_tilde: &Tensor,
    b_tilde: &Tensor,
    c: &[f64],
    b: f64,
) -> Result<f64> {
    let d = f1.len();
    if f2.len() != d || c.len() != d {
        return Err(CoreError::InvalidArgument("vector sizes differ".into()));
    }
    check_symmetric(a_tilde, d, "A~")?;
    check_symmetric(b_tilde, d, "B~")?;
    let lin: f64 = c.iter().zip(f1.iter().zip(f2)).map(|(ci, (x, y))| ci * (x + y)).sum();
    Ok(0.5 * quad(a_tilde, f1, f1) + 0.5 * quad(a_tilde, f2, f2) + quad(b_tilde, f1, f2) + lin + b)
}

/// `H(row, center)` for every row: `[n, 1]`.
pub fn h_graph(g: &mut Graph, rows: NodeId, center: NodeId, p: &AdaptiveNodes) -> Result<NodeId> {
    let la_f = g.matmul(rows, p.l_a_t)?;
    let la_f2 = g.square(la_f)?;
    let qa_f = g.sum(la_f2, Some(Axis::Cols))?;
    let la_c = g.matmul(center, p.l_a_t)?;
    let la_c2 = g.square(la_c)?;
    let qa_c = g.sum(la_c2, None)?;
    let lb_f = g.matmul(rows, p.l_b_t)?;
    let lb_c = g.matmul(center, p.l_b_t)?;
    let cross = g.mul(lb_f, lb_c)?;
    let cross = g.sum(cross, Some(Axis::Cols))?;
    let lin_f = g.matmul(rows, p.c)?;
    let lin_c = g.matmul(center, p.c)?;

    let half_qa_f = g.scale(qa_f, 0.5)?;
    let neg_cross = g.scale(cross, -1.0)?;
    let mut h = g.add(half_qa_f, neg_cross)?;
    h = g.add(h, lin_f)?;
    let half_qa_c = g.scale(qa_c, 0.5)?;
    let consts = g.add(half_qa_c, lin_c)?;
    let consts = g.add(consts, p.b)?;
    Ok(g.broadcast_add(h, consts)?)
}

pub fn combined_quadratic_h(f1: &[f64], f2: &[f64], params: &AdaptiveParams) -> Result<f64> {
    let d = params.dim();
    if f1.len() != d || f2.len() != d {
        return Err(CoreError::InvalidArgument(format!(
            "vectors must have dimension {d}"
        )));
    }
    let store = params.to_store();
    let mut g = Graph::new();
    let nodes = AdaptiveParams::nodes(&mut g, &store, false)?;
    let a = g.input(Tensor::row(f1)?)?;
    let c = g.input(Tensor::row(f2)?)?;
    let h = h_graph(&mut g, a, c, &nodes)?;
    Ok(g.scalar(h)?)
}

/// `(1/(N+M*)) Σ_k max(0, l_k·H(f_k, c⁺) + 1)` with `l = −1` for kept
/// positives and `+1` for negatives.
pub fn adaptive_graph(
    g: &mut Graph,
    pos: NodeId,
    neg: NodeId,
    kept: &[bool],
    p: &AdaptiveNodes,
    center: CenterMode,
) -> Result<NodeId> {
    let m = g.shape(pos)[0];
    let n = g.shape(neg)[0];
    let m_star = mask_weights(kept, m)?.iter().filter(|&&w| w > 0.0).count();
    let c = match center {
        CenterMode::Mined => center_graph(g, pos, Some(kept))?,
        CenterMode::All => center_graph(g, pos, None)?,
    };
    let hp = h_graph(g, pos, c, p)?;
    let hn = h_graph(g, neg, c, p)?;
    let denom = (n + m_star) as f64;
    // label −1 on positives, folded with the mask and the 1/(N+M*) weight
    let hp = g.scale(hp, -1.0)?;
    let hp = g.add_scalar(hp, 1.0)?;
    let hp = g.relu(hp)?;
    let wp: Vec<f64> = kept.iter().map(|&k| if k { 1.0 / denom } else { 0.0 }).collect();
    let wp = g.input(Tensor::column(&wp)?)?;
    let hp = g.mul(hp, wp)?;
    let lp = g.sum(hp, None)?;
    let hn = g.add_scalar(hn, 1.0)?;
    let hn = g.relu(hn)?;
    let ln = g.sum(hn, None)?;
    let ln = g.scale(ln, 1.0 / denom)?;
    Ok(g.add(lp, ln)?)
}

/// Adaptive loss where `batch.positives` are the mined positives.
pub fn adaptive_tuple_clusters_loss(batch: &TupleBatch, params: &AdaptiveParams) -> Result<f64> {
    if params.dim() != batch.metric.dim() {
        return Err(CoreError::InvalidArgument("parameter/embedding dimension mismatch".into()));
    }
    let store = params.to_store();
    let mut g = Graph::new();
    let nodes = AdaptiveParams::nodes(&mut g, &store, false)?;
    let p = rows(&mut g, &batch.positives)?;
    let n = rows(&mut g, &batch.negatives)?;
    let kept = vec![true; batch.positives.len()];
    let out = adaptive_graph(&mut g, p, n, &kept, &nodes, CenterMode::Mined)?;
    Ok(g.scalar(out)?)
}

/// `log(1 + Σ exp(z))` on plain numbers; shared with tests of the graph form.
pub fn softplus_sum(z: &[f64]) -> f64 {
    let mut with_zero = z.to_vec();
    with_zero.push(0.0);
    log_sum_exp(&with_zero)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalars(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    fn i1() -> MahalanobisMetric {
        MahalanobisMetric::identity(1)
    }

    #[test]
    fn center_examples() {
        assert_eq!(positive_center(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(positive_center(&[vec![3.0, -1.0]]).unwrap(), vec![3.0, -1.0]);
        assert_eq!(positive_center(&scalars(&[1.0, 3.0])).unwrap(), vec![2.0]);
        assert!(positive_center(&[]).is_err());
    }

    #[test]
    fn triplet_examples() {
        // D(a,p)=1, D(a,n)=3
        let m = i1();
        assert_eq!(triplet_loss(&[0.0], &[1.0], &[3f64.sqrt()], 1.0, &m).unwrap(), 0.0);
        // D(a,p)=2, D(a,n)=2
        let r2 = 2f64.sqrt();
        assert!((triplet_loss(&[0.0], &[r2], &[-r2], 1.0, &m).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(triplet_loss(&[0.4], &[0.4], &[7.0], 0.0, &m).unwrap(), 0.0);
    }

    #[test]
    fn n_plus_one_examples() {
        let m = i1();
        let v = n_plus_one_tuplet_loss(&[0.0], &[1.0], &scalars(&[3.0]), 0.0, &m).unwrap();
        assert!((v - (-8f64).exp().ln_1p()).abs() < 1e-15);
        assert!((v - 3.3541e-4).abs() < 1e-8);
        // D(f,f+) + τ = D(f,f-): 1 + 3 = 4
        let v = n_plus_one_tuplet_loss(&[0.0], &[1.0], &scalars(&[2.0]), 3.0, &m).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
        let v = n_plus_one_tuplet_loss(&[0.0], &[1.0], &scalars(&[2.0, -2.0]), 3.0, &m).unwrap();
        assert!((v - 3f64.ln()).abs() < 1e-12);
        assert!(n_plus_one_tuplet_loss(&[0.0], &[1.0], &[], 3.0, &m).is_err());
    }

    #[test]
    fn n_plus_one_survives_huge_exponents() {
        let m = i1();
        let v = n_plus_one_tuplet_loss(&[0.0], &[100.0], &scalars(&[0.5]), 0.0, &m).unwrap();
        assert!((v - (10000.0 - 0.25)).abs() < 1e-9);
    }

    #[test]
    fn ccl_examples() {
        let m = i1();
        let zero = coupled_clusters_loss(&scalars(&[1.0, 1.0]), &scalars(&[5.0]), 1.0, &m).unwrap();
        assert_eq!(zero, 0.0);
        let v = coupled_clusters_loss(&scalars(&[1.0, 3.0]), &scalars(&[2.5]), 0.5, &m).unwrap();
        assert!((v - 1.25).abs() < 1e-12);
        let w = coupled_clusters_loss(&scalars(&[3.0, 1.0]), &scalars(&[2.5]), 0.5, &m).unwrap();
        assert_eq!(v, w);
    }

    #[test]
    fn tuple_clusters_examples() {
        let m = i1();
        let th = FixedThreshold::new(1.0, 1.0).unwrap();
        let v = tuple_clusters_loss(&scalars(&[1.0, 3.0]), &scalars(&[2.5]), &th, &m).unwrap();
        assert!((v - 1.75).abs() < 1e-12);
        let th = FixedThreshold::new(2.0, 1.0).unwrap();
        // positives at D=0.25 from c+=0, negatives at D=9 ≥ 2.5
        let zero = tuple_clusters_loss(&scalars(&[-0.5, 0.5]), &scalars(&[3.0, -3.0]), &th, &m).unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn threshold_validation() {
        assert!(FixedThreshold::new(1.0, 0.0).is_err());
        assert!(FixedThreshold::new(0.4, 1.0).is_err());
        assert!(FixedThreshold::new(-1.0, 1.0).is_err());
        assert!(FixedThreshold::new(0.6, 1.0).is_ok());
    }

    #[test]
    fn reference_distance_examples() {
        let z = Tensor::zeros(&[2, 2]);
        assert_eq!(reference_distance(&[1.0, 2.0], &[3.0, -1.0], &z, &z, &[0.0, 0.0], 4.5).unwrap(), 4.5);
        let a = Tensor::scalar(2.0).unwrap();
        let b = Tensor::scalar(1.0).unwrap();
        assert_eq!(reference_distance(&[1.0], &[2.0], &a, &b, &[1.0], 0.0).unwrap(), 10.0);
        let asym = Tensor::matrix(2, 2, vec![1.0, 2.0, 0.0, 1.0]).unwrap();
        assert!(reference_distance(&[1.0, 2.0], &[3.0, -1.0], &asym, &z, &[0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn h_examples() {
        let i = Tensor::identity(1);
        let p = AdaptiveParams::new(i.clone(), i, vec![0.0], 0.0).unwrap();
        assert!((combined_quadratic_h(&[1.0], &[3.0], &p).unwrap() - 2.0).abs() < 1e-12);
        let p3 = AdaptiveParams::new(
            Tensor::matrix(2, 3, vec![1.0, 2.0, 0.0, -1.0, 0.5, 3.0]).unwrap(),
            Tensor::matrix(1, 3, vec![0.3, -0.7, 1.1]).unwrap(),
            vec![0.2, 0.0, -0.4],
            0.0,
        )
        .unwrap();
        // H(f, f) = ½|L_A f|²·2 − |L_B f|² + 2cᵀf + b; zero when L_A = L_B and c = 0
        let same = AdaptiveParams::new(p3.l_a.clone(), p3.l_a.clone(), vec![0.0; 3], 0.0).unwrap();
        assert!(combined_quadratic_h(&[0.4, -1.0, 2.0], &[0.4, -1.0, 2.0], &same).unwrap().abs() < 1e-12);
        let zero = AdaptiveParams::new(Tensor::zeros(&[1, 3]), Tensor::zeros(&[1, 3]), vec![0.0; 3], 7.0).unwrap();
        assert_eq!(combined_quadratic_h(&[1.0, 2.0, 3.0], &[-1.0, 0.0, 5.0], &zero).unwrap(), 7.0);
    }

    #[test]
    fn adaptive_example() {
        // 1-d, L_A = 0, L_B = 0, c = 1, b chosen so that H(pos, c+) = 2 and
        // H(neg, c+) = 0.5: H(f, c+) = f + c+ + b with c+ = pos.
        let p = AdaptiveParams::new(Tensor::zeros(&[1, 1]), Tensor::zeros(&[1, 1]), vec![1.0], 0.0).unwrap();
        let batch = TupleBatch::new(vec![vec![1.0]], vec![vec![-0.5]], None, i1()).unwrap();
        let v = adaptive_tuple_clusters_loss(&batch, &p).unwrap();
        assert!((v - 0.75).abs() < 1e-12);
    }

    #[test]
    fn anchor_sensitivity_fixture() {
        // Positives {0, 4}, one negative at 5. With anchor 0 the triplet is
        // satisfied, but the positives are far from their center 2.
        let m = i1();
        let triplet = triplet_loss(&[0.0], &[4.0], &[5.0], 1.0, &m).unwrap();
        assert_eq!(triplet, 0.0);
        let th = FixedThreshold::new(2.0, 1.0).unwrap();
        let tc = tuple_clusters_loss(&scalars(&[0.0, 4.0]), &scalars(&[5.0]), &th, &m).unwrap();
        assert!(tc > 0.0);
        assert!((tc - 2.5).abs() < 1e-12);
    }
}
