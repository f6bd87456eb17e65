//! Exact analysis of the adversarial objective on finite supports: the
//! pushforward of a joint `q(x, s, y)` through a deterministic encoder, the
//! optimal classifier/discriminator responses, and the conditional-entropy
//! objective `H(y|d) − α·H(s|d)` minimized over every encoder.

use std::collections::BTreeSet;
use std::io::Write;

use disent_tensor::{Adam, AdamConfig, Axis, Graph, Optimizer, ParamStore, Tensor};
use serde::Serialize;

use crate::error::{CoreError, Result};

const MASS_TOL: f64 = 1e-12;

/// Joint table over `(z, s, y)` with `z` an input or code value.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJoint {
    z_size: usize,
    s_size: usize,
    y_size: usize,
    prob: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Y,
    S,
}

impl DiscreteJoint {
    /// `prob` is indexed `[(z · s_size + s) · y_size + y]`.
    pub fn new(z_size: usize, s_size: usize, y_size: usize, prob: Vec<f64>) -> Result<Self> {
        if z_size == 0 || s_size == 0 || y_size == 0 || prob.len() != z_size * s_size * y_size {
            return Err(CoreError::InvalidArgument(format!(
                "table of {} entries does not match sizes {z_size}x{s_size}x{y_size}",
                prob.len()
            )));
        }
        if prob.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(CoreError::InvalidArgument("probabilities must be finite and non-negative".into()));
        }
        let total: f64 = prob.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(CoreError::InvalidArgument(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self {
            z_size,
            s_size,
            y_size,
            prob,
        })
    }

    pub fn from_fn(z_size: usize, s_size: usize, y_size: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let mut prob = Vec::with_capacity(z_size * s_size * y_size);
        for z in 0..z_size {
            for s in 0..s_size {
                for y in 0..y_size {
                    prob.push(f(z, s, y));
                }
            }
        }
        Self::new(z_size, s_size, y_size, prob)
    }

    pub fn z_size(&self) -> usize {
        self.z_size
    }

    pub fn s_size(&self) -> usize {
        self.s_size
    }

    pub fn y_size(&self) -> usize {
        self.y_size
    }

    pub fn p(&self, z: usize, s: usize, y: usize) -> f64 {
        self.prob[(z * self.s_size + s) * self.y_size + y]
    }

    pub fn total_mass(&self) -> f64 {
        self.prob.iter().sum()
    }

    pub fn target_size(&self, t: Target) -> usize {
        match t {
            Target::Y => self.y_size,
            Target::S => self.s_size,
        }
    }

    pub fn marginal_z(&self) -> Vec<f64> {
        (0..self.z_size)
            .map(|z| (0..self.s_size).flat_map(|s| (0..self.y_size).map(move |y| (s, y))).map(|(s, y)| self.p(z, s, y)).sum())
            .collect()
    }

    /// `q(z, t)` for the chosen target, `[z][t]`.
    pub fn joint_with(&self, t: Target) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.target_size(t)]; self.z_size];
        for z in 0..self.z_size {
            for s in 0..self.s_size {
                for y in 0..self.y_size {
                    let k = match t {
                        Target::Y => y,
                        Target::S => s,
                    };
                    out[z][k] += self.p(z, s, y);
                }
            }
        }
        out
    }

    /// Marginal of the target alone.
    pub fn target_marginal(&self, t: Target) -> Vec<f64> {
        let j = self.joint_with(t);
        (0..self.target_size(t)).map(|k| j.iter().map(|r| r[k]).sum()).collect()
    }
}

/// Four equiprobable inputs with `s = x / 2` and `y = x % 2`, so the
/// attribute and the class are independent bits.
pub fn independent_scenario() -> DiscreteJoint {
    DiscreteJoint::from_fn(4, 2, 2, |x, s, y| if s == x / 2 && y == x % 2 { 0.25 } else { 0.0 })
        .expect("valid table")
}

/// Four equiprobable inputs with `y = x % 2` and `s = y`: removing `s`
/// from a code necessarily removes `y`.
pub fn dependent_scenario() -> DiscreteJoint {
    DiscreteJoint::from_fn(4, 2, 2, |x, s, y| if y == x % 2 && s == y { 0.25 } else { 0.0 })
        .expect("valid table")
}

/// `q̃(d, s, y) = Σ_{x: E(x) = d} q(x, s, y)`.
pub fn induced_joint(q: &DiscreteJoint, encoder: &[usize], d_size: usize) -> Result<DiscreteJoint> {
    if encoder.len() != q.z_size {
        return Err(CoreError::InvalidArgument(format!(
            "encoder covers {} inputs, support has {}",
            encoder.len(),
            q.z_size
        )));
    }
    if let Some(&bad) = encoder.iter().find(|&&d| d >= d_size) {
        return Err(CoreError::InvalidArgument(format!("code {bad} outside alphabet of size {d_size}")));
    }
    let mut prob = vec![0.0; d_size * q.s_size * q.y_size];
    for (x, &d) in encoder.iter().enumerate() {
        for s in 0..q.s_size {
            for y in 0..q.y_size {
                prob[(d * q.s_size + s) * q.y_size + y] += q.p(x, s, y);
            }
        }
    }
    Ok(DiscreteJoint {
        z_size: d_size,
        s_size: q.s_size,
        y_size: q.y_size,
        prob,
    })
}

/// Conditional table `p(target | d)`, one row per code value.
#[derive(Clone, Debug, PartialEq)]
pub struct Responder {
    pub rows: Vec<Vec<f64>>,
}

impl Responder {
    /// Largest total-variation distance between matching rows.
    pub fn max_total_variation(&self, other: &Responder) -> f64 {
        self.rows
            .iter()
            .zip(&other.rows)
            .map(|(a, b)| 0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

fn conditional(q: &DiscreteJoint, t: Target) -> Result<Responder> {
    let joint = q.joint_with(t);
    let rows = joint
        .into_iter()
        .enumerate()
        .map(|(d, row)| {
            let m: f64 = row.iter().sum();
            if m <= 0.0 {
                return Err(CoreError::DegenerateSupport(format!("code {d} has zero probability")));
            }
            Ok(row.iter().map(|v| v / m).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Responder { rows })
}

/// The cross-entropy-optimal classifier and discriminator: the exact
/// conditionals `q̃(y|d)` and `q̃(s|d)`.
pub fn optimal_responders(q_tilde: &DiscreteJoint) -> Result<(Responder, Responder)> {
    Ok((conditional(q_tilde, Target::Y)?, conditional(q_tilde, Target::S)?))
}

/// `E_{q̃}[−log p(target | d)]`; zero-probability cells contribute nothing.
pub fn expected_cross_entropy(q_tilde: &DiscreteJoint, responder: &Responder, t: Target) -> f64 {
    let joint = q_tilde.joint_with(t);
    let mut total = 0.0;
    for (row_q, row_p) in joint.iter().zip(&responder.rows) {
        for (&qv, &pv) in row_q.iter().zip(row_p) {
            if qv > 0.0 {
                total -= qv * pv.ln();
            }
        }
    }
    total
}

fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// `H(target | z)` in nats.
pub fn conditional_entropy(q: &DiscreteJoint, t: Target) -> f64 {
    q.joint_with(t)
        .iter()
        .map(|row| {
            let m: f64 = row.iter().sum();
            plogp(m) - row.iter().map(|&v| plogp(v)).sum::<f64>()
        })
        .sum()
}

/// `H(y|d) − α·H(s|d)`.
pub fn entropy_objective(q_tilde: &DiscreteJoint, alpha_adv: f64) -> f64 {
    conditional_entropy(q_tilde, Target::Y) - alpha_adv * conditional_entropy(q_tilde, Target::S)
}

/// The encoder with base-`d_size` digit expansion `id` (input 0 is the
/// least significant digit).
pub fn encoder_from_id(mut id: u64, x_size: usize, d_size: usize) -> Vec<usize> {
    (0..x_size)
        .map(|_| {
            let d = (id % d_size as u64) as usize;
            id /= d_size as u64;
            d
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub best_objective: f64,
    /// Smallest id among the minimizers.
    pub encoder_id: u64,
    /// Every encoder attaining the minimum (within 1e-12).
    #[serde(skip)]
    pub argmin: BTreeSet<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// True when every alpha has the same minimizing encoder set.
    pub argmin_stable: bool,
}

impl SweepReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["alpha", "best_objective", "encoder_id", "argmin_stable"])?;
        for r in &self.rows {
            w.write_record([
                format!("{}", r.alpha),
                format!("{}", r.best_objective),
                r.encoder_id.to_string(),
                self.argmin_stable.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub const DEFAULT_SWEEP_BUDGET: u64 = 1_000_000;

/// Exhaustive minimization of the entropy objective over all
/// `d_size^|x|` deterministic encoders, for each alpha.
pub fn scenario_sweep(q: &DiscreteJoint, d_size: usize, alphas: &[f64], budget: u64) -> Result<SweepReport> {
    if d_size == 0 || alphas.is_empty() {
        return Err(CoreError::InvalidArgument("need a non-empty code alphabet and alpha list".into()));
    }
    let count = (d_size as u64)
        .checked_pow(q.z_size as u32)
        .filter(|&c| c <= budget)
        .ok_or_else(|| {
            CoreError::Size(format!(
                "{d_size}^{} encoders exceed the budget of {budget}",
                q.z_size
            ))
        })?;
    // Entropies do not depend on alpha, so compute them once per encoder.
    let mut entropies = Vec::with_capacity(count as usize);
    for id in 0..count {
        let qt = induced_joint(q, &encoder_from_id(id, q.z_size, d_size), d_size)?;
        entropies.push((conditional_entropy(&qt, Target::Y), conditional_entropy(&qt, Target::S)));
    }
    let rows: Vec<SweepRow> = alphas
        .iter()
        .map(|&alpha| {
            let values: Vec<f64> = entropies.iter().map(|(hy, hs)| hy - alpha * hs).collect();
            let best = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let argmin: BTreeSet<u64> = (0..count).filter(|&i| values[i as usize] <= best + 1e-12).collect();
            SweepRow {
                alpha,
                best_objective: best,
                encoder_id: *argmin.iter().next().expect("at least one encoder"),
                argmin,
            }
        })
        .collect();
    let argmin_stable = rows.windows(2).all(|w| w[0].argmin == w[1].argmin);
    Ok(SweepReport { rows, argmin_stable })
}

/// Fits a responder for `target` by gradient descent on its expected
/// cross-entropy with the encoder held fixed (the code distribution is
/// `q_tilde`). Rows are softmax-parameterized logits, starting at zero.
pub fn train_responder(q_tilde: &DiscreteJoint, target: Target, iters: usize, lr: f64) -> Result<Responder> {
    let weights = q_tilde.joint_with(target);
    let (dn, k) = (q_tilde.z_size, q_tilde.target_size(target));
    let wt = Tensor::from_rows(&weights)?;
    let mut params = ParamStore::new();
    params.insert("logits", Tensor::zeros(&[dn, k]));
    let mut opt = Adam::new(AdamConfig {
        lr,
        ..Default::default()
    });
    let log_probs = |g: &mut Graph, params: &ParamStore| -> Result<(disent_tensor::NodeId, disent_tensor::NodeId)> {
        let z = g.param(params, "logits")?;
        let e = g.exp(z)?;
        let s = g.sum(e, Some(Axis::Cols))?;
        let ls = g.log(s)?;
        let neg = g.scale(ls, -1.0)?;
        Ok((z, g.broadcast_add(z, neg)?))
    };
    for _ in 0..iters {
        let mut g = Graph::new();
        let (_, lp) = log_probs(&mut g, &params)?;
        let w = g.input(wt.clone())?;
        let weighted = g.mul(lp, w)?;
        let total = g.sum(weighted, None)?;
        let loss = g.scale(total, -1.0)?;
        let grads = g.backward(loss)?;
        opt.step(&mut params, &grads)?;
    }
    let mut g = Graph::new();
    let (_, lp) = log_probs(&mut g, &params)?;
    let rows = crate::nn::rows_of(g.value(lp))
        .into_iter()
        .map(|r| r.into_iter().map(f64::exp).collect())
        .collect();
    Ok(Responder { rows })
}

/// Brute-force fit of a responder: each row is chosen from a grid over the
/// probability simplex, then the grid is repeatedly zoomed around the best
/// point. Practical
/// only for targets with a handful of values.
pub fn grid_search_responder(q_tilde: &DiscreteJoint, target: Target, rounds: usize) -> Responder {
    const STEPS: usize = 20;
    let joint = q_tilde.joint_with(target);
    let k = q_tilde.target_size(target);
    let rows = joint
        .iter()
        .map(|weights| {
            let row_loss = |p: &[f64]| -> f64 {
                weights
                    .iter()
                    .zip(p)
                    .map(|(&w, &pv)| if w > 0.0 { -w * pv.ln() } else { 0.0 })
                    .sum()
            };
            let free = k - 1;
            let mut lo = vec![0.0; free];
            let mut hi = vec![1.0; free];
            let mut best = vec![1.0 / k as f64; k];
            let mut best_loss = row_loss(&best);
            for _ in 0..rounds {
                let h: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| (b - a) / STEPS as f64).collect();
                let total = (STEPS + 1).pow(free as u32);
                for flat in 0..total {
                    let mut rest = flat;
                    let mut p = Vec::with_capacity(k);
                    for i in 0..free {
                        p.push((lo[i] + h[i] * (rest % (STEPS + 1)) as f64).min(1.0));
                        rest /= STEPS + 1;
                    }
                    let last = 1.0 - p.iter().sum::<f64>();
                    if last < -1e-15 {
                        continue;
                    }
                    p.push(last.max(0.0));
                    let l = row_loss(&p);
                    if l < best_loss {
                        best_loss = l;
                        best = p;
                    }
                }
                for i in 0..free {
                    lo[i] = (best[i] - 2.0 * h[i]).max(0.0);
                    hi[i] = (best[i] + 2.0 * h[i]).min(1.0);
                }
            }
            best
        })
        .collect();
    Responder { rows }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// x uniform on {0..3}, s = x / 2, y = x % 2: s and y independent.
    fn independent() -> DiscreteJoint {
        DiscreteJoint::from_fn(4, 2, 2, |x, s, y| if s == x / 2 && y == x % 2 { 0.25 } else { 0.0 }).unwrap()
    }

    #[test]
    fn table_validation() {
        assert!(DiscreteJoint::new(1, 1, 2, vec![0.5, 0.6]).is_err());
        assert!(DiscreteJoint::new(1, 1, 2, vec![1.5, -0.5]).is_err());
        assert!(DiscreteJoint::new(1, 1, 2, vec![0.5]).is_err());
    }

    #[test]
    fn identity_encoder_relabels() {
        let q = independent();
        assert_eq!(induced_joint(&q, &[0, 1, 2, 3], 4).unwrap(), q);
    }

    #[test]
    fn constant_encoder_gives_the_marginal() {
        let q = independent();
        let qt = induced_joint(&q, &[0, 0, 0, 0], 1).unwrap();
        for s in 0..2 {
            for y in 0..2 {
                assert_eq!(qt.p(0, s, y), 0.25);
            }
        }
    }

    #[test]
    fn merging_two_inputs_sums_their_mass() {
        let q = independent();
        let qt = induced_joint(&q, &[0, 0, 1, 2], 3).unwrap();
        assert_eq!(qt.marginal_z()[0], 0.5);
        assert_eq!(qt.total_mass(), 1.0);
    }

    #[test]
    fn responder_examples() {
        let q = DiscreteJoint::from_fn(1, 1, 2, |_, _, y| [0.3, 0.7][y]).unwrap();
        let (ry, rs) = optimal_responders(&q).unwrap();
        assert_eq!(ry.rows, vec![vec![0.3, 0.7]]);
        assert_eq!(rs.rows, vec![vec![1.0]]);
        let (ry, _) = optimal_responders(&independent()).unwrap();
        assert!(ry.rows.iter().all(|r| r.iter().filter(|&&v| v == 1.0).count() == 1));
        let degenerate = induced_joint(&independent(), &[0, 0, 0, 0], 2).unwrap();
        assert!(matches!(optimal_responders(&degenerate), Err(CoreError::DegenerateSupport(_))));
    }

    #[test]
    fn entropy_examples() {
        let qt = induced_joint(&independent(), &[0, 1, 0, 1], 2).unwrap();
        assert!((entropy_objective(&qt, 0.5) + 0.5 * 2f64.ln()).abs() < 1e-12);
        assert!((entropy_objective(&qt, 0.0) - conditional_entropy(&qt, Target::Y)).abs() < 1e-15);
        let uniform3 = DiscreteJoint::from_fn(1, 1, 3, |_, _, _| 1.0 / 3.0).unwrap();
        assert!((entropy_objective(&uniform3, 0.0) - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn encoder_ids_enumerate_digits() {
        assert_eq!(encoder_from_id(0, 3, 2), vec![0, 0, 0]);
        assert_eq!(encoder_from_id(6, 3, 2), vec![0, 1, 1]);
        assert_eq!(encoder_from_id(5, 2, 3), vec![2, 1]);
    }

    #[test]
    fn sweep_over_single_code_is_marginal_entropy() {
        let q = independent();
        let r = scenario_sweep(&q, 1, &[0.2, 3.0], DEFAULT_SWEEP_BUDGET).unwrap();
        for row in &r.rows {
            assert_eq!(row.argmin.len(), 1);
            assert!((row.best_objective - (2f64.ln() - row.alpha * 2f64.ln())).abs() < 1e-12);
        }
        assert!(r.argmin_stable);
    }

    #[test]
    fn sweep_budget_is_enforced() {
        let q = independent();
        assert!(matches!(scenario_sweep(&q, 2, &[0.5], 8), Err(CoreError::Size(_))));
    }

    #[test]
    fn sweep_csv_has_one_row_per_alpha() {
        let r = scenario_sweep(&independent(), 2, &[0.1, 0.5], DEFAULT_SWEEP_BUDGET).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("alpha,best_objective,encoder_id,argmin_stable"));
    }

    #[test]
    fn grid_search_lands_on_the_conditionals() {
        let q = DiscreteJoint::from_fn(2, 2, 3, |z, s, y| [[0.1, 0.15, 0.1], [0.3, 0.2, 0.15]][z][y] * [0.25, 0.75][s]).unwrap();
        let (exact_y, exact_s) = optimal_responders(&q).unwrap();
        for (t, exact) in [(Target::Y, exact_y), (Target::S, exact_s)] {
            let grid = grid_search_responder(&q, t, 12);
            let gap = expected_cross_entropy(&q, &grid, t) - expected_cross_entropy(&q, &exact, t);
            assert!(gap >= -1e-12 && gap < 1e-6, "{gap}");
        }
    }

    #[test]
    fn trained_responder_approaches_conditionals() {
        let q = DiscreteJoint::from_fn(2, 1, 3, |z, _, y| [[0.1, 0.2, 0.2], [0.3, 0.1, 0.1]][z][y]).unwrap();
        let (exact, _) = optimal_responders(&q).unwrap();
        let fitted = train_responder(&q, Target::Y, 2000, 0.05).unwrap();
        assert!(fitted.max_total_variation(&exact) < 1e-3);
    }
}
