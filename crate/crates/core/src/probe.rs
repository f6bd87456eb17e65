//! Linear probes: multinomial logistic regression fitted post hoc on frozen
//! codes to measure how much `y` and `s` information they carry.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::flf::{encode_rows, FlfModel};
use crate::synthdata::Dataset;

pub const DEFAULT_L2: f64 = 1e-3;
pub const DEFAULT_PROBE_ITERS: usize = 1000;
const GRAD_TOL: f64 = 1e-6;

/// Fitted probe. Inputs are standardized with the training statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticProbe {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `[dim][classes]`
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    /// Gradient norm at the last iteration.
    pub grad_norm: f64,
    pub iterations: usize,
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    for v in z.iter_mut() {
        *v /= total;
    }
}

impl LogisticProbe {
    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    fn standardize(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    fn logits_std(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (zj, wj) in z.iter().zip(&self.weights) {
            for (o, w) in out.iter_mut().zip(wj) {
                *o += zj * w;
            }
        }
        out
    }

    pub fn logits(&self, row: &[f64]) -> Vec<f64> {
        self.logits_std(&self.standardize(row))
    }

    /// Arg-max class per row (lowest index on ties).
    pub fn predict(&self, rows: &[Vec<f64>]) -> Vec<usize> {
        rows.iter()
            .map(|r| {
                let z = self.logits(r);
                (0..z.len()).fold(0, |best, k| if z[k] > z[best] { k } else { best })
            })
            .collect()
    }

    pub fn accuracy(&self, rows: &[Vec<f64>], labels: &[usize]) -> f64 {
        if rows.is_empty() {
            return 0.0;
        }
        let hits = self
            .predict(rows)
            .iter()
            .zip(labels)
            .filter(|(p, y)| p == y)
            .count();
        hits as f64 / rows.len() as f64
    }
}

/// Full-batch gradient descent from zero on the l2-regularized mean
/// cross-entropy. Stops when the gradient norm drops to 1e-6 or after
/// `iters` steps. The step is `1/L` for the smoothness bound
/// `L = ½(dim + 1) + l2` of standardized inputs.
pub fn train_logistic_probe(features: &[Vec<f64>], labels: &[usize], l2_weight: f64, iters: usize) -> Result<LogisticProbe> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(CoreError::InvalidArgument("probe needs one label per non-empty feature row".into()));
    }
    let distinct: BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(CoreError::InvalidArgument("probe labels contain a single class".into()));
    }
    if !(l2_weight >= 0.0) {
        return Err(CoreError::InvalidArgument("l2 weight must be non-negative".into()));
    }
    let k = distinct.iter().max().unwrap() + 1;
    let dim = features[0].len();
    if features.iter().any(|r| r.len() != dim) {
        return Err(CoreError::InvalidArgument("ragged feature rows".into()));
    }
    let n = features.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|j| features.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let scale: Vec<f64> = (0..dim)
        .map(|j| {
            let var = features.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 1e-24 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mut probe = LogisticProbe {
        mean,
        scale,
        weights: vec![vec![0.0; k]; dim],
        bias: vec![0.0; k],
        grad_norm: f64::INFINITY,
        iterations: 0,
    };
    let z: Vec<Vec<f64>> = features.iter().map(|r| probe.standardize(r)).collect();
    let lr = 1.0 / (0.5 * (dim as f64 + 1.0) + l2_weight);
    let mut gw = vec![vec![0.0; k]; dim];
    let mut gb = vec![0.0; k];
    for it in 0..iters {
        for row in gw.iter_mut() {
            row.fill(0.0);
        }
        gb.fill(0.0);
        for (zi, &yi) in z.iter().zip(labels) {
            let mut p = probe.logits_std(zi);
            softmax_in_place(&mut p);
            p[yi] -= 1.0;
            for (gj, &zij) in gw.iter_mut().zip(zi) {
                for (g, pk) in gj.iter_mut().zip(&p) {
                    *g += zij * pk;
                }
            }
            for (g, pk) in gb.iter_mut().zip(&p) {
                *g += pk;
            }
        }
        let mut norm2 = 0.0;
        for (gj, wj) in gw.iter_mut().zip(&probe.weights) {
            for (g, w) in gj.iter_mut().zip(wj) {
                *g = *g / n + l2_weight * w;
                norm2 += *g * *g;
            }
        }
        for g in gb.iter_mut() {
            *g /= n;
            norm2 += *g * *g;
        }
        probe.grad_norm = norm2.sqrt();
        probe.iterations = it;
        if probe.grad_norm <= GRAD_TOL {
            break;
        }
        for (wj, gj) in probe.weights.iter_mut().zip(&gw) {
            for (w, g) in wj.iter_mut().zip(gj) {
                *w -= lr * g;
            }
        }
        for (b, g) in probe.bias.iter_mut().zip(&gb) {
            *b -= lr * g;
        }
        probe.iterations = it + 1;
    }
    Ok(probe)
}

/// Held-out accuracies of probes on the `d` and `l` codes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub acc_y_given_d: f64,
    pub acc_s_given_d: f64,
    pub acc_y_given_l: f64,
    pub acc_s_given_l: f64,
    pub chance_y: f64,
    /// Mean over bits of each bit's larger test-split marginal.
    pub chance_s: f64,
    pub chance_s_bits: Vec<f64>,
    pub n_train: usize,
    pub n_test: usize,
}

fn check_disjoint(train: &[usize], test: &[usize]) -> Result<()> {
    let a: BTreeSet<usize> = train.iter().copied().collect();
    if test.iter().any(|i| a.contains(i)) {
        return Err(CoreError::InvalidArgument("probe train and test splits overlap".into()));
    }
    if train.is_empty() || test.is_empty() {
        return Err(CoreError::InvalidArgument("probe splits must be non-empty".into()));
    }
    Ok(())
}

fn bit(dataset: &Dataset, idx: &[usize], b: usize) -> Vec<usize> {
    idx.iter().map(|&i| usize::from(dataset.samples[i].attrs_s[b])).collect()
}

/// Accuracy of an s-probe averaged over bits. A bit constant on the
/// training split is predicted as that constant.
fn s_accuracy(dataset: &Dataset, train: &[usize], test: &[usize], ftr: &[Vec<f64>], fte: &[Vec<f64>]) -> Result<f64> {
    let bits = dataset.num_attrs;
    if bits == 0 {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for b in 0..bits {
        let ytr = bit(dataset, train, b);
        let yte = bit(dataset, test, b);
        total += if ytr.iter().all(|&v| v == ytr[0]) {
            yte.iter().filter(|&&v| v == ytr[0]).count() as f64 / yte.len() as f64
        } else {
            train_logistic_probe(ftr, &ytr, DEFAULT_L2, DEFAULT_PROBE_ITERS)?.accuracy(fte, &yte)
        };
    }
    Ok(total / bits as f64)
}

/// Probe report for arbitrary code matrices aligned with `train` / `test`.
pub fn probe_codes(
    dataset: &Dataset,
    train: &[usize],
    test: &[usize],
    d: (&[Vec<f64>], &[Vec<f64>]),
    l: (&[Vec<f64>], &[Vec<f64>]),
) -> Result<ProbeReport> {
    check_disjoint(train, test)?;
    let y = |idx: &[usize]| -> Vec<usize> { idx.iter().map(|&i| dataset.samples[i].class_y).collect() };
    let (ytr, yte) = (y(train), y(test));
    let acc_y = |ftr: &[Vec<f64>], fte: &[Vec<f64>]| -> Result<f64> {
        Ok(train_logistic_probe(ftr, &ytr, DEFAULT_L2, DEFAULT_PROBE_ITERS)?.accuracy(fte, &yte))
    };
    let chance_s_bits: Vec<f64> = (0..dataset.num_attrs)
        .map(|b| {
            let ones = bit(dataset, test, b).iter().sum::<usize>() as f64 / test.len() as f64;
            ones.max(1.0 - ones)
        })
        .collect();
    let chance_s = if chance_s_bits.is_empty() {
        f64::NAN
    } else {
        chance_s_bits.iter().sum::<f64>() / chance_s_bits.len() as f64
    };
    Ok(ProbeReport {
        acc_y_given_d: acc_y(d.0, d.1)?,
        acc_s_given_d: s_accuracy(dataset, train, test, d.0, d.1)?,
        acc_y_given_l: acc_y(l.0, l.1)?,
        acc_s_given_l: s_accuracy(dataset, train, test, l.0, l.1)?,
        chance_y: 1.0 / dataset.num_classes as f64,
        chance_s,
        chance_s_bits,
        n_train: train.len(),
        n_test: test.len(),
    })
}

/// Trains the four probes on the encoded training split and reports
/// accuracies on the test split.
pub fn probe_accuracy_matrix(model: &FlfModel, dataset: &Dataset, train: &[usize], test: &[usize]) -> Result<ProbeReport> {
    check_disjoint(train, test)?;
    let (dtr, ltr) = encode_rows(model, dataset, train)?;
    let (dte, lte) = encode_rows(model, dataset, test)?;
    probe_codes(dataset, train, test, (&dtr, &dte), (&ltr, &lte))
}

/// CSV of `subject_id, y, s bits, d coordinates, l coordinates` per sample.
pub fn write_embeddings<W: std::io::Write>(model: &FlfModel, dataset: &Dataset, out: W) -> Result<()> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    let (d, l) = encode_rows(model, dataset, &all)?;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["subject_id".to_string(), "y".to_string()];
    header.extend((0..dataset.num_attrs).map(|i| format!("s{i}")));
    header.extend((0..model.dims.dim_d).map(|i| format!("d{i}")));
    header.extend((0..model.dims.dim_l).map(|i| format!("l{i}")));
    w.write_record(&header)?;
    for (i, s) in dataset.samples.iter().enumerate() {
        let mut rec = vec![s.subject_id.to_string(), s.class_y.to_string()];
        rec.extend(s.attrs_s.iter().map(u8::to_string));
        rec.extend(d[i].iter().map(|v| format!("{v}")));
        rec.extend(l[i].iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn dump_embeddings(model: &FlfModel, dataset: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_embeddings(model, dataset, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn separable_toy_is_fit_exactly() {
        let x = vec![vec![-2.0], vec![-1.0], vec![1.0], vec![2.0]];
        let y = [0, 0, 1, 1];
        let p = train_logistic_probe(&x, &y, DEFAULT_L2, 500).unwrap();
        assert_eq!(p.accuracy(&x, &y), 1.0);
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(train_logistic_probe(&[vec![1.0], vec![2.0]], &[1, 1], 1e-3, 10).is_err());
    }

    #[test]
    fn zero_init_makes_training_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
        let y: Vec<usize> = (0..50).map(|i| i % 3).collect();
        let a = train_logistic_probe(&x, &y, 1e-3, 200).unwrap();
        let b = train_logistic_probe(&x, &y, 1e-3, 200).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_labels_stay_near_chance() {
        let mut total = 0.0;
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut draw = |n: usize| -> (Vec<Vec<f64>>, Vec<usize>) {
                let x = (0..n)
                    .map(|_| (0..4).map(|_| rng.random::<f64>()).collect())
                    .collect();
                let y = (0..n).map(|_| rng.random_range(0..2)).collect();
                (x, y)
            };
            let (xtr, ytr) = draw(1000);
            let (xte, yte) = draw(1000);
            let acc = train_logistic_probe(&xtr, &ytr, DEFAULT_L2, 300).unwrap().accuracy(&xte, &yte);
            assert!((acc - 0.5).abs() <= 0.55);
            total += acc / 5.0;
        }
        assert!((0.45..=0.55).contains(&total), "{total}");
    }

    #[test]
    fn evenly_split_duplicate_columns_predict_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<Vec<f64>> = (0..80).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect();
        let y: Vec<usize> = x.iter().map(|r| usize::from(r[0] + r[1] > 1.0)).collect();
        let p = train_logistic_probe(&x, &y, DEFAULT_L2, 300).unwrap();
        let dup = LogisticProbe {
            mean: [p.mean.clone(), p.mean.clone()].concat(),
            scale: [p.scale.clone(), p.scale.clone()].concat(),
            weights: p
                .weights
                .iter()
                .chain(&p.weights)
                .map(|w| w.iter().map(|v| v / 2.0).collect())
                .collect(),
            ..p.clone()
        };
        let xd: Vec<Vec<f64>> = x.iter().map(|r| [r.clone(), r.clone()].concat()).collect();
        assert_eq!(p.predict(&x), dup.predict(&xd));
        assert_eq!(p.accuracy(&x, &y), dup.accuracy(&xd, &y));
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        assert!(check_disjoint(&[1, 2], &[2, 3]).is_err());
        assert!(check_disjoint(&[1, 2], &[3]).is_ok());
    }
}
