//! Seeded generators for factor-controlled synthetic datasets.
//!
//! Two families are produced:
//!
//! * factor datasets, `x = M_y·onehot(y) + M_s·s + M_l·l + ε`, where the
//!   attribute bits `s` are either independent of the class `y` or copied
//!   from a fixed function of it (`dependency_rho`);
//! * identity/expression datasets, where every sample is a subject offset
//!   plus a class offset plus noise, so raw features cluster by subject.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub subject_id: usize,
    pub class_y: usize,
    pub attrs_s: Vec<u8>,
    /// Generator-internal ground truth; not serialized to CSV.
    #[serde(default)]
    pub latent_true: Vec<f64>,
    pub features_x: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub num_attrs: usize,
    pub feature_dim: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn features(&self, indices: &[usize]) -> Vec<Vec<f64>> {
        indices
            .iter()
            .map(|&i| self.samples[i].features_x.clone())
            .collect()
    }

    pub fn subjects(&self) -> BTreeSet<usize> {
        self.samples.iter().map(|s| s.subject_id).collect()
    }

    /// Header `subject_id,y,s0..s{N-1},x0..x{D-1}`.
    pub fn csv_header(&self) -> Vec<String> {
        let mut h = vec!["subject_id".to_string(), "y".to_string()];
        h.extend((0..self.num_attrs).map(|i| format!("s{i}")));
        h.extend((0..self.feature_dim).map(|i| format!("x{i}")));
        h
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.csv_header())?;
        for s in &self.samples {
            let mut rec = vec![s.subject_id.to_string(), s.class_y.to_string()];
            rec.extend(s.attrs_s.iter().map(|b| b.to_string()));
            // `{}` on f64 prints the shortest string that parses back exactly.
            rec.extend(s.features_x.iter().map(|v| format!("{v}")));
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// Parses the CSV schema written by [`Dataset::write_csv`]. The class
    /// count is taken as `max(y) + 1`.
    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        if header.get(0) != Some("subject_id") || header.get(1) != Some("y") {
            return Err(CoreError::Format(
                "header must start with subject_id,y".into(),
            ));
        }
        let num_attrs = header.iter().filter(|h| h.starts_with('s') && *h != "subject_id").count();
        let feature_dim = header.iter().filter(|h| h.starts_with('x')).count();
        if num_attrs + feature_dim + 2 != header.len() || feature_dim == 0 {
            return Err(CoreError::Format(format!("unexpected header {header:?}")));
        }
        let mut samples = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| CoreError::Format(format!("row {}: bad {what}", line + 2));
            let field = |i: usize| rec.get(i).ok_or_else(|| bad("field count"));
            let subject_id = field(0)?.parse().map_err(|_| bad("subject_id"))?;
            let class_y = field(1)?.parse().map_err(|_| bad("y"))?;
            let mut attrs_s = Vec::with_capacity(num_attrs);
            for i in 0..num_attrs {
                let b: u8 = field(2 + i)?.parse().map_err(|_| bad("attribute"))?;
                if b > 1 {
                    return Err(bad("attribute (not 0/1)"));
                }
                attrs_s.push(b);
            }
            let mut features_x = Vec::with_capacity(feature_dim);
            for i in 0..feature_dim {
                let v: f64 = field(2 + num_attrs + i)?.parse().map_err(|_| bad("feature"))?;
                if !v.is_finite() {
                    return Err(bad("feature (non-finite)"));
                }
                features_x.push(v);
            }
            samples.push(Sample {
                subject_id,
                class_y,
                attrs_s,
                latent_true: Vec::new(),
                features_x,
            });
        }
        let num_classes = samples.iter().map(|s| s.class_y + 1).max().unwrap_or(0);
        Ok(Self {
            num_classes,
            num_attrs,
            feature_dim,
            samples,
        })
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FactorSpec {
    pub num_classes: usize,
    pub num_attrs: usize,
    pub latent_dim: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    /// Probability that an attribute bit is copied from a fixed function of y.
    pub dependency_rho: f64,
    pub class_scale: f64,
    pub attr_scale: f64,
    pub latent_scale: f64,
}

impl Default for FactorSpec {
    fn default() -> Self {
        Self {
            num_classes: 5,
            num_attrs: 2,
            latent_dim: 4,
            feature_dim: 16,
            noise_sigma: 0.3,
            dependency_rho: 0.0,
            class_scale: 1.0,
            attr_scale: 2.0,
            latent_scale: 1.0,
        }
    }
}

impl FactorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::InvalidArgument(m.to_string()));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad("noise_sigma must be a finite non-negative number");
        }
        if !(0.0..=1.0).contains(&self.dependency_rho) {
            return bad("dependency_rho must lie in [0, 1]");
        }
        if ![self.class_scale, self.attr_scale, self.latent_scale]
            .iter()
            .all(|v| v.is_finite())
        {
            return bad("scales must be finite");
        }
        Ok(())
    }
}

/// The fixed function of `y` that dependent attribute bits copy. Bit 0 is
/// `y mod 2`; higher bits walk through the binary digits of `y`, flipping
/// once all digits are used.
pub fn attribute_rule(y: usize, bit: usize, num_classes: usize) -> u8 {
    let width = (usize::BITS - (num_classes - 1).leading_zeros()).max(1) as usize;
    (((y >> (bit % width)) ^ (bit / width)) & 1) as u8
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// Column `j` of the `[dim, k]` matrix stored as `cols[j]`.
fn add_scaled(acc: &mut [f64], col: &[f64], scale: f64) {
    for (a, c) in acc.iter_mut().zip(col) {
        *a += scale * c;
    }
}

pub fn gen_factor_dataset(spec: &FactorSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n < spec.num_classes {
        return Err(CoreError::InvalidArgument(format!(
            "need at least {} samples for {} classes, got {n}",
            spec.num_classes, spec.num_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.feature_dim;
    // Stored column-major: one feature-space direction per factor.
    let class_dirs = normal_matrix(&mut rng, spec.num_classes, d);
    let attr_dirs = normal_matrix(&mut rng, spec.num_attrs, d);
    let latent_dirs = normal_matrix(&mut rng, spec.latent_dim, d);

    let mut classes: Vec<usize> = (0..n).map(|i| i % spec.num_classes).collect();
    classes.shuffle(&mut rng);

    let samples = classes
        .into_iter()
        .enumerate()
        .map(|(i, y)| {
            let attrs_s: Vec<u8> = (0..spec.num_attrs)
                .map(|bit| {
                    if rng.random::<f64>() < spec.dependency_rho {
                        attribute_rule(y, bit, spec.num_classes)
                    } else {
                        rng.random_bool(0.5) as u8
                    }
                })
                .collect();
            let latent_true: Vec<f64> = (0..spec.latent_dim)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            let mut x = vec![0.0; d];
            add_scaled(&mut x, &class_dirs[y], spec.class_scale);
            for (bit, dir) in attrs_s.iter().zip(&attr_dirs) {
                add_scaled(&mut x, dir, spec.attr_scale * f64::from(*bit));
            }
            for (z, dir) in latent_true.iter().zip(&latent_dirs) {
                add_scaled(&mut x, dir, spec.latent_scale * z);
            }
            if spec.noise_sigma > 0.0 {
                for v in &mut x {
                    *v += spec.noise_sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
            Sample {
                subject_id: i,
                class_y: y,
                attrs_s,
                latent_true,
                features_x: x,
            }
        })
        .collect();
    Ok(Dataset {
        num_classes: spec.num_classes,
        num_attrs: spec.num_attrs,
        feature_dim: d,
        samples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentitySpec {
    pub num_subjects: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    /// Samples per (subject, class) pair.
    pub repetitions: usize,
    pub subject_scale: f64,
    pub class_scale: f64,
    /// Dimension of the subspace that subject offsets live in.
    pub subject_rank: usize,
}

impl Default for IdentitySpec {
    fn default() -> Self {
        Self {
            num_subjects: 20,
            num_classes: 4,
            feature_dim: 16,
            noise_sigma: 0.3,
            repetitions: 3,
            subject_scale: 4.0,
            class_scale: 1.0,
            subject_rank: 4,
        }
    }
}

pub fn gen_identity_expression_dataset(spec: &IdentitySpec, seed: u64) -> Result<Dataset> {
    let bad = |m: String| Err(CoreError::InvalidArgument(m));
    if spec.num_subjects < 2 {
        return bad(format!("need at least 2 subjects, got {}", spec.num_subjects));
    }
    if spec.num_classes < 2 {
        return bad(format!("need at least 2 classes, got {}", spec.num_classes));
    }
    if spec.feature_dim == 0 || spec.repetitions == 0 {
        return bad("feature_dim and repetitions must be positive".into());
    }
    if spec.subject_rank == 0 || spec.subject_rank > spec.feature_dim {
        return bad(format!(
            "subject_rank must lie in 1..={}",
            spec.feature_dim
        ));
    }
    if !(spec.noise_sigma >= 0.0) || !spec.noise_sigma.is_finite() {
        return bad("noise_sigma must be a finite non-negative number".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.feature_dim;
    let class_dirs = normal_matrix(&mut rng, spec.num_classes, d);
    let subject_basis = normal_matrix(&mut rng, spec.subject_rank, d);
    let subject_codes = normal_matrix(&mut rng, spec.num_subjects, spec.subject_rank);
    let basis_norm = (spec.subject_rank as f64).sqrt();

    let mut samples = Vec::with_capacity(spec.num_subjects * spec.num_classes * spec.repetitions);
    for (subject, code) in subject_codes.iter().enumerate() {
        let mut offset = vec![0.0; d];
        for (z, dir) in code.iter().zip(&subject_basis) {
            add_scaled(&mut offset, dir, spec.subject_scale * z / basis_norm);
        }
        for (y, class_dir) in class_dirs.iter().enumerate() {
            for _ in 0..spec.repetitions {
                let mut x = offset.clone();
                add_scaled(&mut x, class_dir, spec.class_scale);
                if spec.noise_sigma > 0.0 {
                    for v in &mut x {
                        *v += spec.noise_sigma * rng.sample::<f64, _>(StandardNormal);
                    }
                }
                samples.push(Sample {
                    subject_id: subject,
                    class_y: y,
                    attrs_s: Vec::new(),
                    latent_true: code.clone(),
                    features_x: x,
                });
            }
        }
    }
    Ok(Dataset {
        num_classes: spec.num_classes,
        num_attrs: 0,
        feature_dim: d,
        samples,
    })
}

/// Partition of a dataset into folds with disjoint subject sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Folds {
    /// Sample indices per fold.
    pub samples: Vec<Vec<usize>>,
    /// Subject ids per fold.
    pub subjects: Vec<Vec<usize>>,
}

impl Folds {
    /// Indices of every fold except `test_fold`, in ascending order.
    pub fn train_indices(&self, test_fold: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .samples
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != test_fold)
            .flat_map(|(_, s)| s.iter().copied())
            .collect();
        v.sort_unstable();
        v
    }
}

/// Shuffles subjects with `seed` and deals them round-robin, so fold subject
/// counts differ by at most one.
pub fn subject_independent_split(dataset: &Dataset, fold_count: usize, seed: u64) -> Result<Folds> {
    let mut subjects: Vec<usize> = dataset.subjects().into_iter().collect();
    if fold_count == 0 || fold_count > subjects.len() {
        return Err(CoreError::InvalidArgument(format!(
            "cannot split {} subjects into {fold_count} folds",
            subjects.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);
    let mut fold_subjects = vec![Vec::new(); fold_count];
    for (i, s) in subjects.into_iter().enumerate() {
        fold_subjects[i % fold_count].push(s);
    }
    for f in &mut fold_subjects {
        f.sort_unstable();
    }
    let samples = fold_subjects
        .iter()
        .map(|subs| {
            dataset
                .samples
                .iter()
                .enumerate()
                .filter(|(_, s)| subs.binary_search(&s.subject_id).is_ok())
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    Ok(Folds {
        samples,
        subjects: fold_subjects,
    })
}

/// Seeded random train/test split of sample indices; both halves sorted.
pub fn random_split(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_test = ((n as f64) * test_fraction).round() as usize;
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}
