//! Identity-aware tuple construction, online positive mining and the cost
//! accounting of the batch schemes.

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::{mahalanobis_distance, MahalanobisMetric};
use crate::error::{CoreError, Result};
use crate::metric_losses::positive_center;
use crate::synthdata::Dataset;

/// Outcome of online positive mining on one tuple.
#[derive(Clone, Debug, PartialEq)]
pub struct MiningResult {
    pub kept_positive_indices: Vec<usize>,
    pub m_star: usize,
    pub nearest_negative_distance: f64,
}

impl MiningResult {
    /// Boolean keep-mask over the `m` sampled positives.
    pub fn mask(&self, m: usize) -> Vec<bool> {
        let mut mask = vec![false; m];
        for &i in &self.kept_positive_indices {
            mask[i] = true;
        }
        mask
    }

    /// Keeps every positive; used when mining is switched off.
    pub fn keep_all(m: usize) -> Self {
        Self {
            kept_positive_indices: (0..m).collect(),
            m_star: m,
            nearest_negative_distance: f64::NAN,
        }
    }
}

/// Distance and forward-pass counters for one training run.
#[derive(Debug, Default)]
pub struct CostCounter {
    input_passes: Cell<u64>,
    distance_calculations: Cell<u64>,
}

impl CostCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_passes(&self, n: u64) {
        self.input_passes.set(self.input_passes.get() + n);
    }

    pub fn add_distances(&self, n: u64) {
        self.distance_calculations.set(self.distance_calculations.get() + n);
    }

    pub fn input_passes(&self) -> u64 {
        self.input_passes.get()
    }

    pub fn distance_calculations(&self) -> u64 {
        self.distance_calculations.get()
    }

    pub fn reset(&self) {
        self.input_passes.set(0);
        self.distance_calculations.set(0);
    }
}

/// Keeps the positives no farther from the pre-mining center than the
/// nearest negative (ties kept). When none qualify, the single positive
/// nearest to the center is kept so that `M* ≥ 1`.
pub fn mine_positives(
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
    metric: &MahalanobisMetric,
) -> Result<MiningResult> {
    mine_positives_counted(positives, negatives, metric, None)
}

pub fn mine_positives_counted(
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
    metric: &MahalanobisMetric,
    counter: Option<&CostCounter>,
) -> Result<MiningResult> {
    if negatives.is_empty() {
        return Err(CoreError::InvalidArgument("mining needs at least one negative".into()));
    }
    let center = positive_center(positives)?;
    let dp = positives
        .iter()
        .map(|p| mahalanobis_distance(p, &center, metric))
        .collect::<Result<Vec<_>>>()?;
    let dn = negatives
        .iter()
        .map(|n| mahalanobis_distance(n, &center, metric))
        .collect::<Result<Vec<_>>>()?;
    if let Some(c) = counter {
        c.add_distances((positives.len() + negatives.len()) as u64);
    }
    let nearest = dn.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut kept: Vec<usize> = (0..dp.len()).filter(|&i| dp[i] <= nearest).collect();
    if kept.is_empty() {
        let closest = (0..dp.len())
            .min_by(|&a, &b| dp[a].total_cmp(&dp[b]))
            .expect("positives are non-empty");
        kept.push(closest);
    }
    Ok(MiningResult {
        m_star: kept.len(),
        kept_positive_indices: kept,
        nearest_negative_distance: nearest,
    })
}

/// Lookup tables over a subset of a dataset (typically a training split).
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pool: Vec<usize>,
    by_subject_class: BTreeMap<(usize, usize), Vec<usize>>,
    by_class: BTreeMap<usize, Vec<usize>>,
}

impl DatasetIndex {
    pub fn new(dataset: &Dataset, pool: &[usize]) -> Result<Self> {
        let mut by_subject_class: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &i in pool {
            let s = dataset.samples.get(i).ok_or_else(|| {
                CoreError::InvalidArgument(format!("sample index {i} out of range"))
            })?;
            by_subject_class.entry((s.subject_id, s.class_y)).or_default().push(i);
            by_class.entry(s.class_y).or_default().push(i);
        }
        Ok(Self {
            pool: pool.to_vec(),
            by_subject_class,
            by_class,
        })
    }

    pub fn full(dataset: &Dataset) -> Self {
        let all: Vec<usize> = (0..dataset.len()).collect();
        Self::new(dataset, &all).expect("indices are in range")
    }

    pub fn pool(&self) -> &[usize] {
        &self.pool
    }

    /// Samples of `subject` whose class differs from `class`.
    fn other_classes_of(&self, subject: usize, class: usize) -> Vec<usize> {
        self.by_subject_class
            .range((subject, 0)..=(subject, usize::MAX))
            .filter(|((_, c), _)| *c != class)
            .flat_map(|(_, v)| v.iter().copied())
            .collect()
    }
}

fn choose<R: Rng>(candidates: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    sample(rng, candidates.len(), k)
        .into_iter()
        .map(|i| candidates[i])
        .collect()
}

/// `m` same-class samples drawn uniformly without replacement from other
/// subjects; same-subject samples are used only if other subjects cannot
/// supply `m`.
pub fn sample_positive_set<R: Rng>(
    query: usize,
    dataset: &Dataset,
    index: &DatasetIndex,
    m: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let q = &dataset.samples[query];
    let same_class = index.by_class.get(&q.class_y).map(Vec::as_slice).unwrap_or(&[]);
    let others: Vec<usize> = same_class
        .iter()
        .copied()
        .filter(|&i| dataset.samples[i].subject_id != q.subject_id)
        .collect();
    if others.len() >= m {
        return Ok(choose(&others, m, rng));
    }
    let own: Vec<usize> = same_class
        .iter()
        .copied()
        .filter(|&i| i != query && dataset.samples[i].subject_id == q.subject_id)
        .collect();
    if others.len() + own.len() < m {
        return Err(CoreError::Mining(format!(
            "query {query} (subject {}, class {}) has {} positive candidates, {m} required",
            q.subject_id,
            q.class_y,
            others.len() + own.len()
        )));
    }
    let mut picked = others;
    let extra = m - picked.len();
    picked.extend(choose(&own, extra, rng));
    Ok(picked)
}

/// `n` negatives: other-class samples of the query's own subject, topped up
/// with other-class samples of the positives' subjects. Sampled without
/// replacement when enough candidates exist, otherwise every candidate is
/// used and the remainder drawn with replacement.
pub fn build_negative_set<R: Rng>(
    query: usize,
    positives: &[usize],
    dataset: &Dataset,
    index: &DatasetIndex,
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let q = &dataset.samples[query];
    let mut candidates = index.other_classes_of(q.subject_id, q.class_y);
    if candidates.len() < n {
        let mut seen: BTreeSet<usize> = candidates.iter().copied().collect();
        let subjects: BTreeSet<usize> = positives
            .iter()
            .map(|&p| dataset.samples[p].subject_id)
            .filter(|&s| s != q.subject_id)
            .collect();
        for s in subjects {
            for i in index.other_classes_of(s, q.class_y) {
                if seen.insert(i) {
                    candidates.push(i);
                }
            }
        }
    }
    if candidates.is_empty() {
        return Err(CoreError::Mining(format!(
            "query {query} (subject {}, class {}) has no negative candidates",
            q.subject_id, q.class_y
        )));
    }
    if candidates.len() >= n {
        return Ok(choose(&candidates, n, rng));
    }
    let mut picked = candidates.clone();
    while picked.len() < n {
        picked.push(candidates[rng.random_range(0..candidates.len())]);
    }
    Ok(picked)
}

/// Sample indices of one query-centered tuple, before online mining.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TupleIndices {
    pub query: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl TupleIndices {
    /// Samples this tuple contributes to an iteration (positives and
    /// negatives; the query is itself drawn from the positive class).
    pub fn referenced(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }
}

/// `x` tuples with distinct queries drawn from the index pool.
pub fn assemble_tuplet_batch<R: Rng>(
    dataset: &Dataset,
    index: &DatasetIndex,
    x: usize,
    n: usize,
    m: usize,
    rng: &mut R,
) -> Result<Vec<TupleIndices>> {
    if x == 0 || n == 0 || m == 0 {
        return Err(CoreError::InvalidArgument("tuplet size, N and M must be positive".into()));
    }
    if x > index.pool.len() {
        return Err(CoreError::InvalidArgument(format!(
            "tuplet size {x} exceeds the {} available queries",
            index.pool.len()
        )));
    }
    choose(&index.pool, x, rng)
        .into_iter()
        .map(|query| {
            let positives = sample_positive_set(query, dataset, index, m, rng)?;
            let negatives = build_negative_set(query, &positives, dataset, index, n, rng)?;
            Ok(TupleIndices {
                query,
                positives,
                negatives,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMethod {
    TupleClusters,
    Triplet,
    NPlusOneTuplet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub method: CostMethod,
    pub input_passes: u64,
    pub distance_calculations: u64,
}

fn choose3(x: u64) -> u64 {
    if x < 3 {
        0
    } else {
        x * (x - 1) * (x - 2) / 6
    }
}

pub fn cost_report(x: u64, n: u64, m: u64, method: CostMethod) -> CostReport {
    let (input_passes, distance_calculations) = match method {
        CostMethod::TupleClusters => (x, 2 * (n + m) * x),
        CostMethod::Triplet => (choose3(x), 2 * choose3(x)),
        CostMethod::NPlusOneTuplet => ((x + 1) * x, (x + 1) * x * x),
    };
    CostReport {
        method,
        input_passes,
        distance_calculations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{Dataset, Sample};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn s(subject: usize, class: usize) -> Sample {
        Sample {
            subject_id: subject,
            class_y: class,
            attrs_s: vec![],
            latent_true: vec![],
            features_x: vec![0.0],
        }
    }

    fn ds(samples: Vec<Sample>) -> Dataset {
        Dataset {
            num_classes: 4,
            num_attrs: 0,
            feature_dim: 1,
            samples,
        }
    }

    fn scalars(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn mining_examples() {
        // Center 0; positive distances 0.5, 2.0 and 2.5; nearest negative 1.0.
        let m2 = MahalanobisMetric::identity(2);
        let (a, b) = (0.5f64.sqrt(), 2.0f64.sqrt());
        let p = vec![vec![a, 0.0], vec![0.0, b], vec![-a, -b]];
        let n = vec![vec![0.0, -1.0], vec![3.0, 3.0]];
        let r = mine_positives(&p, &n, &m2).unwrap();
        assert_eq!(r.nearest_negative_distance, 1.0);
        assert_eq!(r.kept_positive_indices, vec![0]);
        assert_eq!(r.m_star, 1);

        let m = MahalanobisMetric::identity(1);
        let all = mine_positives(&scalars(&[-0.1, 0.1]), &scalars(&[5.0]), &m).unwrap();
        assert_eq!(all.kept_positive_indices, vec![0, 1]);

        let fallback = mine_positives(&scalars(&[-3.0, 2.0, 1.0]), &scalars(&[0.1]), &m).unwrap();
        assert_eq!(fallback.kept_positive_indices, vec![2]);
        assert_eq!(fallback.m_star, 1);
    }

    #[test]
    fn ties_are_kept() {
        let m = MahalanobisMetric::identity(1);
        let r = mine_positives(&scalars(&[-1.0, 1.0]), &scalars(&[1.0]), &m).unwrap();
        assert_eq!(r.m_star, 2);
    }

    #[test]
    fn negatives_come_from_query_subject() {
        let data = ds(vec![s(7, 0), s(7, 1), s(7, 2), s(3, 0), s(3, 1), s(4, 0)]);
        let idx = DatasetIndex::full(&data);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let neg = build_negative_set(0, &[3], &data, &idx, 2, &mut rng).unwrap();
        let mut sorted = neg.clone();
        sorted.sort();
        assert_eq!(sorted, vec![1, 2]);
    }

    #[test]
    fn negative_fallback_uses_positive_subjects() {
        let data = ds(vec![s(7, 0), s(3, 0), s(3, 1), s(3, 2), s(4, 1)]);
        let idx = DatasetIndex::full(&data);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let neg = build_negative_set(0, &[1], &data, &idx, 2, &mut rng).unwrap();
        assert!(neg.iter().all(|&i| data.samples[i].subject_id == 3 && data.samples[i].class_y != 0));
    }

    #[test]
    fn single_subject_single_class_fails() {
        let data = ds(vec![s(1, 0), s(1, 0)]);
        let idx = DatasetIndex::full(&data);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = build_negative_set(0, &[1], &data, &idx, 1, &mut rng).unwrap_err();
        assert!(matches!(err, CoreError::Mining(msg) if msg.contains("query 0")));
    }

    #[test]
    fn short_negative_sets_are_padded_to_n() {
        let data = ds(vec![s(1, 0), s(1, 1), s(2, 0)]);
        let idx = DatasetIndex::full(&data);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let neg = build_negative_set(0, &[2], &data, &idx, 3, &mut rng).unwrap();
        assert_eq!(neg, vec![1, 1, 1]);
    }

    #[test]
    fn exactly_m_positive_candidates_are_all_chosen() {
        let data = ds(vec![s(1, 0), s(2, 0), s(3, 0), s(4, 1)]);
        let idx = DatasetIndex::full(&data);
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = sample_positive_set(0, &data, &idx, 2, &mut rng).unwrap();
            p.sort();
            assert_eq!(p, vec![1, 2]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_positive_set(0, &data, &idx, 3, &mut rng),
            Err(CoreError::Mining(_))
        ));
    }

    #[test]
    fn positive_sampling_is_uniform() {
        // 2M candidates, M = 3: each should be picked with frequency 0.5.
        let mut samples = vec![s(0, 0)];
        samples.extend((1..=6).map(|i| s(i, 0)));
        let data = ds(samples);
        let idx = DatasetIndex::full(&data);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut counts = [0usize; 7];
        let draws = 10_000;
        for _ in 0..draws {
            for i in sample_positive_set(0, &data, &idx, 3, &mut rng).unwrap() {
                counts[i] += 1;
            }
        }
        assert_eq!(counts[0], 0);
        for &c in &counts[1..] {
            let f = c as f64 / draws as f64;
            assert!((f - 0.5).abs() <= 0.02, "frequency {f}");
        }
    }

    #[test]
    fn positive_sampling_is_deterministic() {
        let data = ds((0..10).map(|i| s(i, 0)).collect());
        let idx = DatasetIndex::full(&data);
        let a = sample_positive_set(0, &data, &idx, 4, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_positive_set(0, &data, &idx, 4, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cost_examples() {
        let tc = cost_report(12, 6, 6, CostMethod::TupleClusters);
        assert_eq!((tc.input_passes, tc.distance_calculations), (12, 288));
        let t = cost_report(12, 6, 6, CostMethod::Triplet);
        assert_eq!((t.input_passes, t.distance_calculations), (220, 440));
        let np = cost_report(12, 6, 6, CostMethod::NPlusOneTuplet);
        assert_eq!((np.input_passes, np.distance_calculations), (156, 1872));
    }

    fn brute_force(pos: &[Vec<f64>], neg: &[Vec<f64>]) -> Vec<usize> {
        let d = pos[0].len();
        let c: Vec<f64> = (0..d)
            .map(|j| pos.iter().map(|p| p[j]).sum::<f64>() / pos.len() as f64)
            .collect();
        let dist = |f: &Vec<f64>| f.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let nearest = neg.iter().map(dist).fold(f64::INFINITY, f64::min);
        let kept: Vec<usize> = (0..pos.len()).filter(|&i| dist(&pos[i]) <= nearest).collect();
        if kept.is_empty() {
            let mut best = 0;
            for i in 1..pos.len() {
                if dist(&pos[i]) < dist(&pos[best]) {
                    best = i;
                }
            }
            vec![best]
        } else {
            kept
        }
    }

    proptest! {
        #[test]
        fn mining_matches_brute_force(
            pos in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 3), 1..8),
            neg in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 3), 1..8),
        ) {
            let r = mine_positives(&pos, &neg, &MahalanobisMetric::identity(3)).unwrap();
            prop_assert_eq!(r.kept_positive_indices, brute_force(&pos, &neg));
        }
    }

    #[test]
    fn batches_reference_x_times_n_plus_m_samples() {
        let spec = crate::synthdata::IdentitySpec {
            num_subjects: 10,
            repetitions: 3,
            ..Default::default()
        };
        let data = crate::synthdata::gen_identity_expression_dataset(&spec, 1).unwrap();
        let idx = DatasetIndex::full(&data);
        for (n, m, total) in [(6, 6, 144), (5, 5, 120)] {
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let batch = assemble_tuplet_batch(&data, &idx, 12, n, m, &mut rng).unwrap();
            assert_eq!(batch.len(), 12);
            assert_eq!(batch.iter().map(TupleIndices::referenced).sum::<usize>(), total);
            for t in &batch {
                let q = &data.samples[t.query];
                for &j in &t.negatives {
                    assert_eq!(data.samples[j].subject_id, q.subject_id);
                    assert_ne!(data.samples[j].class_y, q.class_y);
                }
            }
        }
    }

    #[test]
    fn batches_are_seed_deterministic_and_seed_sensitive() {
        let data = crate::synthdata::gen_identity_expression_dataset(&Default::default(), 3).unwrap();
        let idx = DatasetIndex::full(&data);
        let run = |seed| assemble_tuplet_batch(&data, &idx, 12, 6, 6, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(run(1), run(1));
        let distinct: BTreeSet<_> = (0..10).map(|s| format!("{:?}", run(s))).collect();
        assert_eq!(distinct.len(), 10);
    }
}
