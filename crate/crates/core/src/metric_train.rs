//! Joint softmax + metric-loss training of the two-branch network on
//! identity-structured data, with instrumented cost counters and 1-NN
//! evaluation on held-out subjects.

use disent_tensor::{Axis, Graph, NodeId, Optimizer, ParamStore, Sgd, SgdConfig, Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::{joint_objective_graph, JointWeights, MahalanobisMetric, TwoBranchConfig, TwoBranchNet};
use crate::error::{CoreError, Result};
use crate::metric_losses::{
    adaptive_graph, ccl_graph, n_plus_one_graph, triplet_graph, tuple_clusters_graph, AdaptiveParams,
    CenterMode, FixedThreshold, LossKind,
};
use crate::mining::{assemble_tuplet_batch, mine_positives_counted, CostCounter, DatasetIndex, MiningResult};
use crate::nn::{rows_of, Mode};
use crate::synthdata::{subject_independent_split, Dataset, IdentitySpec};

/// Name of the trainable reference distance in fixed-threshold mode.
pub const THRESHOLD_PARAM: &str = "threshold.t";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningConfig {
    /// Queries per iteration (X).
    pub tuplet_size: usize,
    /// Negatives per query (N).
    pub n: usize,
    /// Positives per query (M).
    pub m: usize,
    pub enabled: bool,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            tuplet_size: 12,
            n: 6,
            m: 6,
            enabled: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptiveConfig {
    pub rank_a: usize,
    pub rank_b: usize,
    pub init_b: f64,
    pub init_scale: f64,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            rank_a: 4,
            rank_b: 4,
            init_b: 1.0,
            init_scale: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricTrainConfig {
    pub seed: u64,
    pub data: IdentitySpec,
    pub folds: usize,
    pub test_fold: usize,
    pub net: TwoBranchConfig,
    pub loss: LossKind,
    pub threshold: FixedThreshold,
    pub trainable_threshold: bool,
    pub center_mode: CenterMode,
    pub adaptive: AdaptiveConfig,
    pub mining: MiningConfig,
    pub weights: JointWeights,
    pub optimizer: SgdConfig,
    pub iters: usize,
    pub log_every: usize,
}

impl Default for MetricTrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: IdentitySpec::default(),
            folds: 5,
            test_fold: 0,
            net: TwoBranchConfig::default(),
            loss: LossKind::TupleClusters,
            threshold: FixedThreshold { t: 1.0, tau: 1.0 },
            trainable_threshold: false,
            center_mode: CenterMode::Mined,
            adaptive: AdaptiveConfig::default(),
            mining: MiningConfig::default(),
            weights: JointWeights::default(),
            optimizer: SgdConfig {
                lr: 0.001,
                momentum: 0.9,
                weight_decay: 0.01,
            },
            iters: 1500,
            log_every: 50,
        }
    }
}

impl MetricTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.threshold.validate()?;
        self.weights.validate()?;
        let m = &self.mining;
        if m.tuplet_size == 0 || m.n == 0 || m.m == 0 {
            return Err(CoreError::InvalidArgument("tuplet_size, n and m must be positive".into()));
        }
        if self.net.input_dim != self.data.feature_dim || self.net.num_classes != self.data.num_classes {
            return Err(CoreError::InvalidArgument(format!(
                "network expects {} features and {} classes but the data has {} and {}",
                self.net.input_dim, self.net.num_classes, self.data.feature_dim, self.data.num_classes
            )));
        }
        if self.test_fold >= self.folds {
            return Err(CoreError::InvalidArgument(format!(
                "test_fold {} out of range for {} folds",
                self.test_fold, self.folds
            )));
        }
        if self.log_every == 0 {
            return Err(CoreError::InvalidArgument("log_every must be positive".into()));
        }
        Ok(())
    }
}

/// Values from one training iteration; counters are cumulative.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricStepStats {
    pub iter: usize,
    pub loss: f64,
    pub softmax_loss: f64,
    pub metric_loss: f64,
    pub mean_m_star: f64,
    pub input_passes: u64,
    pub distance_calculations: u64,
}

pub(crate) fn diverged(err: CoreError, component: &str, iter: usize) -> CoreError {
    match err {
        CoreError::Tensor(TensorError::NonFinite { .. }) => CoreError::Divergence {
            component: component.to_string(),
            iter,
        },
        other => other,
    }
}

pub struct MetricTrainer {
    pub config: MetricTrainConfig,
    pub net: TwoBranchNet,
    pub params: ParamStore,
    pub counter: CostCounter,
    metric: MahalanobisMetric,
    optimizer: Sgd,
    rng: ChaCha8Rng,
}

impl MetricTrainer {
    pub fn new(config: MetricTrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let net = TwoBranchNet::new(config.net.clone());
        let mut params = net.init(&mut rng);
        match config.loss {
            LossKind::AdaptiveTupleClusters => {
                let a = &config.adaptive;
                AdaptiveParams::init(config.net.embed_dim, a.rank_a, a.rank_b, a.init_b, a.init_scale, &mut rng)
                    .write_to(&mut params);
            }
            LossKind::TupleClusters if config.trainable_threshold => {
                params.insert(THRESHOLD_PARAM, Tensor::scalar(config.threshold.t)?);
            }
            _ => {}
        }
        Ok(Self {
            metric: MahalanobisMetric::identity(config.net.embed_dim),
            optimizer: Sgd::new(config.optimizer),
            net,
            params,
            counter: CostCounter::new(),
            rng,
            config,
        })
    }

    /// One iteration: assemble X tuples, forward each tuple once, mine,
    /// evaluate the joint objective and take one SGD step.
    pub fn step(&mut self, dataset: &Dataset, index: &DatasetIndex, iter: usize) -> Result<MetricStepStats> {
        self.try_step(dataset, index, iter).map_err(|e| diverged(e, "metric", iter))
    }

    fn try_step(&mut self, dataset: &Dataset, index: &DatasetIndex, iter: usize) -> Result<MetricStepStats> {
        let mc = self.config.mining.clone();
        let tuples = assemble_tuplet_batch(dataset, index, mc.tuplet_size, mc.n, mc.m, &mut self.rng)?;
        let mut g = Graph::new();
        let adaptive = match self.config.loss {
            LossKind::AdaptiveTupleClusters => Some(AdaptiveParams::nodes(&mut g, &self.params, true)?),
            _ => None,
        };
        let threshold = if self.params.contains(THRESHOLD_PARAM) {
            g.param(&self.params, THRESHOLD_PARAM)?
        } else {
            g.constant_scalar(self.config.threshold.t)?
        };
        let tau = self.config.threshold.tau;
        let (m, n) = (mc.m, mc.n);
        let mut softmax_terms = Vec::with_capacity(tuples.len());
        let mut metric_terms = Vec::with_capacity(tuples.len());
        let mut m_star_total = 0usize;
        for t in &tuples {
            let mut idx = vec![t.query];
            idx.extend(&t.positives);
            idx.extend(&t.negatives);
            let labels: Vec<usize> = idx.iter().map(|&i| dataset.samples[i].class_y).collect();
            let x = g.input(Tensor::from_rows(&dataset.features(&idx))?)?;
            self.counter.add_passes(1);
            let out = self.net.forward(&mut g, &self.params, x, Mode::Train)?;
            softmax_terms.push(g.softmax_cross_entropy(out.logits, &labels)?);

            let e = out.embedding;
            let q = g.slice(e, Axis::Rows, 0, 1)?;
            let pos = g.slice(e, Axis::Rows, 1, 1 + m)?;
            let neg = g.slice(e, Axis::Rows, 1 + m, 1 + m + n)?;
            let mined = |g: &Graph, counter: &CostCounter| -> Result<MiningResult> {
                if mc.enabled {
                    mine_positives_counted(&rows_of(g.value(pos)), &rows_of(g.value(neg)), &self.metric, Some(counter))
                } else {
                    Ok(MiningResult::keep_all(m))
                }
            };
            let term = match self.config.loss {
                LossKind::Triplet => {
                    let p0 = g.slice(pos, Axis::Rows, 0, 1)?;
                    let n0 = g.slice(neg, Axis::Rows, 0, 1)?;
                    self.counter.add_distances(2);
                    triplet_graph(&mut g, q, p0, n0, tau, &self.metric)?
                }
                LossKind::NPlusOne => {
                    let p0 = g.slice(pos, Axis::Rows, 0, 1)?;
                    self.counter.add_distances(1 + n as u64);
                    n_plus_one_graph(&mut g, q, p0, neg, tau, &self.metric)?
                }
                LossKind::Ccl => {
                    self.counter.add_distances((m + n) as u64);
                    ccl_graph(&mut g, pos, neg, tau, &self.metric)?
                }
                LossKind::TupleClusters => {
                    let r = mined(&g, &self.counter)?;
                    m_star_total += r.m_star;
                    self.counter.add_distances((m + n) as u64);
                    tuple_clusters_graph(
                        &mut g,
                        pos,
                        neg,
                        &r.mask(m),
                        threshold,
                        tau,
                        &self.metric,
                        self.config.center_mode,
                    )?
                }
                LossKind::AdaptiveTupleClusters => {
                    let r = mined(&g, &self.counter)?;
                    m_star_total += r.m_star;
                    self.counter.add_distances((m + n) as u64);
                    let nodes = adaptive.as_ref().expect("adaptive parameters are registered");
                    adaptive_graph(&mut g, pos, neg, &r.mask(m), nodes, self.config.center_mode)?
                }
            };
            metric_terms.push(term);
        }
        let softmax = mean_of(&mut g, &softmax_terms)?;
        let metric = mean_of(&mut g, &metric_terms)?;
        let total = joint_objective_graph(&mut g, softmax, metric, &self.config.weights)?;
        let grads = g.backward(total)?;
        self.optimizer.step(&mut self.params, &grads)?;
        let loss = g.scalar(total)?;
        if !loss.is_finite() {
            return Err(CoreError::Divergence {
                component: "metric".into(),
                iter,
            });
        }
        Ok(MetricStepStats {
            iter,
            loss,
            softmax_loss: g.scalar(softmax)?,
            metric_loss: g.scalar(metric)?,
            mean_m_star: m_star_total as f64 / tuples.len() as f64,
            input_passes: self.counter.input_passes(),
            distance_calculations: self.counter.distance_calculations(),
        })
    }

    pub fn embed(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.net.embed(&self.params, rows)
    }
}

fn mean_of(g: &mut Graph, terms: &[NodeId]) -> Result<NodeId> {
    let stacked = g.concat(terms, Axis::Rows)?;
    Ok(g.mean(stacked, None)?)
}

/// Fraction of `test` rows whose nearest `train` row (squared Euclidean,
/// first index on ties) carries the same label.
pub fn nn1_accuracy(train: &[Vec<f64>], train_labels: &[usize], test: &[Vec<f64>], test_labels: &[usize]) -> Result<f64> {
    if train.is_empty() || test.is_empty() || train.len() != train_labels.len() || test.len() != test_labels.len() {
        return Err(CoreError::InvalidArgument("1-NN needs non-empty, labelled train and test sets".into()));
    }
    let mut correct = 0usize;
    for (q, &label) in test.iter().zip(test_labels) {
        let mut best = (f64::INFINITY, 0usize);
        for (j, r) in train.iter().enumerate() {
            let d: f64 = q.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, j);
            }
        }
        if train_labels[best.1] == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

fn labels(dataset: &Dataset, idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| dataset.samples[i].class_y).collect()
}

pub fn raw_nn1_accuracy(dataset: &Dataset, train: &[usize], test: &[usize]) -> Result<f64> {
    nn1_accuracy(
        &dataset.features(train),
        &labels(dataset, train),
        &dataset.features(test),
        &labels(dataset, test),
    )
}

pub struct MetricRunResult {
    pub params: ParamStore,
    pub log: Vec<MetricStepStats>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub nn1_accuracy: f64,
    pub raw_nn1_accuracy: f64,
}

/// Trains on every fold except `test_fold` and reports class 1-NN accuracy
/// on the held-out subjects, in the learned embedding and on raw features.
pub fn train_metric(config: &MetricTrainConfig, dataset: &Dataset) -> Result<MetricRunResult> {
    train_metric_logged(config, dataset, |_| Ok(()))
}

/// Like [`train_metric`], but hands every logged row to `on_log` as soon as
/// it is produced.
pub fn train_metric_logged(
    config: &MetricTrainConfig,
    dataset: &Dataset,
    mut on_log: impl FnMut(&MetricStepStats) -> Result<()>,
) -> Result<MetricRunResult> {
    let mut trainer = MetricTrainer::new(config.clone())?;
    let folds = subject_independent_split(dataset, config.folds, config.seed)?;
    let train = folds.train_indices(config.test_fold);
    let test = folds.samples[config.test_fold].clone();
    let index = DatasetIndex::new(dataset, &train)?;
    let mut log = Vec::new();
    for iter in 0..config.iters {
        let stats = trainer.step(dataset, &index, iter)?;
        if iter % config.log_every == 0 || iter + 1 == config.iters {
            on_log(&stats)?;
            log.push(stats);
        }
    }
    let train_emb = trainer.embed(&dataset.features(&train))?;
    let test_emb = trainer.embed(&dataset.features(&test))?;
    let nn1 = nn1_accuracy(&train_emb, &labels(dataset, &train), &test_emb, &labels(dataset, &test))?;
    Ok(MetricRunResult {
        raw_nn1_accuracy: raw_nn1_accuracy(dataset, &train, &test)?,
        nn1_accuracy: nn1,
        params: trainer.params,
        log,
        train_indices: train,
        test_indices: test,
    })
}
