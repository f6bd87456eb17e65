//! Feature-level Frankenstein: six networks splitting an input into a
//! discriminative code `d`, a latent code `l` and the given attributes `s`.
//!
//! `E_d` is trained to keep `y` (through `C_d`) while fooling the attribute
//! discriminator `Dis`; `E_l` is trained to fool the inverse classifier
//! `C_l`; `Dec` rebuilds `x` from `(d, s, l)`.

use std::collections::BTreeMap;

use disent_tensor::{Adam, AdamConfig, Axis, Gradients, Graph, NodeId, Optimizer, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::metric_train::diverged;
use crate::nn::{rows_of, Mlp, Mode};
use crate::synthdata::{gen_factor_dataset, random_split, Dataset, FactorSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Dis,
    CL,
    CD,
    ED,
    EL,
    Dec,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Dis,
        Component::CL,
        Component::CD,
        Component::ED,
        Component::EL,
        Component::Dec,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Component::Dis => "dis.",
            Component::CL => "c_l.",
            Component::CD => "c_d.",
            Component::ED => "e_d.",
            Component::EL => "e_l.",
            Component::Dec => "dec.",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::Dis => "Dis",
            Component::CL => "C_l",
            Component::CD => "C_d",
            Component::ED => "E_d",
            Component::EL => "E_l",
            Component::Dec => "Dec",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub alpha_max: f64,
    pub ramp_iters: usize,
    /// Reconstruction weight in the `E_d` objective.
    pub beta: f64,
    /// Reconstruction weight in the `E_l` objective.
    pub lambda: f64,
    pub adam: AdamConfig,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            alpha_max: 0.5,
            ramp_iters: 5000,
            beta: 0.1,
            lambda: 0.5,
            adam: AdamConfig::default(),
        }
    }
}

/// `alpha_max · min(1, iter / ramp_iters)`.
pub fn alpha_schedule(iter: usize, schedule: &TrainSchedule) -> Result<f64> {
    if schedule.ramp_iters == 0 {
        return Err(CoreError::InvalidArgument("ramp_iters must be positive".into()));
    }
    let frac = (iter as f64 / schedule.ramp_iters as f64).min(1.0);
    Ok(schedule.alpha_max * frac)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlfDims {
    pub input_dim: usize,
    pub num_attrs: usize,
    pub num_classes: usize,
    pub dim_d: usize,
    pub dim_l: usize,
    pub hidden: usize,
}

impl Default for FlfDims {
    fn default() -> Self {
        Self {
            input_dim: 16,
            num_attrs: 2,
            num_classes: 5,
            dim_d: 8,
            dim_l: 8,
            hidden: 32,
        }
    }
}

/// The six networks and their parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FlfModel {
    pub dims: FlfDims,
    pub e_d: Mlp,
    pub e_l: Mlp,
    pub dec: Mlp,
    pub dis: Mlp,
    pub c_d: Mlp,
    pub c_l: Mlp,
    pub params: ParamStore,
}

/// One training batch; `s` holds the attribute bits as 0/1 floats.
#[derive(Clone, Debug, PartialEq)]
pub struct FlfBatch {
    pub x: Tensor,
    pub s: Tensor,
    pub y: Vec<usize>,
}

impl FlfBatch {
    pub fn from_dataset(dataset: &Dataset, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(CoreError::InvalidArgument("empty batch".into()));
        }
        let x = Tensor::from_rows(&dataset.features(indices))?;
        let s_rows: Vec<Vec<f64>> = indices
            .iter()
            .map(|&i| dataset.samples[i].attrs_s.iter().map(|&b| f64::from(b)).collect())
            .collect();
        let s = if dataset.num_attrs == 0 {
            Tensor::zeros(&[indices.len(), 0])
        } else {
            Tensor::from_rows(&s_rows)?
        };
        let y = indices.iter().map(|&i| dataset.samples[i].class_y).collect();
        Ok(Self { x, s, y })
    }
}

/// Recorded losses of one forward pass.
struct Losses {
    loss_cd: NodeId,
    loss_dis: NodeId,
    loss_cl: NodeId,
    loss_rec: Option<NodeId>,
}

impl FlfModel {
    pub fn new<R: Rng>(dims: FlfDims, rng: &mut R) -> Result<Self> {
        let FlfDims {
            input_dim: x,
            num_attrs: n,
            num_classes: k,
            dim_d,
            dim_l,
            hidden: h,
        } = dims;
        if x == 0 || n == 0 || k < 2 || dim_d == 0 || dim_l == 0 || h == 0 {
            return Err(CoreError::InvalidArgument(format!("invalid FLF dimensions {dims:?}")));
        }
        let e_d = Mlp::new("e_d", &[x, h, h, dim_d]);
        let e_l = Mlp::new("e_l", &[x, h, h, dim_l]);
        let dec = Mlp::new("dec", &[dim_d + n + dim_l, h, h, x]);
        let dis = Mlp::new("dis", &[dim_d, h, h, n]);
        let c_d = Mlp::new("c_d", &[dim_d, h, h, k]);
        let c_l = Mlp::new("c_l", &[dim_l, h, h, k]);
        let mut params = ParamStore::new();
        for m in [&e_d, &e_l, &dec, &dis, &c_d, &c_l] {
            m.init(&mut params, rng);
        }
        Ok(Self {
            dims,
            e_d,
            e_l,
            dec,
            dis,
            c_d,
            c_l,
            params,
        })
    }

    /// Rebuilds a model around saved parameters, checking that every
    /// expected tensor is present with the right shape.
    pub fn from_params(dims: FlfDims, params: ParamStore) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(dims, &mut rng)?;
        if params.len() != model.params.len() {
            return Err(CoreError::Format(format!(
                "checkpoint holds {} tensors, the model needs {}",
                params.len(),
                model.params.len()
            )));
        }
        for (name, t) in model.params.iter() {
            let saved = params
                .get(name)
                .map_err(|_| CoreError::Format(format!("checkpoint lacks {name}")))?;
            if saved.shape() != t.shape() {
                return Err(CoreError::Format(format!(
                    "{name} has shape {:?} in the checkpoint, expected {:?}",
                    saved.shape(),
                    t.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn network(&self, c: Component) -> &Mlp {
        match c {
            Component::Dis => &self.dis,
            Component::CL => &self.c_l,
            Component::CD => &self.c_d,
            Component::ED => &self.e_d,
            Component::EL => &self.e_l,
            Component::Dec => &self.dec,
        }
    }

    /// `(d, l)` for every input row.
    pub fn encode_decompose(&self, x: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        Ok((self.e_d.apply(&self.params, x)?, self.e_l.apply(&self.params, x)?))
    }

    /// Records all four losses. `trainable` selects which components'
    /// parameters receive gradients; `with_rec` skips the decoder when false.
    fn record(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        batch: &FlfBatch,
        trainable: &[Component],
        with_rec: bool,
    ) -> Result<Losses> {
        let mode = |c: Component| {
            if trainable.contains(&c) {
                Mode::Train
            } else {
                Mode::Frozen
            }
        };
        let x = g.input(batch.x.clone())?;
        let d = self.e_d.forward(g, params, x, mode(Component::ED))?;
        let l = self.e_l.forward(g, params, x, mode(Component::EL))?;
        let cd_logits = self.c_d.forward(g, params, d, mode(Component::CD))?;
        let loss_cd = g.softmax_cross_entropy(cd_logits, &batch.y)?;
        let dis_logits = self.dis.forward(g, params, d, mode(Component::Dis))?;
        let loss_dis = g.binary_cross_entropy(dis_logits, &batch.s)?;
        let cl_logits = self.c_l.forward(g, params, l, mode(Component::CL))?;
        let loss_cl = g.softmax_cross_entropy(cl_logits, &batch.y)?;
        let loss_rec = if with_rec {
            let s = g.input(batch.s.clone())?;
            let z = g.concat(&[d, s, l], Axis::Cols)?;
            let xh = self.dec.forward(g, params, z, mode(Component::Dec))?;
            Some(g.squared_error(xh, &batch.x)?)
        } else {
            None
        };
        Ok(Losses {
            loss_cd,
            loss_dis,
            loss_cl,
            loss_rec,
        })
    }

    fn eval(&self, batch: &FlfBatch, pick: impl Fn(&Losses) -> NodeId, with_rec: bool) -> Result<f64> {
        let mut g = Graph::new();
        let losses = self.record(&mut g, &self.params, batch, &[], with_rec)?;
        Ok(g.scalar(pick(&losses))?)
    }

    /// `−log p_{C_d}(y | E_d(x))`, batch mean.
    pub fn loss_cd(&self, batch: &FlfBatch) -> Result<f64> {
        self.eval(batch, |l| l.loss_cd, false)
    }

    /// Summed per-attribute binary cross-entropy of `Dis(E_d(x))`, batch mean.
    pub fn loss_dis(&self, batch: &FlfBatch) -> Result<f64> {
        self.eval(batch, |l| l.loss_dis, false)
    }

    /// `−log p_{C_l}(y | E_l(x))`, batch mean.
    pub fn loss_cl(&self, batch: &FlfBatch) -> Result<f64> {
        self.eval(batch, |l| l.loss_cl, false)
    }

    /// Mean squared error of `Dec(d, s, l)` against `x`.
    pub fn loss_rec(&self, batch: &FlfBatch) -> Result<f64> {
        self.eval(batch, |l| l.loss_rec.expect("recorded"), true)
    }

    /// Builds the objective `component` minimizes, with every other
    /// component frozen. Returns the graph and the objective node.
    pub fn objective_graph(
        &self,
        component: Component,
        batch: &FlfBatch,
        alpha: f64,
        schedule: &TrainSchedule,
    ) -> Result<(Graph, NodeId)> {
        let mut g = Graph::new();
        let out = self.record_objective(&mut g, &self.params, component, batch, alpha, schedule)?;
        Ok((g, out))
    }

    /// Records the objective of `component` into `g`, reading parameters
    /// from `params` instead of the model's own store. Only `component`'s
    /// parameters are trainable leaves.
    pub fn record_objective(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        component: Component,
        batch: &FlfBatch,
        alpha: f64,
        schedule: &TrainSchedule,
    ) -> Result<NodeId> {
        let with_rec = matches!(component, Component::ED | Component::EL | Component::Dec);
        let losses = self.record(g, params, batch, &[component], with_rec)?;
        objective(g, component, &losses, alpha, schedule)
    }

    /// `∂loss_dis/∂d` at the batch, used to inspect the adversarial coupling.
    pub fn dis_gradient_wrt_code(&self, batch: &FlfBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(batch.x.clone())?;
        let d = self.e_d.forward(&mut g, &self.params, x, Mode::Frozen)?;
        // Route d through a trainable leaf so the backward pass reports it.
        let mut probe = ParamStore::new();
        probe.insert("code", g.value(d).clone());
        let code = g.param(&probe, "code")?;
        let logits = self.dis.forward(&mut g, &self.params, code, Mode::Frozen)?;
        let loss = g.binary_cross_entropy(logits, &batch.s)?;
        let grads = g.backward(loss)?;
        Ok(grads.get("code").expect("code is a parameter").clone())
    }
}

fn objective(
    g: &mut Graph,
    component: Component,
    losses: &Losses,
    alpha: f64,
    schedule: &TrainSchedule,
) -> Result<NodeId> {
    let rec = || losses.loss_rec.expect("reconstruction recorded");
    Ok(match component {
        Component::Dis => losses.loss_dis,
        Component::CL => losses.loss_cl,
        Component::CD => losses.loss_cd,
        Component::ED => {
            let adv = g.scale(losses.loss_dis, -alpha)?;
            let r = g.scale(rec(), schedule.beta)?;
            let o = g.add(losses.loss_cd, adv)?;
            g.add(o, r)?
        }
        Component::EL => {
            let adv = g.scale(losses.loss_cl, -1.0)?;
            let r = g.scale(rec(), schedule.lambda)?;
            g.add(adv, r)?
        }
        Component::Dec => rec(),
    })
}

/// Loss values observed during one training step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlfStepLosses {
    pub iter: usize,
    pub loss_cd: f64,
    pub loss_dis: f64,
    pub loss_cl: f64,
    pub loss_rec: f64,
    pub alpha_adv: f64,
    pub objective_ed: f64,
    pub objective_el: f64,
}

impl FlfStepLosses {
    /// The six per-component objective values, in update order.
    pub fn component_objectives(&self) -> [(Component, f64); 6] {
        [
            (Component::Dis, self.loss_dis),
            (Component::CL, self.loss_cl),
            (Component::CD, self.loss_cd),
            (Component::ED, self.objective_ed),
            (Component::EL, self.objective_el),
            (Component::Dec, self.loss_rec),
        ]
    }
}

pub struct FlfTrainer {
    pub model: FlfModel,
    pub schedule: TrainSchedule,
    /// Keep `C_d` out of the `E_d` update instead of letting it take a second
    /// step on `loss_cd` there.
    pub detach_cd: bool,
    optimizers: BTreeMap<Component, Adam>,
}

fn check_finite(v: f64, c: Component, iter: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(CoreError::Divergence {
            component: c.name().into(),
            iter,
        })
    }
}

impl FlfTrainer {
    pub fn new(model: FlfModel, schedule: TrainSchedule, detach_cd: bool) -> Result<Self> {
        alpha_schedule(0, &schedule)?;
        let optimizers = Component::ALL
            .iter()
            .map(|&c| (c, Adam::new(schedule.adam)))
            .collect();
        Ok(Self {
            model,
            schedule,
            detach_cd,
            optimizers,
        })
    }

    fn apply(&mut self, c: Component, grads: &Gradients) -> Result<()> {
        let mine = grads.clone().retain_prefix(c.prefix());
        let opt = self.optimizers.get_mut(&c).expect("one optimizer per component");
        opt.step(&mut self.model.params, &mine)?;
        Ok(())
    }

    /// One Adam step on a single component's objective, all others frozen.
    /// Returns the objective value before the step.
    pub fn component_step(&mut self, c: Component, batch: &FlfBatch, iter: usize) -> Result<f64> {
        let alpha = alpha_schedule(iter, &self.schedule)?;
        let run = |t: &mut Self| -> Result<f64> {
            let (g, out) = t.model.objective_graph(c, batch, alpha, &t.schedule)?;
            let v = check_finite(g.scalar(out)?, c, iter)?;
            let grads = g.backward(out)?;
            t.apply(c, &grads)?;
            Ok(v)
        };
        run(self).map_err(|e| diverged(e, c.name(), iter))
    }

    /// One full iteration: critics `Dis`, `C_l`, `C_d` each take a step on
    /// their own loss, then `E_d`, `E_l` and `Dec` take a step on their
    /// objectives against the updated critics.
    pub fn step(&mut self, batch: &FlfBatch, iter: usize) -> Result<FlfStepLosses> {
        let alpha = alpha_schedule(iter, &self.schedule)?;

        // Critics: encoders frozen. The three losses touch disjoint
        // parameter sets, so one backward pass of their sum gives each
        // critic exactly the gradient of its own loss.
        let critics = [Component::Dis, Component::CL, Component::CD];
        let mut g = Graph::new();
        let l = self
            .model
            .record(&mut g, &self.model.params, batch, &critics, false)
            .map_err(|e| diverged(e, "critics", iter))?;
        let loss_dis = check_finite(g.scalar(l.loss_dis)?, Component::Dis, iter)?;
        let loss_cl = check_finite(g.scalar(l.loss_cl)?, Component::CL, iter)?;
        let loss_cd = check_finite(g.scalar(l.loss_cd)?, Component::CD, iter)?;
        let sum = g.add(l.loss_dis, l.loss_cl)?;
        let sum = g.add(sum, l.loss_cd)?;
        let grads = g.backward(sum).map_err(|e| diverged(e.into(), "critics", iter))?;
        for c in critics {
            self.apply(c, &grads)?;
        }

        // Generators against the updated critics.
        let mut trainable = vec![Component::ED, Component::EL, Component::Dec];
        if !self.detach_cd {
            trainable.push(Component::CD);
        }
        let mut g = Graph::new();
        let l = self
            .model
            .record(&mut g, &self.model.params, batch, &trainable, true)
            .map_err(|e| diverged(e, "generators", iter))?;
        let obj_ed = objective(&mut g, Component::ED, &l, alpha, &self.schedule)?;
        let obj_el = objective(&mut g, Component::EL, &l, alpha, &self.schedule)?;
        let rec = l.loss_rec.expect("reconstruction recorded");
        let objective_ed = check_finite(g.scalar(obj_ed)?, Component::ED, iter)?;
        let objective_el = check_finite(g.scalar(obj_el)?, Component::EL, iter)?;
        let loss_rec = check_finite(g.scalar(rec)?, Component::Dec, iter)?;

        let ged = g.backward(obj_ed).map_err(|e| diverged(e.into(), "E_d", iter))?;
        let gel = g.backward(obj_el).map_err(|e| diverged(e.into(), "E_l", iter))?;
        let gdec = g.backward(rec).map_err(|e| diverged(e.into(), "Dec", iter))?;
        self.apply(Component::ED, &ged)?;
        if !self.detach_cd {
            self.apply(Component::CD, &ged)?;
        }
        self.apply(Component::EL, &gel)?;
        self.apply(Component::Dec, &gdec)?;

        Ok(FlfStepLosses {
            iter,
            loss_cd,
            loss_dis,
            loss_cl,
            loss_rec,
            alpha_adv: alpha,
            objective_ed,
            objective_el,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlfConfig {
    pub seed: u64,
    pub data: FactorSpec,
    pub n_samples: usize,
    pub test_fraction: f64,
    pub dim_d: usize,
    pub dim_l: usize,
    pub hidden: usize,
    pub schedule: TrainSchedule,
    pub iters: usize,
    pub batch_size: usize,
    pub log_every: usize,
    pub detach_cd: bool,
}

impl Default for FlfConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: FactorSpec::default(),
            n_samples: 4000,
            test_fraction: 0.25,
            dim_d: 8,
            dim_l: 8,
            hidden: 32,
            schedule: TrainSchedule::default(),
            iters: 20000,
            batch_size: 64,
            log_every: 50,
            detach_cd: false,
        }
    }
}

impl FlfConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        alpha_schedule(0, &self.schedule)?;
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(CoreError::InvalidArgument("test_fraction must lie in (0, 1)".into()));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(CoreError::InvalidArgument("batch_size and log_every must be positive".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> FlfDims {
        FlfDims {
            input_dim: self.data.feature_dim,
            num_attrs: self.data.num_attrs,
            num_classes: self.data.num_classes,
            dim_d: self.dim_d,
            dim_l: self.dim_l,
            hidden: self.hidden,
        }
    }

    pub fn dataset(&self) -> Result<Dataset> {
        gen_factor_dataset(&self.data, self.n_samples, self.seed)
    }

    /// Seeded train/test split of the generated dataset.
    /// Train/test split of a dataset with `n` samples.
    pub fn split_of(&self, n: usize) -> (Vec<usize>, Vec<usize>) {
        random_split(n, self.test_fraction, self.seed)
    }

    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        self.split_of(self.n_samples)
    }
}

pub struct FlfRunResult {
    pub model: FlfModel,
    pub log: Vec<FlfStepLosses>,
}

/// Trains on `train` with minibatches drawn uniformly with replacement.
pub fn train_flf(config: &FlfConfig, dataset: &Dataset, train: &[usize]) -> Result<FlfRunResult> {
    let mut log = Vec::new();
    let model = train_flf_logged(config, dataset, train, |row| {
        log.push(row.clone());
        Ok(())
    })?;
    Ok(FlfRunResult { model, log })
}

/// Like [`train_flf`], but hands every logged row to `on_log` as soon as it
/// is produced, so callers keep the rows written before a failure.
pub fn train_flf_logged(
    config: &FlfConfig,
    dataset: &Dataset,
    train: &[usize],
    mut on_log: impl FnMut(&FlfStepLosses) -> Result<()>,
) -> Result<FlfModel> {
    config.validate()?;
    if train.is_empty() {
        return Err(CoreError::InvalidArgument("empty training split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_f1f0);
    let model = FlfModel::new(config.dims(), &mut rng)?;
    let mut trainer = FlfTrainer::new(model, config.schedule.clone(), config.detach_cd)?;
    let mut idx = vec![0usize; config.batch_size];
    for iter in 0..config.iters {
        for slot in idx.iter_mut() {
            *slot = train[rng.random_range(0..train.len())];
        }
        let batch = FlfBatch::from_dataset(dataset, &idx)?;
        let losses = trainer.step(&batch, iter)?;
        if iter % config.log_every == 0 || iter + 1 == config.iters {
            on_log(&losses)?;
        }
    }
    Ok(trainer.model)
}

/// Code rows for `indices`: `(d, l)`.
pub fn encode_rows(model: &FlfModel, dataset: &Dataset, indices: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let x = Tensor::from_rows(&dataset.features(indices))?;
    model.encode_decompose(&rows_of(&x))
}
