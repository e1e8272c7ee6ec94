//! The flow emulator: a time-conditioned network trained by regression on
//! interpolant targets, sampled by integrating its probability-flow ODE from
//! noise (t = 1) to data (t = 0), with exact likelihoods from the
//! divergence integral.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::coupling::{couple, CouplingMode};
use crate::densities::TargetDensity;
use crate::diffnet::{
    params_hash, Activation, Adam, Checkpoint, EmaShadow, InferenceWeights, Mlp, MlpSpec,
    PlateauScheduler,
};
use crate::error::{invalid, Error, Result};
use crate::interpolant::{Schedule, ENDPOINT_T_MIN, T_EPS};
use crate::ode::{integrate_batch, integrate_with_logdet, DivergenceMode, Dynamics, OdeOptions};
use crate::stream_rng;

/// Trajectories integrated together with shared step sizes.
pub const SAMPLE_CHUNK: usize = 500;
pub const FLOW_CHECKPOINT_KIND: &str = "flow";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// The network output is dx/dt.
    VectorField,
    /// The network output is a prediction of the data endpoint.
    Endpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmulatorObjective {
    VectorField,
    Endpoint,
    Cfm,
}

/// Source of data batches `x0`.
pub trait DataSource {
    fn dim(&self) -> usize;
    fn draw(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f64>>;
}

impl DataSource for TargetDensity {
    fn dim(&self) -> usize {
        TargetDensity::dim(self)
    }

    fn draw(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
        self.sample(n, rng)
    }
}

/// A fixed sample set served in shuffled passes without replacement.
#[derive(Debug, Clone)]
pub struct Dataset {
    data: Array2<f64>,
    order: Vec<usize>,
    cursor: usize,
}

impl Dataset {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(invalid("dataset is empty"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset entries".into()));
        }
        let n = data.nrows();
        Ok(Dataset {
            data,
            order: (0..n).collect(),
            cursor: n,
        })
    }

    pub fn data(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }
}

impl DataSource for Dataset {
    fn dim(&self) -> usize {
        self.data.ncols()
    }

    fn draw(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
        let mut rows = Vec::with_capacity(n);
        while rows.len() < n {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            let take = (n - rows.len()).min(self.order.len() - self.cursor);
            rows.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        Ok(self.data.select(Axis(0), &rows))
    }
}

/// Standard-normal matrix, filled row-major.
pub fn standard_normal(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal))
}

/// `log N(x; 0, I)` per row.
pub fn standard_normal_log_density(x: ArrayView2<f64>) -> Array1<f64> {
    let c = 0.5 * x.ncols() as f64 * (2.0 * std::f64::consts::PI).ln();
    x.rows().into_iter().map(|r| -0.5 * r.dot(&r) - c).collect()
}

/// Training hyperparameters shared by the emulator objectives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowTrainConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Number of sinusoidal time frequencies (`pi, 2 pi, ...`).
    pub time_frequencies: usize,
    pub batch_size: usize,
    /// Samples drawn once from the data source for training.
    pub train_size: usize,
    pub validation_size: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a validation improvement.
    pub early_stop_patience: usize,
    pub lr: f64,
    pub lr_patience: usize,
    pub min_lr: f64,
    pub ema_decay: f64,
    pub ema_stride: usize,
    pub coupling: CouplingMode,
    /// Probability-path width of the CFM objective.
    pub cfm_sigma: f64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        FlowTrainConfig {
            hidden: vec![128, 128, 128],
            activation: Activation::Tanh,
            time_frequencies: 8,
            batch_size: 256,
            train_size: 10_000,
            validation_size: 2_000,
            epochs: 1000,
            early_stop_patience: 100,
            lr: 1e-3,
            lr_patience: 20,
            min_lr: 1e-5,
            ema_decay: 0.999,
            ema_stride: 10,
            coupling: CouplingMode::Ot,
            cfm_sigma: 0.0,
        }
    }
}

impl FlowTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.train_size == 0 || self.validation_size == 0 {
            return Err(invalid("batch, train and validation sizes must be positive"));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(invalid("hidden widths must be positive"));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.ema_decay) || self.cfm_sigma < 0.0 {
            return Err(invalid("lr must be positive, ema_decay in [0, 1), cfm_sigma >= 0"));
        }
        Ok(())
    }

    pub fn mlp_spec(&self, dim: usize) -> MlpSpec {
        MlpSpec {
            data_dim: dim,
            out_dim: dim,
            hidden: self.hidden.clone(),
            activation: self.activation,
            time_frequencies: (1..=self.time_frequencies)
                .map(|k| std::f64::consts::PI * k as f64)
                .collect(),
        }
    }
}

/// Summary of a training run, stored in checkpoint metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub epochs_run: usize,
    pub iterations: usize,
    pub early_stopped: bool,
    pub best_validation: f64,
    pub final_train_loss: f64,
    pub final_lr: f64,
    pub validation_history: Vec<f64>,
}

/// The emulator network together with how its output is interpreted.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub net: Mlp,
    pub parameterization: Parameterization,
    pub schedule: Schedule,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FlowMetadata {
    parameterization: Parameterization,
    schedule: Schedule,
    objective: Option<EmulatorObjective>,
}

impl FlowModel {
    pub fn new(net: Mlp, parameterization: Parameterization, schedule: Schedule) -> Result<Self> {
        if net.spec().out_dim != net.spec().data_dim {
            return Err(invalid("flow networks map R^d to R^d"));
        }
        Ok(FlowModel {
            net,
            parameterization,
            schedule,
        })
    }

    pub fn dim(&self) -> usize {
        self.net.spec().data_dim
    }

    /// Time at which sampling stops and likelihood integration starts.
    pub fn data_time(&self) -> f64 {
        match self.parameterization {
            Parameterization::VectorField => 0.0,
            Parameterization::Endpoint => ENDPOINT_T_MIN,
        }
    }

    /// Likelihoods of endpoint models stop short of t = 0 and are approximate.
    pub fn likelihood_is_approximate(&self) -> bool {
        self.parameterization == Parameterization::Endpoint
    }

    pub fn params_hash(&self) -> String {
        params_hash(self.net.params())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != FLOW_CHECKPOINT_KIND {
            return Err(invalid(format!(
                "expected a flow checkpoint, found kind '{}'",
                ckpt.kind
            )));
        }
        let meta: FlowMetadata = serde_json::from_value(ckpt.metadata.clone())?;
        FlowModel::new(ckpt.inference_net()?, meta.parameterization, meta.schedule)
    }

    /// Checkpoint holding only these weights (no optimizer state).
    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = FlowMetadata {
            parameterization: self.parameterization,
            schedule: self.schedule,
            objective: None,
        };
        Checkpoint::new(
            FLOW_CHECKPOINT_KIND,
            &self.net,
            serde_json::to_value(meta).expect("metadata serializes"),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        FlowModel::from_checkpoint(&Checkpoint::load(path)?)
    }

    fn endpoint_coefficients(&self, t: f64) -> Result<(f64, f64)> {
        if !(ENDPOINT_T_MIN..=1.0).contains(&t) {
            return Err(invalid(format!(
                "endpoint field evaluated at t = {t} outside [{ENDPOINT_T_MIN}, 1]"
            )));
        }
        let s = self.schedule.sigma(t);
        Ok((self.schedule.sigma_dot(t) / s, self.schedule.endpoint_gain(t) / s))
    }
}

impl Dynamics for FlowModel {
    fn dim(&self) -> usize {
        FlowModel::dim(self)
    }

    fn velocity(&self, t: f64, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let tt = Array1::from_elem(x.nrows(), t);
        let out = self.net.forward(tt.view(), x)?;
        match self.parameterization {
            Parameterization::VectorField => Ok(out),
            Parameterization::Endpoint => {
                let (a, b) = self.endpoint_coefficients(t)?;
                Ok(&x * a + &out * b)
            }
        }
    }

    fn velocity_and_divergence(
        &self,
        t: f64,
        x: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Array1<f64>)> {
        let tt = Array1::from_elem(x.nrows(), t);
        let (out, diag) = self.net.jacobian_diagonal(tt.view(), x)?;
        let trace = diag.sum_axis(Axis(1));
        match self.parameterization {
            Parameterization::VectorField => Ok((out, trace)),
            Parameterization::Endpoint => {
                let (a, b) = self.endpoint_coefficients(t)?;
                let d = x.ncols() as f64;
                Ok((&x * a + &out * b, trace.mapv(|tr| a * d + b * tr)))
            }
        }
    }
}

/// Result of training: inference model plus a full checkpoint.
#[derive(Debug, Clone)]
pub struct TrainedFlow {
    pub model: FlowModel,
    pub checkpoint: Checkpoint,
    pub summary: TrainingSummary,
}

/// One training batch worth of regression inputs and targets.
struct Regression {
    t: Array1<f64>,
    x: Array2<f64>,
    target: Array2<f64>,
    weight: Array1<f64>,
}

fn regression_batch(
    objective: EmulatorObjective,
    schedule: Schedule,
    cfg: &FlowTrainConfig,
    x0: ArrayView2<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Regression> {
    let (n, d) = x0.dim();
    let x1 = standard_normal(n, d, rng);
    let x1 = couple(cfg.coupling, x0, x1.view())?.apply(x1.view());
    let t: Array1<f64> = (0..n).map(|_| rng.gen_range(T_EPS..1.0 - T_EPS)).collect();
    let mut x = Array2::zeros((n, d));
    let mut target = Array2::zeros((n, d));
    let mut weight = Array1::ones(n);
    match objective {
        EmulatorObjective::VectorField | EmulatorObjective::Endpoint => {
            for i in 0..n {
                let ti = t[i];
                let (a, s) = (schedule.alpha(ti), schedule.sigma(ti));
                let (ad, sd) = (schedule.alpha_dot(ti), schedule.sigma_dot(ti));
                for k in 0..d {
                    x[[i, k]] = a * x0[[i, k]] + s * x1[[i, k]];
                    target[[i, k]] = if objective == EmulatorObjective::Endpoint {
                        x0[[i, k]]
                    } else {
                        ad * x0[[i, k]] + sd * x1[[i, k]]
                    };
                }
                if objective == EmulatorObjective::Endpoint {
                    weight[i] = schedule.endpoint_coefficient(ti);
                }
            }
        }
        EmulatorObjective::Cfm => {
            let eps = standard_normal(n, d, rng);
            for i in 0..n {
                let ti = t[i];
                for k in 0..d {
                    x[[i, k]] =
                        ti * x1[[i, k]] + (1.0 - ti) * x0[[i, k]] + cfg.cfm_sigma * eps[[i, k]];
                    target[[i, k]] = x1[[i, k]] - x0[[i, k]];
                }
            }
        }
    }
    Ok(Regression {
        t,
        x,
        target,
        weight,
    })
}

/// Weighted mean squared error, `mean_i w_i |out_i - target_i|^2`, and its
/// output adjoint.
fn weighted_mse(out: ArrayView2<f64>, target: &Array2<f64>, weight: &Array1<f64>) -> (f64, Array2<f64>) {
    let n = out.nrows() as f64;
    let diff = &out - target;
    let mut loss = 0.0;
    let mut adj = Array2::zeros(out.dim());
    for (i, row) in diff.rows().into_iter().enumerate() {
        let w = weight[i];
        loss += w * row.dot(&row);
        adj.row_mut(i).assign(&(&row * (2.0 * w / n)));
    }
    (loss / n, adj)
}

fn regression_loss(net: &Mlp, batch: &Regression) -> Result<f64> {
    let out = net.forward(batch.t.view(), batch.x.view())?;
    Ok(weighted_mse(out.view(), &batch.target, &batch.weight).0)
}

fn objective_geometry(objective: EmulatorObjective, schedule: Schedule) -> (Parameterization, Schedule) {
    match objective {
        EmulatorObjective::VectorField => (Parameterization::VectorField, schedule),
        EmulatorObjective::Endpoint => (Parameterization::Endpoint, schedule),
        EmulatorObjective::Cfm => (Parameterization::VectorField, Schedule::Linear),
    }
}

/// Trains an emulator with the given objective.
///
/// Draws `train_size + validation_size` samples from `source` once. Each
/// epoch is one shuffled pass over the training samples with fresh noise,
/// times and couplings; the validation loss (fixed noise and times, EMA
/// weights) drives the plateau scheduler and early stopping.
pub fn train_flow(
    source: &mut dyn DataSource,
    objective: EmulatorObjective,
    schedule: Schedule,
    cfg: &FlowTrainConfig,
    seed: u64,
) -> Result<TrainedFlow> {
    cfg.validate()?;
    let dim = source.dim();
    let (parameterization, schedule) = objective_geometry(objective, schedule);
    let mut data_rng = stream_rng(seed, 1);
    let mut noise_rng = stream_rng(seed, 2);
    let mut val_rng = stream_rng(seed, 3);

    let all = source.draw(cfg.train_size + cfg.validation_size, &mut data_rng)?;
    if all.ncols() != dim || all.iter().any(|v| !v.is_finite()) {
        return Err(invalid("data source returned malformed samples"));
    }
    let mut train = Dataset::new(all.slice(s![..cfg.train_size, ..]).to_owned())?;
    let validation: Vec<Regression> = all
        .slice(s![cfg.train_size.., ..])
        .axis_chunks_iter(Axis(0), cfg.batch_size)
        .map(|chunk| regression_batch(objective, schedule, cfg, chunk, &mut val_rng))
        .collect::<Result<_>>()?;

    let mut net = Mlp::new(cfg.mlp_spec(dim), seed);
    let mut adam = Adam::new(net.param_count());
    let mut sched = PlateauScheduler::new(cfg.lr).with_patience(cfg.lr_patience);
    sched.min_lr = cfg.min_lr;
    let mut ema = EmaShadow::new(net.params(), cfg.ema_decay, cfg.ema_stride);
    let per_epoch = cfg.train_size.div_ceil(cfg.batch_size);

    let mut summary = TrainingSummary {
        epochs_run: 0,
        iterations: 0,
        early_stopped: false,
        best_validation: f64::INFINITY,
        final_train_loss: f64::NAN,
        final_lr: cfg.lr,
        validation_history: Vec::new(),
    };
    let mut since_best = 0usize;
    let mut shadow_net = net.clone();
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..per_epoch {
            let x0 = train.draw(cfg.batch_size, &mut data_rng)?;
            let batch = regression_batch(objective, schedule, cfg, x0.view(), &mut noise_rng)?;
            let (loss, grad) = net
                .output_loss_gradient(batch.t.view(), batch.x.view(), |out| {
                    weighted_mse(out, &batch.target, &batch.weight)
                })
                .map_err(|e| Error::Diverged {
                    iteration: summary.iterations,
                    detail: e.to_string(),
                })?;
            adam.adam_step(net.params_mut(), &grad, sched.lr)?;
            ema.observe(net.params());
            summary.iterations += 1;
            epoch_loss += loss;
        }
        summary.final_train_loss = epoch_loss / per_epoch as f64;
        shadow_net.set_params(&ema.shadow)?;
        let mut val = 0.0;
        for b in &validation {
            val += regression_loss(&shadow_net, b)? * b.t.len() as f64;
        }
        val /= cfg.validation_size as f64;
        if !val.is_finite() {
            return Err(Error::Diverged {
                iteration: summary.iterations,
                detail: format!("validation loss {val} at epoch {epoch}"),
            });
        }
        summary.validation_history.push(val);
        summary.epochs_run = epoch + 1;
        sched.observe(val);
        log::debug!(
            "flow epoch {epoch}: train {:.5} val {val:.5} lr {:.2e}",
            summary.final_train_loss,
            sched.lr
        );
        if val < summary.best_validation {
            summary.best_validation = val;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                summary.early_stopped = true;
                break;
            }
        }
    }
    summary.final_lr = sched.lr;

    let meta = FlowMetadata {
        parameterization,
        schedule,
        objective: Some(objective),
    };
    let mut metadata = serde_json::to_value(meta)?;
    metadata["training"] = serde_json::to_value(&summary)?;
    metadata["config"] = serde_json::to_value(cfg)?;
    metadata["seed"] = seed.into();
    let mut checkpoint = Checkpoint::new(FLOW_CHECKPOINT_KIND, &net, metadata);
    checkpoint.ema = Some(ema);
    checkpoint.optimizer = Some(adam);
    checkpoint.scheduler = Some(sched);
    checkpoint.inference_weights = InferenceWeights::Ema;
    let model = FlowModel::from_checkpoint(&checkpoint)?;
    Ok(TrainedFlow {
        model,
        checkpoint,
        summary,
    })
}

pub fn train_vector_field(
    source: &mut dyn DataSource,
    schedule: Schedule,
    cfg: &FlowTrainConfig,
    seed: u64,
) -> Result<TrainedFlow> {
    train_flow(source, EmulatorObjective::VectorField, schedule, cfg, seed)
}

pub fn train_endpoint(
    source: &mut dyn DataSource,
    schedule: Schedule,
    cfg: &FlowTrainConfig,
    seed: u64,
) -> Result<TrainedFlow> {
    train_flow(source, EmulatorObjective::Endpoint, schedule, cfg, seed)
}

/// Conditional flow matching on the straight path with width `cfg.cfm_sigma`.
pub fn train_cfm(source: &mut dyn DataSource, cfg: &FlowTrainConfig, seed: u64) -> Result<TrainedFlow> {
    train_flow(source, EmulatorObjective::Cfm, Schedule::Linear, cfg, seed)
}

/// How a sample set's likelihood column was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodKind {
    Exact,
    /// Integrated only down to t = 1e-3 (endpoint models).
    Approximate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetadata {
    pub seed: u64,
    pub n: usize,
    pub atol: f64,
    pub rtol: f64,
    pub model_hash: String,
    pub parameterization: Parameterization,
    pub schedule: Schedule,
    pub likelihood: Option<LikelihoodKind>,
    pub chunk: usize,
}

/// Emulator samples with optional log-likelihoods.
#[derive(Debug, Clone, PartialEq)]
pub struct EmulatorSampleSet {
    pub samples: Array2<f64>,
    pub loglik: Option<Array1<f64>>,
    pub metadata: SampleMetadata,
}

fn chunk_ranges(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .step_by(SAMPLE_CHUNK)
        .map(|a| (a, (a + SAMPLE_CHUNK).min(n)))
        .collect()
}

fn sample_metadata(model: &FlowModel, n: usize, seed: u64, opts: &OdeOptions) -> SampleMetadata {
    SampleMetadata {
        seed,
        n,
        atol: opts.atol,
        rtol: opts.rtol,
        model_hash: model.params_hash(),
        parameterization: model.parameterization,
        schedule: model.schedule,
        likelihood: None,
        chunk: SAMPLE_CHUNK,
    }
}

/// Prior draws used by [`sample`] for a given seed.
pub fn prior_draws(dim: usize, n: usize, seed: u64) -> Array2<f64> {
    standard_normal(n, dim, &mut stream_rng(seed, 0))
}

/// Integrates prior draws from t = 1 down to the model's data time.
pub fn sample(model: &FlowModel, n: usize, seed: u64, opts: &OdeOptions) -> Result<EmulatorSampleSet> {
    let x1 = prior_draws(model.dim(), n, seed);
    let chunks: Vec<Array2<f64>> = chunk_ranges(n)
        .into_par_iter()
        .map(|(a, b)| {
            integrate_batch(model, 1.0, model.data_time(), x1.slice(s![a..b, ..]), opts)
                .map(|(x, _)| x)
                .map_err(|e| with_seed(e, seed))
        })
        .collect::<Result<_>>()?;
    Ok(EmulatorSampleSet {
        samples: stack_rows(chunks, model.dim()),
        loglik: None,
        metadata: sample_metadata(model, n, seed, opts),
    })
}

/// Like [`sample`], also integrating the divergence along the way so every
/// sample carries `log q(x1) + delta_logp`.
pub fn sample_with_likelihood(
    model: &FlowModel,
    n: usize,
    seed: u64,
    mode: DivergenceMode,
    opts: &OdeOptions,
) -> Result<EmulatorSampleSet> {
    let x1 = prior_draws(model.dim(), n, seed);
    let prior = standard_normal_log_density(x1.view());
    let parts: Vec<(Array2<f64>, Array1<f64>)> = chunk_ranges(n)
        .into_par_iter()
        .map(|(a, b)| {
            let sol = integrate_with_logdet(
                model,
                1.0,
                model.data_time(),
                x1.slice(s![a..b, ..]),
                mode,
                opts,
            )
            .map_err(|e| with_seed(e, seed))?;
            Ok((sol.x, &prior.slice(s![a..b]) + &sol.delta_logp))
        })
        .collect::<Result<_>>()?;
    let (xs, ls): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    let mut metadata = sample_metadata(model, n, seed, opts);
    metadata.likelihood = Some(likelihood_kind(model));
    Ok(EmulatorSampleSet {
        samples: stack_rows(xs, model.dim()),
        loglik: Some(concat(ls)),
        metadata,
    })
}

fn likelihood_kind(model: &FlowModel) -> LikelihoodKind {
    if model.likelihood_is_approximate() {
        LikelihoodKind::Approximate
    } else {
        LikelihoodKind::Exact
    }
}

fn with_seed(e: Error, seed: u64) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{m} (sampling seed {seed})")),
        other => {
            log::error!("sampling with seed {seed} failed");
            other
        }
    }
}

fn stack_rows(parts: Vec<Array2<f64>>, d: usize) -> Array2<f64> {
    if parts.is_empty() {
        return Array2::zeros((0, d));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("row blocks share width")
}

fn concat(parts: Vec<Array1<f64>>) -> Array1<f64> {
    parts.into_iter().flat_map(|p| p.into_iter()).collect()
}

/// Likelihood of data points under the emulator, with the prior points they
/// map to.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodResult {
    pub loglik: Array1<f64>,
    pub prior_points: Array2<f64>,
    pub kind: LikelihoodKind,
}

/// `log p(x) = log q(x1) - delta_logp`, integrating each point from the data
/// time up to t = 1.
pub fn exact_log_likelihood(
    model: &FlowModel,
    x: ArrayView2<f64>,
    mode: DivergenceMode,
    opts: &OdeOptions,
) -> Result<LikelihoodResult> {
    if x.ncols() != model.dim() {
        return Err(Error::ShapeMismatch(format!(
            "model dimension {}, points have {} columns",
            model.dim(),
            x.ncols()
        )));
    }
    let parts: Vec<(Array2<f64>, Array1<f64>)> = chunk_ranges(x.nrows())
        .into_par_iter()
        .map(|(a, b)| {
            let sol =
                integrate_with_logdet(model, model.data_time(), 1.0, x.slice(s![a..b, ..]), mode, opts)?;
            let ll = standard_normal_log_density(sol.x.view()) - &sol.delta_logp;
            if ll.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("log-likelihood".into()));
            }
            Ok((sol.x, ll))
        })
        .collect::<Result<_>>()?;
    let (xs, ls): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    Ok(LikelihoodResult {
        loglik: concat(ls),
        prior_points: stack_rows(xs, model.dim()),
        kind: likelihood_kind(model),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NllReport {
    pub mean: f64,
    /// Spread of per-sample NLL over the whole holdout set.
    pub std: f64,
    pub batch_size: usize,
    pub batch_means: Vec<f64>,
    /// Spread of the per-batch means.
    pub across_batch_std: f64,
    pub kind: LikelihoodKind,
}

fn mean_std(v: ArrayView1<f64>) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.sum() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Negative log-likelihood statistics over a holdout set, evaluated in
/// batches of `batch_size`.
pub fn nll(
    model: &FlowModel,
    holdout: ArrayView2<f64>,
    batch_size: usize,
    opts: &OdeOptions,
) -> Result<NllReport> {
    if holdout.nrows() == 0 {
        return Err(invalid("NLL needs at least one sample"));
    }
    let batch_size = batch_size.max(1);
    let res = exact_log_likelihood(model, holdout, DivergenceMode::ExactAutodiff, opts)?;
    let values = -&res.loglik;
    let (mean, std) = mean_std(values.view());
    let batch_means: Vec<f64> = values
        .axis_chunks_iter(Axis(0), batch_size)
        .map(|c| c.sum() / c.len() as f64)
        .collect();
    let (_, across_batch_std) = mean_std(ArrayView1::from(&batch_means[..]));
    Ok(NllReport {
        mean,
        std,
        batch_size,
        batch_means,
        across_batch_std,
        kind: res.kind,
    })
}

impl EmulatorSampleSet {
    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    /// Writes `path` (CSV: coordinates then optional `loglik`) and a JSON
    /// sidecar `path.json` with the metadata.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_points_csv(path, self.samples.view(), self.loglik.as_ref().map(|l| ("loglik", l.view())))?;
        let sidecar = crate::io::sidecar_path(path);
        std::fs::write(sidecar, serde_json::to_string_pretty(&self.metadata)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (samples, extra) = crate::io::read_points_csv(path, Some("loglik"))?;
        let sidecar = crate::io::sidecar_path(path);
        let metadata: SampleMetadata = serde_json::from_str(&std::fs::read_to_string(sidecar)?)?;
        if metadata.n != samples.nrows() {
            return Err(invalid(format!(
                "sidecar records {} samples, file has {}",
                metadata.n,
                samples.nrows()
            )));
        }
        Ok(EmulatorSampleSet {
            samples,
            loglik: extra,
            metadata,
        })
    }
}
