//! Time-conditioned energy-based model `log p(t, x) = E(t, x) - log Z(t)`,
//! trained on interpolant samples with an InfoNCE loss over time (which pins
//! the t-dependence) plus score matching (which pins the x-dependence).
//!
//! `Z(t)` is never computed: every consumer works with `E` up to a constant.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::coupling::{couple, CouplingMode};
use crate::densities::log_sum_exp;
use crate::diffnet::{
    params_hash, Activation, Adam, Checkpoint, EmaShadow, InferenceWeights, Mlp, MlpSpec,
    PlateauScheduler,
};
use crate::emulator::{standard_normal, DataSource, Dataset, TrainingSummary};
use crate::error::{invalid, Error, Result};
use crate::interpolant::{interpolate_batch, Schedule, T_EPS};
use crate::stream_rng;

pub const ENERGY_CHECKPOINT_KIND: &str = "energy";

/// How negative times falling outside `[0, 1]` are brought back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeBoundary {
    /// Clamp onto the nearest endpoint.
    #[default]
    Clip,
    /// Mirror at the endpoint. Keeps the proposal kernel symmetric in
    /// `(t, t')`, so positives near `t = 0` are not told apart from
    /// negatives merely by sitting exactly on the boundary.
    Reflect,
}

/// Negative time points `t' = t + std * N(0, 1)`, folded into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NegativeTimeSampler {
    pub count: usize,
    pub std: f64,
    pub boundary: NegativeBoundary,
}

impl Default for NegativeTimeSampler {
    fn default() -> Self {
        NegativeTimeSampler {
            count: 1,
            std: 0.025,
            boundary: NegativeBoundary::Clip,
        }
    }
}

fn reflect_unit(mut v: f64) -> f64 {
    // std is small, so at most a couple of folds are ever needed.
    for _ in 0..64 {
        if v < 0.0 {
            v = -v;
        } else if v > 1.0 {
            v = 2.0 - v;
        } else {
            return v;
        }
    }
    v.clamp(0.0, 1.0)
}

impl NegativeTimeSampler {
    /// `count` negatives per positive time, one row per positive.
    pub fn sample(&self, t: ArrayView1<f64>, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let mut out = Array2::zeros((t.len(), self.count));
        for (i, &ti) in t.iter().enumerate() {
            for j in 0..self.count {
                let z: f64 = rng.sample(StandardNormal);
                let v = ti + self.std * z;
                out[[i, j]] = match self.boundary {
                    NegativeBoundary::Clip => v.clamp(0.0, 1.0),
                    NegativeBoundary::Reflect => reflect_unit(v),
                };
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub sm_weight: f64,
    pub nce_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            sm_weight: 1.0,
            nce_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EbmConfig {
    pub schedule: Schedule,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub time_frequencies: usize,
    pub batch_size: usize,
    pub train_size: usize,
    pub validation_size: usize,
    pub epochs: usize,
    pub early_stop_patience: usize,
    pub lr: f64,
    pub lr_patience: usize,
    pub min_lr: f64,
    pub ema_decay: f64,
    pub ema_stride: usize,
    pub coupling: CouplingMode,
    pub negatives: NegativeTimeSampler,
    pub loss: LossWeights,
}

impl Default for EbmConfig {
    fn default() -> Self {
        EbmConfig {
            schedule: Schedule::Trigonometric,
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
            negatives: NegativeTimeSampler::default(),
            loss: LossWeights::default(),
        }
    }
}

impl EbmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.train_size == 0 || self.validation_size == 0 {
            return Err(invalid("batch, train and validation sizes must be positive"));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(invalid("hidden widths must be positive"));
        }
        if self.negatives.count == 0 && self.loss.nce_weight != 0.0 {
            return Err(invalid("InfoNCE needs at least one negative per sample"));
        }
        if !(self.negatives.std > 0.0) {
            return Err(invalid("negative time std must be positive"));
        }
        if self.loss.sm_weight < 0.0 || self.loss.nce_weight < 0.0 {
            return Err(invalid("loss weights must be non-negative"));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.ema_decay) {
            return Err(invalid("lr must be positive and ema_decay in [0, 1)"));
        }
        Ok(())
    }

    pub fn mlp_spec(&self, dim: usize) -> MlpSpec {
        MlpSpec {
            data_dim: dim,
            out_dim: 1,
            hidden: self.hidden.clone(),
            activation: self.activation,
            time_frequencies: (1..=self.time_frequencies)
                .map(|k| std::f64::consts::PI * k as f64)
                .collect(),
        }
    }
}

/// Scalar energy network and the interpolant it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyModel {
    pub net: Mlp,
    pub schedule: Schedule,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EnergyMetadata {
    schedule: Schedule,
}

impl EnergyModel {
    pub fn new(net: Mlp, schedule: Schedule) -> Result<Self> {
        if net.spec().out_dim != 1 {
            return Err(invalid("energy networks have a scalar head"));
        }
        Ok(EnergyModel { net, schedule })
    }

    pub fn dim(&self) -> usize {
        self.net.spec().data_dim
    }

    pub fn params_hash(&self) -> String {
        params_hash(self.net.params())
    }

    /// `E(t_i, x_i)` per row.
    pub fn energy(&self, t: ArrayView1<f64>, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.net.forward(t, x)?.column(0).to_owned())
    }

    /// Unnormalized log-density of the data distribution, `E(0, x)`.
    /// Defined up to an additive constant.
    pub fn log_density(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        let t = Array1::zeros(x.nrows());
        self.energy(t.view(), x)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != ENERGY_CHECKPOINT_KIND {
            return Err(invalid(format!(
                "expected an energy checkpoint, found kind '{}'",
                ckpt.kind
            )));
        }
        let meta: EnergyMetadata = serde_json::from_value(ckpt.metadata.clone())?;
        EnergyModel::new(ckpt.inference_net()?, meta.schedule)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = EnergyMetadata {
            schedule: self.schedule,
        };
        Checkpoint::new(
            ENERGY_CHECKPOINT_KIND,
            &self.net,
            serde_json::to_value(meta).expect("metadata serializes"),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        EnergyModel::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Mean InfoNCE loss and its adjoints with respect to the positive and
/// negative energies. `neg` has one row per positive.
fn info_nce_terms(pos: ArrayView1<f64>, neg: ArrayView2<f64>) -> (f64, Array1<f64>, Array2<f64>) {
    let n = pos.len() as f64;
    let mut loss = 0.0;
    let mut pos_adj = Array1::zeros(pos.len());
    let mut neg_adj = Array2::zeros(neg.dim());
    let mut logits = Vec::with_capacity(neg.ncols() + 1);
    for i in 0..pos.len() {
        logits.clear();
        logits.push(pos[i]);
        logits.extend(neg.row(i).iter());
        let lse = log_sum_exp(&logits);
        loss += lse - pos[i];
        pos_adj[i] = ((pos[i] - lse).exp() - 1.0) / n;
        for j in 0..neg.ncols() {
            neg_adj[[i, j]] = (neg[[i, j]] - lse).exp() / n;
        }
    }
    (loss / n, pos_adj, neg_adj)
}

/// Rows of `x` repeated `k` times (row `i` at `i*k..(i+1)*k`), paired with
/// the flattened negative times.
fn negative_inputs(x: ArrayView2<f64>, neg_t: ArrayView2<f64>) -> (Array1<f64>, Array2<f64>) {
    let k = neg_t.ncols();
    let idx: Vec<usize> = (0..x.nrows()).flat_map(|i| std::iter::repeat(i).take(k)).collect();
    let t = neg_t.iter().copied().collect();
    (t, x.select(Axis(0), &idx))
}

fn check_negatives(n: usize, neg_t: ArrayView2<f64>) -> Result<()> {
    if neg_t.ncols() == 0 {
        return Err(invalid("InfoNCE needs at least one negative per sample"));
    }
    if neg_t.nrows() != n {
        return Err(Error::ShapeMismatch("one row of negatives per sample".into()));
    }
    Ok(())
}

/// Mean over the batch of `-log softmax` of the positive energy among the
/// positive and its negative times, all at the same `x_t`.
pub fn info_nce_loss(
    model: &EnergyModel,
    t: ArrayView1<f64>,
    x_t: ArrayView2<f64>,
    neg_t: ArrayView2<f64>,
) -> Result<f64> {
    check_negatives(t.len(), neg_t)?;
    let pos = model.energy(t, x_t)?;
    let (tn, xn) = negative_inputs(x_t, neg_t);
    let neg = model.energy(tn.view(), xn.view())?;
    let neg = neg.into_shape((t.len(), neg_t.ncols())).expect("negative layout");
    Ok(info_nce_terms(pos.view(), neg.view()).0)
}

/// Mean of `|sigma(t) grad_x E(t, x_t) + x1|^2` with `x_t` formed from the
/// pair `(x0, x1)`.
pub fn score_matching_loss(
    model: &EnergyModel,
    t: ArrayView1<f64>,
    x0: ArrayView2<f64>,
    x1: ArrayView2<f64>,
) -> Result<f64> {
    let x_t = interpolate_batch(model.schedule, t, x0, x1)?;
    let g = model.net.input_gradient(t, x_t.view())?;
    let loss = sm_terms(model.schedule, t, g.view(), x1).0;
    if !loss.is_finite() {
        return Err(Error::NonFinite("score matching loss".into()));
    }
    Ok(loss)
}

fn sm_terms(
    schedule: Schedule,
    t: ArrayView1<f64>,
    g: ArrayView2<f64>,
    x1: ArrayView2<f64>,
) -> (f64, Array2<f64>) {
    let n = t.len() as f64;
    let mut loss = 0.0;
    let mut adj = Array2::zeros(g.dim());
    for i in 0..t.len() {
        let s = schedule.sigma(t[i]);
        for k in 0..g.ncols() {
            let r = s * g[[i, k]] + x1[[i, k]];
            loss += r * r;
            adj[[i, k]] = 2.0 * s * r / n;
        }
    }
    (loss / n, adj)
}

/// One Algorithm-1 batch: coupled pair, times, interpolated points and
/// negative times.
struct EbmBatch {
    t: Array1<f64>,
    x1: Array2<f64>,
    x_t: Array2<f64>,
    neg_t: Array2<f64>,
}

fn ebm_batch(cfg: &EbmConfig, x0: ArrayView2<f64>, rng: &mut ChaCha8Rng) -> Result<EbmBatch> {
    let (n, d) = x0.dim();
    let x1 = standard_normal(n, d, rng);
    let x1 = couple(cfg.coupling, x0, x1.view())?.apply(x1.view());
    let t: Array1<f64> = (0..n).map(|_| rng.gen_range(T_EPS..1.0 - T_EPS)).collect();
    let x_t = interpolate_batch(cfg.schedule, t.view(), x0, x1.view())?;
    let neg_t = cfg.negatives.sample(t.view(), rng);
    Ok(EbmBatch { t, x1, x_t, neg_t })
}

/// Loss components of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EbmLoss {
    pub total: f64,
    pub sm: f64,
    pub nce: f64,
}

/// Weighted `sm + nce` loss and its parameter gradient.
fn ebm_loss_gradient(net: &Mlp, cfg: &EbmConfig, b: &EbmBatch) -> Result<(EbmLoss, Vec<f64>)> {
    let w = cfg.loss;
    let use_nce = w.nce_weight != 0.0;
    // Negative energies: first-order pass, adjoints need the positives first.
    let neg = if use_nce {
        let (tn, xn) = negative_inputs(b.x_t.view(), b.neg_t.view());
        let e = net.forward(tn.view(), xn.view())?.column(0).to_owned();
        Some((tn, xn, e.into_shape(b.neg_t.dim()).expect("negative layout")))
    } else {
        None
    };
    let mut parts = EbmLoss {
        total: 0.0,
        sm: 0.0,
        nce: 0.0,
    };
    let mut neg_adj = None;
    let (total, mut grad) = net.loss_parameter_gradient(b.t.view(), b.x_t.view(), |e, g| {
        let (sm, g_adj) = sm_terms(cfg.schedule, b.t.view(), g, b.x1.view());
        parts.sm = sm;
        let mut e_adj = Array1::zeros(e.len());
        let mut total = w.sm_weight * sm;
        let g_adj = g_adj * w.sm_weight;
        if let Some((_, _, ne)) = &neg {
            let (nce, pa, na) = info_nce_terms(e, ne.view());
            parts.nce = nce;
            total += w.nce_weight * nce;
            e_adj = pa * w.nce_weight;
            neg_adj = Some(na * w.nce_weight);
        }
        (total, e_adj, g_adj)
    })?;
    parts.total = total;
    if let (Some((tn, xn, _)), Some(na)) = (&neg, neg_adj) {
        let adj = na.into_shape((tn.len(), 1)).expect("negative layout");
        let (_, g2) = net.backward(tn.view(), xn.view(), adj.view())?;
        for (a, b) in grad.iter_mut().zip(g2) {
            *a += b;
        }
    }
    Ok((parts, grad))
}

fn ebm_loss(net: &Mlp, cfg: &EbmConfig, b: &EbmBatch) -> Result<EbmLoss> {
    let model = EnergyModel::new(net.clone(), cfg.schedule)?;
    let g = net.input_gradient(b.t.view(), b.x_t.view())?;
    let sm = sm_terms(cfg.schedule, b.t.view(), g.view(), b.x1.view()).0;
    let nce = if cfg.loss.nce_weight != 0.0 {
        info_nce_loss(&model, b.t.view(), b.x_t.view(), b.neg_t.view())?
    } else {
        0.0
    };
    Ok(EbmLoss {
        total: cfg.loss.sm_weight * sm + cfg.loss.nce_weight * nce,
        sm,
        nce,
    })
}

#[derive(Debug, Clone)]
pub struct TrainedEbm {
    pub model: EnergyModel,
    pub checkpoint: Checkpoint,
    pub summary: TrainingSummary,
    /// InfoNCE loss of the very first batch (log(K+1) for a fresh model).
    pub initial_nce: f64,
}

/// Trains an energy model on samples from `source` (emulator samples, or
/// exact target samples for ablations).
pub fn train_ebm(source: &mut dyn DataSource, cfg: &EbmConfig, seed: u64) -> Result<TrainedEbm> {
    cfg.validate()?;
    let dim = source.dim();
    let mut data_rng = stream_rng(seed, 11);
    let mut noise_rng = stream_rng(seed, 12);
    let mut val_rng = stream_rng(seed, 13);

    let all = source.draw(cfg.train_size + cfg.validation_size, &mut data_rng)?;
    if all.ncols() != dim || all.iter().any(|v| !v.is_finite()) {
        return Err(invalid("data source returned malformed samples"));
    }
    let mut train = Dataset::new(all.slice(s![..cfg.train_size, ..]).to_owned())?;
    let validation: Vec<EbmBatch> = all
        .slice(s![cfg.train_size.., ..])
        .axis_chunks_iter(Axis(0), cfg.batch_size)
        .map(|chunk| ebm_batch(cfg, chunk, &mut val_rng))
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
    let mut initial_nce = f64::NAN;
    let mut since_best = 0usize;
    let mut shadow = net.clone();
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..per_epoch {
            let x0 = train.draw(cfg.batch_size, &mut data_rng)?;
            let batch = ebm_batch(cfg, x0.view(), &mut noise_rng)?;
            let (loss, grad) =
                ebm_loss_gradient(&net, cfg, &batch).map_err(|e| Error::Diverged {
                    iteration: summary.iterations,
                    detail: e.to_string(),
                })?;
            if summary.iterations == 0 {
                initial_nce = loss.nce;
            }
            adam.adam_step(net.params_mut(), &grad, sched.lr)?;
            ema.observe(net.params());
            summary.iterations += 1;
            epoch_loss += loss.total;
        }
        summary.final_train_loss = epoch_loss / per_epoch as f64;
        shadow.set_params(&ema.shadow)?;
        let mut val = 0.0;
        for b in &validation {
            val += ebm_loss(&shadow, cfg, b)?.total * b.t.len() as f64;
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
            "ebm epoch {epoch}: train {:.5} val {val:.5} lr {:.2e}",
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

    let mut metadata = serde_json::to_value(EnergyMetadata {
        schedule: cfg.schedule,
    })?;
    metadata["training"] = serde_json::to_value(&summary)?;
    metadata["config"] = serde_json::to_value(cfg)?;
    metadata["seed"] = seed.into();
    let mut checkpoint = Checkpoint::new(ENERGY_CHECKPOINT_KIND, &net, metadata);
    checkpoint.ema = Some(ema);
    checkpoint.optimizer = Some(adam);
    checkpoint.scheduler = Some(sched);
    checkpoint.inference_weights = InferenceWeights::Ema;
    let model = EnergyModel::from_checkpoint(&checkpoint)?;
    Ok(TrainedEbm {
        model,
        checkpoint,
        summary,
        initial_nce,
    })
}
