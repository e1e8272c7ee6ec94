//! End-to-end runs: emulator training, sampling, EBM training on the
//! emulator samples, reweighting with exact and EBM likelihoods, and
//! reports.
//!
//! Every stage is keyed by a hash of the config fields it reads plus the
//! hashes of the stages it consumes. A rerun with an unchanged key reloads
//! the stage's artifacts from the run directory, so changing one field
//! recomputes exactly the stages downstream of it.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::densities::{make_target, Normalization, TargetDensity, TargetSpec};
use crate::ebm::{train_ebm, EbmConfig, EnergyModel, LossWeights};
use crate::emulator::{
    exact_log_likelihood, nll, sample, train_flow, Dataset, EmulatorObjective, EmulatorSampleSet,
    FlowModel, FlowTrainConfig,
};
use crate::error::{invalid, Result};
use crate::interpolant::Schedule;
use crate::io::{json_f64, read_table, sidecar_path, split_points, write_points_with};
use crate::metrics::{energy_w2_batched, grid_density_l2, MetricReport, ENERGY_W2_BATCH};
use crate::ode::{DivergenceMode, OdeOptions};
use crate::reweight::{
    free_energy_difference, normalized_weights, weighted_ensemble, FreeEnergyReport, Provenance,
    WeightedEnsemble,
};
use crate::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmulatorSection {
    pub objective: EmulatorObjective,
    pub schedule: Schedule,
    pub train: FlowTrainConfig,
}

impl Default for EmulatorSection {
    fn default() -> Self {
        EmulatorSection {
            objective: EmulatorObjective::VectorField,
            schedule: Schedule::Linear,
            train: FlowTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    /// Emulator samples drawn for EBM training and reweighting.
    pub n: usize,
    /// Divergence used for the exact-likelihood baseline.
    pub divergence: DivergenceMode,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            n: 100_000,
            divergence: DivergenceMode::ExactAutodiff,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReweightSection {
    /// Column of the samples used as the collective coordinate.
    pub coordinate: usize,
    pub region: [f64; 2],
    pub bins: usize,
}

impl Default for ReweightSection {
    fn default() -> Self {
        ReweightSection {
            coordinate: 0,
            region: [0.0, 2.0],
            bins: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    /// Grid points per axis for the density error (0 disables it).
    pub grid_points: usize,
    /// Held-out target samples for the emulator NLL (0 disables it).
    pub nll_holdout: usize,
    pub nll_batch: usize,
    /// Target samples compared against emulator energies (0 disables E-W2).
    pub reference_samples: usize,
    pub w2_batch: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            grid_points: 200,
            nll_holdout: 2000,
            nll_batch: 500,
            reference_samples: 100_000,
            w2_batch: ENERGY_W2_BATCH,
        }
    }
}

/// EBM loss variants compared in an ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    NceOnly,
    SmOnly,
    Both,
}

impl AblationVariant {
    pub fn weights(self) -> LossWeights {
        let (sm, nce) = match self {
            AblationVariant::NceOnly => (0.0, 1.0),
            AblationVariant::SmOnly => (1.0, 0.0),
            AblationVariant::Both => (1.0, 1.0),
        };
        LossWeights {
            sm_weight: sm,
            nce_weight: nce,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.to_string()))
            .map_err(|_| invalid(format!("unknown ablation variant '{s}' (nce_only, sm_only, both)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub variants: Vec<AblationVariant>,
    /// Target samples each variant is trained on.
    pub train_size: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            variants: vec![AblationVariant::NceOnly, AblationVariant::SmOnly, AblationVariant::Both],
            train_size: 10_000,
        }
    }
}

/// Everything a run reads. Serialized verbatim into `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub target: TargetSpec,
    pub seed: u64,
    pub out: PathBuf,
    pub emulator: EmulatorSection,
    pub ebm: EbmConfig,
    pub samples: SampleSection,
    pub ode: OdeOptions,
    pub reweight: ReweightSection,
    pub metrics: MetricsSection,
    pub ablation: AblationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            target: TargetSpec::named("two_well").expect("built-in target"),
            seed: 0,
            out: PathBuf::from("runs/boltznce"),
            emulator: EmulatorSection::default(),
            ebm: EbmConfig::default(),
            samples: SampleSection::default(),
            ode: OdeOptions::default(),
            reweight: ReweightSection::default(),
            metrics: MetricsSection::default(),
            ablation: AblationSection::default(),
        }
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| invalid(format!("'{key}': '{}' is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(invalid("empty override key"))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| invalid(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Applies `key=value` overrides with dotted keys. Values are parsed
    /// as JSON when possible and taken as strings otherwise.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| invalid(format!("override '{o}' is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut v, key.trim(), value)?;
        }
        serde_json::from_value(v).map_err(|e| invalid(format!("override: {e}")))
    }

    pub fn target(&self) -> Result<TargetDensity> {
        make_target(&self.target)
    }

    /// Every leaf key with its default value, in dotted form.
    pub fn documented_keys() -> Vec<(String, String)> {
        fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
            match v {
                Value::Object(m) if !m.is_empty() => {
                    for (k, c) in m {
                        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        walk(&key, c, out);
                    }
                }
                other => out.push((prefix.to_string(), other.to_string())),
            }
        }
        let mut out = Vec::new();
        walk("", &serde_json::to_value(ExperimentConfig::default()).expect("config serializes"), &mut out);
        out
    }
}

/// Hex SHA-256 of the canonical JSON of `parts`.
fn stage_hash(parts: &[Value]) -> String {
    let text = serde_json::to_string(parts).expect("stage inputs serialize");
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub hash: String,
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub error: String,
}

/// `manifest.json`: completed stages with their input hashes, plus the
/// stage that failed, if any.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
    pub failed: Option<StageFailure>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(MANIFEST);
        if !p.exists() {
            return Ok(Manifest::default());
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?)
    }

    fn save(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    fn is_current(&self, dir: &Path, stage: &str, hash: &str) -> bool {
        self.stages.get(stage).is_some_and(|r| {
            r.hash == hash && r.artifacts.iter().all(|a| dir.join(a).exists())
        })
    }
}

pub const MANIFEST: &str = "manifest.json";

/// Per-stage wall-clock seconds. Machine-dependent by nature and therefore
/// the one artifact excluded from byte-level reproducibility.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    /// Stage name to seconds; cached stages are absent.
    pub stages: BTreeMap<String, f64>,
    pub cached: Vec<String>,
    /// Seconds per sample for the divergence-integral likelihood.
    pub exact_likelihood_per_sample: Option<f64>,
    /// Seconds per sample for the EBM likelihood.
    pub ebm_likelihood_per_sample: Option<f64>,
    pub likelihood_speedup: Option<f64>,
}

/// Pearson correlation and spread of the difference between two
/// log-likelihood estimates of the same points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    /// NaN when either series is constant.
    #[serde(with = "json_f64")]
    pub pearson: f64,
    #[serde(with = "json_f64")]
    pub diff_std: f64,
    pub n: usize,
}

pub fn likelihood_agreement(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<Agreement> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(invalid("agreement needs two equal-length series of at least two values"));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.sum() / n, b.sum() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b.iter()) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    let d = &a - &b;
    let md = d.sum() / n;
    let var = d.iter().map(|v| (v - md).powi(2)).sum::<f64>() / n;
    Ok(Agreement {
        pearson: sab / (saa * sbb).sqrt(),
        diff_std: var.sqrt(),
        n: a.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceSummary {
    #[serde(with = "json_f64")]
    pub delta_f: f64,
    pub ess: f64,
    pub ess_fraction: f64,
    pub excluded: usize,
}

/// `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineMetrics {
    pub report: MetricReport,
    pub exact: ProvenanceSummary,
    pub ebm: ProvenanceSummary,
    #[serde(with = "json_f64")]
    pub delta_f_difference: f64,
    /// EBM log-density against the exact emulator likelihood on the samples.
    pub likelihood_agreement: Agreement,
    /// Reference free energy from grid quadrature, when the target has one.
    pub reference_delta_f: Option<f64>,
}

impl PipelineMetrics {
    /// Side-by-side table of the two likelihood provenances.
    pub fn comparison_table(&self) -> String {
        let mut s = format!("{:<18} {:>12} {:>12}\n", "", "exact", "ebm");
        s.push_str(&format!("{:<18} {:>12.4} {:>12.4}\n", "Delta F / kT", self.exact.delta_f, self.ebm.delta_f));
        s.push_str(&format!("{:<18} {:>12.1} {:>12.1}\n", "ESS", self.exact.ess, self.ebm.ess));
        s.push_str(&format!(
            "{:<18} {:>12.4} {:>12.4}\n",
            "ESS / n", self.exact.ess_fraction, self.ebm.ess_fraction
        ));
        if let Some(r) = self.reference_delta_f {
            s.push_str(&format!("{:<18} {:>12.4}\n", "quadrature Delta F", r));
        }
        s.push_str(&format!(
            "likelihood agreement: pearson {:.4}, diff std {:.4} over {} samples\n",
            self.likelihood_agreement.pearson, self.likelihood_agreement.diff_std, self.likelihood_agreement.n
        ));
        s
    }
}

/// Sidecar of a weights CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsMetadata {
    pub provenance: Provenance,
    pub ess: f64,
    pub excluded: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Writes every sample with its log-likelihood, log-weight and normalized
/// weight; excluded samples carry a non-finite log-weight and zero weight.
pub fn save_weights(
    path: &Path,
    samples: ArrayView2<f64>,
    loglik: ArrayView1<f64>,
    log_weights: ArrayView1<f64>,
    ens: &WeightedEnsemble,
) -> Result<()> {
    let finite: Vec<bool> = log_weights.iter().map(|v| v.is_finite()).collect();
    let kept = Array1::from_iter(log_weights.iter().zip(&finite).filter(|(_, f)| **f).map(|(v, _)| *v));
    let w_kept = normalized_weights(kept.view())?;
    let mut it = w_kept.iter();
    let w: Array1<f64> = finite.iter().map(|&f| if f { *it.next().unwrap() } else { 0.0 }).collect();
    let (loglik, log_weights) = (loglik.to_owned(), log_weights.to_owned());
    write_points_with(
        path,
        samples,
        &[("loglik", loglik.view()), ("log_weight", log_weights.view()), ("weight", w.view())],
    )?;
    let meta = WeightsMetadata {
        provenance: ens.provenance,
        ess: ens.diagnostics.ess,
        excluded: ens.diagnostics.excluded.clone(),
        warnings: ens.diagnostics.warnings.clone(),
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Samples, log-likelihoods and log-weights of a weights CSV.
#[derive(Debug, Clone)]
pub struct WeightsFile {
    pub samples: Array2<f64>,
    pub loglik: Array1<f64>,
    pub log_weights: Array1<f64>,
    pub provenance: Provenance,
}

impl WeightsFile {
    pub fn load(path: &Path) -> Result<Self> {
        let (headers, cols) = read_table(path)?;
        let (samples, rest) = split_points(&headers, cols)?;
        let mut rest: BTreeMap<String, Vec<f64>> = rest.into_iter().collect();
        let mut take = |name: &str| {
            rest.remove(name)
                .map(Array1::from)
                .ok_or_else(|| invalid(format!("{}: no '{name}' column", path.display())))
        };
        let log_weights = take("log_weight")?;
        let loglik = take("loglik").unwrap_or_else(|_| Array1::from_elem(samples.nrows(), f64::NAN));
        let side = sidecar_path(path);
        let provenance = if side.exists() {
            serde_json::from_str::<WeightsMetadata>(&std::fs::read_to_string(side)?)?.provenance
        } else if path.to_string_lossy().contains("ebm") {
            Provenance::EbmLikelihood
        } else {
            Provenance::ExactLikelihood
        };
        Ok(WeightsFile {
            samples,
            loglik,
            log_weights,
            provenance,
        })
    }

    pub fn ensemble(&self) -> Result<WeightedEnsemble> {
        weighted_ensemble(self.samples.view(), self.log_weights.view(), self.provenance)
    }
}

/// `-U(x)/kT - loglik(x)` per sample; non-finite where either term is.
pub fn log_weights(target: &TargetDensity, samples: ArrayView2<f64>, loglik: ArrayView1<f64>) -> Array1<f64> {
    let kbt = target.kbt();
    samples
        .rows()
        .into_iter()
        .zip(loglik.iter())
        .map(|(x, &ll)| {
            let v = -target.energy(x) / kbt - ll;
            if v.is_finite() {
                v
            } else {
                f64::NAN
            }
        })
        .collect()
}

/// Free-energy report for a weights file with the run's reweight settings.
pub fn free_energy_from_weights(
    weights: &WeightsFile,
    section: &ReweightSection,
    seed: Option<u64>,
) -> Result<FreeEnergyReport> {
    let ens = weights.ensemble()?;
    if section.coordinate >= ens.samples.ncols() {
        return Err(invalid(format!(
            "coordinate {} out of range for {}-dimensional samples",
            section.coordinate,
            ens.samples.ncols()
        )));
    }
    let c = ens.samples.column(section.coordinate).to_owned();
    free_energy_difference(&ens, c.view(), section.region, section.bins, seed)
}

/// Artifacts of a finished run.
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub dir: PathBuf,
    pub metrics: PipelineMetrics,
    pub timings: Timings,
    pub free_energy_exact: FreeEnergyReport,
    pub free_energy_ebm: FreeEnergyReport,
}

struct Runner<'a> {
    dir: &'a Path,
    manifest: Manifest,
    timings: Timings,
}

impl Runner<'_> {
    /// Runs `compute` unless the stage is current, in which case `load`
    /// restores its outputs from disk.
    fn stage<T>(
        &mut self,
        name: &str,
        hash: &str,
        artifacts: &[&str],
        load: impl FnOnce() -> Result<T>,
        compute: impl FnOnce() -> Result<T>,
    ) -> Result<T> {
        if self.manifest.is_current(self.dir, name, hash) {
            match load() {
                Ok(v) => {
                    log::info!("stage {name}: up to date");
                    self.timings.cached.push(name.to_string());
                    return Ok(v);
                }
                Err(e) => log::warn!("stage {name}: cached artifacts unreadable ({e}); recomputing"),
            }
        }
        log::info!("stage {name}: running");
        self.manifest.stages.remove(name);
        let start = Instant::now();
        match compute() {
            Ok(v) => {
                self.timings.stages.insert(name.to_string(), start.elapsed().as_secs_f64());
                self.manifest.stages.insert(
                    name.to_string(),
                    StageRecord {
                        hash: hash.to_string(),
                        artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
                    },
                );
                self.manifest.failed = None;
                self.manifest.save(self.dir)?;
                Ok(v)
            }
            Err(e) => {
                self.manifest.failed = Some(StageFailure {
                    stage: name.to_string(),
                    error: e.to_string(),
                });
                self.manifest.save(self.dir)?;
                Err(e)
            }
        }
    }
}

fn json<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config section serializes")
}

/// Runs (or resumes) the full workflow in `cfg.out`.
pub fn run_full_pipeline(cfg: &ExperimentConfig) -> Result<RunOutputs> {
    let target = cfg.target()?;
    if cfg.samples.n < 2 {
        return Err(invalid("samples.n must be at least 2"));
    }
    if cfg.reweight.coordinate >= target.dim() {
        return Err(invalid("reweight.coordinate is out of range for the target"));
    }
    let dir = cfg.out.as_path();
    std::fs::create_dir_all(dir)?;
    let config_text = serde_json::to_string_pretty(cfg)?;
    std::fs::write(dir.join("config.json"), &config_text)?;
    let mut run = Runner {
        dir,
        manifest: Manifest::load(dir).unwrap_or_default(),
        timings: Timings::default(),
    };
    run.manifest.config_hash = stage_hash(&[json(cfg)]);

    // Emulator.
    let h_emu = stage_hash(&[json(&cfg.target), json(&cfg.seed), json(&cfg.emulator)]);
    let emu_path = dir.join("emulator.ckpt");
    let model = run.stage(
        "emulator",
        &h_emu,
        &["emulator.ckpt"],
        || FlowModel::load(&emu_path),
        || {
            let mut source = target.clone();
            let trained = train_flow(
                &mut source,
                cfg.emulator.objective,
                cfg.emulator.schedule,
                &cfg.emulator.train,
                cfg.seed,
            )?;
            trained.checkpoint.save(&emu_path)?;
            Ok(trained.model)
        },
    )?;

    // Emulator samples.
    let h_samples = stage_hash(&[json(&h_emu), json(&cfg.samples.n), json(&cfg.ode)]);
    let samples_path = dir.join("samples.csv");
    let samples = run.stage(
        "samples",
        &h_samples,
        &["samples.csv", "samples.csv.json"],
        || EmulatorSampleSet::load(&samples_path),
        || {
            let set = sample(&model, cfg.samples.n, cfg.seed, &cfg.ode)?;
            set.save(&samples_path)?;
            Ok(set)
        },
    )?;
    let x = samples.samples.view();

    // Exact-likelihood baseline (divergence integral; never touches the EBM).
    let h_exact = stage_hash(&[json(&h_samples), json(&cfg.samples.divergence), json(&cfg.target)]);
    let exact_path = dir.join("weights_exact.csv");
    let exact = run.stage(
        "weights_exact",
        &h_exact,
        &["weights_exact.csv", "weights_exact.csv.json"],
        || WeightsFile::load(&exact_path),
        || {
            let lik = exact_log_likelihood(&model, x, cfg.samples.divergence, &cfg.ode)?;
            let lw = log_weights(&target, x, lik.loglik.view());
            let ens = weighted_ensemble(x, lw.view(), Provenance::ExactLikelihood)?;
            save_weights(&exact_path, x, lik.loglik.view(), lw.view(), &ens)?;
            Ok(WeightsFile {
                samples: x.to_owned(),
                loglik: lik.loglik,
                log_weights: lw,
                provenance: Provenance::ExactLikelihood,
            })
        },
    )?;
    let exact_seconds = run.timings.stages.get("weights_exact").copied();

    // EBM on the emulator samples.
    let h_ebm = stage_hash(&[json(&h_samples), json(&cfg.seed), json(&cfg.ebm)]);
    let ebm_path = dir.join("ebm.ckpt");
    let ebm = run.stage(
        "ebm",
        &h_ebm,
        &["ebm.ckpt"],
        || EnergyModel::load(&ebm_path),
        || {
            let mut data = Dataset::new(samples.samples.clone())?;
            let trained = train_ebm(&mut data, &cfg.ebm, cfg.seed)?;
            trained.checkpoint.save(&ebm_path)?;
            Ok(trained.model)
        },
    )?;

    // EBM-likelihood reweighting (never calls the divergence integral).
    let h_ebm_w = stage_hash(&[json(&h_ebm), json(&h_samples), json(&cfg.target)]);
    let ebm_w_path = dir.join("weights_ebm.csv");
    let ebm_weights = run.stage(
        "weights_ebm",
        &h_ebm_w,
        &["weights_ebm.csv", "weights_ebm.csv.json"],
        || WeightsFile::load(&ebm_w_path),
        || {
            let ll = ebm.log_density(x)?;
            let lw = log_weights(&target, x, ll.view());
            let ens = weighted_ensemble(x, lw.view(), Provenance::EbmLikelihood)?;
            save_weights(&ebm_w_path, x, ll.view(), lw.view(), &ens)?;
            Ok(WeightsFile {
                samples: x.to_owned(),
                loglik: ll,
                log_weights: lw,
                provenance: Provenance::EbmLikelihood,
            })
        },
    )?;
    let ebm_seconds = run.timings.stages.get("weights_ebm").copied();

    // Free energies.
    let h_fe = stage_hash(&[json(&h_exact), json(&h_ebm_w), json(&cfg.reweight), json(&cfg.seed)]);
    let (fe_exact_path, fe_ebm_path) = (dir.join("free_energy_exact.json"), dir.join("free_energy_ebm.json"));
    let (fe_exact, fe_ebm) = run.stage(
        "free_energy",
        &h_fe,
        &[
            "free_energy_exact.json",
            "free_energy_ebm.json",
            "free_energy_exact.csv",
            "free_energy_ebm.csv",
        ],
        || Ok((FreeEnergyReport::load_json(&fe_exact_path)?, FreeEnergyReport::load_json(&fe_ebm_path)?)),
        || {
            let a = free_energy_from_weights(&exact, &cfg.reweight, Some(cfg.seed))?;
            let b = free_energy_from_weights(&ebm_weights, &cfg.reweight, Some(cfg.seed))?;
            a.save_json(&fe_exact_path)?;
            b.save_json(&fe_ebm_path)?;
            a.save_histogram_csv(&dir.join("free_energy_exact.csv"))?;
            b.save_histogram_csv(&dir.join("free_energy_ebm.csv"))?;
            Ok((a, b))
        },
    )?;

    // Metrics.
    let h_metrics = stage_hash(&[json(&h_fe), json(&h_emu), json(&cfg.metrics)]);
    let metrics_path = dir.join("metrics.json");
    let metrics = run.stage(
        "metrics",
        &h_metrics,
        &["metrics.json"],
        || Ok(serde_json::from_str::<PipelineMetrics>(&std::fs::read_to_string(&metrics_path)?)?),
        || {
            let m = compute_metrics(cfg, &target, &model, &ebm, x, &exact, &ebm_weights, &fe_exact, &fe_ebm)?;
            std::fs::write(&metrics_path, serde_json::to_string_pretty(&m)?)?;
            Ok(m)
        },
    )?;

    let mut timings = run.timings;
    let n = cfg.samples.n as f64;
    timings.exact_likelihood_per_sample = exact_seconds.map(|s| s / n);
    timings.ebm_likelihood_per_sample = ebm_seconds.map(|s| s / n);
    if let (Some(a), Some(b)) = (exact_seconds, ebm_seconds) {
        timings.likelihood_speedup = Some(a / b.max(1e-12));
    }
    std::fs::write(dir.join("timings.json"), serde_json::to_string_pretty(&timings)?)?;
    Ok(RunOutputs {
        dir: dir.to_path_buf(),
        metrics,
        timings,
        free_energy_exact: fe_exact,
        free_energy_ebm: fe_ebm,
    })
}

/// Quadrature free energy of a region of one coordinate:
/// `-log(P(inside) / P(outside))`.
pub fn reference_free_energy(target: &TargetDensity, section: &ReweightSection, points: usize) -> Result<f64> {
    let grid = target.covering_grid(points);
    let nodes = grid.nodes();
    let lp = target.log_densities(nodes.view());
    let (mut inside, mut outside) = (Vec::new(), Vec::new());
    for (row, l) in nodes.rows().into_iter().zip(lp.iter()) {
        let c = row[section.coordinate];
        if c > section.region[0] && c < section.region[1] {
            inside.push(*l);
        } else {
            outside.push(*l);
        }
    }
    use crate::densities::log_sum_exp;
    Ok(-(log_sum_exp(&inside) - log_sum_exp(&outside)))
}

#[allow(clippy::too_many_arguments)]
fn compute_metrics(
    cfg: &ExperimentConfig,
    target: &TargetDensity,
    model: &FlowModel,
    ebm: &EnergyModel,
    x: ArrayView2<f64>,
    exact: &WeightsFile,
    ebm_weights: &WeightsFile,
    fe_exact: &FreeEnergyReport,
    fe_ebm: &FreeEnergyReport,
) -> Result<PipelineMetrics> {
    let m = &cfg.metrics;
    let mut report = MetricReport {
        seeds: vec![cfg.seed],
        ..Default::default()
    };
    if m.reference_samples > 0 {
        let reference = target.sample(m.reference_samples, &mut stream_rng(cfg.seed, 31))?;
        let (w2, batch) = energy_w2_batched(target.energies(x).view(), target.energies(reference.view()).view(), m.w2_batch)?;
        report.e_w2 = Some(w2);
        report.e_w2_batch = Some(batch);
    }
    if m.nll_holdout > 0 {
        let holdout = target.sample(m.nll_holdout, &mut stream_rng(cfg.seed, 32))?;
        let r = nll(model, holdout.view(), m.nll_batch, &cfg.ode)?;
        report.nll_mean = Some(r.mean);
        report.nll_std = Some(r.std);
        report.nll_batch = Some(r.batch_size);
    }
    if m.grid_points > 0 && target.dim() == 2 && target.normalization() != Normalization::Unnormalized {
        let grid = target.covering_grid(m.grid_points);
        report.density_l2 = Some(grid_density_l2(|p| ebm.log_density(p), target, &grid)?);
    }
    let summary = |w: &WeightsFile, fe: &FreeEnergyReport| -> Result<ProvenanceSummary> {
        let ens = w.ensemble()?;
        Ok(ProvenanceSummary {
            delta_f: fe.delta_f,
            ess: ens.diagnostics.ess,
            ess_fraction: ens.diagnostics.ess_fraction,
            excluded: ens.diagnostics.excluded.len(),
        })
    };
    let reference_delta_f = if target.normalization() != Normalization::Unnormalized {
        Some(reference_free_energy(target, &cfg.reweight, 400)?)
    } else {
        None
    };
    Ok(PipelineMetrics {
        report,
        exact: summary(exact, fe_exact)?,
        ebm: summary(ebm_weights, fe_ebm)?,
        delta_f_difference: fe_ebm.delta_f - fe_exact.delta_f,
        likelihood_agreement: likelihood_agreement(ebm_weights.loglik.view(), exact.loglik.view())?,
        reference_delta_f,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub variant: AblationVariant,
    pub density_l2: f64,
    pub best_validation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub target: TargetSpec,
    pub seed: u64,
    pub entries: Vec<AblationEntry>,
    /// `both` beats every other variant present; `None` without `both`.
    pub both_is_best: Option<bool>,
}

impl AblationReport {
    pub fn error_of(&self, v: AblationVariant) -> Option<f64> {
        self.entries.iter().find(|e| e.variant == v).map(|e| e.density_l2)
    }
}

/// Trains one EBM per variant on the same target samples and seed and
/// scores each by grid density error. Writes `ablation.json` to `cfg.out`.
pub fn run_ablation(cfg: &ExperimentConfig, variants: &[AblationVariant]) -> Result<AblationReport> {
    let target = cfg.target()?;
    if target.dim() != 2 || target.normalization() == Normalization::Unnormalized {
        return Err(invalid("ablations need a normalized 2D target"));
    }
    if variants.is_empty() {
        return Err(invalid("no ablation variants given"));
    }
    let data = target.sample(
        cfg.ablation.train_size + cfg.ebm.validation_size,
        &mut stream_rng(cfg.seed, 41),
    )?;
    let grid = target.covering_grid(cfg.metrics.grid_points.max(1));
    let mut entries = Vec::new();
    for &variant in variants {
        let ebm_cfg = EbmConfig {
            loss: variant.weights(),
            train_size: cfg.ablation.train_size,
            ..cfg.ebm.clone()
        };
        let mut source = Dataset::new(data.clone())?;
        let trained = train_ebm(&mut source, &ebm_cfg, cfg.seed)?;
        let err = grid_density_l2(|p| trained.model.log_density(p), &target, &grid)?;
        log::info!("ablation {variant:?}: density L2 {err:.4}");
        entries.push(AblationEntry {
            variant,
            density_l2: err,
            best_validation: trained.summary.best_validation,
        });
    }
    let both = entries.iter().find(|e| e.variant == AblationVariant::Both).map(|e| e.density_l2);
    let both_is_best = both.map(|b| {
        entries
            .iter()
            .filter(|e| e.variant != AblationVariant::Both)
            .all(|e| b < e.density_l2)
    });
    let report = AblationReport {
        target: cfg.target.clone(),
        seed: cfg.seed,
        entries,
        both_is_best,
    };
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
