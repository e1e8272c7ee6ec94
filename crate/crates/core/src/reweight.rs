//! Self-normalized importance reweighting of proposal samples to a
//! Boltzmann target, observables, free-energy differences and dataset
//! biasing.
//!
//! All weight arithmetic stays in log space until a single max-shift.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::distributions::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

use crate::densities::TargetDensity;
use crate::error::{invalid, Error, Result};
use crate::io::{json_f64, write_table};
use crate::stream_rng;

/// ESS below this fraction of the sample count triggers a warning.
pub const ESS_WARNING_FRACTION: f64 = 0.01;

/// Where the proposal log-likelihood came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    ExactLikelihood,
    EbmLikelihood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightDiagnostics {
    pub n_input: usize,
    /// Indices (into the input) of samples with non-finite energy or likelihood.
    pub excluded: Vec<usize>,
    pub ess: f64,
    pub ess_fraction: f64,
    pub warnings: Vec<String>,
}

/// Samples with unnormalized log-weights `-U(x)/kT - log q(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedEnsemble {
    pub samples: Array2<f64>,
    pub log_weights: Array1<f64>,
    pub provenance: Provenance,
    pub diagnostics: WeightDiagnostics,
}

/// `exp(lw - max)`, the max-shifted weights.
fn shifted_weights(log_w: ArrayView1<f64>) -> Result<Array1<f64>> {
    let m = log_w.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !m.is_finite() {
        return Err(Error::ZeroWeights);
    }
    Ok(log_w.mapv(|l| (l - m).exp()))
}

/// Normalized weights summing to one.
pub fn normalized_weights(log_w: ArrayView1<f64>) -> Result<Array1<f64>> {
    let w = shifted_weights(log_w)?;
    let s = w.sum();
    Ok(w / s)
}

/// `(sum w)^2 / sum w^2`.
pub fn effective_sample_size(log_w: ArrayView1<f64>) -> Result<f64> {
    let w = shifted_weights(log_w)?;
    let s = w.sum();
    Ok(s * s / w.mapv(|v| v * v).sum())
}

/// Builds a weighted ensemble from explicit log-weights, excluding
/// non-finite entries.
pub fn weighted_ensemble(
    samples: ArrayView2<f64>,
    log_weights: ArrayView1<f64>,
    provenance: Provenance,
) -> Result<WeightedEnsemble> {
    if samples.nrows() != log_weights.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} samples but {} weights",
            samples.nrows(),
            log_weights.len()
        )));
    }
    let n = samples.nrows();
    let mut keep = Vec::with_capacity(n);
    let mut excluded = Vec::new();
    for (i, lw) in log_weights.iter().enumerate() {
        let row_ok = samples.row(i).iter().all(|v| v.is_finite());
        if lw.is_finite() && row_ok {
            keep.push(i);
        } else {
            excluded.push(i);
        }
    }
    if keep.is_empty() {
        return Err(Error::ZeroWeights);
    }
    let samples = samples.select(Axis(0), &keep);
    let log_weights = log_weights.select(Axis(0), &keep);
    let ess = effective_sample_size(log_weights.view())?;
    let ess_fraction = ess / keep.len() as f64;
    let mut warnings = Vec::new();
    if !excluded.is_empty() {
        warnings.push(format!(
            "{} of {n} samples excluded for non-finite energy or likelihood",
            excluded.len()
        ));
    }
    if ess_fraction < ESS_WARNING_FRACTION {
        warnings.push(format!(
            "effective sample size {ess:.1} is below {:.0}% of {} samples; weights have collapsed",
            100.0 * ESS_WARNING_FRACTION,
            keep.len()
        ));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(WeightedEnsemble {
        samples,
        log_weights,
        provenance,
        diagnostics: WeightDiagnostics {
            n_input: n,
            excluded,
            ess,
            ess_fraction,
            warnings,
        },
    })
}

/// `log w(x) = -U(x)/kT - loglik(x)` for every sample.
pub fn importance_weights(
    samples: ArrayView2<f64>,
    target: &TargetDensity,
    loglik: ArrayView1<f64>,
    provenance: Provenance,
) -> Result<WeightedEnsemble> {
    if samples.ncols() != target.dim() {
        return Err(Error::ShapeMismatch("sample dimension differs from target".into()));
    }
    if samples.nrows() != loglik.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} samples but {} log-likelihoods",
            samples.nrows(),
            loglik.len()
        )));
    }
    let kbt = target.kbt();
    let log_w: Array1<f64> = samples
        .rows()
        .into_iter()
        .zip(loglik.iter())
        .map(|(x, &ll)| {
            if x.iter().all(|v| v.is_finite()) {
                -target.energy(x) / kbt - ll
            } else {
                f64::NAN
            }
        })
        .collect();
    weighted_ensemble(samples, log_w.view(), provenance)
}

impl WeightedEnsemble {
    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn normalized_weights(&self) -> Result<Array1<f64>> {
        normalized_weights(self.log_weights.view())
    }

    /// CSV with coordinates, `log_weight` and normalized `weight`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let w = self.normalized_weights()?;
        crate::io::write_points_with(
            path,
            self.samples.view(),
            &[("log_weight", self.log_weights.view()), ("weight", w.view())],
        )
    }

    pub fn load(path: &Path, provenance: Provenance) -> Result<Self> {
        let (headers, cols) = crate::io::read_table(path)?;
        let (samples, rest) = crate::io::split_points(&headers, cols)?;
        let lw = rest
            .into_iter()
            .find(|(h, _)| h == "log_weight")
            .ok_or_else(|| invalid(format!("{}: no log_weight column", path.display())))?
            .1;
        weighted_ensemble(samples.view(), Array1::from(lw).view(), provenance)
    }
}

/// Self-normalized estimate of `E[O]` with a delta-method standard error,
/// `sqrt(sum_i wbar_i^2 (O_i - estimate)^2)`.
pub fn estimate_observable(ens: &WeightedEnsemble, values: ArrayView1<f64>) -> Result<(f64, f64)> {
    if values.len() != ens.len() {
        return Err(Error::ShapeMismatch("one observable value per sample".into()));
    }
    if ens.len() < 2 {
        return Err(invalid("observable estimates need at least two samples"));
    }
    let w = ens.normalized_weights()?;
    let est = w.dot(&values);
    let var: f64 = w
        .iter()
        .zip(values.iter())
        .map(|(w, o)| w * w * (o - est).powi(2))
        .sum();
    Ok((est, var.sqrt()))
}

/// [`estimate_observable`] with the observable evaluated per sample.
pub fn estimate_observable_fn<F>(ens: &WeightedEnsemble, observable: F) -> Result<(f64, f64)>
where
    F: Fn(ArrayView1<f64>) -> f64,
{
    let values: Array1<f64> = ens.samples.rows().into_iter().map(observable).collect();
    estimate_observable(ens, values.view())
}

/// Weighted histogram with `numpy.histogram(x, bins, density=True,
/// weights=w)` semantics: range from the data extrema, the last bin closed.
pub fn density_histogram(x: ArrayView1<f64>, w: ArrayView1<f64>, bins: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if bins == 0 {
        return Err(invalid("histogram needs at least one bin"));
    }
    if x.is_empty() || x.len() != w.len() {
        return Err(invalid("histogram needs matching non-empty values and weights"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("histogram coordinate".into()));
    }
    let mut first = x.fold(f64::INFINITY, |a, &b| a.min(b));
    let mut last = x.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if first == last {
        first -= 0.5;
        last += 0.5;
    }
    // np.linspace(first, last, bins + 1)
    let step = (last - first) / bins as f64;
    let mut edges: Vec<f64> = (0..=bins).map(|i| first + i as f64 * step).collect();
    edges[bins] = last;
    let norm = bins as f64 / (last - first);
    let mut counts = vec![0.0; bins];
    for (&v, &wt) in x.iter().zip(w.iter()) {
        let mut i = ((v - first) * norm) as usize;
        if i == bins {
            i -= 1;
        }
        if v < edges[i] {
            i -= 1;
        } else if v >= edges[i + 1] && i != bins - 1 {
            i += 1;
        }
        counts[i] += wt;
    }
    let total: f64 = counts.iter().sum();
    let hist = counts
        .iter()
        .enumerate()
        .map(|(i, c)| c / (edges[i + 1] - edges[i]) / total)
        .collect();
    Ok((hist, edges))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergyReport {
    /// `Delta F / kT = -log(mass inside region / mass outside)`.
    #[serde(with = "json_f64")]
    pub delta_f: f64,
    pub region: [f64; 2],
    pub bins: usize,
    pub edges: Vec<f64>,
    /// Density-normalized weighted histogram.
    pub hist: Vec<f64>,
    pub mass_positive: f64,
    pub mass_negative: f64,
    pub provenance: Provenance,
    pub n_samples: usize,
    pub ess: f64,
    pub seed: Option<u64>,
    pub diagnostics: Vec<String>,
}

/// Sums of the histogram over bins whose centers lie strictly inside and
/// outside `(left, right)`.
fn region_masses(edges: &[f64], hist: &[f64], region: [f64; 2]) -> (f64, f64) {
    let (mut pos, mut neg) = (0.0, 0.0);
    for (i, h) in hist.iter().enumerate() {
        let c = 0.5 * (edges[i + 1] + edges[i]);
        if c > region[0] && c < region[1] {
            pos += h;
        } else {
            neg += h;
        }
    }
    (pos, neg)
}

impl FreeEnergyReport {
    /// Delta F recomputed from the stored histogram alone.
    pub fn recompute(&self) -> f64 {
        let (pos, neg) = region_masses(&self.edges, &self.hist, self.region);
        -(pos / neg).ln()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Histogram as CSV: `left,right,center,density,positive`.
    pub fn save_histogram_csv(&self, path: &Path) -> Result<()> {
        let n = self.hist.len();
        let left: Array1<f64> = self.edges[..n].iter().copied().collect();
        let right: Array1<f64> = self.edges[1..].iter().copied().collect();
        let center = (&left + &right) * 0.5;
        let positive = center.mapv(|c| {
            if c > self.region[0] && c < self.region[1] {
                1.0
            } else {
                0.0
            }
        });
        let hist = Array1::from(self.hist.clone());
        let headers = ["left", "right", "center", "density", "positive"].map(String::from);
        write_table(
            path,
            &headers,
            &[left.view(), right.view(), center.view(), hist.view(), positive.view()],
        )
    }
}

/// Free-energy difference of the region `[left, right]` of a collective
/// coordinate against its complement, from a weighted density histogram.
pub fn free_energy_difference(
    ens: &WeightedEnsemble,
    coordinate: ArrayView1<f64>,
    region: [f64; 2],
    bins: usize,
    seed: Option<u64>,
) -> Result<FreeEnergyReport> {
    if coordinate.len() != ens.len() {
        return Err(Error::ShapeMismatch("one coordinate value per sample".into()));
    }
    if !(region[0] < region[1]) {
        return Err(invalid(format!("region [{}, {}] is empty", region[0], region[1])));
    }
    let w = ens.normalized_weights()?;
    let (hist, edges) = density_histogram(coordinate, w.view(), bins)?;
    let (pos, neg) = region_masses(&edges, &hist, region);
    let delta_f = -(pos / neg).ln();
    let mut diagnostics = ens.diagnostics.warnings.clone();
    if pos == 0.0 {
        diagnostics.push("no weighted mass inside the region; Delta F is +inf".into());
    }
    if neg == 0.0 {
        diagnostics.push("no weighted mass outside the region; Delta F is -inf".into());
    }
    Ok(FreeEnergyReport {
        delta_f,
        region,
        bins,
        edges,
        hist,
        mass_positive: pos,
        mass_negative: neg,
        provenance: ens.provenance,
        n_samples: ens.len(),
        ess: ens.diagnostics.ess,
        seed,
        diagnostics,
    })
}

/// Modified Bessel function of the first kind, order zero (power series).
pub fn bessel_i0(x: f64) -> f64 {
    let q = 0.25 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    while term > 1e-17 * sum {
        term *= q / (k * k);
        sum += term;
        k += 1.0;
    }
    sum
}

/// `scale * f_vM(phi | mu, kappa) + offset`.
pub fn von_mises_weight(phi: f64, mu: f64, kappa: f64, scale: f64, offset: f64) -> f64 {
    scale * (kappa * (phi - mu).cos()).exp() / (2.0 * PI * bessel_i0(kappa)) + offset
}

/// Draws `n` rows with replacement, with probability proportional to
/// `weight_fn(row)`. Returns the rows and their source indices.
pub fn bias_resample<F>(
    data: ArrayView2<f64>,
    weight_fn: F,
    n: usize,
    seed: u64,
) -> Result<(Array2<f64>, Vec<usize>)>
where
    F: Fn(ArrayView1<f64>) -> f64,
{
    let weights: Vec<f64> = data.rows().into_iter().map(weight_fn).collect();
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(invalid("resampling weights must be finite and non-negative"));
    }
    let dist = WeightedIndex::new(&weights).map_err(|_| Error::ZeroWeights)?;
    let mut rng = stream_rng(seed, 21);
    let idx: Vec<usize> = (0..n).map(|_| dist.sample(&mut rng)).collect();
    Ok((data.select(Axis(0), &idx), idx))
}

/// Bisection on the von Mises `scale` so that the expected share of
/// `in_region` samples after [`bias_resample`] equals `share`.
pub fn tune_von_mises_scale(
    coordinate: ArrayView1<f64>,
    in_region: &[bool],
    mu: f64,
    kappa: f64,
    share: f64,
) -> Result<f64> {
    let frac = |scale: f64| {
        let (mut a, mut b) = (0.0, 0.0);
        for (c, &r) in coordinate.iter().zip(in_region) {
            let w = von_mises_weight(*c, mu, kappa, scale, 1.0);
            b += w;
            if r {
                a += w;
            }
        }
        a / b
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    if frac(lo) > share {
        return Err(invalid("region already exceeds the requested share"));
    }
    while frac(hi) < share {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(invalid("requested share is unreachable"));
        }
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if frac(mid) < share {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::{make_target, TargetParams, TargetSpec};
    use crate::emulator::standard_normal;
    use ndarray::array;

    fn gaussian_loglik(x: ArrayView2<f64>, s: f64) -> Array1<f64> {
        let d = x.ncols() as f64;
        x.rows()
            .into_iter()
            .map(|r| -0.5 * r.dot(&r) / (s * s) - d * (s * (2.0 * PI).sqrt()).ln())
            .collect()
    }

    #[test]
    fn perfect_proposal_gives_uniform_weights() {
        let target = make_target(&TargetSpec::named("eight_gaussians").unwrap()).unwrap();
        let x = target.sample(500, &mut stream_rng(0, 0)).unwrap();
        let ll = target.log_densities(x.view());
        let ens = importance_weights(x.view(), &target, ll.view(), Provenance::ExactLikelihood).unwrap();
        let w = ens.normalized_weights().unwrap();
        assert!(w.iter().all(|v| (v - 1.0 / 500.0).abs() < 1e-12));
        assert!((ens.diagnostics.ess - 500.0).abs() < 1e-8);
        assert!(ens.diagnostics.warnings.is_empty());
    }

    #[test]
    fn constant_shift_leaves_everything_unchanged() {
        let mut rng = stream_rng(1, 0);
        let x = standard_normal(300, 2, &mut rng);
        let lw = x.column(0).mapv(|v| 0.7 * v);
        let a = weighted_ensemble(x.view(), lw.view(), Provenance::EbmLikelihood).unwrap();
        let b = weighted_ensemble(x.view(), (&lw + 123.0).view(), Provenance::EbmLikelihood).unwrap();
        let wa = a.normalized_weights().unwrap();
        let wb = b.normalized_weights().unwrap();
        for (p, q) in wa.iter().zip(wb.iter()) {
            assert!((p - q).abs() < 1e-15);
        }
        assert!((a.diagnostics.ess - b.diagnostics.ess).abs() < 1e-9);
        let c = x.column(1).to_owned();
        let fa = free_energy_difference(&a, c.view(), [0.0, 2.0], 100, None).unwrap();
        let fb = free_energy_difference(&b, c.view(), [0.0, 2.0], 100, None).unwrap();
        assert!((fa.delta_f - fb.delta_f).abs() < 1e-12);
    }

    #[test]
    fn non_finite_samples_are_excluded() {
        let x = array![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]];
        let lw = array![0.0, f64::NAN, f64::NEG_INFINITY];
        let ens = weighted_ensemble(x.view(), lw.view(), Provenance::ExactLikelihood).unwrap();
        assert_eq!(ens.len(), 1);
        assert_eq!(ens.diagnostics.excluded, vec![1, 2]);
        assert!(!ens.diagnostics.warnings.is_empty());
        let none = array![f64::NAN, f64::NAN, f64::NAN];
        assert!(matches!(
            weighted_ensemble(x.view(), none.view(), Provenance::ExactLikelihood),
            Err(Error::ZeroWeights)
        ));
    }

    #[test]
    fn degenerate_two_well_proposal_warns() {
        let target = make_target(&TargetSpec {
            params: TargetParams::TwoWell {
                a: 1.0,
                b: 1.0,
                c: 2.0,
                tilt: 0.0,
            },
            kbt: 1.0,
        })
        .unwrap();
        // A narrow proposal on the x1 = -1 well misses the other well.
        let mut rng = stream_rng(2, 0);
        let mut x = standard_normal(20_000, 2, &mut rng) * 0.1;
        x.column_mut(0).mapv_inplace(|v| v - 1.0);
        let ll = gaussian_loglik((&x + &array![1.0, 0.0]).view(), 0.1);
        let ens = importance_weights(x.view(), &target, ll.view(), Provenance::ExactLikelihood).unwrap();
        assert!(ens.diagnostics.ess_fraction < 0.6);
        assert!(ens.diagnostics.warnings.iter().any(|w| w.contains("effective sample size")));
    }

    #[test]
    fn observable_trivial_cases() {
        let mut rng = stream_rng(3, 0);
        let x = standard_normal(2000, 2, &mut rng);
        let lw = Array1::zeros(2000);
        let ens = weighted_ensemble(x.view(), lw.view(), Provenance::ExactLikelihood).unwrap();
        let (e, se) = estimate_observable(&ens, Array1::ones(2000).view()).unwrap();
        assert!((e - 1.0).abs() < 1e-12 && se < 1e-12);
        let (e, se) = estimate_observable_fn(&ens, |r| r[0]).unwrap();
        assert!(e.abs() < 3.0 * se);
    }

    #[test]
    fn second_moment_from_wider_gaussian_proposal() {
        // Target N(0, I) expressed as a two_well-free energy: use the
        // Gaussian log-density directly as -U.
        let mut rng = stream_rng(4, 0);
        let x = standard_normal(100_000, 2, &mut rng) * 1.2;
        let ll = gaussian_loglik(x.view(), 1.2);
        let lw = gaussian_loglik(x.view(), 1.0) - &ll;
        let ens = weighted_ensemble(x.view(), lw.view(), Provenance::ExactLikelihood).unwrap();
        let (e, se) = estimate_observable_fn(&ens, |r| r[0] * r[0]).unwrap();
        assert!((e - 1.0).abs() < 3.0 * se, "{e} +- {se}");
    }

    #[test]
    fn histogram_matches_numpy() {
        // numpy.histogram([0, 0.5, 1, 1, 3], bins=4, density=True,
        //                 weights=[1, 2, 1, 1, 5])
        // -> hist [0.4, 0.4, 0, 0.66666667] / 0.75, edges [0, .75, 1.5, 2.25, 3]
        let x = array![0.0, 0.5, 1.0, 1.0, 3.0];
        let w = array![1.0, 2.0, 1.0, 1.0, 5.0];
        let (h, e) = density_histogram(x.view(), w.view(), 4).unwrap();
        assert_eq!(e, vec![0.0, 0.75, 1.5, 2.25, 3.0]);
        let expect = [0.4, 0.26666666666666666, 0.0, 0.6666666666666666];
        for (a, b) in h.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        // Degenerate range widens by 0.5 on each side.
        let (_, e) = density_histogram(array![2.0, 2.0].view(), array![1.0, 1.0].view(), 2).unwrap();
        assert_eq!(e, vec![1.5, 2.0, 2.5]);
    }

    #[test]
    fn free_energy_closed_forms() {
        // Symmetric coordinate, region [0, 2] holds half the mass.
        let c: Array1<f64> = (0..400).map(|i| -2.0 + (i as f64 + 0.5) * 0.01).collect();
        let x = Array2::zeros((400, 1));
        let ens = weighted_ensemble(x.view(), Array1::zeros(400).view(), Provenance::ExactLikelihood).unwrap();
        let r = free_energy_difference(&ens, c.view(), [0.0, 2.0], 100, Some(7)).unwrap();
        assert!(r.delta_f.abs() < 1e-12);
        assert_eq!(r.recompute().to_bits(), r.delta_f.to_bits());
        // Mass p = 1/4 inside -> log 3.
        let lw: Array1<f64> = c.mapv(|v| if v > 0.0 { (1.0f64 / 3.0).ln() } else { 0.0 });
        let ens = weighted_ensemble(x.view(), lw.view(), Provenance::ExactLikelihood).unwrap();
        let r = free_energy_difference(&ens, c.view(), [0.0, 2.0], 100, None).unwrap();
        assert!((r.delta_f - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_region_is_infinite_and_serializes() {
        let c = array![-1.0, -0.5, -0.2];
        let x = Array2::zeros((3, 1));
        let ens = weighted_ensemble(x.view(), Array1::zeros(3).view(), Provenance::EbmLikelihood).unwrap();
        let r = free_energy_difference(&ens, c.view(), [0.0, 2.0], 10, None).unwrap();
        assert_eq!(r.delta_f, f64::INFINITY);
        assert!(!r.diagnostics.is_empty());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("fe.json");
        r.save_json(&p).unwrap();
        let back = FreeEnergyReport::load_json(&p).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.recompute(), f64::INFINITY);
    }

    #[test]
    fn report_round_trip_recomputes_bit_exactly() {
        let mut rng = stream_rng(5, 0);
        let x = standard_normal(5000, 2, &mut rng);
        let lw = x.column(1).mapv(|v| -0.3 * v * v);
        let ens = weighted_ensemble(x.view(), lw.view(), Provenance::EbmLikelihood).unwrap();
        let r = free_energy_difference(&ens, x.column(0), [0.0, 2.0], 100, Some(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("fe.json");
        r.save_json(&p).unwrap();
        let back = FreeEnergyReport::load_json(&p).unwrap();
        assert_eq!(back.recompute().to_bits(), r.delta_f.to_bits());
        r.save_histogram_csv(&dir.path().join("h.csv")).unwrap();
    }

    #[test]
    fn von_mises_peak_and_normalization() {
        assert!((bessel_i0(0.0) - 1.0).abs() < 1e-16);
        // scipy.special.i0(10) = 2815.716628466254
        assert!((bessel_i0(10.0) / 2815.716628466254 - 1.0).abs() < 1e-14);
        let peak = von_mises_weight(1.0, 1.0, 10.0, 150.0, 1.0);
        let expected = 150.0 * 10f64.exp() / (2.0 * PI * 2815.716628466254) + 1.0;
        assert!((peak - expected).abs() < 1e-10);
        for i in 0..1000 {
            let phi = -PI + 2.0 * PI * i as f64 / 1000.0;
            if (phi - 1.0).abs() > 1e-9 {
                assert!(von_mises_weight(phi, 1.0, 10.0, 150.0, 1.0) < peak);
            }
        }
        // Density integrates to one over a period.
        let m = 20_000;
        let integral: f64 = (0..m)
            .map(|i| von_mises_weight(-PI + 2.0 * PI * (i as f64 + 0.5) / m as f64, 1.0, 10.0, 1.0, 0.0))
            .sum::<f64>()
            * 2.0
            * PI
            / m as f64;
        assert!((integral - 1.0).abs() < 1e-10);
    }

    #[test]
    fn uniform_weights_bootstrap() {
        let data = Array2::from_shape_fn((10, 1), |(i, _)| i as f64);
        let (rows, idx) = bias_resample(data.view(), |_| 1.0, 10_000, 3).unwrap();
        let mut counts = [0usize; 10];
        for &i in &idx {
            counts[i] += 1;
        }
        assert!(counts.iter().all(|&c| (850..1150).contains(&c)));
        assert_eq!(rows[[0, 0]], idx[0] as f64);
        assert!(bias_resample(data.view(), |_| 0.0, 5, 3).is_err());
    }

    #[test]
    fn von_mises_biasing_balances_two_well() {
        let target = make_target(&TargetSpec {
            params: TargetParams::TwoWell {
                a: 1.0,
                b: 1.0,
                c: 2.0,
                tilt: 0.25,
            },
            kbt: 0.25,
        })
        .unwrap();
        let x = target.sample(40_000, &mut stream_rng(6, 0)).unwrap();
        let c = x.column(0).to_owned();
        let inside: Vec<bool> = c.iter().map(|&v| v > 0.0).collect();
        let before = inside.iter().filter(|&&b| b).count() as f64 / 40_000.0;
        assert!(before < 0.3);
        let scale = tune_von_mises_scale(c.view(), &inside, 1.0, 10.0, 0.5).unwrap();
        let (biased, _) =
            bias_resample(x.view(), |r| von_mises_weight(r[0], 1.0, 10.0, scale, 1.0), 40_000, 9)
                .unwrap();
        let share = biased.column(0).iter().filter(|&&v| v > 0.0).count() as f64 / 40_000.0;
        assert!((share - 0.5).abs() < 0.05, "{share}");
    }
}
