//! Sample-quality metrics: energy W2, torsion-angle W2 under a circular
//! ground cost, and grid density error against an exact target.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

use crate::coupling::linear_sum_assignment;
use crate::densities::{GridQuadrature, Normalization, TargetDensity};
use crate::error::{invalid, Error, Result};
use crate::stream_rng;

/// Batch size used for energy W2 when enough samples are available.
pub const ENERGY_W2_BATCH: usize = 100_000;

/// Largest fraction of target mass the density grid may miss.
pub const GRID_MASS_TOLERANCE: f64 = 1e-3;

fn sorted(v: ArrayView1<f64>) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(invalid("W2 needs non-empty inputs"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("W2 input".into()));
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// Exact 1D W2 through the quantile coupling. Inputs of different sizes are
/// handled by integrating the squared quantile difference piecewise.
pub fn energy_w2(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    let a = sorted(a)?;
    let b = sorted(b)?;
    if a.len() == b.len() {
        let s: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
        return Ok((s / a.len() as f64).sqrt());
    }
    let (na, nb) = (a.len(), b.len());
    // Breakpoints i/na and j/nb, merged exactly via integer cross-multiplication.
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = 0u128;
    let total = (na * nb) as u128;
    let mut acc = 0.0;
    while i < na && j < nb {
        let ea = (i as u128 + 1) * nb as u128;
        let eb = (j as u128 + 1) * na as u128;
        let next = ea.min(eb);
        acc += (next - prev) as f64 * (a[i] - b[j]).powi(2);
        prev = next;
        if ea == next {
            i += 1;
        }
        if eb == next {
            j += 1;
        }
    }
    Ok((acc / total as f64).sqrt())
}

/// Energy W2 averaged over consecutive batches of `batch` samples per side.
/// Falls back to a single batch when either input is smaller.
pub fn energy_w2_batched(a: ArrayView1<f64>, b: ArrayView1<f64>, batch: usize) -> Result<(f64, usize)> {
    if batch == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let k = (a.len() / batch).min(b.len() / batch);
    if k == 0 {
        return Ok((energy_w2(a, b)?, a.len().min(b.len())));
    }
    let vals = (0..k)
        .map(|i| {
            let r = i * batch..(i + 1) * batch;
            energy_w2(a.slice(ndarray::s![r.clone()]), b.slice(ndarray::s![r]))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((vals.iter().sum::<f64>() / k as f64, batch))
}

/// Ground cost between two angles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CircularCost {
    /// Distance to the nearest periodic image, `min(|d|, 2π - |d|)`.
    #[default]
    NearestPeriod,
    /// `(x - y) mod π` with a non-negative remainder, taken literally.
    StrictModPi,
}

impl CircularCost {
    fn distance(self, x: f64, y: f64) -> f64 {
        match self {
            CircularCost::NearestPeriod => {
                let d = (x - y).rem_euclid(2.0 * PI);
                d.min(2.0 * PI - d)
            }
            CircularCost::StrictModPi => (x - y).rem_euclid(PI),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AngleW2Config {
    pub batch_size: usize,
    pub repeats: usize,
    pub cost: CircularCost,
}

impl Default for AngleW2Config {
    fn default() -> Self {
        AngleW2Config {
            batch_size: 2000,
            repeats: 5,
            cost: CircularCost::NearestPeriod,
        }
    }
}

/// Wraps angles into `(-π, π]`, warning when anything had to move.
pub fn principal_angles(x: ArrayView2<f64>) -> Result<Array2<f64>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("angle".into()));
    }
    let mut moved = 0usize;
    let out = x.mapv(|v| {
        if v > -PI && v <= PI {
            v
        } else {
            moved += 1;
            let w = (v + PI).rem_euclid(2.0 * PI) - PI;
            if w == -PI {
                PI
            } else {
                w
            }
        }
    });
    if moved > 0 {
        log::warn!("{moved} angles outside (-pi, pi] were wrapped into the principal range");
    }
    Ok(out)
}

fn angle_w2_exact(a: ArrayView2<f64>, b: ArrayView2<f64>, cost: CircularCost) -> f64 {
    let n = a.nrows();
    let c = Array2::from_shape_fn((n, n), |(i, j)| {
        a.row(i)
            .iter()
            .zip(b.row(j).iter())
            .map(|(x, y)| cost.distance(*x, *y).powi(2))
            .sum::<f64>()
    });
    let perm = linear_sum_assignment(&c);
    let total: f64 = perm.iter().enumerate().map(|(i, &j)| c[[i, j]]).sum();
    (total / n as f64).sqrt()
}

/// W2 between two sets of torsion-angle vectors (rows) under a circular
/// ground cost, from equal-size sub-batches solved by assignment and
/// averaged over repeats. Inputs that fit in one batch are solved exactly.
pub fn angle_w2(a: ArrayView2<f64>, b: ArrayView2<f64>, cfg: &AngleW2Config, seed: u64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("angle W2 needs non-empty inputs"));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::ShapeMismatch("angle sets have different widths".into()));
    }
    if cfg.batch_size == 0 || cfg.repeats == 0 {
        return Err(invalid("angle W2 batch size and repeats must be positive"));
    }
    let a = principal_angles(a)?;
    let b = principal_angles(b)?;
    let m = cfg.batch_size.min(a.nrows()).min(b.nrows());
    if m == a.nrows() && m == b.nrows() {
        return Ok(angle_w2_exact(a.view(), b.view(), cfg.cost));
    }
    let vals: Vec<f64> = (0..cfg.repeats)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, 200 + r as u64);
            let ia = sample_indices(&mut rng, a.nrows(), m).into_vec();
            let ib = sample_indices(&mut rng, b.nrows(), m).into_vec();
            angle_w2_exact(a.select(Axis(0), &ia).view(), b.select(Axis(0), &ib).view(), cfg.cost)
        })
        .collect();
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Relative L2 error `||q - p|| / ||p||` on the grid, where the model
/// density `q` is self-normalized over the grid so unnormalized models
/// (EBMs) can be compared directly.
pub fn grid_density_l2<F>(model_log_density: F, target: &TargetDensity, grid: &GridQuadrature) -> Result<f64>
where
    F: Fn(ArrayView2<f64>) -> Result<Array1<f64>>,
{
    if target.normalization() == Normalization::Unnormalized {
        return Err(invalid("grid density error needs a normalized target"));
    }
    if grid.dim() != target.dim() {
        return Err(Error::ShapeMismatch("grid and target dimensions differ".into()));
    }
    let nodes = grid.nodes();
    let dv = grid.cell_volume();
    let p = target.log_densities(nodes.view()).mapv(f64::exp);
    let mass = p.sum() * dv;
    let missing = 1.0 - mass;
    if missing > GRID_MASS_TOLERANCE {
        return Err(Error::GridTooSmall { missing });
    }
    let lq = model_log_density(nodes.view())?;
    if lq.len() != nodes.nrows() {
        return Err(Error::ShapeMismatch("model returned the wrong number of values".into()));
    }
    if lq.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::NonFinite("model log-density on grid".into()));
    }
    let m = lq.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let q = lq.mapv(|v| (v - m).exp());
    let q = &q / (q.sum() * dv);
    let num = (&q - &p).mapv(|d| d * d).sum() * dv;
    let den = p.mapv(|v| v * v).sum() * dv;
    Ok((num / den).sqrt())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub e_w2: Option<f64>,
    pub e_w2_batch: Option<usize>,
    pub t_w2: Option<f64>,
    pub t_w2_batch: Option<usize>,
    pub nll_mean: Option<f64>,
    pub nll_std: Option<f64>,
    pub nll_batch: Option<usize>,
    pub density_l2: Option<f64>,
    pub seeds: Vec<u64>,
}

impl MetricReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Plain-text summary table, one metric per line.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let mut s = String::new();
        s.push_str(&format!("{:<12} {:>12}\n", "metric", "value"));
        s.push_str(&format!("{:<12} {:>12}\n", "NLL", fmt(self.nll_mean)));
        s.push_str(&format!("{:<12} {:>12}\n", "NLL std", fmt(self.nll_std)));
        s.push_str(&format!("{:<12} {:>12}\n", "E-W2", fmt(self.e_w2)));
        s.push_str(&format!("{:<12} {:>12}\n", "T-W2", fmt(self.t_w2)));
        s.push_str(&format!("{:<12} {:>12}\n", "density L2", fmt(self.density_l2)));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::{make_target, TargetSpec};
    use crate::emulator::standard_normal;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn energy_w2_trivial_cases() {
        let a = array![3.0, -1.0, 2.5, 0.0];
        assert_eq!(energy_w2(a.view(), a.view()).unwrap(), 0.0);
        let b = &a + 1.75;
        assert!((energy_w2(a.view(), b.view()).unwrap() - 1.75).abs() < 1e-15);
        assert!(energy_w2(Array1::zeros(0).view(), a.view()).is_err());
    }

    #[test]
    fn energy_w2_gaussian_shift() {
        let mut rng = stream_rng(10, 0);
        let x = standard_normal(100_000, 2, &mut rng);
        let a = x.column(0).to_owned();
        let b = x.column(1).mapv(|v| v + 1.0);
        let w = energy_w2(a.view(), b.view()).unwrap();
        assert!((w - 1.0).abs() < 0.02, "{w}");
    }

    #[test]
    fn energy_w2_unequal_sizes() {
        // Replicating each sample k times leaves the empirical law unchanged.
        let a = array![0.3, -1.2, 2.0];
        let b = array![1.0, 0.5];
        let rep = |v: &Array1<f64>, k: usize| -> Array1<f64> { v.iter().flat_map(|x| std::iter::repeat(*x).take(k)).collect() };
        let direct = energy_w2(a.view(), b.view()).unwrap();
        let equal = energy_w2(rep(&a, 2).view(), rep(&b, 3).view()).unwrap();
        assert!((direct - equal).abs() < 1e-14);
    }

    #[test]
    fn energy_w2_matches_assignment_oracle() {
        for (n, seed) in [(7, 1u64), (100, 2), (500, 3)] {
            let mut rng = stream_rng(seed, 0);
            let x = standard_normal(n, 2, &mut rng);
            let (a, b) = (x.column(0), x.column(1).mapv(|v| 2.0 * v + 0.5));
            let c = Array2::from_shape_fn((n, n), |(i, j)| (a[i] - b[j]).powi(2));
            let perm = linear_sum_assignment(&c);
            let oracle = (perm.iter().enumerate().map(|(i, &j)| c[[i, j]]).sum::<f64>() / n as f64).sqrt();
            let sorted = energy_w2(a, b.view()).unwrap();
            assert!((sorted - oracle).abs() < 1e-10, "n={n}: {sorted} vs {oracle}");
        }
    }

    #[test]
    fn batched_energy_w2_averages_batches() {
        let a: Array1<f64> = (0..10).map(f64::from).collect();
        let b = &a + 2.0;
        let (w, batch) = energy_w2_batched(a.view(), b.view(), 5).unwrap();
        assert_eq!(batch, 5);
        assert!((w - 2.0).abs() < 1e-15);
        let (_, batch) = energy_w2_batched(a.view(), b.view(), 100).unwrap();
        assert_eq!(batch, 10);
    }

    #[test]
    fn angle_w2_hand_cases() {
        let cfg = AngleW2Config::default();
        let x = array![[0.0]];
        let y = array![[PI / 2.0]];
        assert!((angle_w2(x.view(), y.view(), &cfg, 0).unwrap() - PI / 2.0).abs() < 1e-15);
        let x = array![[PI - 0.05]];
        let y = array![[-PI + 0.05]];
        assert!((angle_w2(x.view(), y.view(), &cfg, 0).unwrap() - 0.1).abs() < 1e-12);
        let strict = AngleW2Config {
            cost: CircularCost::StrictModPi,
            ..cfg.clone()
        };
        // (2π - 0.1) mod π = π - 0.1 under the literal formula.
        assert!((angle_w2(x.view(), y.view(), &strict, 0).unwrap() - (PI - 0.1)).abs() < 1e-12);
        let z = array![[0.1, -2.0], [3.0, 1.0], [-1.0, 0.5]];
        assert_eq!(angle_w2(z.view(), z.view(), &cfg, 0).unwrap(), 0.0);
    }

    #[test]
    fn angle_w2_subbatches_are_deterministic() {
        let mut rng = stream_rng(11, 0);
        let a = standard_normal(300, 2, &mut rng);
        let b = standard_normal(250, 2, &mut rng) + 0.5;
        let cfg = AngleW2Config {
            batch_size: 100,
            repeats: 3,
            ..Default::default()
        };
        let w1 = angle_w2(a.view(), b.view(), &cfg, 4).unwrap();
        let w2 = angle_w2(a.view(), b.view(), &cfg, 4).unwrap();
        assert_eq!(w1.to_bits(), w2.to_bits());
        assert!(w1 > 0.2 && w1 < 1.5, "{w1}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn angle_w2_symmetric_and_periodic(
            a in proptest::collection::vec(-3.14f64..3.14, 6),
            b in proptest::collection::vec(-3.14f64..3.14, 6),
            k in -2i32..3,
        ) {
            let cfg = AngleW2Config::default();
            let a = Array2::from_shape_vec((3, 2), a).unwrap();
            let b = Array2::from_shape_vec((3, 2), b).unwrap();
            let ab = angle_w2(a.view(), b.view(), &cfg, 0).unwrap();
            let ba = angle_w2(b.view(), a.view(), &cfg, 0).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            let shifted = &a + 2.0 * PI * k as f64;
            let s = angle_w2(shifted.view(), b.view(), &cfg, 0).unwrap();
            prop_assert!((ab - s).abs() < 1e-9);
        }
    }

    #[test]
    fn grid_l2_exact_and_uniform_models() {
        let target = make_target(&TargetSpec::named("eight_gaussians").unwrap()).unwrap();
        let grid = target.covering_grid(200);
        let exact = |x: ArrayView2<f64>| Ok(target.log_densities(x));
        assert!(grid_density_l2(exact, &target, &grid).unwrap() < 1e-12);
        let shifted = |x: ArrayView2<f64>| Ok(target.log_densities(x) + 17.0);
        assert!(grid_density_l2(shifted, &target, &grid).unwrap() < 1e-12);
        let uniform = |x: ArrayView2<f64>| Ok(Array1::zeros(x.nrows()));
        let v = grid_density_l2(uniform, &target, &grid).unwrap();
        assert!((v - 0.9719962405465682).abs() < 1e-10, "{v}");
    }

    #[test]
    fn grid_l2_rejects_grids_missing_mass() {
        let target = make_target(&TargetSpec::named("eight_gaussians").unwrap()).unwrap();
        let small = GridQuadrature::square(-2.0, 2.0, 50);
        let f = |x: ArrayView2<f64>| Ok(Array1::zeros(x.nrows()));
        assert!(matches!(grid_density_l2(f, &target, &small), Err(Error::GridTooSmall { .. })));
    }

    #[test]
    fn report_round_trip() {
        let r = MetricReport {
            e_w2: Some(0.5),
            density_l2: Some(0.1),
            seeds: vec![1, 2],
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        r.save(&p).unwrap();
        assert_eq!(MetricReport::load(&p).unwrap(), r);
        assert!(r.table().contains("E-W2"));
    }
}
