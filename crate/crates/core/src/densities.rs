//! Ground-truth targets with exact energies, densities and samplers, plus the
//! grid quadrature used as an oracle for normalizing constants.
//!
//! Every target is a Boltzmann density `mu(x) ∝ exp(-U(x) / kbt)`. The thermal
//! energy `kbt` is stored next to the energy function and is never folded
//! into `U`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{invalid, Error, Result};

/// Energy added on the off squares of the checkerboard. Keeps `U` finite
/// while leaving negligible mass outside the support.
const CHECKER_OFF_PENALTY: f64 = 40.0;
const CHECKER_OUTSIDE_CURVATURE: f64 = 10.0;

/// Per-target parameter record, tagged by the target name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "params", rename_all = "snake_case")]
pub enum TargetParams {
    EightGaussians {
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default = "default_sigma")]
        sigma: f64,
    },
    Checkerboard {
        /// The board spans `[-extent, extent]^2` and is cut into 4x4 squares.
        #[serde(default = "default_extent")]
        extent: f64,
    },
    TwoWell {
        #[serde(default = "default_a")]
        a: f64,
        #[serde(default = "default_b")]
        b: f64,
        #[serde(default = "default_c")]
        c: f64,
        /// Linear term `tilt * x1`; zero gives two wells of equal depth.
        #[serde(default)]
        tilt: f64,
    },
}

fn default_radius() -> f64 {
    4.0
}
fn default_sigma() -> f64 {
    0.3
}
fn default_extent() -> f64 {
    2.0
}
fn default_a() -> f64 {
    1.0
}
fn default_b() -> f64 {
    1.0
}
fn default_c() -> f64 {
    2.0
}
fn default_kbt() -> f64 {
    1.0
}

/// A target selected by name with its parameters and thermal energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    #[serde(flatten)]
    pub params: TargetParams,
    #[serde(default = "default_kbt")]
    pub kbt: f64,
}

impl TargetSpec {
    /// Default parameters for a named target.
    pub fn named(name: &str) -> Result<Self> {
        let params = match name {
            "eight_gaussians" => TargetParams::EightGaussians {
                radius: default_radius(),
                sigma: default_sigma(),
            },
            "checkerboard" => TargetParams::Checkerboard {
                extent: default_extent(),
            },
            "two_well" => TargetParams::TwoWell {
                a: default_a(),
                b: default_b(),
                c: default_c(),
                tilt: 0.0,
            },
            other => return Err(invalid(format!("unknown target '{other}'"))),
        };
        Ok(TargetSpec { params, kbt: 1.0 })
    }
}

/// How trustworthy `log_density` is as a normalized log-density.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Closed form.
    Exact,
    /// Normalizer from a high-resolution quadrature done at construction.
    Quadrature,
    /// `log_density` returns `-U/kbt`, defined up to an additive constant.
    Unnormalized,
}

/// Tabulated inverse CDF of the two-well `x1` marginal.
#[derive(Debug, Clone)]
struct MarginalTable {
    nodes: Vec<f64>,
    density: Vec<f64>,
    cumulative: Vec<f64>,
    log_norm: f64,
}

impl MarginalTable {
    fn build(reduced: impl Fn(f64) -> f64, lo: f64, hi: f64, cells: usize) -> Self {
        let h = (hi - lo) / cells as f64;
        let nodes: Vec<f64> = (0..=cells).map(|i| lo + h * i as f64).collect();
        let energies: Vec<f64> = nodes.iter().map(|&x| reduced(x)).collect();
        let shift = energies.iter().cloned().fold(f64::INFINITY, f64::min);
        let density: Vec<f64> = energies.iter().map(|e| (shift - e).exp()).collect();
        let mut cumulative = Vec::with_capacity(cells + 1);
        cumulative.push(0.0);
        let mut acc = 0.0;
        for i in 0..cells {
            acc += 0.5 * h * (density[i] + density[i + 1]);
            cumulative.push(acc);
        }
        // Simpson for the normalizer; the trapezoid sums above only drive sampling.
        let mut simpson = density[0] + density[cells];
        for (i, d) in density.iter().enumerate().take(cells).skip(1) {
            simpson += if i % 2 == 1 { 4.0 * d } else { 2.0 * d };
        }
        simpson *= h / 3.0;
        MarginalTable {
            nodes,
            density,
            cumulative,
            log_norm: simpson.ln() - shift,
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let total = *self.cumulative.last().unwrap();
        let u = rng.gen::<f64>() * total;
        let cell = match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&u).unwrap())
        {
            Ok(i) => i.min(self.nodes.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.nodes.len() - 2),
        };
        let (x0, x1) = (self.nodes[cell], self.nodes[cell + 1]);
        let (d0, d1) = (self.density[cell], self.density[cell + 1]);
        let h = x1 - x0;
        let r = u - self.cumulative[cell];
        // Invert the CDF of the linear density on the cell.
        let slope = (d1 - d0) / h;
        let s = if slope.abs() < 1e-14 * d0.max(1e-300) {
            r / d0.max(1e-300)
        } else {
            let disc = (d0 * d0 + 2.0 * slope * r).max(0.0);
            (disc.sqrt() - d0) / slope
        };
        x0 + s.clamp(0.0, h)
    }
}

/// A ground-truth target density.
#[derive(Debug, Clone)]
pub struct TargetDensity {
    spec: TargetSpec,
    dim: usize,
    marginal: Option<MarginalTable>,
}

/// Builds a target, validating its parameters.
pub fn make_target(spec: &TargetSpec) -> Result<TargetDensity> {
    if !(spec.kbt > 0.0 && spec.kbt.is_finite()) {
        return Err(invalid("kbt must be positive"));
    }
    let marginal = match spec.params {
        TargetParams::EightGaussians { radius, sigma } => {
            if !(sigma > 0.0) || !(radius >= 0.0) {
                return Err(invalid("eight_gaussians needs sigma > 0 and radius >= 0"));
            }
            None
        }
        TargetParams::Checkerboard { extent } => {
            if !(extent > 0.0) {
                return Err(invalid("checkerboard extent must be positive"));
            }
            None
        }
        TargetParams::TwoWell { a, b, c, tilt } => {
            if !(a > 0.0) || !(c > 0.0) || !b.is_finite() || !tilt.is_finite() {
                return Err(invalid("two_well needs a > 0 and c > 0"));
            }
            let kbt = spec.kbt;
            let reduced = move |x: f64| (a * (x * x - b).powi(2) + tilt * x) / kbt;
            let (lo, hi) = bracket_marginal(&reduced);
            Some(MarginalTable::build(reduced, lo, hi, 1 << 15))
        }
    };
    Ok(TargetDensity {
        spec: spec.clone(),
        dim: 2,
        marginal,
    })
}

/// Range outside of which the reduced 1D energy exceeds its minimum by > 40.
fn bracket_marginal(reduced: &impl Fn(f64) -> f64) -> (f64, f64) {
    let probe: Vec<f64> = (-4000..=4000).map(|i| i as f64 * 1e-3 * 10.0).collect();
    let min = probe
        .iter()
        .map(|&x| reduced(x))
        .fold(f64::INFINITY, f64::min);
    let mut lo = -1.0;
    while reduced(lo) - min < 40.0 || reduced(lo + 0.5) - min < 40.0 {
        lo -= 0.25;
    }
    let mut hi = 1.0;
    while reduced(hi) - min < 40.0 || reduced(hi - 0.5) - min < 40.0 {
        hi += 0.25;
    }
    (lo, hi)
}

impl TargetDensity {
    pub fn name(&self) -> &'static str {
        match self.spec.params {
            TargetParams::EightGaussians { .. } => "eight_gaussians",
            TargetParams::Checkerboard { .. } => "checkerboard",
            TargetParams::TwoWell { .. } => "two_well",
        }
    }

    pub fn spec(&self) -> &TargetSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kbt(&self) -> f64 {
        self.spec.kbt
    }

    /// Potential energy `U(x)`, before division by `kbt`.
    pub fn energy(&self, x: ArrayView1<f64>) -> f64 {
        match self.spec.params {
            TargetParams::EightGaussians { radius, sigma } => {
                -mixture_log_density(x[0], x[1], radius, sigma)
            }
            TargetParams::Checkerboard { extent } => checker_energy(x[0], x[1], extent),
            TargetParams::TwoWell { a, b, c, tilt } => {
                let x1 = x[0];
                let rest: f64 = x.iter().skip(1).map(|v| v * v).sum();
                a * (x1 * x1 - b).powi(2) + c * rest + tilt * x1
            }
        }
    }

    /// Energies of a batch of points, one per row.
    pub fn energies(&self, x: ArrayView2<f64>) -> Array1<f64> {
        x.axis_iter(Axis(0)).map(|row| self.energy(row)).collect()
    }

    pub fn normalization(&self) -> Normalization {
        match self.spec.params {
            TargetParams::TwoWell { .. } => Normalization::Quadrature,
            _ if self.spec.kbt == 1.0 => Normalization::Exact,
            _ => Normalization::Unnormalized,
        }
    }

    /// `log Z` where available, with `Z = ∫ exp(-U/kbt)`.
    pub fn log_normalizer(&self) -> Option<f64> {
        match self.spec.params {
            TargetParams::TwoWell { c, .. } => {
                let m = self.marginal.as_ref().expect("two_well has a marginal table");
                let gauss = 0.5 * (PI * self.spec.kbt / c).ln() * (self.dim - 1) as f64;
                Some(m.log_norm + gauss)
            }
            _ if self.spec.kbt == 1.0 => Some(0.0),
            _ => None,
        }
    }

    /// Log-density; normalized unless `normalization()` says otherwise.
    pub fn log_density(&self, x: ArrayView1<f64>) -> f64 {
        -self.energy(x) / self.spec.kbt - self.log_normalizer().unwrap_or(0.0)
    }

    pub fn log_densities(&self, x: ArrayView2<f64>) -> Array1<f64> {
        x.axis_iter(Axis(0)).map(|row| self.log_density(row)).collect()
    }

    /// Draws `n` i.i.d. samples.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((n, self.dim));
        match self.spec.params {
            TargetParams::EightGaussians { radius, sigma } => {
                self.require_unit_kbt()?;
                for mut row in out.axis_iter_mut(Axis(0)) {
                    let k = rng.gen_range(0..8);
                    let (cx, cy) = mixture_center(k, radius);
                    let ex: f64 = rng.sample(StandardNormal);
                    let ey: f64 = rng.sample(StandardNormal);
                    row[0] = cx + sigma * ex;
                    row[1] = cy + sigma * ey;
                }
            }
            TargetParams::Checkerboard { extent } => {
                self.require_unit_kbt()?;
                let side = extent / 2.0;
                let on: Vec<(usize, usize)> = (0..4)
                    .flat_map(|i| (0..4).map(move |j| (i, j)))
                    .filter(|(i, j)| (i + j) % 2 == 0)
                    .collect();
                for mut row in out.axis_iter_mut(Axis(0)) {
                    let (i, j) = on[rng.gen_range(0..on.len())];
                    row[0] = -extent + side * (i as f64 + rng.gen::<f64>());
                    row[1] = -extent + side * (j as f64 + rng.gen::<f64>());
                }
            }
            TargetParams::TwoWell { c, .. } => {
                let table = self.marginal.as_ref().expect("two_well has a marginal table");
                let std = (self.spec.kbt / (2.0 * c)).sqrt();
                for mut row in out.axis_iter_mut(Axis(0)) {
                    row[0] = table.sample(rng);
                    for v in row.iter_mut().skip(1) {
                        let e: f64 = rng.sample(StandardNormal);
                        *v = std * e;
                    }
                }
            }
        }
        Ok(out)
    }

    fn require_unit_kbt(&self) -> Result<()> {
        if self.spec.kbt != 1.0 {
            return Err(invalid(format!(
                "exact sampling of {} is only available at kbt = 1",
                self.name()
            )));
        }
        Ok(())
    }

    /// A grid covering essentially all of the target's mass.
    pub fn covering_grid(&self, points: usize) -> GridQuadrature {
        match self.spec.params {
            TargetParams::EightGaussians { radius, sigma } => {
                let half = radius + 8.0 * sigma;
                GridQuadrature::square(-half, half, points)
            }
            TargetParams::Checkerboard { extent } => {
                // Cell edges line up with the square boundaries at the default
                // resolution (half-width 1.6 * extent over 256 points).
                GridQuadrature::square(-1.6 * extent, 1.6 * extent, points)
            }
            TargetParams::TwoWell { c, .. } => {
                let table = self.marginal.as_ref().expect("two_well has a marginal table");
                let lo = table.nodes[0];
                let hi = *table.nodes.last().unwrap();
                let half2 = 7.0 * (self.spec.kbt / (2.0 * c)).sqrt();
                GridQuadrature::new(vec![lo, -half2], vec![hi, half2], vec![points, points])
            }
        }
    }
}

fn mixture_center(k: usize, radius: f64) -> (f64, f64) {
    let angle = 2.0 * PI * k as f64 / 8.0;
    (radius * angle.cos(), radius * angle.sin())
}

fn mixture_log_density(x: f64, y: f64, radius: f64, sigma: f64) -> f64 {
    let var = sigma * sigma;
    let log_norm = -(2.0 * PI * var).ln() - 8f64.ln();
    let terms: Vec<f64> = (0..8)
        .map(|k| {
            let (cx, cy) = mixture_center(k, radius);
            -((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * var)
        })
        .collect();
    log_norm + log_sum_exp(&terms)
}

fn checker_energy(x: f64, y: f64, extent: f64) -> f64 {
    let side = extent / 2.0;
    let base = (8.0 * side * side).ln();
    let dx = (x.abs() - extent).max(0.0);
    let dy = (y.abs() - extent).max(0.0);
    if dx > 0.0 || dy > 0.0 {
        return base + CHECKER_OFF_PENALTY + CHECKER_OUTSIDE_CURVATURE * (dx * dx + dy * dy);
    }
    let i = (((x + extent) / side).floor() as i64).clamp(0, 3);
    let j = (((y + extent) / side).floor() as i64).clamp(0, 3);
    if (i + j) % 2 == 0 {
        base
    } else {
        base + CHECKER_OFF_PENALTY
    }
}

/// Numerically stable `log Σ exp(v)`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Midpoint-rule tensor grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridQuadrature {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub points: Vec<usize>,
}

impl GridQuadrature {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, points: Vec<usize>) -> Self {
        assert_eq!(lower.len(), upper.len());
        assert_eq!(lower.len(), points.len());
        GridQuadrature {
            lower,
            upper,
            points,
        }
    }

    /// `[lo, hi]^2` with `points` nodes per side.
    pub fn square(lo: f64, hi: f64, points: usize) -> Self {
        GridQuadrature::new(vec![lo, lo], vec![hi, hi], vec![points, points])
    }

    pub fn dim(&self) -> usize {
        self.points.len()
    }

    pub fn len(&self) -> usize {
        self.points.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / self.points[axis] as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.spacing(a)).product()
    }

    /// Same box at twice the resolution per axis.
    pub fn refined(&self) -> Self {
        GridQuadrature::new(
            self.lower.clone(),
            self.upper.clone(),
            self.points.iter().map(|p| 2 * p).collect(),
        )
    }

    /// Cell centers in row-major order (last axis fastest).
    pub fn nodes(&self) -> Array2<f64> {
        let d = self.dim();
        let n = self.len();
        let mut out = Array2::zeros((n, d));
        for (idx, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let mut rem = idx;
            for axis in (0..d).rev() {
                let k = rem % self.points[axis];
                rem /= self.points[axis];
                row[axis] = self.lower[axis] + (k as f64 + 0.5) * self.spacing(axis);
            }
        }
        out
    }

    /// True for nodes in the outermost layer of cells.
    pub fn boundary_mask(&self) -> Vec<bool> {
        let d = self.dim();
        (0..self.len())
            .map(|idx| {
                let mut rem = idx;
                let mut edge = false;
                for axis in (0..d).rev() {
                    let k = rem % self.points[axis];
                    rem /= self.points[axis];
                    edge |= k == 0 || k + 1 == self.points[axis];
                }
                edge
            })
            .collect()
    }

    /// `log ∫ exp(f)` over the box, from log-integrand values at `nodes()`.
    pub fn log_integral(&self, log_values: &[f64]) -> f64 {
        log_sum_exp(log_values) + self.cell_volume().ln()
    }
}

/// Fraction of the grid mass sitting in the boundary cells.
fn boundary_fraction(grid: &GridQuadrature, log_values: &[f64]) -> f64 {
    let mask = grid.boundary_mask();
    let edge: Vec<f64> = log_values
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| *v)
        .collect();
    (log_sum_exp(&edge) - log_sum_exp(log_values)).exp()
}

/// `log ∫ exp(-U(x)/kbt) dx` for an arbitrary energy, by grid quadrature.
///
/// Fails if the boundary cells carry more than 1e-6 of the mass or if
/// doubling the resolution moves the result by more than 1e-3.
pub fn log_partition_fn<F>(energy: F, kbt: f64, grid: &GridQuadrature) -> Result<f64>
where
    F: Fn(ArrayView1<f64>) -> f64,
{
    let eval = |g: &GridQuadrature| -> Result<(f64, Vec<f64>)> {
        let nodes = g.nodes();
        let logs: Vec<f64> = nodes
            .axis_iter(Axis(0))
            .map(|row| -energy(row) / kbt)
            .collect();
        if logs.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::NonFinite("energy on quadrature grid".into()));
        }
        Ok((g.log_integral(&logs), logs))
    };
    let (coarse, logs) = eval(grid)?;
    let missing = boundary_fraction(grid, &logs);
    if missing > 1e-6 {
        return Err(Error::GridTooSmall { missing });
    }
    let (fine, _) = eval(&grid.refined())?;
    let delta = (fine - coarse).abs();
    if delta > 1e-3 {
        return Err(Error::GridTooCoarse { delta });
    }
    Ok(coarse)
}

/// `log Z` of a target on the given grid.
pub fn log_partition(target: &TargetDensity, grid: &GridQuadrature) -> Result<f64> {
    log_partition_fn(|x| target.energy(x), target.kbt(), grid)
}
