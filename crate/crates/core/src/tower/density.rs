//! Densities on the tower over a grid of per-cell uniform bins, and the
//! Ulam discretisation of the tower transfer operator.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::csv;
use crate::maps::image_pieces;
use crate::parallel::map_tasks;
use crate::rng::Stream;
use crate::tower::Tower;

/// Default L¹ Cauchy tolerance for the invariant density.
pub const CAUCHY_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridCell {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
    pub return_time: u32,
    pub base_offset: usize,
    pub tower_offset: usize,
}

impl GridCell {
    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.bins as f64
    }

    pub fn edge(&self, k: usize) -> f64 {
        if k == self.bins {
            self.hi
        } else {
            self.lo + k as f64 * self.width()
        }
    }
}

/// Each cell cut into `resolution` equal bins, repeated on every level of
/// its column. Tower bins are ordered cell, level, bin.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TowerGrid {
    pub resolution: usize,
    pub cells: Vec<GridCell>,
    pub base_bins: usize,
    pub tower_bins: usize,
    #[serde(skip)]
    by_position: Vec<usize>,
}

impl TowerGrid {
    pub fn new(tower: &Tower, resolution: usize) -> Result<Self> {
        if resolution == 0 {
            return Err(Error::InvalidParameter("grid resolution must be positive".into()));
        }
        let scheme = tower.scheme();
        if scheme.base().theta.is_some() {
            return Err(Error::Unsupported("density grids are one-dimensional".into()));
        }
        let (mut base, mut top) = (0, 0);
        let mut cells = Vec::with_capacity(scheme.len());
        for c in scheme.cells() {
            cells.push(GridCell {
                lo: c.bounds.x[0],
                hi: c.bounds.x[1],
                bins: resolution,
                return_time: c.return_time,
                base_offset: base,
                tower_offset: top,
            });
            base += resolution;
            top += resolution * c.return_time as usize;
        }
        let mut by_position: Vec<usize> = (0..cells.len()).collect();
        by_position.sort_by(|&a, &b| cells[a].lo.total_cmp(&cells[b].lo));
        Ok(Self { resolution, cells, base_bins: base, tower_bins: top, by_position })
    }

    /// Tower bin of `(cell, level, bin)`.
    pub fn index(&self, cell: usize, level: usize, bin: usize) -> usize {
        let c = &self.cells[cell];
        c.tower_offset + level * c.bins + bin
    }

    /// Bin widths for every tower bin.
    pub fn widths(&self) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.tower_bins);
        for c in &self.cells {
            w.extend(std::iter::repeat_n(c.width(), c.bins * c.return_time as usize));
        }
        w
    }

    /// `(cell, level, bin)` for every tower bin, in storage order.
    pub fn labels(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.cells.iter().enumerate().flat_map(|(ci, c)| {
            (0..c.return_time as usize).flat_map(move |l| (0..c.bins).map(move |b| (ci, l, b)))
        })
    }

    /// Spreads `mass` uniformly over `[a, b]` onto base bins; returns the
    /// part that falls outside every cell.
    fn deposit(&self, a: f64, b: f64, mass: f64, out: &mut Vec<(u32, f64)>) -> f64 {
        let len = b - a;
        if !(len > 0.0) {
            let mid = 0.5 * (a + b);
            for &ci in &self.by_position {
                let c = &self.cells[ci];
                if mid >= c.lo && mid <= c.hi {
                    let k = (((mid - c.lo) / c.width()) as usize).min(c.bins - 1);
                    out.push(((c.base_offset + k) as u32, mass));
                    return 0.0;
                }
            }
            return mass;
        }
        let mut placed = 0.0;
        let start = self.by_position.partition_point(|&ci| self.cells[ci].hi <= a);
        for &ci in &self.by_position[start..] {
            let c = &self.cells[ci];
            if c.lo >= b {
                break;
            }
            let (lo, hi) = (a.max(c.lo), b.min(c.hi));
            if hi <= lo {
                continue;
            }
            let w = c.width();
            let k0 = (((lo - c.lo) / w) as usize).min(c.bins - 1);
            let k1 = ((((hi - c.lo) / w).ceil()) as usize).clamp(k0 + 1, c.bins);
            for k in k0..k1 {
                let ov = hi.min(c.edge(k + 1)) - lo.max(c.edge(k));
                if ov > 0.0 {
                    let m = mass * ov / len;
                    out.push(((c.base_offset + k) as u32, m));
                    placed += m;
                }
            }
        }
        mass - placed
    }
}

/// Ulam matrix of the induced map on base bins: row `i` holds the fraction
/// of bin `i` that `F` carries into each bin, with mass spread uniformly
/// along each monotone piece of the image.
#[derive(Debug)]
pub struct TransferOperator {
    pub grid: Arc<TowerGrid>,
    rows: Vec<Vec<(u32, f64)>>,
    /// Fraction of each bin carried outside the retained cells.
    pub leak: Vec<f64>,
}

impl TransferOperator {
    pub fn new(tower: &Tower, resolution: usize) -> Result<Self> {
        let grid = Arc::new(TowerGrid::new(tower, resolution)?);
        let map = tower.scheme().map().clone();
        let branches = map.branches();
        if branches.is_empty() {
            return Err(Error::Unsupported(format!("map {} exposes no branches", map.id())));
        }
        let tasks: Vec<(usize, usize)> =
            (0..grid.cells.len()).flat_map(|c| (0..grid.cells[c].bins).map(move |k| (c, k))).collect();
        let built = map_tasks(tasks.len(), |t| {
            let (ci, k) = tasks[t];
            let c = &grid.cells[ci];
            let (a, b) = (c.edge(k), c.edge(k + 1));
            let mut row = Vec::new();
            let mut lost = 0.0;
            for p in image_pieces(map.as_ref(), &branches, a, b, c.return_time) {
                let mass = (p.source[1] - p.source[0]) / (b - a);
                lost += grid.deposit(p.image[0], p.image[1], mass, &mut row);
            }
            row.sort_by_key(|e| e.0);
            let mut merged: Vec<(u32, f64)> = Vec::with_capacity(row.len());
            for (j, v) in row {
                match merged.last_mut() {
                    Some(last) if last.0 == j => last.1 += v,
                    _ => merged.push((j, v)),
                }
            }
            (merged, lost.max(0.0))
        });
        let (rows, leak) = built.into_iter().unzip();
        Ok(Self { grid, rows, leak })
    }

    pub fn row(&self, i: usize) -> &[(u32, f64)] {
        &self.rows[i]
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// `v ↦ vP` on base-bin masses; returns the image and the mass lost.
    pub fn apply_base(&self, v: &[f64]) -> (Vec<f64>, f64) {
        let mut out = vec![0.0; self.grid.base_bins];
        let mut lost = 0.0;
        for (i, &m) in v.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            for &(j, p) in &self.rows[i] {
                out[j as usize] += m * p;
            }
            lost += m * self.leak[i];
        }
        (out, lost)
    }
}

/// Density on the tower grid: `values` are densities, masses are
/// `value × width`.
#[derive(Clone, Debug)]
pub struct DiscretizedDensity {
    pub grid: Arc<TowerGrid>,
    pub values: Vec<f64>,
}

impl DiscretizedDensity {
    pub fn from_masses(grid: Arc<TowerGrid>, masses: &[f64]) -> Self {
        let values = masses.iter().zip(grid.widths()).map(|(m, w)| m / w).collect();
        Self { grid, values }
    }

    pub fn masses(&self) -> Vec<f64> {
        self.values.iter().zip(self.grid.widths()).map(|(v, w)| v * w).collect()
    }

    /// Total mass, `Σ value × width`.
    pub fn norm(&self) -> f64 {
        self.masses().iter().sum()
    }

    /// Mass on level 0.
    pub fn base_mass(&self) -> f64 {
        let m = self.masses();
        self.grid.cells.iter().map(|c| m[c.tower_offset..c.tower_offset + c.bins].iter().sum::<f64>()).sum()
    }

    /// Masses on each level.
    pub fn level_masses(&self) -> Vec<f64> {
        let m = self.masses();
        let top = self.grid.cells.iter().map(|c| c.return_time as usize).max().unwrap_or(0);
        let mut out = vec![0.0; top];
        for (i, (_, l, _)) in self.grid.labels().enumerate() {
            out[l] += m[i];
        }
        out
    }

    /// Lebesgue measure restricted to level 0 of the given cells.
    pub fn lebesgue_on_base(grid: Arc<TowerGrid>, cells: impl IntoIterator<Item = usize>) -> Self {
        let mut values = vec![0.0; grid.tower_bins];
        for ci in cells {
            let c = &grid.cells[ci];
            values[c.tower_offset..c.tower_offset + c.bins].fill(1.0);
        }
        Self { grid, values }
    }

    /// Normalised Lebesgue measure on the whole tower.
    pub fn reference(grid: Arc<TowerGrid>) -> Self {
        let mut d = Self { values: vec![1.0; grid.tower_bins], grid };
        let n = d.norm();
        d.values.iter_mut().for_each(|v| *v /= n);
        d
    }

    /// CSV with columns level, cell, bin_lo, bin_hi, value.
    pub fn to_csv(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .grid
            .labels()
            .zip(&self.values)
            .map(|((ci, l, k), v)| {
                let c = &self.grid.cells[ci];
                vec![l.to_string(), ci.to_string(), c.edge(k).to_string(), c.edge(k + 1).to_string(), v.to_string()]
            })
            .collect();
        csv(&["level", "cell", "bin_lo", "bin_hi", "value"], &rows)
    }
}

/// Draws tower points from a discretized density: a bin by mass, then a
/// uniform point inside it.
#[derive(Clone, Debug)]
pub struct DensitySampler {
    grid: Arc<TowerGrid>,
    cdf: Vec<f64>,
    labels: Vec<(u32, u32, u32)>,
}

impl DensitySampler {
    pub fn new(d: &DiscretizedDensity) -> Result<Self> {
        let mut acc = 0.0;
        let cdf: Vec<f64> = d
            .masses()
            .iter()
            .map(|&m| {
                if m < 0.0 {
                    return f64::NAN;
                }
                acc += m;
                acc
            })
            .collect();
        if cdf.iter().any(|v| v.is_nan()) || !(acc > 0.0) {
            return Err(Error::InvalidParameter("density must be nonnegative with positive mass".into()));
        }
        let labels = d.grid.labels().map(|(c, l, k)| (c as u32, l as u32, k as u32)).collect();
        Ok(Self { grid: d.grid.clone(), cdf, labels })
    }

    /// `(cell, level, x)` of a draw.
    pub fn draw(&self, stream: &mut Stream) -> (usize, u32, f64) {
        let total = *self.cdf.last().expect("nonempty");
        let u = stream.uniform() * total;
        let i = self.cdf.partition_point(|&w| w <= u).min(self.cdf.len() - 1);
        let (c, l, k) = self.labels[i];
        let cell = &self.grid.cells[c as usize];
        let x = stream.uniform_in(cell.edge(k as usize), cell.edge(k as usize + 1));
        (c as usize, l, x)
    }
}

/// `T^steps_*` of a density.
pub fn push_density(op: &TransferOperator, d: &DiscretizedDensity, steps: usize) -> Result<DiscretizedDensity> {
    if !Arc::ptr_eq(&op.grid, &d.grid) && *op.grid != *d.grid {
        return Err(Error::GridMismatch);
    }
    let grid = &op.grid;
    let mut m = d.masses();
    let mut next = vec![0.0; grid.tower_bins];
    let mut top = vec![0.0; grid.base_bins];
    for _ in 0..steps {
        next.fill(0.0);
        for c in &grid.cells {
            let (b, r) = (c.bins, c.return_time as usize);
            let o = c.tower_offset;
            next[o + b..o + r * b].copy_from_slice(&m[o..o + (r - 1) * b]);
            top[c.base_offset..c.base_offset + b].copy_from_slice(&m[o + (r - 1) * b..o + r * b]);
        }
        let (landed, _) = op.apply_base(&top);
        for c in &grid.cells {
            let o = c.tower_offset;
            next[o..o + c.bins].copy_from_slice(&landed[c.base_offset..c.base_offset + c.bins]);
        }
        std::mem::swap(&mut m, &mut next);
    }
    Ok(DiscretizedDensity::from_masses(op.grid.clone(), &m))
}

/// Half the L¹ distance between two densities on the same grid.
pub fn tv_distance(a: &DiscretizedDensity, b: &DiscretizedDensity) -> Result<f64> {
    if !Arc::ptr_eq(&a.grid, &b.grid) && *a.grid != *b.grid {
        return Err(Error::GridMismatch);
    }
    let w = a.grid.widths();
    Ok(0.5 * a.values.iter().zip(&b.values).zip(&w).map(|((x, y), w)| (x - y).abs() * w).sum::<f64>())
}

#[derive(Debug, Clone)]
pub struct InvariantDensity {
    pub operator: Arc<TransferOperator>,
    /// Density of `ν₀` on base bins, normalised on the retained cells.
    pub base: Vec<f64>,
    /// Density of `ν` on the tower.
    pub tower: DiscretizedDensity,
    pub iterations: usize,
    pub increment: f64,
    /// Mass of `ν₀` that `F` carries into discarded cells, per step.
    pub leaked_fraction: f64,
}

impl InvariantDensity {
    pub fn sup_base(&self) -> f64 {
        self.base.iter().copied().fold(0.0, f64::max)
    }
}

/// `ν₀` by power iteration of the Ulam operator from Lebesgue measure,
/// stopped when successive iterates differ by less than `1e-10` in L¹, then
/// spread up each column and normalised into `ν`.
pub fn invariant_density(tower: &Tower, iterations: usize, grid_resolution: usize) -> Result<InvariantDensity> {
    let op = Arc::new(TransferOperator::new(tower, grid_resolution)?);
    invariant_density_on(op, iterations, CAUCHY_TOL)
}

/// Power iteration on a prebuilt operator with an explicit L¹ Cauchy tolerance.
pub fn invariant_density_on(op: Arc<TransferOperator>, iterations: usize, tol: f64) -> Result<InvariantDensity> {
    let grid = op.grid.clone();
    let mut v: Vec<f64> = Vec::with_capacity(grid.base_bins);
    for c in &grid.cells {
        v.extend(std::iter::repeat_n(c.width(), c.bins));
    }
    let total: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= total);
    let mut increment = f64::INFINITY;
    let mut leaked = 0.0;
    let mut done = 0;
    for it in 1..=iterations {
        let (mut w, lost) = op.apply_base(&v);
        let s: f64 = w.iter().sum();
        if !(s > 0.0) {
            return Err(Error::NoConvergence { iterations: it, increment });
        }
        w.iter_mut().for_each(|x| *x /= s);
        increment = v.iter().zip(&w).map(|(a, b)| (a - b).abs()).sum();
        leaked = lost;
        v = w;
        done = it;
        if increment < tol {
            break;
        }
    }
    if !(increment < tol) {
        return Err(Error::NoConvergence { iterations, increment });
    }
    let mut base = Vec::with_capacity(grid.base_bins);
    let mut tower_masses = Vec::with_capacity(grid.tower_bins);
    let z: f64 = grid
        .cells
        .iter()
        .map(|c| v[c.base_offset..c.base_offset + c.bins].iter().sum::<f64>() * c.return_time as f64)
        .sum();
    for c in &grid.cells {
        let slice = &v[c.base_offset..c.base_offset + c.bins];
        base.extend(slice.iter().map(|m| m / c.width()));
        for _ in 0..c.return_time {
            tower_masses.extend(slice.iter().map(|m| m / z));
        }
    }
    let tower = DiscretizedDensity::from_masses(grid, &tower_masses);
    Ok(InvariantDensity { operator: op, base, tower, iterations: done, increment, leaked_fraction: leaked })
}

/// Bin averages of `φ∘π` over `quad` midpoint nodes per bin.
pub fn lift_observable(tower: &Tower, grid: &TowerGrid, quad: usize, phi: &dyn Fn(f64) -> f64) -> Vec<f64> {
    let map = tower.scheme().map();
    let quad = quad.max(1);
    let mut out = Vec::with_capacity(grid.tower_bins);
    for c in &grid.cells {
        let w = c.width();
        let nodes: Vec<f64> =
            (0..c.bins).flat_map(|k| (0..quad).map(move |q| c.lo + w * (k as f64 + (q as f64 + 0.5) / quad as f64))).collect();
        let mut ys: Vec<f64> = nodes.clone();
        for _ in 0..c.return_time {
            out.extend(ys.chunks(quad).map(|ch| ch.iter().map(|&y| phi(y)).sum::<f64>() / quad as f64));
            for y in ys.iter_mut() {
                *y = map.eval(crate::maps::State::new(*y)).x;
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct StarNormalized {
    /// `φ* = (φ + 2‖φ‖∞ + 1) / ∫(φ + 2‖φ‖∞ + 1) dν`.
    pub phi_star: Vec<f64>,
    /// `dλ/dm = φ* · dν/dm`.
    pub lambda: DiscretizedDensity,
}

/// Shifts and scales a bounded, nonzero observable into a probability
/// density against `ν` with values in `[1/3, 3]`.
pub fn star_normalize(phi: &[f64], nu: &DiscretizedDensity) -> Result<StarNormalized> {
    if phi.len() != nu.values.len() {
        return Err(Error::GridMismatch);
    }
    let sup = phi.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if !sup.is_finite() {
        return Err(Error::InvalidParameter("observable is unbounded".into()));
    }
    if sup == 0.0 {
        return Err(Error::InvalidParameter("observable is identically zero".into()));
    }
    let shifted: Vec<f64> = phi.iter().map(|v| v + 2.0 * sup + 1.0).collect();
    let masses = nu.masses();
    let integral: f64 = shifted.iter().zip(&masses).map(|(g, m)| g * m).sum::<f64>() / masses.iter().sum::<f64>();
    let phi_star: Vec<f64> = shifted.iter().map(|g| g / integral).collect();
    let values = phi_star.iter().zip(&nu.values).map(|(s, v)| s * v).collect();
    Ok(StarNormalized { phi_star, lambda: DiscretizedDensity { grid: nu.grid.clone(), values } })
}
