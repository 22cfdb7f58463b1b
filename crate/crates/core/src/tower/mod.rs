//! Young tower over an inducing scheme: levels, the tower map and the
//! projection back to the base map.

pub mod density;

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::maps::State;
use crate::rng::Stream;
use crate::scheme::{InducingScheme, SchemeKind};

pub use density::{
    invariant_density, invariant_density_on, lift_observable, DensitySampler, push_density, star_normalize, tv_distance, DiscretizedDensity,
    InvariantDensity, StarNormalized, TowerGrid, TransferOperator,
};

/// Point `(x, level)` of the tower. `image` caches `F(x)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TowerPoint {
    pub x: State,
    pub level: u32,
    pub cell: usize,
    image: State,
}

impl TowerPoint {
    pub fn in_base(&self) -> bool {
        self.level == 0
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelSummary {
    pub level: usize,
    pub measure: f64,
}

#[derive(Debug, Clone)]
pub struct Tower {
    scheme: Arc<InducingScheme>,
    height_cap: u32,
    level_masses: Vec<f64>,
    total_mass: f64,
    // cumulative m(c)·R(c), for sampling the reference measure
    column_cdf: Vec<f64>,
}

/// Tower over `scheme`; every retained return time must fit below `height_cap`.
pub fn build_tower(scheme: Arc<InducingScheme>, height_cap: u32) -> Result<Tower> {
    let top = scheme.max_return_time();
    if height_cap < top {
        return Err(Error::HeightCapBelowReturnTime { cap: height_cap as usize, return_time: top as usize });
    }
    let level_masses = level_masses(&scheme);
    let total_mass = level_masses.iter().sum();
    let mut acc = 0.0;
    let column_cdf = scheme
        .cells()
        .iter()
        .map(|c| {
            acc += c.measure * c.return_time as f64;
            acc
        })
        .collect();
    Ok(Tower { scheme, height_cap, level_masses, total_mass, column_cdf })
}

/// `m(Δ_ℓ) = m{R > ℓ}` for each level below the tallest column.
pub fn level_masses(scheme: &InducingScheme) -> Vec<f64> {
    let top = scheme.max_return_time() as usize;
    let mut by_r = vec![0.0; top + 1];
    for c in scheme.cells() {
        by_r[c.return_time as usize] += c.measure;
    }
    let mut out = vec![0.0; top];
    let mut above = 0.0;
    for l in (0..top).rev() {
        above += by_r[l + 1];
        out[l] = above;
    }
    out
}

impl Tower {
    pub fn scheme(&self) -> &Arc<InducingScheme> {
        &self.scheme
    }

    pub fn height_cap(&self) -> u32 {
        self.height_cap
    }

    pub fn height(&self) -> u32 {
        self.scheme.max_return_time()
    }

    pub fn level_masses(&self) -> &[f64] {
        &self.level_masses
    }

    pub fn levels(&self) -> Vec<LevelSummary> {
        self.level_masses.iter().enumerate().map(|(level, &measure)| LevelSummary { level, measure }).collect()
    }

    /// `m(Δ) = Σ_ℓ m(Δ_ℓ)`.
    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    pub fn return_time(&self, cell: usize) -> u32 {
        self.scheme.cell(cell).return_time
    }

    pub fn content_hash(&self) -> String {
        sha256_hex(format!("{}:{}", self.scheme.content_hash(), self.height_cap).as_bytes())
    }

    /// Tower point over base state `x`.
    pub fn point(&self, x: State, level: u32) -> Result<TowerPoint> {
        let (cell, image) = self.scheme.induced(x).ok_or(Error::EscapedTruncation)?;
        let r = self.return_time(cell);
        if level >= r {
            return Err(Error::InvalidParameter(format!("level {level} not below return time {r}")));
        }
        Ok(TowerPoint { x, level, cell, image })
    }

    /// One application of the tower map: climb, or drop to `(F(x), 0)` from
    /// the top of the column. Fails when `F(x)` lands in discarded mass.
    pub fn step(&self, p: &TowerPoint) -> Result<TowerPoint> {
        if p.level + 1 < self.return_time(p.cell) {
            return Ok(TowerPoint { level: p.level + 1, ..*p });
        }
        self.point(p.image, 0)
    }

    /// `T^n`, climbing whole columns at once.
    pub fn iterate(&self, p: &TowerPoint, n: usize) -> Result<TowerPoint> {
        let mut q = *p;
        let mut left = n as u64;
        loop {
            let up = (self.return_time(q.cell) - q.level) as u64;
            if left < up {
                q.level += left as u32;
                return Ok(q);
            }
            left -= up;
            q = self.point(q.image, 0)?;
        }
    }

    /// `π(x, ℓ) = f^ℓ(x)`.
    pub fn project(&self, p: &TowerPoint) -> State {
        let map = self.scheme.map();
        let mut y = p.x;
        for _ in 0..p.level {
            y = map.step(y);
        }
        y
    }

    /// Steps until the point reaches the base: `0` on the base, else `R − ℓ`.
    pub fn hat_return_time(&self, p: &TowerPoint) -> u32 {
        if p.level == 0 {
            0
        } else {
            self.return_time(p.cell) - p.level
        }
    }

    /// Point drawn from the normalised reference measure `m|Δ / m(Δ)`.
    pub fn sample_reference(&self, stream: &mut Stream) -> Result<TowerPoint> {
        if matches!(self.scheme.kind(), SchemeKind::Strips { .. }) {
            return Err(Error::Unsupported("reference sampling needs interval cells".into()));
        }
        let total = *self.column_cdf.last().ok_or(Error::EscapedTruncation)?;
        for _ in 0..1000 {
            let u = stream.uniform() * total;
            let c = self.column_cdf.partition_point(|&w| w <= u).min(self.column_cdf.len() - 1);
            let x = self.scheme.sample_cell(c, stream);
            let level = stream.below(self.return_time(c) as usize) as u32;
            // boundary points may resolve to a neighbour; redraw those
            match self.point(x, level) {
                Ok(p) if p.cell == c => return Ok(p),
                _ => continue,
            }
        }
        Err(Error::EscapedTruncation)
    }

    /// Point drawn from a discretized density on this tower's grid.
    pub fn sample_density(&self, sampler: &DensitySampler, stream: &mut Stream) -> Result<TowerPoint> {
        for _ in 0..1000 {
            let (c, level, x) = sampler.draw(stream);
            match self.point(State::new(x), level) {
                Ok(p) if p.cell == c => return Ok(p),
                _ => continue,
            }
        }
        Err(Error::EscapedTruncation)
    }

    /// Point of `Δ₀` drawn uniformly.
    pub fn sample_base(&self, stream: &mut Stream) -> Result<TowerPoint> {
        for _ in 0..1000 {
            if let Ok(p) = self.point(self.scheme.sample_base(stream), 0) {
                return Ok(p);
            }
        }
        Err(Error::EscapedTruncation)
    }
}
