use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{affine_refill, DynamicalMap, Interval, Region, State};
use crate::error::{Error, Result};

/// One cell of a piecewise-affine Markov system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineCellSpec {
    pub measure: f64,
    pub return_time: u32,
    /// Image of the cell under the induced map, in base coordinates.
    pub image: [f64; 2],
}

/// Base `[0, L)` split into consecutive cells, followed by corridors.
///
/// A cell with return time `r` is translated through `r - 1` corridor
/// intervals outside the base and then mapped affinely onto its image, so
/// the first return to the base happens after exactly `r` steps and the
/// induced Jacobian is constant on the cell.
#[derive(Clone, Debug)]
pub struct AffineMarkovMap {
    cells: Vec<AffineCellSpec>,
    base_len: f64,
    /// Branch domains in increasing order; base cells first.
    pieces: Vec<Interval>,
    /// For each piece: (owning cell, corridor index; 0 is the base cell).
    owner: Vec<(usize, u32)>,
    /// Start of the first corridor of each cell.
    corridor_start: Vec<f64>,
}

impl AffineMarkovMap {
    pub fn new(cells: Vec<AffineCellSpec>) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::InvalidParameter("affine system needs at least one cell".into()));
        }
        let mut pieces = Vec::new();
        let mut owner = Vec::new();
        let mut at = 0.0;
        for (j, c) in cells.iter().enumerate() {
            if !(c.measure > 0.0) || c.return_time == 0 || !(c.image[1] > c.image[0]) {
                return Err(Error::InvalidParameter(format!("bad cell {j}: {c:?}")));
            }
            pieces.push(Interval::half_open(at, at + c.measure));
            owner.push((j, 0));
            at += c.measure;
        }
        let base_len = at;
        for (j, c) in cells.iter().enumerate() {
            if c.image[0] < 0.0 || c.image[1] > base_len * (1.0 + 1e-12) {
                return Err(Error::InvalidParameter(format!("image of cell {j} leaves the base")));
            }
        }
        let mut corridor_start = Vec::with_capacity(cells.len());
        for (j, c) in cells.iter().enumerate() {
            corridor_start.push(at);
            for k in 1..c.return_time {
                pieces.push(Interval::half_open(at, at + c.measure));
                owner.push((j, k));
                at += c.measure;
            }
        }
        Ok(Self { cells, base_len, pieces, owner, corridor_start })
    }

    pub fn cells(&self) -> &[AffineCellSpec] {
        &self.cells
    }

    pub fn base_len(&self) -> f64 {
        self.base_len
    }

    pub fn cell_bounds(&self) -> Vec<Interval> {
        self.pieces[..self.cells.len()].to_vec()
    }

    fn piece_of(&self, x: f64) -> usize {
        let idx = self.pieces.partition_point(|p| p.lo <= x);
        idx.saturating_sub(1).min(self.pieces.len() - 1)
    }
}

impl DynamicalMap for AffineMarkovMap {
    fn id(&self) -> &'static str {
        "affine"
    }

    fn description(&self) -> String {
        format!("piecewise-affine Markov system with {} cells", self.cells.len())
    }

    fn params(&self) -> serde_json::Value {
        json!({ "cells": self.cells })
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn phase_space(&self) -> Region {
        let end = self.pieces.last().map_or(self.base_len, |p| p.hi);
        Region::interval(Interval::half_open(0.0, end))
    }

    fn eval(&self, s: State) -> State {
        State::new(self.eval_branch(self.piece_of(s.x), s.x))
    }

    fn step(&self, s: State) -> State {
        let b = self.piece_of(s.x);
        let (j, k) = self.owner[b];
        let c = &self.cells[j];
        if k + 1 == c.return_time {
            let slope = (c.image[1] - c.image[0]) / c.measure;
            State::new(affine_refill(c.image[0], s.x - self.pieces[b].lo, slope, c.measure))
        } else {
            self.eval(s)
        }
    }

    fn log_jacobian(&self, s: State) -> Option<f64> {
        let b = self.piece_of(s.x);
        let (j, k) = self.owner[b];
        let c = &self.cells[j];
        Some(if k + 1 == c.return_time {
            ((c.image[1] - c.image[0]) / c.measure).ln()
        } else {
            0.0
        })
    }

    fn branches(&self) -> Vec<Interval> {
        self.pieces.clone()
    }

    fn eval_branch(&self, b: usize, x: f64) -> f64 {
        let (j, k) = self.owner[b];
        let c = &self.cells[j];
        let p = self.pieces[b];
        let t = x - p.lo;
        if k + 1 == c.return_time {
            c.image[0] + t * ((c.image[1] - c.image[0]) / c.measure)
        } else {
            self.corridor_start[j] + k as f64 * c.measure + t
        }
    }
}
