//! Exact finite-state oracles for piecewise-affine towers.

#![allow(dead_code)]

use towerlab::maps::AffineCellSpec;

/// The tower of an affine Markov system as a finite Markov chain on
/// `(cell, level)` states, in the grid's storage order.
pub struct Chain {
    pub cells: Vec<AffineCellSpec>,
    pub states: Vec<(usize, u32)>,
    /// `offset[j]` is the state index of `(j, 0)`.
    pub offset: Vec<usize>,
    /// Induced-map transition probabilities between cells.
    pub base: Vec<Vec<f64>>,
    /// One-step tower transition matrix.
    pub tower: Vec<Vec<f64>>,
}

pub fn chain(cells: &[AffineCellSpec]) -> Chain {
    let n = cells.len();
    let mut lo = vec![0.0; n];
    for j in 1..n {
        lo[j] = lo[j - 1] + cells[j - 1].measure;
    }
    let base: Vec<Vec<f64>> = cells
        .iter()
        .map(|c| {
            let len = c.image[1] - c.image[0];
            (0..n)
                .map(|i| {
                    let (a, b) = (lo[i], lo[i] + cells[i].measure);
                    (c.image[1].min(b) - c.image[0].max(a)).max(0.0) / len
                })
                .collect()
        })
        .collect();
    let mut states = Vec::new();
    let mut offset = Vec::new();
    for (j, c) in cells.iter().enumerate() {
        offset.push(states.len());
        for l in 0..c.return_time {
            states.push((j, l));
        }
    }
    let m = states.len();
    let mut tower = vec![vec![0.0; m]; m];
    for (s, &(j, l)) in states.iter().enumerate() {
        if l + 1 < cells[j].return_time {
            tower[s][s + 1] = 1.0;
        } else {
            for i in 0..n {
                tower[s][offset[i]] += base[j][i];
            }
        }
    }
    Chain { cells: cells.to_vec(), states, offset, base, tower }
}

pub fn vec_mat(v: &[f64], p: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; p[0].len()];
    for (i, &x) in v.iter().enumerate() {
        for (j, &q) in p[i].iter().enumerate() {
            out[j] += x * q;
        }
    }
    out
}

/// Solves `πP = π`, `Σπ = 1` by Gaussian elimination with partial pivoting.
pub fn stationary(p: &[Vec<f64>]) -> Vec<f64> {
    let n = p.len();
    // rows: (P^T - I) with the last equation replaced by the normalisation
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut r: Vec<f64> = (0..n).map(|j| p[j][i] - if i == j { 1.0 } else { 0.0 }).collect();
            r.push(0.0);
            r
        })
        .collect();
    a[n - 1] = vec![1.0; n + 1];
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
        a.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                for k in col..=n {
                    a[r][k] -= f * a[col][k];
                }
            }
        }
    }
    (0..n).map(|i| a[i][n] / a[i][i]).collect()
}

pub fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Return times {1, 2}, every image the whole base: a full coprime block.
pub fn two_cell_cells() -> Vec<AffineCellSpec> {
    vec![
        AffineCellSpec { measure: 0.6, return_time: 1, image: [0.0, 1.0] },
        AffineCellSpec { measure: 0.4, return_time: 2, image: [0.0, 1.0] },
    ]
}

/// Three cells with return times {1, 2, 2} and images that are not full.
pub fn three_cell_cells() -> Vec<AffineCellSpec> {
    vec![
        AffineCellSpec { measure: 0.3, return_time: 1, image: [0.0, 1.0] },
        AffineCellSpec { measure: 0.3, return_time: 2, image: [0.0, 0.6] },
        AffineCellSpec { measure: 0.4, return_time: 2, image: [0.3, 1.0] },
    ]
}

/// Cells of the three-cell counterexample in the order ω₁, ω₂, ω₃:
/// ω₁ → ω₂ ∪ ω₃, ω₂ → ω₂ ∪ ω₃, ω₃ → ω₁ with return times 1, 2, 3.
pub fn counterexample_cells(m: [f64; 3]) -> Vec<AffineCellSpec> {
    let total = m[0] + m[1] + m[2];
    vec![
        AffineCellSpec { measure: m[0], return_time: 1, image: [m[0], total] },
        AffineCellSpec { measure: m[1], return_time: 2, image: [m[0], total] },
        AffineCellSpec { measure: m[2], return_time: 3, image: [0.0, m[0]] },
    ]
}

/// Initial law of one coordinate: normalised Lebesgue on the tower.
pub fn reference_law(ch: &Chain) -> Vec<f64> {
    let w: Vec<f64> = ch.states.iter().map(|&(j, _)| ch.cells[j].measure).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// `P{S > n}`, `n = 0..=horizon`, for pairs from `a × b`, built phase by
/// phase: the law of `(τ_k, state at τ_k)` is the law at `τ_{k−1}` convolved
/// with a one-phase kernel.
pub fn survival_oracle(ch: &Chain, n0: usize, a: &[f64], b: &[f64], horizon: usize) -> Vec<f64> {
    let m = ch.states.len();
    let base = |s: usize| ch.states[s].1 == 0;
    let pair = |i: usize, j: usize| i * m + j;
    // kernel[lead][start] = Vec over duration of (end pair, prob) restricted to the lead coordinate landing in the base
    let kernel = |lead: usize| -> Vec<Vec<Vec<(usize, f64)>>> {
        (0..m * m)
            .map(|start| {
                let mut cur = vec![0.0; m * m];
                cur[start] = 1.0;
                let mut out = vec![Vec::new(); horizon + 1];
                for d in 1..=horizon {
                    let mut nxt = vec![0.0; m * m];
                    for i in 0..m {
                        for j in 0..m {
                            let w = cur[pair(i, j)];
                            if w == 0.0 {
                                continue;
                            }
                            for (i2, p) in ch.tower[i].iter().enumerate() {
                                for (j2, q) in ch.tower[j].iter().enumerate() {
                                    if p * q > 0.0 {
                                        nxt[pair(i2, j2)] += w * p * q;
                                    }
                                }
                            }
                        }
                    }
                    if d >= n0 {
                        for i in 0..m {
                            for j in 0..m {
                                let s = if lead == 0 { i } else { j };
                                let w = nxt[pair(i, j)];
                                if base(s) && w > 0.0 {
                                    out[d].push((pair(i, j), w));
                                    nxt[pair(i, j)] = 0.0;
                                }
                            }
                        }
                    }
                    cur = nxt;
                }
                out
            })
            .collect()
    };
    let kernels = [kernel(0), kernel(1)];
    // law[t][pair] at τ_{k}
    let mut law = vec![vec![0.0; m * m]; horizon + 1];
    for i in 0..m {
        for j in 0..m {
            law[0][pair(i, j)] = a[i] * b[j];
        }
    }
    let mut absorbed = vec![0.0; horizon + 1];
    for k in 1..=horizon {
        let lead = if k % 2 == 1 { 0 } else { 1 };
        let mut next = vec![vec![0.0; m * m]; horizon + 1];
        let mut any = false;
        for t in 0..=horizon {
            for start in 0..m * m {
                let w = law[t][start];
                if w == 0.0 {
                    continue;
                }
                for d in 1..=horizon - t {
                    for &(end, p) in &kernels[lead][start][d] {
                        let (i, j) = (end / m, end % m);
                        let other = if lead == 0 { j } else { i };
                        if k >= 2 && base(other) {
                            absorbed[t + d] += w * p;
                        } else {
                            next[t + d][end] += w * p;
                            any = true;
                        }
                    }
                }
            }
        }
        law = next;
        if !any {
            break;
        }
    }
    // tail sums keep small survival probabilities accurate
    let beyond = (1.0 - absorbed.iter().sum::<f64>()).max(0.0);
    let mut out = vec![0.0; horizon + 1];
    let mut acc = beyond;
    for n in (0..=horizon).rev() {
        out[n] = acc.min(1.0);
        acc += absorbed[n];
    }
    out
}
