//! Feedback matrix design.
//!
//! Each patch owns one orthogonal block mapping its incoming lines (rows) to
//! its outgoing lines (columns). Three designs are provided:
//!
//! - `Householder`: a permuted Householder reflection whose "specular"
//!   entries follow the dominant energy transfers of the kernel.
//! - `Sinkhorn`: the kernel block is balanced to a doubly-stochastic matrix,
//!   then projected to the closest orthogonal matrix whose element-wise
//!   square approximates it.
//! - `Uniform`: a doubly-stochastic block built from the scattering
//!   coefficient alone, projected the same way.
//!
//! Mixing applies `out = Bᵀ · in`, so entry `(r, c)` is the gain from
//! incoming line `r` to outgoing line `c`.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Mutex, OnceLock};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use num_traits::Num;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kernel::KernelMatrix;
use crate::seed;
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Design {
    Householder,
    Sinkhorn,
    Uniform,
}

impl Design {
    pub const ALL: [Design; 3] = [Design::Householder, Design::Sinkhorn, Design::Uniform];

    pub fn name(&self) -> &'static str {
        match self {
            Design::Householder => "householder",
            Design::Sinkhorn => "sinkhorn",
            Design::Uniform => "uniform",
        }
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Design {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "householder" => Ok(Design::Householder),
            "sinkhorn" => Ok(Design::Sinkhorn),
            "uniform" => Ok(Design::Uniform),
            other => Err(Error::InvalidParameter(format!(
                "unknown design {other:?} (expected householder, sinkhorn or uniform)"
            ))),
        }
    }
}

/// Bijection from block rows to block columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationBlock {
    pub mapping: Vec<usize>,
}

impl PermutationBlock {
    pub fn identity(size: usize) -> Self {
        Self { mapping: (0..size).collect() }
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn is_bijection(&self) -> bool {
        let mut seen = vec![false; self.mapping.len()];
        for &c in &self.mapping {
            if c >= seen.len() || seen[c] {
                return false;
            }
            seen[c] = true;
        }
        true
    }

    pub fn is_specular(&self, row: usize, col: usize) -> bool {
        self.mapping[row] == col
    }
}

/// Greedy maximum selection: repeatedly take the largest remaining entry,
/// ties going to the smallest row and then the smallest column, and strike
/// out its row and column.
pub fn specular_permutation(block: &DMatrix<f64>) -> PermutationBlock {
    let n = block.nrows();
    assert_eq!(n, block.ncols(), "kernel blocks are square");
    let mut entries: Vec<(usize, usize)> =
        (0..n).flat_map(|r| (0..n).map(move |c| (r, c))).collect();
    // Stable sort keeps row-major order among equal values.
    entries.sort_by(|a, b| block[*b].total_cmp(&block[*a]));
    let mut mapping = vec![usize::MAX; n];
    let mut col_used = vec![false; n];
    let mut assigned = 0;
    for (r, c) in entries {
        if mapping[r] == usize::MAX && !col_used[c] {
            mapping[r] = c;
            col_used[c] = true;
            assigned += 1;
            if assigned == n {
                break;
            }
        }
    }
    PermutationBlock { mapping }
}

/// Permuted Householder block: specular entries `(2 − M)/M`, others `2/M`.
pub fn householder_block(perm: &PermutationBlock) -> DMatrix<f64> {
    let m = perm.len();
    let mf = m as f64;
    DMatrix::from_fn(m, m, |r, c| {
        if perm.is_specular(r, c) {
            (2.0 - mf) / mf
        } else {
            2.0 / mf
        }
    })
}

/// Doubly-stochastic energy block: specular entries `1 − σ`, others
/// `σ / (M − 1)`. Generic so exactness can be checked in rational arithmetic.
pub fn uniform_block_exact<T: Num + Clone>(perm: &PermutationBlock, sigma: T) -> Vec<Vec<T>> {
    let m = perm.len();
    if m == 1 {
        return vec![vec![T::one()]];
    }
    let mut m_minus_one = T::zero();
    for _ in 1..m {
        m_minus_one = m_minus_one + T::one();
    }
    let spec = T::one() - sigma.clone();
    let other = sigma / m_minus_one;
    (0..m)
        .map(|r| {
            (0..m)
                .map(|c| if perm.is_specular(r, c) { spec.clone() } else { other.clone() })
                .collect()
        })
        .collect()
}

pub fn uniform_block(perm: &PermutationBlock, sigma: f64) -> DMatrix<f64> {
    let rows = uniform_block_exact(perm, sigma);
    let m = perm.len();
    DMatrix::from_fn(m, m, |r, c| rows[r][c])
}

// ---------------------------------------------------------------------------
// Sinkhorn-Knopp

pub const SINKHORN_TOL: f64 = 1e-10;
pub const SINKHORN_MAX_ITER: usize = 10_000;
const SINKHORN_SCALE_LIMIT: f64 = 1e12;
/// Sum deviation still accepted once the iteration budget runs out.
pub const SINKHORN_ACCEPT: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Balanced {
    /// `diag(row_scaling) · block · diag(col_scaling)`.
    pub matrix: DMatrix<f64>,
    pub row_scaling: DVector<f64>,
    pub col_scaling: DVector<f64>,
    pub iterations: usize,
    /// Largest deviation of a row or column sum from one.
    pub deviation: f64,
}

fn sum_deviation(m: &DMatrix<f64>) -> f64 {
    let rows = m.row_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max);
    let cols = m.column_iter().map(|c| (c.sum() - 1.0).abs()).fold(0.0, f64::max);
    rows.max(cols)
}

/// First row left unmatched by a maximum matching on the positive
/// entries, or `None` when the block has a positive diagonal.
fn unmatched_row(block: &DMatrix<f64>) -> Option<usize> {
    fn augment(block: &DMatrix<f64>, row: usize, seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for col in 0..block.ncols() {
            if block[(row, col)] > 0.0 && !seen[col] {
                seen[col] = true;
                if owner[col].map_or(true, |r| augment(block, r, seen, owner)) {
                    owner[col] = Some(row);
                    return true;
                }
            }
        }
        false
    }
    let mut owner = vec![None; block.ncols()];
    (0..block.nrows()).find(|&row| !augment(block, row, &mut vec![false; block.ncols()], &mut owner))
}

/// Alternating row and column normalization.
pub fn sinkhorn_balance(block: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<Balanced, Error> {
    let n = block.nrows();
    if n != block.ncols() {
        return Err(Error::InvalidParameter("sinkhorn_balance needs a square block".into()));
    }
    if block.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidParameter("sinkhorn_balance needs a nonnegative block".into()));
    }
    if let Some(row) = unmatched_row(block) {
        return Err(Error::NoTotalSupport { patch: None, detail: format!("no positive diagonal through row {row}") });
    }
    let mut r = DVector::from_element(n, 1.0);
    let mut c = DVector::from_element(n, 1.0);
    let scaled = |r: &DVector<f64>, c: &DVector<f64>| {
        DMatrix::from_fn(n, n, |i, j| r[i] * block[(i, j)] * c[j])
    };
    let mut current = block.clone();
    for iter in 0..=max_iter {
        let deviation = sum_deviation(&current);
        if deviation < tol {
            return Ok(Balanced { matrix: current, row_scaling: r, col_scaling: c, iterations: iter, deviation });
        }
        if iter == max_iter {
            if deviation <= SINKHORN_ACCEPT {
                return Ok(Balanced { matrix: current, row_scaling: r, col_scaling: c, iterations: iter, deviation });
            }
            return Err(Error::NoTotalSupport {
                patch: None,
                detail: format!("deviation {deviation:.3e} after {max_iter} iterations"),
            });
        }
        for i in 0..n {
            let s: f64 = (0..n).map(|j| block[(i, j)] * c[j]).sum();
            if s <= 0.0 {
                return Err(Error::NoTotalSupport { patch: None, detail: format!("row {i} is zero") });
            }
            r[i] = 1.0 / s;
        }
        for j in 0..n {
            let s: f64 = (0..n).map(|i| r[i] * block[(i, j)]).sum();
            if s <= 0.0 {
                return Err(Error::NoTotalSupport { patch: None, detail: format!("column {j} is zero") });
            }
            c[j] = 1.0 / s;
        }
        let extreme = r.iter().chain(c.iter()).any(|v| *v > SINKHORN_SCALE_LIMIT || *v < 1.0 / SINKHORN_SCALE_LIMIT);
        if extreme {
            return Err(Error::NoTotalSupport {
                patch: None,
                detail: format!("scaling factor diverged at iteration {}", iter + 1),
            });
        }
        current = scaled(&r, &c);
    }
    unreachable!()
}

// ---------------------------------------------------------------------------
// Closest unilossless

pub const UNILOSSLESS_MAX_ITER: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnilosslessConfig {
    pub max_iter: usize,
    /// Random sign restarts for blocks of size 5 to 16.
    pub restarts: usize,
    /// Random sign restarts for blocks larger than 16×16.
    pub large_block_restarts: usize,
    pub seed: u64,
}

impl Default for UnilosslessConfig {
    fn default() -> Self {
        Self { max_iter: UNILOSSLESS_MAX_ITER, restarts: 256, large_block_restarts: 16, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Unilossless {
    pub block: DMatrix<f64>,
    /// `‖B ∘ B − T‖_F`.
    pub residual: f64,
    pub iterations: usize,
}

/// Nearest orthogonal matrix `U Vᵀ` from the SVD.
pub fn polar(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    svd.u.unwrap() * svd.v_t.unwrap()
}

pub fn unilossless_residual(b: &DMatrix<f64>, target: &DMatrix<f64>) -> f64 {
    (b.component_mul(b) - target).norm()
}

pub fn orthogonality_error(b: &DMatrix<f64>) -> f64 {
    let n = b.nrows();
    (b.transpose() * b - DMatrix::<f64>::identity(n, n)).abs().max()
}

/// Signed orthogonal block whose element-wise square is closest to the
/// doubly-stochastic `target`.
///
/// Alternates a polar projection of the signed magnitudes `S ∘ √T` with
/// re-signing from the projection, until the sign pattern is stable. Row
/// and column sign flips commute with the projection, so for blocks up to
/// 4×4 every sign class is tried by starting from each pattern whose first
/// row and column are positive. Larger blocks start from all-positive
/// signs, Householder signs and a few seeded random patterns. The best
/// iterate over all starts is returned.
pub fn closest_unilossless(target: &DMatrix<f64>, cfg: &UnilosslessConfig) -> Result<Unilossless, Error> {
    let n = target.nrows();
    if n != target.ncols() || n == 0 {
        return Err(Error::InvalidParameter("closest_unilossless needs a nonempty square block".into()));
    }
    if target.iter().any(|v| *v < 0.0) {
        return Err(Error::InvalidParameter("target has negative entries".into()));
    }
    if n == 1 {
        let block = DMatrix::from_element(1, 1, 1.0);
        let residual = unilossless_residual(&block, target);
        return Ok(Unilossless { block, residual, iterations: 0 });
    }
    let magnitude = target.map(f64::sqrt);
    let starts = sign_starts(n, target, cfg);
    let results: Vec<(Unilossless, bool)> = starts
        .par_iter()
        .map(|signs| refine(&magnitude, target, signs.clone(), cfg.max_iter))
        .collect();
    let any_converged = results.iter().any(|(_, ok)| *ok);
    let best = results
        .into_iter()
        .map(|(u, _)| u)
        .reduce(|a, b| if b.residual < a.residual { b } else { a })
        .unwrap();
    if !any_converged {
        return Err(Error::NoConvergence { residual: best.residual });
    }
    Ok(best)
}

fn refine(magnitude: &DMatrix<f64>, target: &DMatrix<f64>, mut signs: DMatrix<f64>, max_iter: usize) -> (Unilossless, bool) {
    let mut best: Option<Unilossless> = None;
    for iter in 1..=max_iter {
        let b = polar(&signs.component_mul(magnitude));
        let residual = unilossless_residual(&b, target);
        if best.as_ref().map_or(true, |x| residual < x.residual) {
            best = Some(Unilossless { block: b.clone(), residual, iterations: iter });
        }
        let next = b.map(|v| if v < 0.0 { -1.0 } else { 1.0 });
        if next == signs {
            return (best.unwrap(), true);
        }
        signs = next;
    }
    (best.unwrap(), false)
}

fn sign_starts(n: usize, target: &DMatrix<f64>, cfg: &UnilosslessConfig) -> Vec<DMatrix<f64>> {
    if n <= 4 {
        let free = (n - 1) * (n - 1);
        return (0..1u64 << free)
            .map(|bits| {
                DMatrix::from_fn(n, n, |r, c| {
                    if r == 0 || c == 0 {
                        1.0
                    } else {
                        let k = (r - 1) * (n - 1) + (c - 1);
                        if bits >> k & 1 == 1 { -1.0 } else { 1.0 }
                    }
                })
            })
            .collect();
    }
    let perm = specular_permutation(target);
    let mut starts = vec![
        DMatrix::from_element(n, n, 1.0),
        DMatrix::from_fn(n, n, |r, c| if perm.is_specular(r, c) { -1.0 } else { 1.0 }),
    ];
    let mut rng = seed::rng(cfg.seed, seed::STAGE_MATRIX, n as u64);
    let restarts = if n <= 16 { cfg.restarts } else { cfg.large_block_restarts };
    for _ in 0..restarts {
        starts.push(DMatrix::from_fn(n, n, |_, _| if rng.gen::<bool>() { -1.0 } else { 1.0 }));
    }
    starts
}

/// Closest unilossless block to a uniform target. The target for any
/// permutation is a column permutation of the identity-permutation target,
/// and column permutations commute with the projection, so one solution per
/// `(M, σ)` is computed and reused.
pub fn uniform_unilossless(perm: &PermutationBlock, sigma: f64, cfg: &UnilosslessConfig) -> Result<Unilossless, Error> {
    type Key = (usize, u64, usize, usize, u64);
    static CACHE: OnceLock<Mutex<HashMap<Key, Unilossless>>> = OnceLock::new();
    let m = perm.len();
    let key = (m, sigma.to_bits(), cfg.restarts, cfg.max_iter, cfg.seed);
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let cached = cache.lock().unwrap().get(&key).cloned();
    let base = match cached {
        Some(u) => u,
        None => {
            let t = uniform_block(&PermutationBlock::identity(m), sigma);
            let u = closest_unilossless(&t, &UnilosslessConfig { seed: 0, ..*cfg })?;
            cache.lock().unwrap().insert(key, u.clone());
            u
        }
    };
    let mut block = DMatrix::zeros(m, m);
    for r in 0..m {
        block.set_column(perm.mapping[r], &base.block.column(r));
    }
    Ok(Unilossless { block, ..base })
}

// ---------------------------------------------------------------------------
// Assembly

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackBlock {
    pub patch: usize,
    pub incoming: Vec<usize>,
    pub outgoing: Vec<usize>,
    pub values: DMatrix<f64>,
    /// Energy-domain target the block approximates.
    pub target: DMatrix<f64>,
    pub residual: f64,
    pub orthogonality_error: f64,
    /// Sinkhorn row and column scalings, when balanced.
    pub scaling: Option<(DVector<f64>, DVector<f64>)>,
    pub sinkhorn_deviation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackMatrix {
    pub design: Design,
    pub blocks: Vec<FeedbackBlock>,
    pub size: usize,
}

impl FeedbackMatrix {
    /// `output[c] = Σ_r B[r, c] · input[r]` block by block, indexed by line id.
    pub fn mix(&self, input: &[f64], output: &mut [f64]) {
        for block in &self.blocks {
            for (c, &out_line) in block.outgoing.iter().enumerate() {
                let col = block.values.column(c);
                let mut acc = 0.0;
                for (r, &in_line) in block.incoming.iter().enumerate() {
                    acc += col[r] * input[in_line];
                }
                output[out_line] = acc;
            }
        }
    }

    /// Global matrix with rows indexed by incoming line and columns by
    /// outgoing line.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.size, self.size);
        for block in &self.blocks {
            for (r, &row) in block.incoming.iter().enumerate() {
                for (c, &col) in block.outgoing.iter().enumerate() {
                    m[(row, col)] = block.values[(r, c)];
                }
            }
        }
        m
    }

    pub fn max_orthogonality_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.orthogonality_error).fold(0.0, f64::max)
    }

    pub fn max_residual(&self) -> f64 {
        self.blocks.iter().map(|b| b.residual).fold(0.0, f64::max)
    }

    /// Per-line energy factors `S` that move the Sinkhorn scalings out of
    /// the loop. With `B = E₁ Ŝ E₂`, mixing by `Ŝᵀ` equals `S⁻¹ Bᵀ S` when
    /// every line has `E₂ = 1/E₁ = S`; the closest such split is
    /// `S = √(E₂ / E₁)`, after rescaling each block so its `E₁` and `E₂`
    /// share a geometric mean. Injected energy is multiplied by `S` and
    /// detected energy divided by it. All ones for other designs.
    pub fn line_similarity(&self) -> Vec<f64> {
        if self.design != Design::Sinkhorn {
            return vec![1.0; self.size];
        }
        // Log domain; lines of unbalanced blocks keep 0.
        let mut e1 = vec![0.0; self.size];
        let mut e2 = vec![0.0; self.size];
        let log_mean = |v: &DVector<f64>| v.iter().map(|x| x.ln()).sum::<f64>() / v.len() as f64;
        for block in &self.blocks {
            if let Some((rows, cols)) = &block.scaling {
                let shift = 0.5 * (log_mean(cols) - log_mean(rows));
                for (r, &line) in block.incoming.iter().enumerate() {
                    e1[line] = rows[r].ln() + shift;
                }
                for (c, &line) in block.outgoing.iter().enumerate() {
                    e2[line] = cols[c].ln() - shift;
                }
            }
        }
        e1.iter().zip(&e2).map(|(a, b)| (0.5 * (b - a)).exp()).collect()
    }

    /// One row per block: patch, design, size, residual, orthogonality
    /// error and Sinkhorn deviation (empty when not balanced).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("patch,design,size,residual,orthogonality_error,sinkhorn_deviation\n");
        for b in &self.blocks {
            let dev = b.sinkhorn_deviation.map(|d| format!("{d:e}")).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{:e},{:e},{}\n",
                b.patch,
                self.design,
                b.values.nrows(),
                b.residual,
                b.orthogonality_error,
                dev
            ));
        }
        s
    }
}

/// Builds the feedback matrix block by block. `scattering[i]` is the
/// scattering coefficient of patch `i`.
pub fn assemble_feedback(
    kernel: &KernelMatrix,
    design: Design,
    scattering: &[f64],
    cfg: &UnilosslessConfig,
) -> Result<FeedbackMatrix, Error> {
    if scattering.len() != kernel.blocks.len() {
        return Err(Error::InvalidParameter(format!(
            "{} scattering values for {} patches",
            scattering.len(),
            kernel.blocks.len()
        )));
    }
    let blocks: Result<Vec<FeedbackBlock>, Error> = kernel
        .blocks
        .par_iter()
        .map(|kb| {
            let m = kb.values.nrows();
            let cfg = UnilosslessConfig { seed: seed::derive(cfg.seed, seed::STAGE_MATRIX, kb.patch as u64), ..*cfg };
            let mut scaling = None;
            let mut sinkhorn_deviation = None;
            let (values, target, residual) = if m == 0 {
                (DMatrix::zeros(0, 0), DMatrix::zeros(0, 0), 0.0)
            } else if m == 1 {
                let one = DMatrix::from_element(1, 1, 1.0);
                (one.clone(), one, 0.0)
            } else {
                match design {
                    Design::Householder => {
                        let perm = specular_permutation(&kb.values);
                        let b = householder_block(&perm);
                        let t = b.component_mul(&b);
                        (b, t, 0.0)
                    }
                    Design::Uniform => {
                        let perm = specular_permutation(&kb.values);
                        let t = uniform_block(&perm, scattering[kb.patch]);
                        let u = uniform_unilossless(&perm, scattering[kb.patch], &cfg)?;
                        (u.block, t, u.residual)
                    }
                    Design::Sinkhorn => {
                        let bal = sinkhorn_balance(&kb.values, SINKHORN_TOL, SINKHORN_MAX_ITER).map_err(|e| match e {
                            Error::NoTotalSupport { detail, .. } => Error::NoTotalSupport { patch: Some(kb.patch), detail },
                            other => other,
                        })?;
                        let u = closest_unilossless(&bal.matrix, &cfg)?;
                        sinkhorn_deviation = Some(bal.deviation);
                        scaling = Some((bal.row_scaling, bal.col_scaling));
                        (u.block, bal.matrix, u.residual)
                    }
                }
            };
            let orthogonality_error = if m == 0 { 0.0 } else { orthogonality_error(&values) };
            Ok(FeedbackBlock {
                patch: kb.patch,
                incoming: kb.incoming.clone(),
                outgoing: kb.outgoing.clone(),
                values,
                target,
                residual,
                orthogonality_error,
                scaling,
                sinkhorn_deviation,
            })
        })
        .collect();
    Ok(FeedbackMatrix { design, blocks: blocks?, size: kernel.size })
}
