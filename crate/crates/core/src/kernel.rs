//! Delay lines between patches and the discretized reflection kernel.
//!
//! Every ordered pair of mutually visible, non-coplanar patches `a → b` is a
//! delay line. The kernel block of patch `i` maps radiance arriving on the
//! incoming lines `h → i` (rows) to radiance leaving on the outgoing lines
//! `i → j` (columns). Entries are averages over sample-point triples of
//! `ρ · G · V · dA`, with the BRDF normalized so no energy is absorbed;
//! absorption is applied later by the delay operators.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::geometry::{mirror, Vec3};
use crate::scene::{Material, PatchSet, Scene, DEFAULT_SAMPLE_SPACING};
use crate::Error;

pub const DEFAULT_FS: f64 = 48000.0;
/// Exponent of the cosine-power specular lobe.
pub const SPECULAR_EXPONENT: i32 = 100;
/// Kernel entries below this value are stored as exact zeros.
pub const ZERO_THRESHOLD: f64 = 1e-12;
/// Column sums may exceed one by at most this much.
pub const ENERGY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Line {
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone)]
pub struct PathTable {
    pub lines: Vec<Line>,
    /// Integer delay per line, in samples.
    pub delays: Vec<usize>,
    /// Mean sample-pair distance per line, in metres.
    pub distances: Vec<f64>,
    /// Geometric throughput `∫∫ G V dA dA` of the patch pair, in m²·sr.
    pub etendue: Vec<f64>,
    /// Line ids ending at each patch, ascending.
    pub incoming: Vec<Vec<usize>>,
    /// Line ids leaving each patch, ascending.
    pub outgoing: Vec<Vec<usize>>,
    pub fs: f64,
    index: HashMap<Line, usize>,
}

impl PathTable {
    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn line_id(&self, from: usize, to: usize) -> Option<usize> {
        self.index.get(&Line { from, to }).copied()
    }

    pub fn patch_count(&self) -> usize {
        self.incoming.len()
    }
}

/// Flattened sample points of a patch set with their pairwise visibility.
pub(crate) struct SampleGeometry {
    pub points: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub weights: Vec<f64>,
    pub patch_of: Vec<usize>,
    pub ranges: Vec<std::ops::Range<usize>>,
    visible: Vec<bool>,
}

impl SampleGeometry {
    pub fn new(scene: &Scene, patches: &PatchSet) -> Self {
        let mut points = Vec::new();
        let mut normals = Vec::new();
        let mut weights = Vec::new();
        let mut patch_of = Vec::new();
        let mut ranges = Vec::with_capacity(patches.len());
        for patch in &patches.patches {
            let start = points.len();
            for p in &patch.sample_points {
                points.push(*p);
                normals.push(patch.normal);
                weights.push(patch.sample_weight());
                patch_of.push(patch.id);
            }
            ranges.push(start..points.len());
        }
        let n = points.len();
        let coplanar: Vec<Vec<bool>> = (0..patches.len())
            .map(|a| (0..patches.len()).map(|b| patches.coplanar(scene, a, b)).collect())
            .collect();
        let rows: Vec<Vec<bool>> = (0..n)
            .into_par_iter()
            .map(|a| {
                (0..n)
                    .map(|b| {
                        if b <= a || coplanar[patch_of[a]][patch_of[b]] {
                            false
                        } else {
                            scene.visible(&points[a], &points[b])
                        }
                    })
                    .collect()
            })
            .collect();
        let mut visible = vec![false; n * n];
        for a in 0..n {
            for b in (a + 1)..n {
                if rows[a][b] {
                    visible[a * n + b] = true;
                    visible[b * n + a] = true;
                }
            }
        }
        Self { points, normals, weights, patch_of, ranges, visible }
    }

    #[inline]
    pub fn visible(&self, a: usize, b: usize) -> bool {
        self.visible[a * self.points.len() + b]
    }
}

/// Lines between visible, non-coplanar patch pairs, in ascending
/// `(from, to)` order, with their delays at sample rate `fs`.
pub fn enumerate_paths(patches: &PatchSet, scene: &Scene, fs: f64) -> Result<PathTable, Error> {
    if !(fs > 0.0) {
        return Err(Error::InvalidParameter(format!("sample rate must be positive, got {fs}")));
    }
    let geo = SampleGeometry::new(scene, patches);
    enumerate_with(patches, scene, fs, &geo)
}

fn enumerate_with(
    patches: &PatchSet,
    scene: &Scene,
    fs: f64,
    geo: &SampleGeometry,
) -> Result<PathTable, Error> {
    let n_patches = patches.len();
    let mut lines = Vec::new();
    let mut delays = Vec::new();
    let mut distances = Vec::new();
    let mut etendue = Vec::new();
    for a in 0..n_patches {
        for b in 0..n_patches {
            if a == b || patches.coplanar(scene, a, b) {
                continue;
            }
            let mut count = 0usize;
            let mut dist_sum = 0.0;
            let mut throughput = 0.0;
            // Iterate in a canonical order so both directions agree bit-for-bit.
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            for x in geo.ranges[lo].clone() {
                for y in geo.ranges[hi].clone() {
                    if !geo.visible(x, y) {
                        continue;
                    }
                    let g = geometry_term(&geo.points[x], &geo.normals[x], &geo.points[y], &geo.normals[y]);
                    if g <= 0.0 {
                        continue;
                    }
                    count += 1;
                    dist_sum += (geo.points[x] - geo.points[y]).norm();
                    throughput += g * geo.weights[x] * geo.weights[y];
                }
            }
            if count == 0 {
                continue;
            }
            let mean = dist_sum / count as f64;
            lines.push(Line { from: a, to: b });
            distances.push(mean);
            delays.push(((mean / scene.speed_of_sound * fs).round() as usize).max(1));
            etendue.push(throughput);
        }
    }
    if lines.is_empty() {
        return Err(Error::DegenerateScene("no visible patch pairs".into()));
    }
    let mut incoming = vec![Vec::new(); n_patches];
    let mut outgoing = vec![Vec::new(); n_patches];
    let mut index = HashMap::with_capacity(lines.len());
    for (id, line) in lines.iter().enumerate() {
        outgoing[line.from].push(id);
        incoming[line.to].push(id);
        index.insert(*line, id);
    }
    Ok(PathTable { lines, delays, distances, etendue, incoming, outgoing, fs, index })
}

/// `max(0, n·v(x|x2)) · max(0, n2·v(x2|x)) / ‖x − x2‖²`.
pub fn geometry_term(x: &Vec3, n_x: &Vec3, x2: &Vec3, n_x2: &Vec3) -> f64 {
    let d = x2 - x;
    let r2 = d.norm_squared();
    if r2 == 0.0 {
        return 0.0;
    }
    let r = r2.sqrt();
    let v = d / r;
    n_x.dot(&v).max(0.0) * (-n_x2.dot(&v)).max(0.0) / r2
}

// ---------------------------------------------------------------------------
// BRDF

/// Pseudospecular BRDF: `σ/π + (1 − σ) · lobe`, where the lobe is a
/// cosine-power kernel around the mirror direction scaled so its
/// cosine-weighted hemisphere integral is exactly one for every incidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pseudospecular {
    pub scattering: f64,
}

impl Pseudospecular {
    pub fn new(material: &Material) -> Self {
        Self { scattering: material.scattering }
    }

    /// `v_in` points from the surface towards where the energy came from,
    /// `v_out` from the surface towards where it goes.
    pub fn eval(&self, n: &Vec3, v_in: &Vec3, v_out: &Vec3) -> f64 {
        let diffuse = self.scattering / PI;
        if self.scattering >= 1.0 {
            return diffuse;
        }
        let cos_in = n.dot(v_in);
        if cos_in <= 0.0 || n.dot(v_out) <= 0.0 {
            return 0.0;
        }
        let m = mirror(v_in, n);
        diffuse + (1.0 - self.scattering) * specular_lobe(cos_in, m.dot(v_out))
    }
}

/// Normalized specular lobe value for incidence cosine `cos_in` and
/// `cos_mirror = v_out · mirror(v_in)`.
pub fn specular_lobe(cos_in: f64, cos_mirror: f64) -> f64 {
    if cos_mirror <= 0.0 {
        return 0.0;
    }
    cos_mirror.powi(SPECULAR_EXPONENT) / lobe_normalization(cos_in)
}

/// Cosine-weighted hemisphere integral of `max(0, v·m)^p` for a mirror
/// direction `m` at incidence cosine `c`, tabulated once and interpolated.
fn lobe_normalization(c: f64) -> f64 {
    const N: usize = 512;
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    let table = TABLE.get_or_init(|| (0..=N).map(|k| lobe_integral(k as f64 / N as f64)).collect());
    let x = c.clamp(0.0, 1.0) * N as f64;
    let k = (x.floor() as usize).min(N - 1);
    let t = x - k as f64;
    table[k] * (1.0 - t) + table[k + 1] * t
}

fn lobe_integral(c: f64) -> f64 {
    // Lobe-centred coordinates: v = cos α m + sin α (cos φ t + sin φ b) with
    // t in the (m, n) plane, so v·n = c cos α + s sin α cos φ. The φ integral
    // of max(0, A + B cos φ) has a closed form.
    let s = (1.0 - c * c).max(0.0).sqrt();
    let p = SPECULAR_EXPONENT;
    let steps = 4000;
    let alpha_max = PI / 2.0;
    let h = alpha_max / steps as f64;
    let f = |alpha: f64| {
        let a = c * alpha.cos();
        let b = s * alpha.sin();
        let phi_int = if a >= b {
            2.0 * PI * a
        } else if a <= -b {
            0.0
        } else {
            let phi0 = (-a / b).acos();
            2.0 * (a * phi0 + b * phi0.sin())
        };
        alpha.cos().powi(p) * alpha.sin() * phi_int
    };
    let mut acc = f(0.0) + f(alpha_max);
    for k in 1..steps {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(k as f64 * h);
    }
    acc * h / 3.0
}

// ---------------------------------------------------------------------------
// Kernel

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConfig {
    pub sample_spacing: f64,
    pub seed: u64,
    pub fs: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self { sample_spacing: DEFAULT_SAMPLE_SPACING, seed: 0, fs: DEFAULT_FS }
    }
}

/// Dense block of one patch: rows are incoming lines, columns outgoing.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBlock {
    pub patch: usize,
    pub incoming: Vec<usize>,
    pub outgoing: Vec<usize>,
    pub values: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub blocks: Vec<KernelBlock>,
    /// Total number of lines `M`.
    pub size: usize,
}

impl KernelMatrix {
    /// Entry of the global `M × M` matrix. Zero whenever the middle patches
    /// of the two lines differ.
    pub fn global_entry(&self, paths: &PathTable, row_line: usize, col_line: usize) -> f64 {
        let middle = paths.lines[row_line].to;
        if paths.lines[col_line].from != middle {
            return 0.0;
        }
        let block = &self.blocks[middle];
        let r = block.incoming.iter().position(|&l| l == row_line);
        let c = block.outgoing.iter().position(|&l| l == col_line);
        match (r, c) {
            (Some(r), Some(c)) => block.values[(r, c)],
            _ => 0.0,
        }
    }

    pub fn to_dense(&self, paths: &PathTable) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.size, self.size);
        for block in &self.blocks {
            for (r, &row) in block.incoming.iter().enumerate() {
                for (c, &col) in block.outgoing.iter().enumerate() {
                    m[(row, col)] = block.values[(r, c)];
                }
            }
        }
        let _ = paths;
        m
    }

    /// `(from_line, to_line, value)` for every stored nonzero entry.
    pub fn triples(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for block in &self.blocks {
            for (r, &row) in block.incoming.iter().enumerate() {
                for (c, &col) in block.outgoing.iter().enumerate() {
                    let v = block.values[(r, c)];
                    if v != 0.0 {
                        out.push((row, col, v));
                    }
                }
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("from_line,to_line,value\n");
        for (a, b, v) in self.triples() {
            s.push_str(&format!("{a},{b},{v:e}\n"));
        }
        s
    }

    /// Rebuilds block structure from `(from_line, to_line, value)` triples.
    pub fn from_triples(paths: &PathTable, triples: &[(usize, usize, f64)]) -> Result<Self, Error> {
        let mut blocks: Vec<KernelBlock> = (0..paths.patch_count())
            .map(|p| KernelBlock {
                patch: p,
                incoming: paths.incoming[p].clone(),
                outgoing: paths.outgoing[p].clone(),
                values: DMatrix::zeros(paths.incoming[p].len(), paths.outgoing[p].len()),
            })
            .collect();
        for &(a, b, v) in triples {
            if a >= paths.len() || b >= paths.len() {
                return Err(Error::Parse(format!("line id out of range in ({a}, {b})")));
            }
            let middle = paths.lines[a].to;
            if paths.lines[b].from != middle {
                return Err(Error::Parse(format!(
                    "entry ({a}, {b}) connects lines that do not share a patch"
                )));
            }
            let block = &mut blocks[middle];
            let r = block.incoming.iter().position(|&l| l == a).unwrap();
            let c = block.outgoing.iter().position(|&l| l == b).unwrap();
            block.values[(r, c)] = v;
        }
        Ok(Self { blocks, size: paths.len() })
    }

    pub fn from_csv(paths: &PathTable, text: &str) -> Result<Self, Error> {
        let mut triples = Vec::new();
        for (n, row) in text.lines().enumerate() {
            let row = row.trim();
            if row.is_empty() || (n == 0 && row.starts_with("from_line")) {
                continue;
            }
            let parts: Vec<&str> = row.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(Error::Parse(format!("kernel row {}: expected 3 fields", n + 1)));
            }
            let bad = |e: String| Error::Parse(format!("kernel row {}: {e}", n + 1));
            let a = parts[0].parse::<usize>().map_err(|e| bad(e.to_string()))?;
            let b = parts[1].parse::<usize>().map_err(|e| bad(e.to_string()))?;
            let v = parts[2].parse::<f64>().map_err(|e| bad(e.to_string()))?;
            triples.push((a, b, v));
        }
        Self::from_triples(paths, &triples)
    }
}

/// Evaluates the kernel block of every patch by exhaustive sample-point
/// triples. Quadrature weights are normalized per outgoing sample pair so
/// the discrete hemisphere integral of the BRDF is exactly one.
pub fn compute_kernel(
    patches: &PatchSet,
    paths: &PathTable,
    scene: &Scene,
    cfg: &KernelConfig,
) -> Result<KernelMatrix, Error> {
    if !(cfg.sample_spacing > 0.0) {
        return Err(Error::InvalidParameter("sample_spacing must be positive".into()));
    }
    let resampled;
    let patches = if (patches.sample_spacing - cfg.sample_spacing).abs() > 1e-12 {
        resampled = patches.clone().with_sample_spacing(scene, cfg.sample_spacing);
        &resampled
    } else {
        patches
    };
    let geo = SampleGeometry::new(scene, patches);
    let blocks: Vec<KernelBlock> = (0..patches.len())
        .into_par_iter()
        .map(|i| kernel_block(i, patches, paths, scene, &geo))
        .collect();
    for block in &blocks {
        if block.outgoing.is_empty() && block.incoming.is_empty() {
            continue;
        }
        for r in 0..block.values.nrows() {
            if block.values.row(r).iter().all(|v| *v == 0.0) {
                return Err(Error::IsolatedPatch { patch: block.patch });
            }
        }
    }
    Ok(KernelMatrix { blocks, size: paths.len() })
}

fn kernel_block(
    i: usize,
    patches: &PatchSet,
    paths: &PathTable,
    scene: &Scene,
    geo: &SampleGeometry,
) -> KernelBlock {
    let incoming = paths.incoming[i].clone();
    let outgoing = paths.outgoing[i].clone();
    let mut values = DMatrix::zeros(incoming.len(), outgoing.len());
    let brdf = Pseudospecular::new(scene.material_of(patches.patches[i].polygon));
    let row_of: HashMap<usize, usize> =
        incoming.iter().enumerate().map(|(r, &l)| (paths.lines[l].from, r)).collect();

    // Visible (x', x'') pairs per outgoing line, for averaging.
    let mut pair_counts = vec![0usize; outgoing.len()];
    for (c, &line) in outgoing.iter().enumerate() {
        let j = paths.lines[line].to;
        for xp in geo.ranges[i].clone() {
            for xpp in geo.ranges[j].clone() {
                if geo.visible(xp, xpp) {
                    pair_counts[c] += 1;
                }
            }
        }
    }

    let mut in_dirs: Vec<Vec3> = Vec::new();
    let mut in_weights: Vec<f64> = Vec::new();
    let mut in_rows: Vec<usize> = Vec::new();
    let mut w = Vec::new();
    for xp in geo.ranges[i].clone() {
        let n = geo.normals[xp];
        let pos = geo.points[xp];
        in_dirs.clear();
        in_weights.clear();
        in_rows.clear();
        for x in 0..geo.points.len() {
            let Some(&row) = row_of.get(&geo.patch_of[x]) else { continue };
            if !geo.visible(x, xp) {
                continue;
            }
            let g = geometry_term(&geo.points[x], &geo.normals[x], &pos, &n);
            if g <= 0.0 {
                continue;
            }
            in_dirs.push((geo.points[x] - pos).normalize());
            in_weights.push(g * geo.weights[x]);
            in_rows.push(row);
        }
        if in_dirs.is_empty() {
            continue;
        }
        for (c, &line) in outgoing.iter().enumerate() {
            let j = paths.lines[line].to;
            let scale = 1.0 / pair_counts[c].max(1) as f64;
            for xpp in geo.ranges[j].clone() {
                if !geo.visible(xp, xpp) {
                    continue;
                }
                let v_out = (geo.points[xpp] - pos).normalize();
                w.clear();
                let mut total = 0.0;
                for k in 0..in_dirs.len() {
                    let val = brdf.eval(&n, &in_dirs[k], &v_out) * in_weights[k];
                    total += val;
                    w.push(val);
                }
                if total <= 0.0 {
                    continue;
                }
                let norm = scale / total;
                for k in 0..w.len() {
                    values[(in_rows[k], c)] += w[k] * norm;
                }
            }
        }
    }
    values.iter_mut().for_each(|v| {
        if *v < ZERO_THRESHOLD {
            *v = 0.0
        }
    });
    KernelBlock { patch: i, incoming, outgoing, values }
}

// ---------------------------------------------------------------------------
// Energy validation

#[derive(Debug, Clone, PartialEq)]
pub struct BlockEnergy {
    pub patch: usize,
    pub max_column_sum: f64,
    /// Line id of the column with the largest sum.
    pub worst_column: Option<usize>,
    pub min_entry: f64,
    pub max_entry: f64,
    pub zero_rows: usize,
    pub zero_columns: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    pub blocks: Vec<BlockEnergy>,
    pub pass: bool,
    pub problems: Vec<String>,
}

/// Checks that every block is nonnegative with column sums at most one.
pub fn validate_energy(kernel: &KernelMatrix) -> EnergyReport {
    let mut problems = Vec::new();
    if kernel.size == 0 || kernel.blocks.iter().all(|b| b.values.is_empty()) {
        return EnergyReport { blocks: Vec::new(), pass: false, problems: vec!["no paths".into()] };
    }
    let mut blocks = Vec::new();
    for block in &kernel.blocks {
        if block.values.is_empty() {
            continue;
        }
        let v = &block.values;
        let mut max_sum = f64::NEG_INFINITY;
        let mut worst = None;
        for c in 0..v.ncols() {
            let s: f64 = v.column(c).iter().sum();
            if s > max_sum {
                max_sum = s;
                worst = Some(block.outgoing[c]);
            }
        }
        let min_entry = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max_entry = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let zero_rows = (0..v.nrows()).filter(|&r| v.row(r).iter().all(|x| *x == 0.0)).count();
        let zero_columns = (0..v.ncols()).filter(|&c| v.column(c).iter().all(|x| *x == 0.0)).count();
        if max_sum > 1.0 + ENERGY_TOLERANCE {
            problems.push(format!(
                "patch {}: column sum {max_sum:.6} > 1 at line {}",
                block.patch,
                worst.unwrap()
            ));
        }
        if min_entry < 0.0 {
            problems.push(format!("patch {}: negative entry {min_entry:e}", block.patch));
        }
        blocks.push(BlockEnergy {
            patch: block.patch,
            max_column_sum: max_sum,
            worst_column: worst,
            min_entry,
            max_entry,
            zero_rows,
            zero_columns,
        });
    }
    EnergyReport { pass: problems.is_empty(), blocks, problems }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{discretize, Scene};

    fn box_scene(size: [f64; 3], sigma: f64) -> Scene {
        let [x, y, z] = size;
        let json = format!(
            r#"{{"vertices": [[0,0,0],[{x},0,0],[{x},{y},0],[0,{y},0],[0,0,{z}],[{x},0,{z}],[{x},{y},{z}],[0,{y},{z}]],
            "polygons": [{{"verts":[0,3,2,1],"material":"m"}},{{"verts":[4,5,6,7],"material":"m"}},
                {{"verts":[0,4,7,3],"material":"m"}},{{"verts":[1,2,6,5],"material":"m"}},
                {{"verts":[0,1,5,4],"material":"m"}},{{"verts":[3,7,6,2],"material":"m"}}],
            "materials": {{"m": {{"reflection": 0.9, "scattering": {sigma}}}}},
            "source": {{"pos": [{}, {}, {}]}}, "receiver": {{"pos": [{}, {}, {}]}}}}"#,
            0.6 * x, 0.9 * y, 0.6 * z, 0.35 * x, 0.1 * y, 0.35 * z
        );
        Scene::from_json(&json).unwrap()
    }

    #[test]
    fn geometry_term_examples() {
        let up = Vec3::z();
        let down = -Vec3::z();
        let a = Vec3::zeros();
        let b = Vec3::new(0.0, 0.0, 2.0);
        assert!((geometry_term(&a, &up, &b, &down) - 0.25).abs() < 1e-15);
        assert_eq!(geometry_term(&a, &up, &b, &up), 0.0);
        let tilted = Vec3::new(0.0, 1.0, -1.0).normalize();
        let g = geometry_term(&a, &up, &b, &tilted);
        assert!((g - std::f64::consts::FRAC_1_SQRT_2 / 4.0).abs() < 1e-12);
        assert!((g - 0.17678).abs() < 1e-5);
        assert_eq!(g, geometry_term(&b, &tilted, &a, &up));
    }

    #[test]
    fn lambertian_limit() {
        let brdf = Pseudospecular { scattering: 1.0 };
        let n = Vec3::z();
        let v_in = Vec3::new(0.3, 0.1, 0.9).normalize();
        let v_out = Vec3::new(-0.5, 0.2, 0.4).normalize();
        assert!((brdf.eval(&n, &v_in, &v_out) - 1.0 / PI).abs() < 1e-15);
    }

    #[test]
    fn specular_peak_at_mirror() {
        let brdf = Pseudospecular { scattering: 0.0 };
        let n = Vec3::z();
        let v_in = Vec3::new(0.4, 0.0, 0.8).normalize();
        let m = mirror(&v_in, &n);
        let peak = brdf.eval(&n, &v_in, &m);
        for off in [0.01, 0.05, 0.2] {
            let v = (m + Vec3::new(0.0, off, 0.0)).normalize();
            assert!(brdf.eval(&n, &v_in, &v) < peak);
        }
    }

    // Independent oracle: midpoint rule over (θ, φ) about the normal.
    fn hemisphere_integral(brdf: &Pseudospecular, v_in: &Vec3) -> f64 {
        let n = Vec3::z();
        let (nt, np) = (3000, 3000);
        let dt = (PI / 2.0) / nt as f64;
        let dp = 2.0 * PI / np as f64;
        let mut acc = 0.0;
        for a in 0..nt {
            let theta = (a as f64 + 0.5) * dt;
            let (st, ct) = theta.sin_cos();
            for b in 0..np {
                let phi = (b as f64 + 0.5) * dp;
                let v = Vec3::new(st * phi.cos(), st * phi.sin(), ct);
                acc += brdf.eval(&n, v_in, &v) * ct * st * dt * dp;
            }
        }
        acc
    }

    #[test]
    fn brdf_integrates_to_one() {
        let brdf = Pseudospecular { scattering: 0.25 };
        for theta in [0.0f64, 0.6, 1.2] {
            let v_in = Vec3::new(theta.sin(), 0.0, theta.cos());
            let total = hemisphere_integral(&brdf, &v_in);
            assert!((total - 1.0).abs() < 1e-3, "θ={theta}: {total}");
        }
    }

    #[test]
    fn hallway_has_thirty_lines() {
        let scene = box_scene([2.0, 6.0, 2.0], 0.25);
        let patches = discretize(&scene, 6.0).unwrap();
        let paths = enumerate_paths(&patches, &scene, 48000.0).unwrap();
        assert_eq!(patches.len(), 6);
        assert_eq!(paths.len(), 30);
        for (id, line) in paths.lines.iter().enumerate() {
            let back = paths.line_id(line.to, line.from).unwrap();
            assert_eq!(paths.delays[id], paths.delays[back]);
            assert!(paths.delays[id] >= 1);
            assert_ne!(line.from, line.to);
        }
        let mut sorted = paths.lines.clone();
        sorted.sort();
        assert_eq!(sorted, paths.lines);
    }

    #[test]
    fn hallway_kernel_structure() {
        let scene = box_scene([2.0, 6.0, 2.0], 0.25);
        let patches = discretize(&scene, 6.0).unwrap();
        let paths = enumerate_paths(&patches, &scene, 48000.0).unwrap();
        let kernel = compute_kernel(&patches, &paths, &scene, &KernelConfig::default()).unwrap();
        assert_eq!(kernel.size, 30);
        for block in &kernel.blocks {
            assert_eq!(block.values.shape(), (5, 5));
        }
        let dense = kernel.to_dense(&paths);
        for r in 0..30 {
            for c in 0..30 {
                if paths.lines[r].to != paths.lines[c].from {
                    assert_eq!(dense[(r, c)], 0.0);
                }
            }
        }
        let report = validate_energy(&kernel);
        assert!(report.pass, "{:?}", report.problems);
        for b in &report.blocks {
            assert!(b.max_column_sum <= 1.0 + ENERGY_TOLERANCE);
            assert!(b.min_entry >= 0.0);
        }
    }

    #[test]
    fn faulty_block_fails_validation() {
        let kernel = KernelMatrix {
            blocks: vec![KernelBlock {
                patch: 0,
                incoming: vec![3, 4],
                outgoing: vec![7, 8],
                values: DMatrix::from_row_slice(2, 2, &[0.5, 0.9, 0.2, 0.6]),
            }],
            size: 9,
        };
        let report = validate_energy(&kernel);
        assert!(!report.pass);
        assert_eq!(report.blocks[0].worst_column, Some(8));
        assert!((report.blocks[0].max_column_sum - 1.5).abs() < 1e-12);
        assert!(report.problems[0].contains("line 8"));
    }

    #[test]
    fn empty_kernel_reports_no_paths() {
        let report = validate_energy(&KernelMatrix { blocks: Vec::new(), size: 0 });
        assert!(!report.pass);
        assert_eq!(report.problems, vec!["no paths".to_string()]);
    }

    #[test]
    fn csv_round_trip() {
        let scene = box_scene([2.0, 6.0, 2.0], 0.25);
        let patches = discretize(&scene, 6.0).unwrap();
        let paths = enumerate_paths(&patches, &scene, 48000.0).unwrap();
        let kernel = compute_kernel(&patches, &paths, &scene, &KernelConfig::default()).unwrap();
        let back = KernelMatrix::from_csv(&paths, &kernel.to_csv()).unwrap();
        for (a, b) in kernel.blocks.iter().zip(&back.blocks) {
            assert!((&a.values - &b.values).abs().max() < 1e-12);
        }
    }
}
