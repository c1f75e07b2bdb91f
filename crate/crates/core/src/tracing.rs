//! Source and receiver coupling of the network, plus the image-source bypass.
//!
//! Injection rays leave the source, reflect `K` times and are assigned to
//! the line between their `(K+1)`th and `(K+2)`th hits. Detection rays
//! leave the receiver without reflecting: a ray hitting patch `a` whose
//! opposite ray hits patch `b` sees the radiance travelling on line `a → b`.
//! Reflections of order `≤ K` bypass the network through the image-source
//! filter.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::air::AirAbsorption;
use crate::geometry::{mirror, tangent_basis, Vec3, EPS};
use crate::kernel::PathTable;
use crate::scene::{PatchSet, Receiver, Scene, Source, REFERENCE_BAND};
use crate::seed;
use crate::Error;

pub const DEFAULT_RAYS: usize = 100_000;
const BATCH: usize = 4096;
/// Escaped-ray fraction above which a trace is flagged.
pub const ESCAPE_WARNING: f64 = 1e-3;

/// A gain and delay, or a short impulse response starting at `offset`.
#[derive(Debug, Clone, PartialEq)]
pub enum LineFilter {
    Zero,
    Gain { gain: f64, delay: usize },
    Fir { taps: Vec<f64>, offset: usize },
}

impl LineFilter {
    /// Nonzero `(delay, value)` pairs.
    pub fn taps(&self) -> Vec<(usize, f64)> {
        match self {
            LineFilter::Zero => Vec::new(),
            LineFilter::Gain { gain, delay } => {
                if *gain == 0.0 {
                    Vec::new()
                } else {
                    vec![(*delay, *gain)]
                }
            }
            LineFilter::Fir { taps, offset } => taps
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(k, v)| (offset + k, *v))
                .collect(),
        }
    }

    /// Sum of squared taps.
    pub fn energy(&self) -> f64 {
        match self {
            LineFilter::Zero => 0.0,
            LineFilter::Gain { gain, .. } => gain * gain,
            LineFilter::Fir { taps, .. } => taps.iter().map(|t| t * t).sum(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.taps().is_empty()
    }

    /// Delay of the first nonzero tap.
    pub fn first_delay(&self) -> Option<usize> {
        self.taps().first().map(|t| t.0)
    }

    pub fn last_delay(&self) -> Option<usize> {
        self.taps().last().map(|t| t.0)
    }
}

/// Energy arriving per sample index, starting at `start`.
#[derive(Debug, Clone, PartialEq)]
pub struct Echogram {
    pub start: usize,
    pub bins: Vec<f64>,
    pub total_energy: f64,
    pub ray_count: usize,
}

impl Echogram {
    fn from_arrivals(arrivals: &[(usize, f64)]) -> Option<Self> {
        let start = arrivals.iter().map(|a| a.0).min()?;
        let end = arrivals.iter().map(|a| a.0).max()?;
        let mut bins = vec![0.0; end - start + 1];
        for &(n, e) in arrivals {
            bins[n - start] += e;
        }
        let total_energy = bins.iter().sum();
        Some(Self { start, bins, total_energy, ray_count: arrivals.len() })
    }
}

/// Temporally spread filter: the square root of each bin modulates a
/// seeded random sign sequence, rescaled so the tap energy equals the
/// echogram energy.
pub fn spread_fir(echogram: &Echogram, seed: u64) -> LineFilter {
    if echogram.total_energy <= 0.0 {
        return LineFilter::Zero;
    }
    let mut rng = seed::rng(seed, seed::STAGE_SPREAD, 0);
    let mut taps: Vec<f64> = echogram
        .bins
        .iter()
        .map(|b| {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            sign * b.max(0.0).sqrt()
        })
        .collect();
    let energy: f64 = taps.iter().map(|t| t * t).sum();
    let scale = (echogram.total_energy / energy).sqrt();
    taps.iter_mut().for_each(|t| *t *= scale);
    LineFilter::Fir { taps, offset: echogram.start }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceConfig {
    pub n_rays: usize,
    pub seed: u64,
    pub fs: f64,
    /// Use spread filters instead of a single gain and delay.
    pub spread: bool,
    /// Air absorption along traced segments, at the reference band.
    pub air: Option<AirAbsorption>,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self { n_rays: DEFAULT_RAYS, seed: 0, fs: 48000.0, spread: false, air: Some(AirAbsorption::default()) }
    }
}

impl TraceConfig {
    fn air_energy(&self) -> impl Fn(f64) -> f64 {
        let alpha = self.air.map(|a| a.coefficient(crate::scene::BAND_CENTERS[REFERENCE_BAND]));
        move |d: f64| match alpha {
            Some(a) => 10f64.powf(-a * d / 10.0),
            None => 1.0,
        }
    }
}

fn uniform_sphere(rng: &mut ChaCha8Rng) -> Vec3 {
    let z: f64 = 2.0 * rng.gen::<f64>() - 1.0;
    let phi = 2.0 * PI * rng.gen::<f64>();
    let s = (1.0 - z * z).max(0.0).sqrt();
    Vec3::new(s * phi.cos(), s * phi.sin(), z)
}

fn cosine_hemisphere(rng: &mut ChaCha8Rng, n: &Vec3) -> Vec3 {
    let u: f64 = rng.gen();
    let phi = 2.0 * PI * rng.gen::<f64>();
    let r = u.sqrt();
    let (t, b) = tangent_basis(n);
    (t * (r * phi.cos()) + b * (r * phi.sin()) + n * (1.0 - u).max(0.0).sqrt()).normalize()
}

// ---------------------------------------------------------------------------
// Injection

#[derive(Debug, Clone)]
pub struct Injection {
    pub order: usize,
    pub filters: Vec<LineFilter>,
    pub echograms: Vec<Option<Echogram>>,
    /// Radiance per line (energy of the filter).
    pub radiance: Vec<f64>,
    pub rays: usize,
    pub escaped: usize,
    /// Rays whose last two hits form no line of the path table.
    pub unmatched: usize,
}

impl Injection {
    pub fn escaped_fraction(&self) -> f64 {
        self.escaped as f64 / self.rays.max(1) as f64
    }
}

struct RayRecord {
    line: usize,
    power: f64,
    time: f64,
}

/// Traces injection rays of order `k` from `source`.
pub fn trace_injection(
    scene: &Scene,
    patches: &PatchSet,
    paths: &PathTable,
    source: &Source,
    k: usize,
    cfg: &TraceConfig,
) -> Result<Injection, Error> {
    if cfg.n_rays == 0 {
        return Err(Error::InvalidParameter("n_rays must be at least 1".into()));
    }
    let air = cfg.air_energy();
    let ray_power = 4.0 * PI / cfg.n_rays as f64;
    let batches = cfg.n_rays.div_ceil(BATCH);
    let results: Vec<(Vec<RayRecord>, usize, usize)> = (0..batches)
        .into_par_iter()
        .map(|batch| {
            let mut rng = seed::rng(cfg.seed, seed::STAGE_INJECTION, batch as u64);
            let count = BATCH.min(cfg.n_rays - batch * BATCH);
            let mut records = Vec::with_capacity(count);
            let (mut escaped, mut unmatched) = (0, 0);
            'rays: for _ in 0..count {
                let mut dir = uniform_sphere(&mut rng);
                let mut power = ray_power * source.directivity.gain(&dir);
                let mut pos = source.position;
                let mut distance = 0.0;
                let mut hit_patches = [0usize; 2];
                for hit_index in 1..=k + 2 {
                    let Some(hit) = scene.ray_intersect(&pos, &dir) else {
                        escaped += 1;
                        continue 'rays;
                    };
                    let Some(patch) = patches.locate(scene, hit.polygon, &hit.point) else {
                        escaped += 1;
                        continue 'rays;
                    };
                    if hit_index == k + 2 {
                        hit_patches[1] = patch;
                        break;
                    }
                    distance += hit.distance;
                    let poly = &scene.polygons[hit.polygon];
                    let material = scene.material_of(hit.polygon);
                    if hit_index <= k {
                        power *= material.broadband_reflection();
                    } else {
                        hit_patches[0] = patch;
                    }
                    let n = poly.normal;
                    dir = if rng.gen::<f64>() < material.scattering {
                        cosine_hemisphere(&mut rng, &n)
                    } else {
                        mirror(&(-dir), &n)
                    };
                    pos = hit.point;
                }
                match paths.line_id(hit_patches[0], hit_patches[1]) {
                    Some(line) => records.push(RayRecord {
                        line,
                        power: power * air(distance),
                        time: distance / scene.speed_of_sound,
                    }),
                    None => unmatched += 1,
                }
            }
            (records, escaped, unmatched)
        })
        .collect();

    let m = paths.len();
    let mut arrivals: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
    let mut power = vec![0.0; m];
    let mut weighted_time = vec![0.0; m];
    let (mut escaped, mut unmatched) = (0, 0);
    for (records, e, u) in results {
        escaped += e;
        unmatched += u;
        for r in records {
            let radiance = r.power / paths.etendue[r.line];
            power[r.line] += radiance;
            weighted_time[r.line] += radiance * r.time;
            arrivals[r.line].push(((r.time * cfg.fs).round() as usize, radiance));
        }
    }
    let mut filters = Vec::with_capacity(m);
    let mut echograms = Vec::with_capacity(m);
    for line in 0..m {
        let echogram = Echogram::from_arrivals(&arrivals[line]);
        let filter = match &echogram {
            None => LineFilter::Zero,
            Some(_) if power[line] <= 0.0 => LineFilter::Zero,
            Some(e) if cfg.spread => spread_fir(e, seed::derive(cfg.seed, seed::STAGE_SPREAD, line as u64)),
            Some(_) => LineFilter::Gain {
                gain: power[line].sqrt(),
                delay: (weighted_time[line] / power[line] * cfg.fs).round() as usize,
            },
        };
        filters.push(filter);
        echograms.push(echogram);
    }
    Ok(Injection { order: k, filters, echograms, radiance: power, rays: cfg.n_rays, escaped, unmatched })
}

// ---------------------------------------------------------------------------
// Detection

#[derive(Debug, Clone)]
pub struct Detection {
    pub filters: Vec<LineFilter>,
    pub echograms: Vec<Option<Echogram>>,
    /// Directivity-weighted solid angle seen through each line, in sr.
    pub solid_angle: Vec<f64>,
    /// Mean distance from the receiver to the patch each line leaves.
    pub distance: Vec<f64>,
    pub rays: usize,
    pub unmatched: usize,
}

/// Receiver-side filters mapping line root-radiance to pressure.
pub fn trace_detection(
    scene: &Scene,
    patches: &PatchSet,
    paths: &PathTable,
    receiver: &Receiver,
    cfg: &TraceConfig,
) -> Result<Detection, Error> {
    if cfg.n_rays == 0 {
        return Err(Error::InvalidParameter("n_rays must be at least 1".into()));
    }
    let air = cfg.air_energy();
    let ray_angle = 4.0 * PI / cfg.n_rays as f64;
    let batches = cfg.n_rays.div_ceil(BATCH);
    let results: Vec<(Vec<(usize, f64, f64)>, usize)> = (0..batches)
        .into_par_iter()
        .map(|batch| {
            let mut rng = seed::rng(cfg.seed, seed::STAGE_DETECTION, batch as u64);
            let count = BATCH.min(cfg.n_rays - batch * BATCH);
            let mut records = Vec::with_capacity(count);
            let mut unmatched = 0;
            for _ in 0..count {
                let dir = uniform_sphere(&mut rng);
                let pos = receiver.position;
                let front = scene.ray_intersect(&pos, &dir);
                let back = scene.ray_intersect(&pos, &(-dir));
                let (Some(front), Some(back)) = (front, back) else {
                    unmatched += 1;
                    continue;
                };
                let a = patches.locate(scene, front.polygon, &front.point);
                let b = patches.locate(scene, back.polygon, &back.point);
                match (a, b) {
                    (Some(a), Some(b)) => match paths.line_id(a, b) {
                        Some(line) => {
                            let w = ray_angle * receiver.directivity.gain(&dir);
                            records.push((line, w, front.distance));
                        }
                        None => unmatched += 1,
                    },
                    _ => unmatched += 1,
                }
            }
            (records, unmatched)
        })
        .collect();

    let m = paths.len();
    let mut solid_angle = vec![0.0; m];
    let mut dist_sum = vec![0.0; m];
    let mut arrivals: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
    let mut unmatched = 0;
    for (records, u) in results {
        unmatched += u;
        for (line, w, d) in records {
            solid_angle[line] += w;
            dist_sum[line] += w * d;
            arrivals[line].push((((d / scene.speed_of_sound) * cfg.fs).round() as usize, w * air(d)));
        }
    }
    if solid_angle.iter().all(|w| *w == 0.0) {
        return Err(Error::ReceiverOccluded);
    }
    let distance: Vec<f64> =
        (0..m).map(|l| if solid_angle[l] > 0.0 { dist_sum[l] / solid_angle[l] } else { 0.0 }).collect();
    let mut filters = Vec::with_capacity(m);
    let mut echograms = Vec::with_capacity(m);
    for line in 0..m {
        let echogram = Echogram::from_arrivals(&arrivals[line]);
        let filter = match &echogram {
            None => LineFilter::Zero,
            Some(e) if cfg.spread => {
                spread_fir(e, seed::derive(cfg.seed, seed::STAGE_SPREAD, (m + line) as u64))
            }
            Some(_) => LineFilter::Gain {
                gain: (solid_angle[line] * air(distance[line])).sqrt(),
                delay: (distance[line] / scene.speed_of_sound * cfg.fs).round() as usize,
            },
        };
        filters.push(filter);
        echograms.push(echogram);
    }
    Ok(Detection { filters, echograms, solid_angle, distance, rays: cfg.n_rays, unmatched })
}

// ---------------------------------------------------------------------------
// Image sources

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSource {
    pub position: Vec3,
    /// Reflecting polygons, in the order the sound meets them.
    pub walls: Vec<usize>,
    pub distance: f64,
    /// Pressure amplitude at the receiver, without air absorption.
    pub amplitude: f64,
    pub delay: usize,
}

impl ImageSource {
    pub fn order(&self) -> usize {
        self.walls.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bypass {
    pub images: Vec<ImageSource>,
    /// Summed taps, including air absorption when enabled.
    pub filter: LineFilter,
}

/// Valid, visible image sources of order `≤ k` and the resulting filter.
/// Amplitudes are `∏√r / d`, scaled by the square roots of the source and
/// receiver energy directivities.
pub fn ism_bypass(
    scene: &Scene,
    source: &Source,
    receiver: &Receiver,
    k: usize,
    fs: f64,
    air: Option<&AirAbsorption>,
) -> Bypass {
    let mut images = Vec::new();
    let mut frontier: Vec<(Vec3, Vec<usize>)> = vec![(source.position, Vec::new())];
    for order in 0..=k {
        for (pos, walls) in &frontier {
            if let Some(image) = validate_image(scene, source, receiver, pos, walls, fs) {
                // Paths through an edge are valid for both wall orders.
                let duplicate = images.iter().any(|other: &ImageSource| {
                    other.order() == image.order() && (other.position - image.position).norm() < 1e-9
                });
                if !duplicate {
                    images.push(image);
                }
            }
        }
        if order == k {
            break;
        }
        let mut next = Vec::new();
        for (pos, walls) in &frontier {
            for (p, poly) in scene.polygons.iter().enumerate() {
                if walls.last() == Some(&p) {
                    continue;
                }
                let h = poly.normal.dot(pos) - poly.offset;
                if h <= EPS {
                    continue;
                }
                let mut w = walls.clone();
                w.push(p);
                next.push((pos - poly.normal * (2.0 * h), w));
            }
        }
        frontier = next;
    }
    let alpha = air.map(|a| a.coefficient(crate::scene::BAND_CENTERS[REFERENCE_BAND]));
    let len = images.iter().map(|i| i.delay + 1).max().unwrap_or(0);
    let mut taps = vec![0.0; len];
    for image in &images {
        let g = alpha.map_or(1.0, |a| 10f64.powf(-a * image.distance / 20.0));
        taps[image.delay] += image.amplitude * g;
    }
    let filter = if images.is_empty() { LineFilter::Zero } else { LineFilter::Fir { taps, offset: 0 } };
    Bypass { images, filter }
}

/// Walks the candidate path back from the receiver, checking that each
/// reflection point lies inside its polygon and every leg is unobstructed.
fn validate_image(
    scene: &Scene,
    source: &Source,
    receiver: &Receiver,
    image: &Vec3,
    walls: &[usize],
    fs: f64,
) -> Option<ImageSource> {
    let distance = (image - receiver.position).norm();
    if distance <= EPS {
        return None;
    }
    // Images of earlier orders along the sequence.
    let mut chain = vec![source.position];
    for &w in walls {
        let poly = &scene.polygons[w];
        let prev = *chain.last().unwrap();
        let h = poly.normal.dot(&prev) - poly.offset;
        chain.push(prev - poly.normal * (2.0 * h));
    }
    let mut point = receiver.position;
    let mut gain = 1.0;
    let arrival_dir = (receiver.position - image).normalize();
    for j in (0..walls.len()).rev() {
        let poly = &scene.polygons[walls[j]];
        let target = chain[j + 1];
        let dir = (target - point).normalize();
        // A path through an edge meets the next wall at zero distance.
        let (_, q) = poly.intersect(&point, &dir, -EPS)?;
        if (q - point).norm() > EPS && !scene.visible(&point, &q) {
            return None;
        }
        gain *= scene.material_of(walls[j]).broadband_reflection().sqrt();
        point = q;
    }
    if !scene.visible(&point, &source.position) {
        return None;
    }
    let departure = (point - source.position).normalize();
    let directivity =
        (source.directivity.gain(&departure) * receiver.directivity.gain(&(-arrival_dir))).sqrt();
    Some(ImageSource {
        position: *image,
        walls: walls.to_vec(),
        distance,
        amplitude: gain * directivity / distance,
        delay: (distance / scene.speed_of_sound * fs).round() as usize,
    })
}

/// `line,offset,value` rows for every nonzero tap.
pub fn filters_to_csv(filters: &[LineFilter]) -> String {
    let mut s = String::from("line,offset,value\n");
    for (line, f) in filters.iter().enumerate() {
        for (offset, v) in f.taps() {
            s.push_str(&format!("{line},{offset},{v:e}\n"));
        }
    }
    s
}
