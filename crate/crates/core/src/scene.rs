//! Room geometry: loading, validation, discretization into patches and the
//! ray/visibility queries every other stage builds on.
//!
//! A scene is a closed polyhedral boundary made of planar convex polygons.
//! Polygon normals are oriented towards the room interior after loading, so
//! a cosine term `n · v` is positive for any direction pointing into the room.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geometry::{
    centroid_2d, clip_convex, fibonacci_sphere, inside_convex, signed_area, PlaneFrame, Vec2, Vec3,
    EPS,
};
use crate::Error;

/// Octave band centre frequencies, in Hz. Every per-band array in the crate
/// uses this order.
pub const BAND_CENTERS: [f64; 8] = [125.0, 250.0, 500.0, 1000.0, 2000.0, 4000.0, 8000.0, 16000.0];
pub const NUM_BANDS: usize = BAND_CENTERS.len();
/// Index of the 1 kHz band, used wherever a single broadband value is needed.
pub const REFERENCE_BAND: usize = 3;

pub const DEFAULT_SPEED_OF_SOUND: f64 = 343.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Material {
    pub name: String,
    /// Energy reflection coefficient per octave band (`1 - absorption`).
    pub reflection: [f64; NUM_BANDS],
    pub scattering: f64,
}

impl Material {
    pub fn broadband_reflection(&self) -> f64 {
        self.reflection[REFERENCE_BAND]
    }

    pub fn is_flat(&self) -> bool {
        self.reflection.iter().all(|r| (r - self.reflection[0]).abs() < 1e-12)
    }
}

/// Direction-dependent gain of a source or receiver.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Directivity {
    #[default]
    Omni,
    /// `(1 - alpha) + alpha * cos(angle to axis)`, clamped at zero.
    Cardioid { axis: [f64; 3], alpha: f64 },
}

impl Directivity {
    /// Energy gain towards the unit direction `dir`.
    pub fn gain(&self, dir: &Vec3) -> f64 {
        match self {
            Directivity::Omni => 1.0,
            Directivity::Cardioid { axis, alpha } => {
                let a = Vec3::new(axis[0], axis[1], axis[2]).normalize();
                ((1.0 - alpha) + alpha * a.dot(dir)).max(0.0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transducer {
    pub position: Vec3,
    pub directivity: Directivity,
}

pub type Source = Transducer;
pub type Receiver = Transducer;

#[derive(Debug, Clone)]
pub struct Polygon {
    /// Vertex loop, counter-clockwise about `normal`.
    pub vertices: Vec<Vec3>,
    /// Unit normal facing the room interior.
    pub normal: Vec3,
    /// Plane offset: `normal · x == offset` on the polygon.
    pub offset: f64,
    pub material: usize,
    pub area: f64,
    pub centroid: Vec3,
    pub frame: PlaneFrame,
    local: Vec<Vec2>,
}

impl Polygon {
    /// Local 2-D coordinates of the vertex loop in `frame`.
    pub fn local_loop(&self) -> &[Vec2] {
        &self.local
    }

    /// Ray/plane intersection restricted to the polygon, ignoring hits
    /// closer than `min_t`. Rays parallel to the plane never hit.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3, min_t: f64) -> Option<(f64, Vec3)> {
        let denom = self.normal.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = (self.offset - self.normal.dot(origin)) / denom;
        if t <= min_t || !t.is_finite() {
            return None;
        }
        let p = origin + dir * t;
        let q = self.frame.to_local(&p);
        if inside_convex(&self.local, &q, 1e-9) {
            Some((t, p))
        } else {
            None
        }
    }

    pub fn contains_point(&self, p: &Vec3, tol: f64) -> bool {
        (self.normal.dot(p) - self.offset).abs() <= tol
            && inside_convex(&self.local, &self.frame.to_local(p), tol)
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub vertices: Vec<Vec3>,
    pub polygons: Vec<Polygon>,
    pub materials: Vec<Material>,
    pub source: Source,
    pub receiver: Receiver,
    pub speed_of_sound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub polygon: usize,
    pub point: Vec3,
    pub distance: f64,
}

// ---------------------------------------------------------------------------
// JSON schema

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneFile {
    pub vertices: Vec<[f64; 3]>,
    pub polygons: Vec<PolygonSpec>,
    pub materials: BTreeMap<String, MaterialSpec>,
    pub source: TransducerSpec,
    pub receiver: TransducerSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed_of_sound: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolygonSpec {
    pub verts: Vec<usize>,
    pub material: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaterialSpec {
    pub reflection: ReflectionSpec,
    pub scattering: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReflectionSpec {
    Scalar(f64),
    Bands([f64; NUM_BANDS]),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransducerSpec {
    pub pos: [f64; 3],
    #[serde(default, skip_serializing_if = "is_omni")]
    pub directivity: Directivity,
}

fn is_omni(d: &Directivity) -> bool {
    *d == Directivity::Omni
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene, Error> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Scene::from_json(&text)
}

impl Scene {
    pub fn from_json(text: &str) -> Result<Scene, Error> {
        let file: SceneFile =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Scene::from_file(file)
    }

    pub fn from_file(file: SceneFile) -> Result<Scene, Error> {
        let vertices: Vec<Vec3> =
            file.vertices.iter().map(|v| Vec3::new(v[0], v[1], v[2])).collect();

        let mut materials = Vec::with_capacity(file.materials.len());
        let mut material_ids = BTreeMap::new();
        for (name, spec) in &file.materials {
            let reflection = match spec.reflection {
                ReflectionSpec::Scalar(r) => [r; NUM_BANDS],
                ReflectionSpec::Bands(b) => b,
            };
            if reflection.iter().any(|r| !(0.0..=1.0).contains(r))
                || !(0.0..=1.0).contains(&spec.scattering)
            {
                return Err(Error::InvalidMaterial(name.clone()));
            }
            material_ids.insert(name.clone(), materials.len());
            materials.push(Material { name: name.clone(), reflection, scattering: spec.scattering });
        }

        let mut polygons = Vec::with_capacity(file.polygons.len());
        for (pid, spec) in file.polygons.iter().enumerate() {
            let material = *material_ids
                .get(&spec.material)
                .ok_or_else(|| Error::UnknownMaterial { polygon: pid, name: spec.material.clone() })?;
            let mut loop_pts = Vec::with_capacity(spec.verts.len());
            for &vi in &spec.verts {
                let v = vertices
                    .get(vi)
                    .ok_or(Error::DegeneratePolygon { polygon: pid, reason: "vertex index out of range" })?;
                loop_pts.push(*v);
            }
            polygons.push(build_polygon(pid, loop_pts, material)?);
        }
        if polygons.is_empty() {
            return Err(Error::DegenerateScene("scene has no polygons".into()));
        }

        let source = Transducer {
            position: Vec3::new(file.source.pos[0], file.source.pos[1], file.source.pos[2]),
            directivity: file.source.directivity,
        };
        let receiver = Transducer {
            position: Vec3::new(file.receiver.pos[0], file.receiver.pos[1], file.receiver.pos[2]),
            directivity: file.receiver.directivity,
        };
        let speed_of_sound = file.speed_of_sound.unwrap_or(DEFAULT_SPEED_OF_SOUND);
        if !(speed_of_sound > 0.0) {
            return Err(Error::Parse("speed_of_sound must be positive".into()));
        }

        let mut scene = Scene { vertices, polygons, materials, source, receiver, speed_of_sound };

        if !scene.is_inside(&scene.source.position) {
            return Err(Error::SourceOutside(point_str(&scene.source.position)));
        }
        if !scene.is_inside(&scene.receiver.position) {
            return Err(Error::ReceiverOutside(point_str(&scene.receiver.position)));
        }
        scene.check_closed()?;
        scene.orient_normals();
        Ok(scene)
    }

    /// Ray-parity inside test. Three generic directions vote so that a ray
    /// grazing an edge cannot flip the answer.
    pub fn is_inside(&self, p: &Vec3) -> bool {
        const DIRS: [[f64; 3]; 3] = [
            [0.537_7, 0.291_3, 0.791_1],
            [-0.613_1, 0.702_9, 0.360_7],
            [0.211_9, -0.841_3, -0.497_2],
        ];
        let votes = DIRS
            .iter()
            .filter(|d| {
                let dir = Vec3::new(d[0], d[1], d[2]).normalize();
                let crossings = self
                    .polygons
                    .iter()
                    .filter(|poly| poly.intersect(p, &dir, 1e-12).is_some())
                    .count();
                crossings % 2 == 1
            })
            .count();
        votes >= 2
    }

    fn check_closed(&self) -> Result<(), Error> {
        for origin in [&self.source.position, &self.receiver.position] {
            for dir in fibonacci_sphere(2000) {
                if self.ray_intersect(origin, &dir).is_none() {
                    return Err(Error::OpenScene(format!(
                        "ray from {} towards {} escapes",
                        point_str(origin),
                        point_str(&dir)
                    )));
                }
            }
        }
        Ok(())
    }

    fn orient_normals(&mut self) {
        let flips: Vec<bool> = self
            .polygons
            .iter()
            .map(|poly| {
                let probe = poly.centroid + poly.normal * 1e-4;
                !self.is_inside(&probe)
            })
            .collect();
        for (poly, flip) in self.polygons.iter_mut().zip(flips) {
            if flip {
                let mut verts = poly.vertices.clone();
                verts.reverse();
                let material = poly.material;
                *poly = polygon_from_loop(verts, -poly.normal, material);
            }
        }
    }

    /// Nearest intersection farther than [`EPS`] along a unit direction.
    pub fn ray_intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (pid, poly) in self.polygons.iter().enumerate() {
            if let Some((t, p)) = poly.intersect(origin, dir, EPS) {
                if best.map_or(true, |b| t < b.distance) {
                    best = Some(Hit { polygon: pid, point: p, distance: t });
                }
            }
        }
        best
    }

    /// True iff the open segment between the two points crosses no polygon.
    /// Intersections within [`EPS`] of either endpoint are ignored, which
    /// excludes the polygons the endpoints sit on.
    pub fn visible(&self, a: &Vec3, b: &Vec3) -> bool {
        let d = b - a;
        let len = d.norm();
        if len <= 2.0 * EPS {
            return true;
        }
        let dir = d / len;
        !self.polygons.iter().any(|poly| {
            poly.intersect(a, &dir, EPS).is_some_and(|(t, _)| t < len - EPS)
        })
    }

    pub fn total_area(&self) -> f64 {
        self.polygons.iter().map(|p| p.area).sum()
    }

    /// Enclosed volume from the divergence theorem (normals face inwards).
    pub fn volume(&self) -> f64 {
        -self.polygons.iter().map(|p| p.offset * p.area).sum::<f64>() / 3.0
    }

    /// Eyring reverberation time at the given band, in seconds.
    pub fn eyring_t60(&self, band: usize) -> f64 {
        let area = self.total_area();
        let mean_r = self
            .polygons
            .iter()
            .map(|p| p.area * self.materials[p.material].reflection[band])
            .sum::<f64>()
            / area;
        let loss = -(mean_r.max(1e-12)).ln();
        if loss <= 0.0 {
            return f64::INFINITY;
        }
        0.161 * self.volume() / (area * loss)
    }

    pub fn material_of(&self, polygon: usize) -> &Material {
        &self.materials[self.polygons[polygon].material]
    }
}

fn point_str(p: &Vec3) -> String {
    format!("({}, {}, {})", p.x, p.y, p.z)
}

fn newell_normal(pts: &[Vec3]) -> Vec3 {
    let n = pts.len();
    let mut acc = Vec3::zeros();
    for i in 0..n {
        let a = pts[i];
        let b = pts[(i + 1) % n];
        acc.x += (a.y - b.y) * (a.z + b.z);
        acc.y += (a.z - b.z) * (a.x + b.x);
        acc.z += (a.x - b.x) * (a.y + b.y);
    }
    acc
}

fn build_polygon(pid: usize, pts: Vec<Vec3>, material: usize) -> Result<Polygon, Error> {
    if pts.len() < 3 {
        return Err(Error::DegeneratePolygon { polygon: pid, reason: "fewer than three vertices" });
    }
    let raw = newell_normal(&pts);
    if raw.norm() < 1e-12 {
        return Err(Error::DegeneratePolygon { polygon: pid, reason: "zero area" });
    }
    let normal = raw.normalize();
    let offset = normal.dot(&pts[0]);
    for p in &pts {
        let dev = (normal.dot(p) - offset).abs();
        if dev > EPS {
            return Err(Error::NonPlanar { polygon: pid, deviation: dev });
        }
    }
    let poly = polygon_from_loop(pts, normal, material);
    let n = poly.local.len();
    for i in 0..n {
        let a = poly.local[i];
        let b = poly.local[(i + 1) % n];
        let c = poly.local[(i + 2) % n];
        let cross = (b - a).x * (c - b).y - (b - a).y * (c - b).x;
        if cross < -1e-9 {
            return Err(Error::NonConvex { polygon: pid });
        }
    }
    Ok(poly)
}

/// Builds a polygon whose loop is counter-clockwise about `normal`.
fn polygon_from_loop(pts: Vec<Vec3>, normal: Vec3, material: usize) -> Polygon {
    let frame = PlaneFrame::new(pts[0], pts[1] - pts[0], normal);
    let local: Vec<Vec2> = pts.iter().map(|p| frame.to_local(p)).collect();
    let area = signed_area(&local);
    let c2 = centroid_2d(&local);
    Polygon {
        offset: normal.dot(&pts[0]),
        centroid: frame.to_world(&c2),
        area: area.abs(),
        vertices: pts,
        normal,
        material,
        frame,
        local,
    }
}

// ---------------------------------------------------------------------------
// Patches

pub const DEFAULT_SAMPLE_SPACING: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct Patch {
    pub id: usize,
    pub polygon: usize,
    pub vertices: Vec<Vec3>,
    pub centroid: Vec3,
    pub normal: Vec3,
    pub area: f64,
    pub sample_points: Vec<Vec3>,
    local: Vec<Vec2>,
}

impl Patch {
    /// Longest edge of the vertex loop.
    pub fn longest_edge(&self) -> f64 {
        let n = self.vertices.len();
        (0..n)
            .map(|i| (self.vertices[(i + 1) % n] - self.vertices[i]).norm())
            .fold(0.0, f64::max)
    }

    /// Area associated with each sample point.
    pub fn sample_weight(&self) -> f64 {
        self.area / self.sample_points.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct PatchSet {
    pub patches: Vec<Patch>,
    /// Patch ids per polygon, in creation order.
    pub by_polygon: Vec<Vec<usize>>,
    pub max_edge: f64,
    pub sample_spacing: f64,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Re-sample every patch at a new spacing.
    pub fn with_sample_spacing(mut self, scene: &Scene, spacing: f64) -> Self {
        for patch in &mut self.patches {
            patch.sample_points = sample_points_in(&scene.polygons[patch.polygon].frame, patch, spacing);
        }
        self.sample_spacing = spacing;
        self
    }

    /// Patch containing a point of `polygon`, if any.
    pub fn locate(&self, scene: &Scene, polygon: usize, point: &Vec3) -> Option<usize> {
        let frame = &scene.polygons[polygon].frame;
        let q = frame.to_local(point);
        let ids = &self.by_polygon[polygon];
        ids.iter()
            .copied()
            .find(|&id| inside_convex(&self.patches[id].local, &q, 1e-9))
            .or_else(|| {
                // Points on a shared edge may miss every cell by rounding:
                // fall back to the nearest centroid.
                ids.iter().copied().min_by(|&a, &b| {
                    let da = (self.patches[a].centroid - point).norm();
                    let db = (self.patches[b].centroid - point).norm();
                    da.total_cmp(&db)
                })
            })
    }

    /// True if the two patches lie on the same plane.
    pub fn coplanar(&self, scene: &Scene, a: usize, b: usize) -> bool {
        let pa = &scene.polygons[self.patches[a].polygon];
        let pb = &scene.polygons[self.patches[b].polygon];
        pa.normal.dot(&pb.normal) > 1.0 - 1e-9 && (pa.offset - pb.offset).abs() < EPS
    }
}

/// Splits every polygon into a grid of patches whose longest edge does not
/// exceed `max_edge`. Sample points use [`DEFAULT_SAMPLE_SPACING`].
pub fn discretize(scene: &Scene, max_edge: f64) -> Result<PatchSet, Error> {
    if !(max_edge > 0.0) {
        return Err(Error::InvalidParameter(format!("max_edge must be positive, got {max_edge}")));
    }
    let mut patches = Vec::new();
    let mut by_polygon = Vec::with_capacity(scene.polygons.len());
    for (pid, poly) in scene.polygons.iter().enumerate() {
        let local = poly.local_loop();
        let (min, max) = bounds(local);
        let cell = if is_grid_rectangle(local) { max_edge } else { max_edge / 2f64.sqrt() };
        let nu = ((max.x - min.x) / cell - 1e-9).ceil().max(1.0) as usize;
        let nv = ((max.y - min.y) / cell - 1e-9).ceil().max(1.0) as usize;
        let du = (max.x - min.x) / nu as f64;
        let dv = (max.y - min.y) / nv as f64;
        let mut ids = Vec::new();
        for j in 0..nv {
            for i in 0..nu {
                let x0 = min.x + du * i as f64;
                let y0 = min.y + dv * j as f64;
                let rect = [
                    Vec2::new(x0, y0),
                    Vec2::new(x0 + du, y0),
                    Vec2::new(x0 + du, y0 + dv),
                    Vec2::new(x0, y0 + dv),
                ];
                let piece = clip_convex(&rect, local);
                if piece.len() < 3 {
                    continue;
                }
                let area = signed_area(&piece);
                if area <= 1e-12 * poly.area {
                    continue;
                }
                let id = patches.len();
                let vertices: Vec<Vec3> = piece.iter().map(|q| poly.frame.to_world(q)).collect();
                let mut patch = Patch {
                    id,
                    polygon: pid,
                    centroid: poly.frame.to_world(&centroid_2d(&piece)),
                    normal: poly.normal,
                    area,
                    vertices,
                    sample_points: Vec::new(),
                    local: piece,
                };
                patch.sample_points = sample_points_in(&poly.frame, &patch, DEFAULT_SAMPLE_SPACING);
                ids.push(id);
                patches.push(patch);
            }
        }
        by_polygon.push(ids);
    }
    Ok(PatchSet { patches, by_polygon, max_edge, sample_spacing: DEFAULT_SAMPLE_SPACING })
}

fn bounds(poly: &[Vec2]) -> (Vec2, Vec2) {
    let mut min = Vec2::new(f64::INFINITY, f64::INFINITY);
    let mut max = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in poly {
        min = min.inf(p);
        max = max.sup(p);
    }
    (min, max)
}

/// Rectangle aligned with its own first edge: grid cells tile it exactly.
fn is_grid_rectangle(poly: &[Vec2]) -> bool {
    if poly.len() != 4 {
        return false;
    }
    let (min, max) = bounds(poly);
    let area = (max.x - min.x) * (max.y - min.y);
    (signed_area(poly) - area).abs() <= 1e-9 * area.max(1e-12)
}

/// Regular grid of sample points at `spacing`, centred on the patch bounding
/// box and clipped to the patch. Falls back to the centroid.
pub fn sample_points(scene: &Scene, patch: &Patch, spacing: f64) -> Vec<Vec3> {
    sample_points_in(&scene.polygons[patch.polygon].frame, patch, spacing)
}

fn sample_points_in(frame: &PlaneFrame, patch: &Patch, spacing: f64) -> Vec<Vec3> {
    assert!(spacing > 0.0, "sample spacing must be positive");
    let (min, max) = bounds(&patch.local);
    let count = |extent: f64| ((extent / spacing + 1e-9).floor() as usize).max(1);
    let nu = count(max.x - min.x);
    let nv = count(max.y - min.y);
    let off_u = min.x + (max.x - min.x - (nu - 1) as f64 * spacing) / 2.0;
    let off_v = min.y + (max.y - min.y - (nv - 1) as f64 * spacing) / 2.0;
    let mut out = Vec::with_capacity(nu * nv);
    for j in 0..nv {
        for i in 0..nu {
            let q = Vec2::new(off_u + spacing * i as f64, off_v + spacing * j as f64);
            if inside_convex(&patch.local, &q, -1e-9) {
                out.push(frame.to_world(&q));
            }
        }
    }
    if out.is_empty() {
        out.push(patch.centroid);
    }
    out
}
