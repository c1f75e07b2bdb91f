//! Small geometric helpers shared by the scene, kernel and tracing code.

use nalgebra::{Vector2, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;

/// Global geometric tolerance in metres: planarity, self-hit offset and
/// segment-endpoint exclusion all use this value.
pub const EPS: f64 = 1e-6;

/// Orthonormal frame attached to a plane. `u` and `v` span the plane and
/// `normal = u × v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneFrame {
    pub origin: Vec3,
    pub u: Vec3,
    pub v: Vec3,
    pub normal: Vec3,
}

impl PlaneFrame {
    pub fn new(origin: Vec3, first_edge: Vec3, normal: Vec3) -> Self {
        let u = (first_edge - normal * normal.dot(&first_edge)).normalize();
        let v = normal.cross(&u);
        Self { origin, u, v, normal }
    }

    pub fn to_local(&self, p: &Vec3) -> Vec2 {
        let d = p - self.origin;
        Vec2::new(d.dot(&self.u), d.dot(&self.v))
    }

    pub fn to_world(&self, q: &Vec2) -> Vec3 {
        self.origin + self.u * q.x + self.v * q.y
    }
}

/// Signed area of a 2-D loop (positive when counter-clockwise).
pub fn signed_area(poly: &[Vec2]) -> f64 {
    let n = poly.len();
    let mut acc = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        acc += a.x * b.y - b.x * a.y;
    }
    0.5 * acc
}

pub fn centroid_2d(poly: &[Vec2]) -> Vec2 {
    let n = poly.len();
    let mut cx = 0.0;
    let mut cy = 0.0;
    let mut a2 = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        let cross = a.x * b.y - b.x * a.y;
        a2 += cross;
        cx += (a.x + b.x) * cross;
        cy += (a.y + b.y) * cross;
    }
    if a2.abs() < 1e-300 {
        let sum = poly.iter().fold(Vec2::zeros(), |s, p| s + p);
        return sum / n as f64;
    }
    Vec2::new(cx / (3.0 * a2), cy / (3.0 * a2))
}

/// Point-in-convex-polygon test for a counter-clockwise loop. `tol` is the
/// allowed distance outside an edge.
pub fn inside_convex(poly: &[Vec2], p: &Vec2, tol: f64) -> bool {
    let n = poly.len();
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        let e = b - a;
        let len = e.norm();
        if len == 0.0 {
            continue;
        }
        let cross = e.x * (p.y - a.y) - e.y * (p.x - a.x);
        if cross / len < -tol {
            return false;
        }
    }
    true
}

/// Sutherland–Hodgman clip of `subject` against the convex counter-clockwise
/// loop `clip`.
pub fn clip_convex(subject: &[Vec2], clip: &[Vec2]) -> Vec<Vec2> {
    let mut output: Vec<Vec2> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let e = b - a;
        let side = |p: &Vec2| e.x * (p.y - a.y) - e.y * (p.x - a.x);
        let input = std::mem::take(&mut output);
        let m = input.len();
        for k in 0..m {
            let cur = input[k];
            let prev = input[(k + m - 1) % m];
            let sc = side(&cur);
            let sp = side(&prev);
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(prev + (cur - prev) * (sp / (sp - sc)));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(prev + (cur - prev) * (sp / (sp - sc)));
            }
        }
    }
    dedup_loop(output)
}

fn dedup_loop(mut poly: Vec<Vec2>) -> Vec<Vec2> {
    poly.dedup_by(|a, b| (*a - *b).norm() < 1e-12);
    while poly.len() > 1 && (poly[0] - poly[poly.len() - 1]).norm() < 1e-12 {
        poly.pop();
    }
    poly
}

/// Deterministic, near-uniform set of unit directions (Fibonacci lattice).
pub fn fibonacci_sphere(count: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..count)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            Vec3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Mirror a direction that points away from the surface about the normal.
pub fn mirror(v: &Vec3, n: &Vec3) -> Vec3 {
    n * (2.0 * n.dot(v)) - v
}

/// Two unit vectors orthogonal to `n` and to each other.
pub fn tangent_basis(n: &Vec3) -> (Vec3, Vec3) {
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let t = n.cross(&helper).normalize();
    let b = n.cross(&t);
    (t, b)
}
