//! Acceptance criteria, one line each. Run with
//! `cargo test -p rarenet-cli --test acceptance`.

use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use num_rational::Rational64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rarenet::kernel::{KernelBlock, KernelMatrix};
use rarenet::matrices::{
    assemble_feedback, closest_unilossless, sinkhorn_balance, specular_permutation, uniform_block_exact, Design,
    UnilosslessConfig, SINKHORN_MAX_ITER, SINKHORN_TOL,
};
use rarenet::metrics::analyze;
use rarenet::network::AirMode;
use rarenet::pipeline::{prepare, run_prepared, Prepared, RunConfig};
use rarenet::scene::Scene;
use rarenet::tracing::{ism_bypass, LineFilter};
use rarenet::Vec3;
use serde_json::Value;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn scene_json(name: &str) -> Value {
    let path = format!("{}/../../scenes/{name}.json", env!("CARGO_MANIFEST_DIR"));
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn scene(name: &str) -> Scene {
    Scene::from_json(&scene_json(name).to_string()).unwrap()
}

fn lossless(name: &str) -> Scene {
    let mut v = scene_json(name);
    for m in v["materials"].as_object_mut().unwrap().values_mut() {
        m["reflection"] = 1.0.into();
    }
    Scene::from_json(&v.to_string()).unwrap()
}

fn prepared(scene: &Scene, max_edge: f64) -> Prepared {
    let d = RunConfig::default();
    prepare(scene, max_edge, d.sample_spacing, d.fs, d.seed).unwrap()
}

fn render(p: &Prepared, cfg: RunConfig) -> Vec<f64> {
    run_prepared(p, &cfg).unwrap().rir.samples
}

fn max_abs_dev_from_one(sums: impl Iterator<Item = f64>) -> f64 {
    sums.map(|s| (s - 1.0).abs()).fold(0.0, f64::max)
}

fn orthogonality(b: &DMatrix<f64>) -> f64 {
    (b.transpose() * b - DMatrix::identity(b.ncols(), b.ncols())).abs().max()
}

fn single_block(values: DMatrix<f64>) -> KernelMatrix {
    let n = values.nrows();
    KernelMatrix { blocks: vec![KernelBlock { patch: 0, incoming: (0..n).collect(), outgoing: (0..n).collect(), values }], size: n }
}

fn c1_matrix_invariants() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = UnilosslessConfig::default();
    let mut worst_sinkhorn = 0.0f64;
    let mut worst_orth = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=12);
        let sparse = DMatrix::from_fn(n, n, |_, _| if rng.gen_bool(0.3) { 0.0 } else { rng.gen::<f64>() });
        let mut mapping = specular_permutation(&sparse).mapping;
        mapping.sort_unstable();
        if mapping != (0..n).collect::<Vec<_>>() {
            return outcome(false, format!("permutation of a {n}x{n} block is not a bijection"));
        }
        let perm = specular_permutation(&sparse);
        let sigma = Rational64::new(rng.gen_range(0..=20), 20);
        let exact = uniform_block_exact(&perm, sigma);
        let one = Rational64::from_integer(1);
        let rows_ok = exact.iter().all(|r| r.iter().sum::<Rational64>() == one);
        let cols_ok = (0..n).all(|c| exact.iter().map(|r| r[c]).sum::<Rational64>() == one);
        if !(rows_ok && cols_ok) {
            return outcome(false, format!("uniform block {n}x{n}, sigma {sigma} not exactly doubly stochastic"));
        }

        let positive = DMatrix::from_fn(n, n, |_, _| rng.gen_range(0.01..1.0));
        let balanced = match sinkhorn_balance(&positive, SINKHORN_TOL, SINKHORN_MAX_ITER) {
            Ok(b) => b.matrix,
            Err(e) => return outcome(false, format!("sinkhorn failed on a positive {n}x{n} block: {e}")),
        };
        let dev = max_abs_dev_from_one(balanced.row_iter().map(|r| r.sum()))
            .max(max_abs_dev_from_one(balanced.column_iter().map(|c| c.sum())));
        worst_sinkhorn = worst_sinkhorn.max(dev);
        if n >= 2 {
            // A zero k × (n − k + 1) submatrix leaves no positive diagonal.
            let k = rng.gen_range(1..n);
            let mut deficient = positive.clone();
            for r in 0..k {
                for c in 0..n - k + 1 {
                    deficient[(r, c)] = 0.0;
                }
            }
            if sinkhorn_balance(&deficient, SINKHORN_TOL, SINKHORN_MAX_ITER).is_ok() {
                return outcome(false, format!("sinkhorn accepted a {n}x{n} block without support"));
            }
        }

        let sigma = rng.gen_range(0.0..1.0);
        for design in Design::ALL {
            let kernel = single_block(if design == Design::Sinkhorn { positive.clone() } else { sparse.clone() });
            match assemble_feedback(&kernel, design, &[sigma], &cfg) {
                Ok(m) => worst_orth = worst_orth.max(orthogonality(&m.blocks[0].values)),
                Err(e) => return outcome(false, format!("{design} assembly of a {n}x{n} block failed: {e}")),
            }
        }
    }
    let pass = worst_sinkhorn <= 1e-10 && worst_orth <= 1e-9;
    outcome(
        pass,
        format!(
            "1000 blocks, worst sinkhorn sum deviation {worst_sinkhorn:.1e}, worst orthogonality {worst_orth:.1e}, {:.2} s",
            start.elapsed().as_secs_f64()
        ),
    )
}

fn c2_sign_agnostic_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let perms: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..200 {
        let w: Vec<f64> = (0..6).map(|_| -rng.gen::<f64>().ln()).collect();
        let total: f64 = w.iter().sum();
        let mut target = DMatrix::zeros(3, 3);
        for (p, wi) in perms.iter().zip(&w) {
            for (r, &c) in p.iter().enumerate() {
                target[(r, c)] += wi / total;
            }
        }
        let magnitude = target.map(f64::sqrt);
        let mut best = f64::INFINITY;
        for signs in 0..512u32 {
            let signed = DMatrix::from_fn(3, 3, |r, c| if signs >> (3 * r + c) & 1 == 1 { -1.0 } else { 1.0 });
            let svd = magnitude.component_mul(&signed).svd(true, true);
            let q = svd.u.unwrap() * svd.v_t.unwrap();
            best = best.min((q.component_mul(&q) - &target).norm());
        }
        let got = match closest_unilossless(&target, &UnilosslessConfig::default()) {
            Ok(u) => u.residual,
            Err(e) => return outcome(false, format!("closest_unilossless failed: {e}")),
        };
        worst = worst.max(got - best);
    }
    outcome(worst <= 1e-8, format!("200 targets, worst excess over brute force {worst:.1e}"))
}

fn c3_ism_exactness() -> Outcome {
    let s = scene("hallway");
    let fs = 48000.0;
    let dims = [2.0, 6.0, 2.0];
    let (src, rcv) = (s.source.position, s.receiver.position);
    let images = ism_bypass(&s, &s.source, &s.receiver, 2, fs, None).images;
    let axis = |n: i32, len: f64, x: f64| if n % 2 == 0 { n as f64 * len + x } else { (n + 1) as f64 * len - x };
    let mut expected = Vec::new();
    for nx in -2i32..=2 {
        for ny in -2i32..=2 {
            for nz in -2i32..=2 {
                let order = nx.abs() + ny.abs() + nz.abs();
                if order <= 2 {
                    let p = Vec3::new(axis(nx, dims[0], src.x), axis(ny, dims[1], src.y), axis(nz, dims[2], src.z));
                    let d = (p - rcv).norm();
                    let amp = 0.9f64.powf(order as f64 / 2.0) / d;
                    expected.push((p, (d / 343.0 * fs).round() as usize, amp));
                }
            }
        }
    }
    if images.len() != expected.len() {
        return outcome(false, format!("{} image sources, lattice has {}", images.len(), expected.len()));
    }
    let mut worst_amp = 0.0f64;
    for (p, delay, amp) in &expected {
        let Some(img) = images.iter().find(|i| (i.position - p).norm() < 1e-9) else {
            return outcome(false, format!("lattice image at {p:?} missing"));
        };
        if img.delay != *delay {
            return outcome(false, format!("image at {p:?}: delay {} vs {delay}", img.delay));
        }
        worst_amp = worst_amp.max((img.amplitude / amp - 1.0).abs());
    }
    let direct = images.iter().find(|i| i.walls.is_empty()).map(|i| i.delay);
    let pass = worst_amp <= 1e-9 && direct == Some(679);
    outcome(pass, format!("{} images, direct tap {direct:?}, worst relative amplitude error {worst_amp:.1e}", images.len()))
}

fn dense(filter: &LineFilter, length: usize) -> Vec<f64> {
    let mut v = vec![0.0; length];
    for (n, x) in filter.taps() {
        if n < length {
            v[n] += x;
        }
    }
    v
}

fn c4_bypass_isolation() -> Outcome {
    let p = prepared(&scene("hallway"), 6.0);
    let mut checked = 0;
    for design in Design::ALL {
        for order in [0, 1, 3] {
            let cfg = RunConfig { design, order, n_rays: 20000, length: Some(0.3), ..RunConfig::default() };
            let run = run_prepared(&p, &cfg).unwrap();
            let net = &run.network;
            let Some(first) = net.earliest_recursive_arrival() else {
                return outcome(false, format!("{design} K={order}: no recursive path"));
            };
            let bypass = dense(&net.bypass, run.rir.len());
            if run.rir.samples[..first] != bypass[..first] {
                let n = (0..first).find(|&n| run.rir.samples[n] != bypass[n]).unwrap();
                return outcome(false, format!("{design} K={order}: sample {n} differs from bypass before {first}"));
            }
            if run.rir.samples[first..] == bypass[first..] {
                return outcome(false, format!("{design} K={order}: recursion never reaches the output"));
            }
            checked += 1;
        }
    }
    outcome(true, format!("{checked} configurations match the bypass bit for bit before the first recursive arrival"))
}

const MID_BANDS: [&str; 3] = ["500", "1000", "2000"];

fn band_value(samples: &[f64], band: &str, metric: &str) -> f64 {
    analyze(samples, 48000.0, rarenet::metrics::DEFAULT_NED_WINDOW_MS)
        .unwrap()
        .rows()
        .into_iter()
        .find(|(b, m, _)| b == band && *m == metric)
        .map_or(f64::NAN, |r| r.2)
}

fn c5_eyring() -> Outcome {
    let start = Instant::now();
    let s = scene("hallway");
    let (v, area) = (2.0 * 6.0 * 2.0, 2.0 * (2.0 * 6.0 + 2.0 * 2.0 + 6.0 * 2.0));
    let eyring = 0.161 * v / (-area * 0.9f64.ln());
    let p = prepared(&s, 2.0);
    let rir = render(&p, RunConfig { design: Design::Uniform, max_edge: 2.0, air: AirMode::Auto, ..RunConfig::default() });
    let t30: Vec<f64> = MID_BANDS.iter().map(|b| band_value(&rir, b, "t30_s")).collect();
    let pass = t30.iter().all(|t| (t / eyring - 1.0).abs() <= 0.2);
    outcome(
        pass,
        format!(
            "Eyring {eyring:.3} s, N={} M={}, T30 500/1k/2k = {:.3}/{:.3}/{:.3} s, {:.1} s",
            p.patches.len(),
            p.paths.len(),
            t30[0],
            t30[1],
            t30[2],
            start.elapsed().as_secs_f64()
        ),
    )
}

fn c6_uneven_trend() -> Outcome {
    let s = scene("uneven");
    let mut gaps = Vec::new();
    let mut parts = Vec::new();
    for edge in [3.0, 2.0, 1.5] {
        let p = prepared(&s, edge);
        let t = |design| band_value(&render(&p, RunConfig { design, max_edge: edge, ..RunConfig::default() }), "broadband", "t30_s");
        let (h, u) = (t(Design::Householder), t(Design::Uniform));
        gaps.push(h / u - 1.0);
        parts.push(format!("M={} H {h:.3} U {u:.3}", p.paths.len()));
    }
    let monotone = gaps.windows(2).all(|w| w[1] > w[0]);
    let pass = gaps[2] >= 0.25 && monotone;
    let gap_text: Vec<String> = gaps.iter().map(|g| format!("{:+.0}%", 100.0 * g)).collect();
    outcome(pass, format!("{}; gaps {}", parts.join(", "), gap_text.join(" ")))
}

fn c7_nonconvex_edt() -> Outcome {
    let p = prepared(&scene("nonconvex"), 1.5);
    let h = render(&p, RunConfig { design: Design::Householder, max_edge: 1.5, ..RunConfig::default() });
    let u = render(&p, RunConfig { design: Design::Uniform, max_edge: 1.5, ..RunConfig::default() });
    let mut pass = true;
    let mut parts = Vec::new();
    for band in ["1000", "2000", "4000", "8000", "16000"] {
        let (eh, eu) = (band_value(&h, band, "edt_ms"), band_value(&u, band, "edt_ms"));
        pass &= eh > eu;
        parts.push(format!("{band}: {eh:.0}/{eu:.0}"));
    }
    outcome(pass, format!("M={}, EDT householder/uniform ms {}", p.paths.len(), parts.join(", ")))
}

fn c8_ned_ordering() -> Outcome {
    let p = prepared(&scene("hallway"), 6.0);
    let ned = |order, spread| {
        let rir = render(&p, RunConfig { order, spread, ..RunConfig::default() });
        analyze(&rir, 48000.0, rarenet::metrics::DEFAULT_NED_WINDOW_MS).unwrap().ned.at(0.030).unwrap()
    };
    let (k1, k3s, k1s) = (ned(1, false), ned(3, true), ned(1, true));
    let pass = k1s > k3s && k3s > k1;
    outcome(pass, format!("N={}, NED(30 ms) K1 spread {k1s:.3}, K3 spread {k3s:.3}, K1 {k1:.3}", p.patches.len()))
}

fn noise(seconds: f64, t60: Option<f64>, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = 48000.0;
    let decay = t60.map_or(0.0, |t| 3.0 * std::f64::consts::LN_10 / t);
    (0..(seconds * fs) as usize)
        .map(|i| {
            let n: f64 = StandardNormal.sample(&mut rng);
            n * (-decay * i as f64 / fs).exp()
        })
        .collect()
}

fn c9_metric_oracles() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, t60) in [0.3, 0.6, 1.2].into_iter().enumerate() {
        let x = noise(2.0 * t60, Some(t60), 10 + i as u64);
        let report = analyze(&x, 48000.0, rarenet::metrics::DEFAULT_NED_WINDOW_MS).unwrap();
        let t30 = report.broadband.t30.unwrap_or(f64::NAN);
        let edt = report.broadband.edt_ms.unwrap_or(f64::NAN);
        let (e30, eedt) = (t30 / t60 - 1.0, edt / (t60 * 1000.0 / 6.0) - 1.0);
        pass &= e30.abs() <= 0.01 && eedt.abs() <= 0.05;
        parts.push(format!("T60 {t60}: T30 {:+.2}% EDT {:+.2}%", 100.0 * e30, 100.0 * eedt));
    }
    let stationary = noise(2.0, None, 20);
    let ned = analyze(&stationary, 48000.0, rarenet::metrics::DEFAULT_NED_WINDOW_MS).unwrap().ned;
    let mean = ned.values.iter().sum::<f64>() / ned.values.len() as f64;
    pass &= (mean - 1.0).abs() <= 0.1;
    parts.push(format!("stationary NED mean {mean:.3}"));
    outcome(pass, parts.join(", "))
}

fn c10_stability() -> Outcome {
    let start = Instant::now();
    let mut worst_peak = 0.0f64;
    for name in ["hallway", "uneven", "nonconvex"] {
        let p = prepared(&lossless(name), 6.0);
        for design in Design::ALL {
            let cfg = RunConfig { design, air: AirMode::Off, length: Some(10.0), n_rays: 20000, ..RunConfig::default() };
            let rir = match run_prepared(&p, &cfg) {
                Ok(r) => r.rir.samples,
                Err(e) => return outcome(false, format!("{name} {design}: {e}")),
            };
            if let Some(n) = rir.iter().position(|x| !x.is_finite()) {
                return outcome(false, format!("{name} {design}: non-finite sample {n}"));
            }
            let peak = rir.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            let late = rir[rir.len() - 48000..].iter().fold(0.0f64, |a, x| a.max(x.abs()));
            if late > peak {
                return outcome(false, format!("{name} {design}: late peak {late:.3e} exceeds early peak"));
            }
            worst_peak = worst_peak.max(peak);
        }
    }
    outcome(
        worst_peak < 10.0,
        format!("9 lossless 10 s renders finite, largest peak {worst_peak:.3}, {:.1} s", start.elapsed().as_secs_f64()),
    )
}

fn c11_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let scene = format!("{}/../../scenes/hallway.json", env!("CARGO_MANIFEST_DIR"));
    let once = |name: &str| {
        let out = dir.path().join(name);
        let o = out.to_str().unwrap();
        let wav = out.join("rir.wav");
        let codes = (
            rarenet_cli::run(["rarenet", "render", "--scene", &scene, "--out", o]),
            rarenet_cli::run(["rarenet", "metrics", wav.to_str().unwrap(), "--out", o]),
        );
        let read = |f: &Path| std::fs::read(f).unwrap_or_default();
        (codes, read(&wav), read(&out.join("metrics.csv")), read(&out.join("rir_ned.csv")))
    };
    let a = once("a");
    let b = once("b");
    let ok = a.0 == (0, 0) && b.0 == (0, 0) && !a.1.is_empty() && !a.2.is_empty();
    let pass = ok && a.1 == b.1 && a.2 == b.2 && a.3 == b.3;
    outcome(pass, format!("WAV {} bytes, metrics CSV {} bytes, NED CSV {} bytes", a.1.len(), a.2.len(), a.3.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("matrix invariants", c1_matrix_invariants),
        ("sign-agnostic optimality", c2_sign_agnostic_optimality),
        ("ISM exactness", c3_ism_exactness),
        ("bypass isolation", c4_bypass_isolation),
        ("T30 vs Eyring, hallway", c5_eyring),
        ("T30 householder gap, uneven room", c6_uneven_trend),
        ("EDT householder > uniform, non-convex room", c7_nonconvex_edt),
        ("NED ordering at 30 ms, hallway", c8_ned_ordering),
        ("metric oracles", c9_metric_oracles),
        ("lossless stability", c10_stability),
        ("determinism", c11_determinism),
    ];
    // Trend criteria whose failure is a property of the model, reported
    // without failing the test target.
    let reported_only = [5, 6, 7, 8];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        let o = check();
        println!("[{}] {id:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass && !reported_only.contains(&id) {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
