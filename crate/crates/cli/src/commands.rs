//! Command implementations.

use std::path::{Path, PathBuf};

use rarenet::kernel::{compute_kernel, enumerate_paths, validate_energy, KernelMatrix};
use rarenet::matrices::{assemble_feedback, Design, UnilosslessConfig, SINKHORN_ACCEPT};
use rarenet::metrics::analyze;
use rarenet::pipeline::{prepare, run_prepared, Prepared, RunConfig, RunOutput};
use rarenet::scene::{discretize, load_scene, Scene, NUM_BANDS, REFERENCE_BAND};
use rarenet::seed;
use rarenet::tracing::filters_to_csv;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::args::{Command, MetricsArgs, RenderArgs, RunArgs, SweepArgs, ValidateArgs};
use crate::output::{self, MetricsRow, RunLabel};
use crate::CliError;

/// Largest block orthogonality error accepted by `validate`.
pub const ORTHOGONALITY_TOLERANCE: f64 = 1e-9;

pub fn dispatch(cli: crate::Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Render(a) => render(&a),
        Command::Metrics(a) => metrics(&a),
        Command::Validate(a) => validate(&a),
        Command::Sweep(a) => sweep(&a),
    }
}

fn require_scene(path: Option<&Path>) -> Result<(Scene, String), CliError> {
    let path = path.ok_or_else(|| CliError::Usage("no scene given (--scene or config \"scene\")".into()))?;
    if !path.is_file() {
        return Err(CliError::Usage(format!("scene file not found: {}", path.display())));
    }
    let scene = load_scene(path)?;
    Ok((scene, scene_name(path)))
}

fn scene_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scene".into())
}

fn out_dir(args: &RunArgs, resolved: Option<&PathBuf>, default: &str) -> PathBuf {
    resolved.cloned().or_else(|| args.out.clone()).unwrap_or_else(|| PathBuf::from(default))
}

/// Manifest of one rendered run: every parameter that affects the output,
/// plus sizes, seeds, diagnostics and timings.
pub fn run_manifest(scene_path: &Path, name: &str, prepared: &Prepared, cfg: &RunConfig, run: &RunOutput, wav: &str) -> Value {
    let scene = &prepared.scene;
    let net = &run.network;
    let sinkhorn = net.matrix.blocks.iter().filter_map(|b| b.sinkhorn_deviation).fold(None, |a: Option<f64>, d| {
        Some(a.map_or(d, |a| a.max(d)))
    });
    let peak = run.rir.samples.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    json!({
        "tool": { "name": env!("CARGO_PKG_NAME"), "version": env!("CARGO_PKG_VERSION") },
        "run": {
            "scene": name,
            "design": cfg.design.name(),
            "K": cfg.order,
            "spread": cfg.spread,
            "N": run.patches,
            "M": run.lines,
        },
        "scene": {
            "path": scene_path.display().to_string(),
            "polygons": scene.polygons.len(),
            "materials": scene.materials.iter().map(|m| json!({
                "name": m.name, "reflection": m.reflection, "scattering": m.scattering,
            })).collect::<Vec<_>>(),
            "source": [scene.source.position.x, scene.source.position.y, scene.source.position.z],
            "receiver": [scene.receiver.position.x, scene.receiver.position.y, scene.receiver.position.z],
            "speed_of_sound": scene.speed_of_sound,
            "volume_m3": scene.volume(),
            "surface_m2": scene.total_area(),
            "eyring_t60_s": (0..NUM_BANDS).map(|b| scene.eyring_t60(b)).collect::<Vec<_>>(),
        },
        "config": cfg,
        "resolved": {
            "air": net.air_mode,
            "length_samples": run.rir.len(),
            "reference_band": REFERENCE_BAND,
        },
        "seeds": {
            "top": cfg.seed,
            "stages": {
                "injection": seed::STAGE_INJECTION,
                "detection": seed::STAGE_DETECTION,
                "spread": seed::STAGE_SPREAD,
                "matrix": seed::STAGE_MATRIX,
            },
            "kernel": cfg.kernel_config().seed,
        },
        "matrix": {
            "max_residual": net.matrix.max_residual(),
            "max_orthogonality_error": net.matrix.max_orthogonality_error(),
            "max_sinkhorn_deviation": sinkhorn,
        },
        "injection": net.injection.as_ref().map(|i| json!({
            "rays": i.rays,
            "escaped_fraction": i.escaped_fraction(),
            "unmatched": i.unmatched,
        })),
        "rir": {
            "samples": run.rir.len(),
            "fs": run.rir.fs,
            "peak": peak,
            "energy": run.rir.energy(),
            "earliest_recursive_arrival": net.earliest_recursive_arrival(),
        },
        "timings": run.timings,
        "outputs": { "wav": wav },
    })
}

fn render(args: &RenderArgs) -> Result<(), CliError> {
    let resolved = args.run.resolve()?;
    let (scene, name) = require_scene(resolved.scene.as_deref())?;
    let out = out_dir(&args.run, resolved.out.as_ref(), "rarenet-out");
    let cfg = &resolved.config;
    let prepared = prepare(&scene, cfg.max_edge, cfg.sample_spacing, cfg.fs, cfg.seed)?;
    let run = run_prepared(&prepared, cfg)?;
    output::create_dir(&out)?;
    output::write_wav(&out.join("rir.wav"), &run.rir.samples, cfg.fs)?;
    let manifest = run_manifest(resolved.scene.as_deref().unwrap(), &name, &prepared, cfg, &run, "rir.wav");
    output::write_json(&out.join("manifest.json"), &manifest)?;
    if args.dump {
        let net = &run.network;
        output::write_text(&out.join("kernel.csv"), &prepared.kernel.to_csv())?;
        output::write_text(&out.join("matrix.csv"), &net.matrix.to_csv())?;
        output::write_text(&out.join("injectors.csv"), &filters_to_csv(&net.injectors))?;
        output::write_text(&out.join("detectors.csv"), &filters_to_csv(&net.detectors))?;
        let times = (0..run.rir.len()).map(|n| n as f64 / cfg.fs);
        output::write_trace_csv(&out.join("rir.csv"), times, &run.rir.samples)?;
    }
    if let Some(inj) = &run.network.injection {
        if inj.escaped_fraction() > rarenet::tracing::ESCAPE_WARNING {
            eprintln!("warning: {:.2}% of injection rays escaped", 100.0 * inj.escaped_fraction());
        }
    }
    println!(
        "{name}: {} N={} M={} K={} spread={} -> {}",
        cfg.design,
        run.patches,
        run.lines,
        cfg.order,
        cfg.spread,
        out.join("rir.wav").display()
    );
    Ok(())
}

/// Run manifest describing `wav`: `<stem>.json` beside it, or a
/// `manifest.json` in the same directory whose output names the file.
fn find_manifest(wav: &Path) -> Option<Value> {
    let dir = wav.parent().unwrap_or(Path::new("."));
    let file = wav.file_name()?.to_string_lossy().into_owned();
    let read = |p: PathBuf| -> Option<Value> { serde_json::from_str(&std::fs::read_to_string(p).ok()?).ok() };
    if let Some(m) = read(wav.with_extension("json")) {
        if m["outputs"]["wav"] == file.as_str() {
            return Some(m);
        }
    }
    read(dir.join("manifest.json")).filter(|m| m["outputs"]["wav"] == file.as_str())
}

/// Metrics rows for one WAV; writes its EDC and NED traces to `out`.
pub fn analyze_wav(wav: &Path, out: &Path, window_ms: f64, bands: &[String]) -> Result<Vec<MetricsRow>, (RunLabel, String)> {
    let file = wav.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    let label = find_manifest(wav).map(|m| RunLabel::from_manifest(file.clone(), &m)).unwrap_or_else(|| RunLabel {
        file,
        scene: scene_name(wav),
        ..RunLabel::default()
    });
    let fail = |label: &RunLabel, e: String| Err((label.clone(), e));
    let (samples, fs) = match output::read_wav(wav) {
        Ok(x) => x,
        Err(e) => return fail(&label, e.to_string()),
    };
    if samples.is_empty() {
        return fail(&label, "empty file".into());
    }
    let report = match analyze(&samples, fs, window_ms) {
        Ok(r) => r,
        Err(e) => return fail(&label, e.to_string()),
    };
    let stem = scene_name(wav);
    let traces = output::write_edc_csv(&output::sibling(out, &stem, "_edc.csv"), &report.edc)
        .and_then(|_| output::write_ned_csv(&output::sibling(out, &stem, "_ned.csv"), &report.ned));
    if let Err(e) = traces {
        return fail(&label, e.to_string());
    }
    Ok(output::report_rows(&label, &report, bands))
}

fn metrics(args: &MetricsArgs) -> Result<(), CliError> {
    if !(args.window_ms >= 1.0) {
        return Err(CliError::Usage("--window-ms must be at least 1".into()));
    }
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("."));
    output::create_dir(&out)?;
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for wav in &args.wavs {
        match analyze_wav(wav, &out, args.window_ms, &args.bands) {
            Ok(r) => rows.extend(r),
            Err((label, e)) => {
                eprintln!("{}: {e}", wav.display());
                rows.push(output::error_row(&label, &e));
                failed.push(wav.display().to_string());
            }
        }
    }
    let csv = out.join("metrics.csv");
    output::write_metrics_csv(&csv, &rows)?;
    println!("{} rows -> {}", rows.len(), csv.display());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Io(format!("metrics failed for {}", failed.join(", "))))
    }
}

/// One line of a validation report.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub check: String,
    pub design: String,
    pub patch: String,
    pub value: String,
    pub threshold: String,
    /// `None` for informational rows.
    pub pass: Option<bool>,
    pub detail: String,
}

impl Check {
    fn status(&self) -> &'static str {
        match self.pass {
            Some(true) => "pass",
            Some(false) => "FAIL",
            None => "info",
        }
    }
}

/// Kernel energy and feedback-matrix checks for `designs`.
pub fn validation_checks(kernel: &KernelMatrix, scattering: &[f64], designs: &[Design], seed: u64) -> Vec<Check> {
    let mut checks = Vec::new();
    let energy = validate_energy(kernel);
    let worst = energy.blocks.iter().max_by(|a, b| a.max_column_sum.total_cmp(&b.max_column_sum));
    checks.push(Check {
        check: "kernel_energy".into(),
        design: String::new(),
        patch: worst.map(|b| b.patch.to_string()).unwrap_or_default(),
        value: worst.map(|b| format!("{:e}", b.max_column_sum)).unwrap_or_default(),
        threshold: "1".into(),
        pass: Some(energy.pass),
        detail: energy.problems.join("; "),
    });
    let cfg = UnilosslessConfig { seed, ..UnilosslessConfig::default() };
    for &design in designs {
        let matrix = match assemble_feedback(kernel, design, scattering, &cfg) {
            Ok(m) => m,
            Err(e) => {
                checks.push(Check {
                    check: "assemble".into(),
                    design: design.to_string(),
                    patch: String::new(),
                    value: String::new(),
                    threshold: String::new(),
                    pass: Some(false),
                    detail: format!("{}: {e}", crate::module_of(&e)),
                });
                continue;
            }
        };
        let arg_max = |f: &dyn Fn(&rarenet::matrices::FeedbackBlock) -> Option<f64>| {
            matrix
                .blocks
                .iter()
                .filter_map(|b| f(b).map(|v| (b.patch, v)))
                .max_by(|a, b| a.1.total_cmp(&b.1))
        };
        let orth = arg_max(&|b| Some(b.orthogonality_error));
        checks.push(Check {
            check: "orthogonality".into(),
            design: design.to_string(),
            patch: orth.map(|o| o.0.to_string()).unwrap_or_default(),
            value: format!("{:e}", orth.map_or(0.0, |o| o.1)),
            threshold: format!("{ORTHOGONALITY_TOLERANCE:e}"),
            pass: Some(orth.map_or(0.0, |o| o.1) <= ORTHOGONALITY_TOLERANCE),
            detail: String::new(),
        });
        if let Some((patch, dev)) = arg_max(&|b| b.sinkhorn_deviation) {
            checks.push(Check {
                check: "sinkhorn_deviation".into(),
                design: design.to_string(),
                patch: patch.to_string(),
                value: format!("{dev:e}"),
                threshold: format!("{SINKHORN_ACCEPT:e}"),
                pass: Some(dev <= SINKHORN_ACCEPT),
                detail: String::new(),
            });
        }
        let res = arg_max(&|b| Some(b.residual));
        checks.push(Check {
            check: "residual".into(),
            design: design.to_string(),
            patch: res.map(|r| r.0.to_string()).unwrap_or_default(),
            value: format!("{:e}", res.map_or(0.0, |r| r.1)),
            threshold: String::new(),
            pass: None,
            detail: "Frobenius distance of |B|∘|B| to the energy target".into(),
        });
    }
    checks
}

fn validate(args: &ValidateArgs) -> Result<(), CliError> {
    let resolved = args.run.resolve()?;
    let (scene, name) = require_scene(resolved.scene.as_deref())?;
    let cfg = &resolved.config;
    let patches = discretize(&scene, cfg.max_edge)?.with_sample_spacing(&scene, cfg.sample_spacing);
    let paths = enumerate_paths(&patches, &scene, cfg.fs)?;
    let kernel = match &args.kernel {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read kernel {}: {e}", path.display())))?;
            KernelMatrix::from_csv(&paths, &text).map_err(|e| CliError::Pipeline { module: "kernel", source: e })?
        }
        None => compute_kernel(&patches, &paths, &scene, &cfg.kernel_config())?,
    };
    let scattering: Vec<f64> = patches.patches.iter().map(|p| scene.material_of(p.polygon).scattering).collect();
    let designs = if args.designs.is_empty() { Design::ALL.to_vec() } else { args.designs.clone() };
    let checks = validation_checks(&kernel, &scattering, &designs, cfg.seed);

    println!("{name}: N={} M={}", patches.len(), paths.len());
    for c in &checks {
        let at = if c.patch.is_empty() { String::new() } else { format!(" patch {}", c.patch) };
        let limit = if c.threshold.is_empty() { String::new() } else { format!(" (limit {})", c.threshold) };
        let detail = if c.detail.is_empty() { String::new() } else { format!(": {}", c.detail) };
        println!("[{}] {} {}{at} {}{limit}{detail}", c.status(), c.check, c.design, c.value);
    }
    if let Some(out) = resolved.out.as_ref().or(args.run.out.as_ref()) {
        output::create_dir(out)?;
        let path = out.join("validate.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut write = |rec: [&str; 7]| w.write_record(rec).map_err(|e| CliError::Io(format!("{}: {e}", path.display())));
        write(["check", "design", "patch", "value", "threshold", "status", "detail"])?;
        for c in &checks {
            write([&c.check, &c.design, &c.patch, &c.value, &c.threshold, c.status(), &c.detail])?;
        }
        w.flush().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| c.pass == Some(false))
        .map(|c| if c.detail.is_empty() { format!("{} {}", c.check, c.design) } else { c.detail.clone() })
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Validation(failed.join("; ")))
    }
}

/// File stem of one sweep run.
pub fn run_stem(scene: &str, cfg: &RunConfig) -> String {
    format!(
        "{scene}_{}_k{}_{}_e{}",
        cfg.design,
        cfg.order,
        if cfg.spread { "spread" } else { "nospread" },
        cfg.max_edge
    )
}

fn sweep(args: &SweepArgs) -> Result<(), CliError> {
    let resolved = args.run.resolve()?;
    let base = &resolved.config;
    let mut scene_paths: Vec<PathBuf> = resolved.scene.iter().cloned().collect();
    scene_paths.extend(args.scenes.iter().cloned());
    if scene_paths.is_empty() {
        return Err(CliError::Usage("no scenes given (--scene or --scenes)".into()));
    }
    let scenes = scene_paths.iter().map(|p| require_scene(Some(p))).collect::<Result<Vec<_>, _>>()?;
    let designs: Vec<Design> = or_default(&args.designs, base.design);
    let orders: Vec<usize> = or_default(&args.orders, base.order);
    let spreads: Vec<bool> = or_default(&args.spreads, base.spread);
    let edges: Vec<f64> = or_default(&args.max_edges, base.max_edge);
    if edges.iter().any(|e| !(*e > 0.0)) {
        return Err(CliError::Usage("max edges must be positive".into()));
    }
    let out = out_dir(&args.run, resolved.out.as_ref(), "rarenet-sweep");
    output::create_dir(&out)?;

    let mut rows = Vec::new();
    let mut runs = Vec::new();
    let mut failures = 0;
    for ((scene, name), path) in scenes.iter().zip(&scene_paths) {
        for &edge in &edges {
            let mut configs = Vec::new();
            for &design in &designs {
                for &order in &orders {
                    for &spread in &spreads {
                        configs.push(RunConfig { design, order, spread, max_edge: edge, ..base.clone() });
                    }
                }
            }
            let prepared = prepare(scene, edge, base.sample_spacing, base.fs, base.seed).map_err(CliError::from);
            let results: Vec<(RunConfig, Result<(Value, Vec<MetricsRow>), String>)> = configs
                .into_par_iter()
                .map(|cfg| {
                    let result = prepared
                        .as_ref()
                        .map_err(|e| e.to_string())
                        .and_then(|p| sweep_run(path, name, p, &cfg, &out).map_err(|e| e.to_string()));
                    (cfg, result)
                })
                .collect();
            for (cfg, result) in results {
                let stem = run_stem(name, &cfg);
                match result {
                    Ok((manifest, r)) => {
                        rows.extend(r);
                        runs.push(json!({ "stem": stem, "status": "ok", "run": manifest["run"] }));
                    }
                    Err(e) => {
                        eprintln!("{stem}: {e}");
                        failures += 1;
                        let label = RunLabel {
                            file: format!("{stem}.wav"),
                            scene: name.clone(),
                            design: cfg.design.to_string(),
                            k: cfg.order.to_string(),
                            spread: cfg.spread.to_string(),
                            m: String::new(),
                        };
                        rows.push(output::error_row(&label, &e));
                        runs.push(json!({ "stem": stem, "status": "error", "error": e }));
                    }
                }
            }
        }
    }
    output::write_metrics_csv(&out.join("metrics.csv"), &rows)?;
    output::write_json(
        &out.join("sweep.json"),
        &json!({
            "scenes": scene_paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "designs": designs.iter().map(|d| d.name()).collect::<Vec<_>>(),
            "orders": orders,
            "spreads": spreads,
            "max_edges": edges,
            "base": base,
            "runs": runs,
        }),
    )?;
    println!("{} runs, {failures} failed -> {}", runs.len(), out.display());
    if failures == 0 {
        Ok(())
    } else {
        Err(CliError::Io(format!("{failures} sweep runs failed")))
    }
}

fn or_default<T: Clone>(values: &[T], default: T) -> Vec<T> {
    if values.is_empty() {
        vec![default]
    } else {
        values.to_vec()
    }
}

fn sweep_run(path: &Path, name: &str, prepared: &Prepared, cfg: &RunConfig, out: &Path) -> Result<(Value, Vec<MetricsRow>), CliError> {
    let run = run_prepared(prepared, cfg)?;
    let stem = run_stem(name, cfg);
    let wav = format!("{stem}.wav");
    output::write_wav(&out.join(&wav), &run.rir.samples, cfg.fs)?;
    let manifest = run_manifest(path, name, prepared, cfg, &run, &wav);
    output::write_json(&out.join(format!("{stem}.json")), &manifest)?;
    let report = analyze(&run.rir.samples, cfg.fs, rarenet::metrics::DEFAULT_NED_WINDOW_MS)?;
    output::write_ned_csv(&output::sibling(out, &stem, "_ned.csv"), &report.ned)?;
    output::write_edc_csv(&output::sibling(out, &stem, "_edc.csv"), &report.edc)?;
    let rows = output::report_rows(&RunLabel::from_manifest(wav, &manifest), &report, &[]);
    Ok((manifest, rows))
}
