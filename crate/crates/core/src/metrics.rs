//! Objective measures of an impulse response: energy decay curve, T30,
//! early decay time, normalized echo density, and the octave filterbank
//! they are evaluated in.

use std::f64::consts::{PI, SQRT_2};

use crate::scene::{BAND_CENTERS, NUM_BANDS};
use crate::Error;

/// `erfc(1/√2)`: fraction of a Gaussian lying beyond one standard deviation.
pub const GAUSSIAN_OUTLIER_FRACTION: f64 = 0.317_310_507_862_914_1;
pub const DEFAULT_NED_WINDOW_MS: f64 = 25.0;
pub const HIGHPASS_HZ: f64 = 20.0;
/// Prototype edge at which a single pass is 1.5 dB down, so the
/// forward-backward response is 3 dB down at the nominal band edges.
const BANDWIDTH_WIDENING: f64 = 0.862_8;

#[derive(Debug, Clone, PartialEq)]
pub struct DecayCurve {
    pub values: Vec<f64>,
    pub fs: f64,
}

impl DecayCurve {
    pub fn db(&self) -> Vec<f64> {
        self.values.iter().map(|v| 10.0 * v.log10()).collect()
    }
}

/// Normalized reverse cumulative energy.
pub fn edc(samples: &[f64], fs: f64) -> Result<DecayCurve, Error> {
    if samples.is_empty() {
        return Err(Error::Metric("empty impulse response".into()));
    }
    let mut values = vec![0.0; samples.len()];
    let mut acc = 0.0;
    for (i, x) in samples.iter().enumerate().rev() {
        acc += x * x;
        values[i] = acc;
    }
    let total = values[0];
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::Metric("impulse response has no energy".into()));
    }
    values.iter_mut().for_each(|v| *v /= total);
    Ok(DecayCurve { values, fs })
}

fn first_below(db: &[f64], level: f64) -> Option<usize> {
    db.iter().position(|v| *v <= level)
}

/// Reverberation time from a least-squares line through the EDC between its
/// first −5 dB and first −35 dB crossings, extrapolated to 60 dB.
pub fn t30(curve: &DecayCurve) -> Result<f64, Error> {
    let db = curve.db();
    let start = first_below(&db, -5.0).ok_or_else(|| Error::Metric("insufficient decay for T30".into()))?;
    let end = first_below(&db, -35.0).ok_or_else(|| Error::Metric("insufficient decay for T30".into()))?;
    if end <= start {
        return Err(Error::Metric("insufficient decay for T30".into()));
    }
    let n = (end - start + 1) as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for i in start..=end {
        let x = i as f64 / curve.fs;
        let y = db[i].max(-300.0);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    if !(slope < 0.0) {
        return Err(Error::Metric("EDC regression slope is not negative".into()));
    }
    Ok(60.0 / slope.abs())
}

/// Time in milliseconds at which the EDC first passes −10 dB, linearly
/// interpolated in dB between the bracketing samples.
pub fn edt(curve: &DecayCurve) -> Result<f64, Error> {
    let db = curve.db();
    let i = first_below(&db, -10.0).ok_or_else(|| Error::Metric("EDC never reaches -10 dB".into()))?;
    if i == 0 {
        return Ok(0.0);
    }
    let (a, b) = (db[i - 1], db[i]);
    let frac = if b.is_finite() { (-10.0 - a) / (b - a) } else { 0.0 };
    Ok(((i - 1) as f64 + frac) / curve.fs * 1000.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NedTrace {
    /// Window centre times, in seconds.
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl NedTrace {
    /// Value of the window whose centre is closest to `t` seconds.
    pub fn at(&self, t: f64) -> Option<f64> {
        let i = self
            .times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))?
            .0;
        Some(self.values[i])
    }
}

/// Sliding-window echo density with a 1 ms hop.
pub fn ned(samples: &[f64], fs: f64, window_ms: f64) -> Result<NedTrace, Error> {
    if window_ms < 1.0 {
        return Err(Error::Metric("NED window must be at least 1 ms".into()));
    }
    let w = (window_ms * fs / 1000.0).round() as usize;
    let hop = ((fs / 1000.0).round() as usize).max(1);
    if samples.len() < w || w == 0 {
        return Err(Error::Metric("impulse response shorter than one NED window".into()));
    }
    let mut times = Vec::new();
    let mut values = Vec::new();
    let mut start = 0;
    while start + w <= samples.len() {
        let seg = &samples[start..start + w];
        let mean = seg.iter().sum::<f64>() / w as f64;
        let var = seg.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / w as f64;
        let std = var.sqrt();
        let outliers = seg.iter().filter(|x| (*x - mean).abs() > std).count();
        times.push((start as f64 + w as f64 / 2.0) / fs);
        values.push(outliers as f64 / w as f64 / GAUSSIAN_OUTLIER_FRACTION);
        start += hop;
    }
    Ok(NedTrace { times, values })
}

// ---------------------------------------------------------------------------
// Filters

/// Normalized second-order section `b0 + b1 z⁻¹ + b2 z⁻²` over
/// `1 + a1 z⁻¹ + a2 z⁻²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    /// Bilinear transform of `(n2 s² + n1 s + n0) / (s² + d1 s + d0)`.
    fn bilinear(n: [f64; 3], d: [f64; 2], fs: f64) -> Self {
        let k = 2.0 * fs;
        let k2 = k * k;
        let [n2, n1, n0] = n;
        let [d1, d0] = d;
        let a0 = k2 + d1 * k + d0;
        Self {
            b: [
                (n2 * k2 + n1 * k + n0) / a0,
                (2.0 * n0 - 2.0 * n2 * k2) / a0,
                (n2 * k2 - n1 * k + n0) / a0,
            ],
            a: [(2.0 * d0 - 2.0 * k2) / a0, (k2 - d1 * k + d0) / a0],
        }
    }

    fn run(&self, x: &mut [f64]) {
        let (mut z1, mut z2) = (0.0, 0.0);
        for v in x.iter_mut() {
            let input = *v;
            let y = self.b[0] * input + z1;
            z1 = self.b[1] * input - self.a[0] * y + z2;
            z2 = self.b[2] * input - self.a[1] * y;
            *v = y;
        }
    }

    /// Magnitude response at `f` Hz.
    pub fn magnitude(&self, f: f64, fs: f64) -> f64 {
        let w = 2.0 * PI * f / fs;
        let z = |c: [f64; 3]| {
            let re = c[0] + c[1] * w.cos() + c[2] * (2.0 * w).cos();
            let im = -(c[1] * w.sin() + c[2] * (2.0 * w).sin());
            (re * re + im * im).sqrt()
        };
        z(self.b) / z([1.0, self.a[0], self.a[1]])
    }
}

fn prewarp(f: f64, fs: f64) -> f64 {
    2.0 * fs * (PI * f / fs).tan()
}

/// Sixth-order Butterworth-style band-pass around `center`, as three
/// sections. The bandwidth is widened so the forward-backward response is
/// 3 dB down at the octave edges.
pub fn octave_band(center: f64, fs: f64) -> [Biquad; 3] {
    let w1 = prewarp(center / SQRT_2, fs);
    let w2 = prewarp((center * SQRT_2).min(0.499 * fs), fs);
    let w0 = (w1 * w2).sqrt();
    let bw = (w2 - w1) / BANDWIDTH_WIDENING;
    // Third-order low-pass prototype poles: -1 and -1/2 ± i√3/2.
    let mut sections = Vec::with_capacity(3);
    // Real prototype pole: one section with both band-pass poles.
    sections.push(Biquad::bilinear([0.0, bw, 0.0], [bw, w0 * w0], fs));
    // Complex pair: each band-pass root of s² − p·bw·s + w0² pairs with its
    // conjugate from the conjugate prototype pole.
    let (pr, pi) = (-0.5, 3f64.sqrt() / 2.0);
    for sign in [1.0, -1.0] {
        let (re, im) = bandpass_root(pr * bw, pi * bw, w0, sign);
        sections.push(Biquad::bilinear([0.0, bw, 0.0], [-2.0 * re, re * re + im * im], fs));
    }
    [sections[0], sections[1], sections[2]]
}

/// Root `(q ± √(q² − 4 w0²)) / 2` for complex `q = qr + i·qi`.
fn bandpass_root(qr: f64, qi: f64, w0: f64, sign: f64) -> (f64, f64) {
    let dr = qr * qr - qi * qi - 4.0 * w0 * w0;
    let di = 2.0 * qr * qi;
    let modulus = (dr * dr + di * di).sqrt();
    let sr = ((modulus + dr) / 2.0).sqrt();
    let si = ((modulus - dr) / 2.0).sqrt().copysign(di);
    ((qr + sign * sr) / 2.0, (qi + sign * si) / 2.0)
}

/// Second-order Butterworth high-pass.
pub fn highpass(cutoff: f64, fs: f64) -> Biquad {
    let wc = prewarp(cutoff, fs);
    Biquad::bilinear([1.0, 0.0, 0.0], [SQRT_2 * wc, wc * wc], fs)
}

/// Runs the sections forward, then backward over the result.
pub fn filtfilt(sections: &[Biquad], x: &[f64]) -> Vec<f64> {
    let mut y = x.to_vec();
    for s in sections {
        s.run(&mut y);
    }
    y.reverse();
    for s in sections {
        s.run(&mut y);
    }
    y.reverse();
    y
}

pub fn highpass_20hz(samples: &[f64], fs: f64) -> Vec<f64> {
    filtfilt(&[highpass(HIGHPASS_HZ, fs)], samples)
}

/// Zero-phase octave bands centred at 125 Hz to 16 kHz.
pub fn octave_filterbank(samples: &[f64], fs: f64) -> Result<Vec<Vec<f64>>, Error> {
    if fs < 32000.0 {
        return Err(Error::Metric(format!("sample rate {fs} Hz is too low for the 16 kHz band")));
    }
    Ok(BAND_CENTERS.iter().map(|c| filtfilt(&octave_band(*c, fs), samples)).collect())
}

// ---------------------------------------------------------------------------
// Report

#[derive(Debug, Clone, PartialEq)]
pub struct BandMetrics {
    /// Band centre in Hz, `None` for broadband.
    pub center: Option<f64>,
    pub t30: Option<f64>,
    pub edt_ms: Option<f64>,
}

impl BandMetrics {
    pub fn label(&self) -> String {
        match self.center {
            Some(c) => format!("{c}"),
            None => "broadband".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub bands: Vec<BandMetrics>,
    pub broadband: BandMetrics,
    pub ned: NedTrace,
    pub edc: DecayCurve,
}

fn band_metrics(center: Option<f64>, samples: &[f64], fs: f64) -> BandMetrics {
    match edc(samples, fs) {
        Ok(curve) => BandMetrics { center, t30: t30(&curve).ok(), edt_ms: edt(&curve).ok() },
        Err(_) => BandMetrics { center, t30: None, edt_ms: None },
    }
}

/// High-passes at 20 Hz, then evaluates broadband and per-band decay
/// measures and the broadband echo density.
pub fn analyze(samples: &[f64], fs: f64, ned_window_ms: f64) -> Result<MetricsReport, Error> {
    let filtered = highpass_20hz(samples, fs);
    let curve = edc(&filtered, fs)?;
    let broadband = BandMetrics { center: None, t30: t30(&curve).ok(), edt_ms: edt(&curve).ok() };
    let bands = octave_filterbank(&filtered, fs)?
        .iter()
        .zip(BAND_CENTERS)
        .map(|(x, c)| band_metrics(Some(c), x, fs))
        .collect();
    let ned = ned(&filtered, fs, ned_window_ms)?;
    Ok(MetricsReport { bands, broadband, ned, edc: curve })
}

impl MetricsReport {
    /// `(band, metric, value)` rows; T30 in seconds, EDT in milliseconds.
    /// Missing values are omitted.
    pub fn rows(&self) -> Vec<(String, &'static str, f64)> {
        let mut rows = Vec::with_capacity(2 * (NUM_BANDS + 1));
        for b in self.bands.iter().chain(std::iter::once(&self.broadband)) {
            if let Some(v) = b.t30 {
                rows.push((b.label(), "t30_s", v));
            }
            if let Some(v) = b.edt_ms {
                rows.push((b.label(), "edt_ms", v));
            }
        }
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
        rng.sample(StandardNormal)
    }

    fn decaying_noise(t60: f64, fs: f64, seconds: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = (seconds * fs) as usize;
        // Amplitude envelope exp(-t·3 ln10 / T60) gives 60 dB energy decay in T60.
        let k = 3.0 * 10f64.ln() / t60;
        (0..n).map(|i| gaussian(&mut rng) * (-k * i as f64 / fs).exp()).collect()
    }

    #[test]
    fn edc_examples() {
        let c = edc(&[1.0, 0.0, 0.0], 1.0).unwrap();
        assert_eq!(c.values, vec![1.0, 0.0, 0.0]);
        let mut x = vec![0.0; 12];
        x[0] = 1.0;
        x[10] = 1.0;
        let c = edc(&x, 1.0).unwrap();
        assert_eq!(c.values[0], 1.0);
        assert!(c.values[1..=10].iter().all(|v| *v == 0.5));
        assert_eq!(c.values[11], 0.0);
        assert!(edc(&[0.0; 4], 1.0).is_err());
    }

    #[test]
    fn t30_and_edt_of_exponential_decay() {
        let fs = 48000.0;
        let x = decaying_noise(0.6, fs, 1.5, 1);
        let c = edc(&x, fs).unwrap();
        let t = t30(&c).unwrap();
        assert!((t - 0.6).abs() < 0.006, "{t}");
        let e = edt(&c).unwrap();
        assert!((e - 100.0).abs() < 5.0, "{e}");
        let doubled = decaying_noise(1.2, fs, 3.0, 1);
        let t2 = t30(&edc(&doubled, fs).unwrap()).unwrap();
        assert!((t2 / t - 2.0).abs() < 0.04);
    }

    #[test]
    fn truncated_decay_is_an_error() {
        let fs = 1000.0;
        let x: Vec<f64> = (0..100).map(|i| 10f64.powf(-(i as f64) * 0.2 / 20.0 / 2.0)).collect();
        let c = edc(&x, fs).unwrap();
        assert!(c.db().last().unwrap() > &-35.0 || t30(&c).is_err());
        let short = edc(&[1.0, 0.9, 0.8, 0.7], fs).unwrap();
        assert!(t30(&short).is_err());
    }

    #[test]
    fn edt_of_impulse_is_zero() {
        let c = edc(&[1.0, 0.0, 0.0, 0.0], 48000.0).unwrap();
        assert_eq!(edt(&c).unwrap(), 0.0);
    }

    #[test]
    fn ned_of_noise_and_impulse() {
        let fs = 48000.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise: Vec<f64> = (0..fs as usize).map(|_| gaussian(&mut rng)).collect();
        let trace = ned(&noise, fs, 25.0).unwrap();
        assert!(trace.values.iter().all(|v| (v - 1.0).abs() < 0.1));
        let scaled: Vec<f64> = noise.iter().map(|x| 7.5 * x).collect();
        assert_eq!(ned(&scaled, fs, 25.0).unwrap().values.len(), trace.values.len());
        let mut imp = vec![0.0; 2400];
        imp[600] = 1.0;
        let t = ned(&imp, fs, 25.0).unwrap();
        assert!(t.values[0] < 0.01);
        assert!(ned(&imp[..100], fs, 25.0).is_err());
    }

    #[test]
    fn sine_burst_stays_in_its_band() {
        let fs = 48000.0;
        let x: Vec<f64> = (0..9600)
            .map(|i| {
                let t = i as f64 / fs;
                let w = (PI * i as f64 / 9600.0).sin().powi(2);
                w * (2.0 * PI * 1000.0 * t).sin()
            })
            .collect();
        let bands = octave_filterbank(&x, fs).unwrap();
        let e: Vec<f64> = bands.iter().map(|b| b.iter().map(|v| v * v).sum()).collect();
        let db = |a: f64, b: f64| 10.0 * (a / b).log10();
        assert!(db(e[3], e[2]) >= 20.0, "{}", db(e[3], e[2]));
        assert!(db(e[3], e[4]) >= 20.0, "{}", db(e[3], e[4]));
    }

    #[test]
    fn white_noise_band_energies() {
        let fs = 48000.0;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..4 * fs as usize).map(|_| gaussian(&mut rng)).collect();
        let total: f64 = x.iter().map(|v| v * v).sum();
        let bands = octave_filterbank(&x, fs).unwrap();
        let e: Vec<f64> = bands.iter().map(|b| b.iter().map(|v| v * v).sum()).collect();
        let sum: f64 = e.iter().sum();
        assert!(sum / total >= 0.9, "{}", sum / total);
        // Bands below 8 kHz: energy per Hz of nominal bandwidth agrees.
        let per_hz: Vec<f64> = (0..6).map(|b| e[b] / (BAND_CENTERS[b] / SQRT_2)).collect();
        for v in &per_hz {
            assert!((v / per_hz[3] - 1.0).abs() < 0.2, "{per_hz:?}");
        }
    }

    #[test]
    fn dc_is_removed() {
        let fs = 48000.0;
        let x = vec![1.0; 48000];
        let hp = highpass_20hz(&x, fs);
        let mid = &hp[12000..36000];
        assert!(mid.iter().all(|v| v.abs() < 1e-3));
        for band in octave_filterbank(&hp, fs).unwrap() {
            assert!(band[12000..36000].iter().all(|v| v.abs() < 1e-3));
        }
    }

    #[test]
    fn scaling_does_not_change_metrics() {
        let fs = 48000.0;
        let x = decaying_noise(0.3, fs, 1.0, 5);
        let y: Vec<f64> = x.iter().map(|v| 0.01 * v).collect();
        let (a, b) = (edc(&x, fs).unwrap(), edc(&y, fs).unwrap());
        assert!((t30(&a).unwrap() - t30(&b).unwrap()).abs() < 1e-9);
        assert!((edt(&a).unwrap() - edt(&b).unwrap()).abs() < 1e-9);
    }
}
