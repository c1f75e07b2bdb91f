//! Atmospheric absorption (ISO 9613-1 pure-tone formula) and its use as
//! per-band gains or a short linear-phase FIR.

use nalgebra::{DMatrix, DVector};

use crate::scene::{BAND_CENTERS, NUM_BANDS, REFERENCE_BAND};

/// Length of the linear-phase absorption FIR. Odd, so the group delay is a
/// whole number of samples.
pub const FIR_TAPS: usize = 9;
pub const FIR_GROUP_DELAY: usize = FIR_TAPS / 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AirAbsorption {
    pub temperature_c: f64,
    pub relative_humidity: f64,
    pub pressure_kpa: f64,
}

impl Default for AirAbsorption {
    fn default() -> Self {
        Self { temperature_c: 20.0, relative_humidity: 50.0, pressure_kpa: 101.325 }
    }
}

impl AirAbsorption {
    /// Attenuation coefficient in dB/m at frequency `f` (Hz).
    pub fn coefficient(&self, f: f64) -> f64 {
        const PR: f64 = 101.325;
        const T0: f64 = 293.15;
        const T01: f64 = 273.16;
        let t = self.temperature_c + 273.15;
        let pa = self.pressure_kpa;
        let c = -6.8346 * (T01 / t).powf(1.261) + 4.6151;
        let psat_rel = 10f64.powf(c);
        let h = self.relative_humidity * psat_rel / (pa / PR);
        let fr_o = (pa / PR) * (24.0 + 4.04e4 * h * (0.02 + h) / (0.391 + h));
        let fr_n = (pa / PR)
            * (t / T0).powf(-0.5)
            * (9.0 + 280.0 * h * (-4.170 * ((t / T0).powf(-1.0 / 3.0) - 1.0)).exp());
        let f2 = f * f;
        8.686
            * f2
            * (1.84e-11 * (PR / pa) * (t / T0).sqrt()
                + (t / T0).powf(-2.5)
                    * (0.01275 * (-2239.1 / t).exp() / (fr_o + f2 / fr_o)
                        + 0.1068 * (-3352.0 / t).exp() / (fr_n + f2 / fr_n)))
    }

    pub fn band_coefficients(&self) -> [f64; NUM_BANDS] {
        BAND_CENTERS.map(|f| self.coefficient(f))
    }

    /// Pressure-amplitude gain per band after `distance` metres.
    pub fn band_gains(&self, distance: f64) -> [f64; NUM_BANDS] {
        self.band_coefficients().map(|a| 10f64.powf(-a * distance / 20.0))
    }

    /// Pressure-amplitude gain at the 1 kHz band.
    pub fn broadband_gain(&self, distance: f64) -> f64 {
        10f64.powf(-self.coefficient(BAND_CENTERS[REFERENCE_BAND]) * distance / 20.0)
    }
}

/// Least-squares fit of a symmetric [`FIR_TAPS`]-tap filter to per-band
/// magnitudes. Band targets are interpolated linearly in dB over log
/// frequency and held flat outside the band range.
pub fn fit_linear_phase(band_magnitudes: &[f64; NUM_BANDS], fs: f64) -> Vec<f64> {
    if band_magnitudes.iter().all(|m| (m - band_magnitudes[0]).abs() < 1e-15) {
        let mut taps = vec![0.0; FIR_TAPS];
        taps[FIR_GROUP_DELAY] = band_magnitudes[0];
        return taps;
    }
    let half = FIR_GROUP_DELAY;
    let n_grid = 256;
    let f_lo = 20f64.ln();
    let f_hi = (0.49 * fs).ln();
    let mut design = DMatrix::zeros(n_grid, half + 1);
    let mut target = DVector::zeros(n_grid);
    for g in 0..n_grid {
        let f = (f_lo + (f_hi - f_lo) * g as f64 / (n_grid - 1) as f64).exp();
        let w = 2.0 * std::f64::consts::PI * f / fs;
        design[(g, 0)] = 1.0;
        for m in 1..=half {
            design[(g, m)] = 2.0 * (m as f64 * w).cos();
        }
        target[g] = interpolate_band_db(band_magnitudes, f);
    }
    let normal = design.transpose() * &design;
    let rhs = design.transpose() * target;
    let coeffs = normal
        .lu()
        .solve(&rhs)
        .expect("cosine basis on a dense grid is well conditioned");
    let mut taps = vec![0.0; FIR_TAPS];
    taps[half] = coeffs[0];
    for m in 1..=half {
        taps[half + m] = coeffs[m];
        taps[half - m] = coeffs[m];
    }
    taps
}

fn interpolate_band_db(mags: &[f64; NUM_BANDS], f: f64) -> f64 {
    let db: Vec<f64> = mags.iter().map(|m| 20.0 * m.max(1e-12).log10()).collect();
    let lf = f.log2();
    let centers: Vec<f64> = BAND_CENTERS.iter().map(|c| c.log2()).collect();
    let value = if lf <= centers[0] {
        db[0]
    } else if lf >= centers[NUM_BANDS - 1] {
        db[NUM_BANDS - 1]
    } else {
        let k = centers.iter().rposition(|c| *c <= lf).unwrap();
        let t = (lf - centers[k]) / (centers[k + 1] - centers[k]);
        db[k] + t * (db[k + 1] - db[k])
    };
    10f64.powf(value / 20.0)
}

/// Magnitude response of an FIR at frequency `f`.
pub fn fir_magnitude(taps: &[f64], f: f64, fs: f64) -> f64 {
    let w = 2.0 * std::f64::consts::PI * f / fs;
    let (mut re, mut im) = (0.0, 0.0);
    for (k, h) in taps.iter().enumerate() {
        re += h * (w * k as f64).cos();
        im -= h * (w * k as f64).sin();
    }
    (re * re + im * im).sqrt()
}
