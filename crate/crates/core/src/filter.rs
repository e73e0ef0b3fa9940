//! First-order Butterworth band-pass design and zero-phase application.
//!
//! The analog prototype `H(s) = B·s / (s² + B·s + ω₀²)` is discretized with
//! the bilinear transform, prewarped at the band's geometric-mean center so
//! the digital peak sits exactly at √(low·high) Hz. One analog first order
//! realizes as a single biquad (two poles, zeros pinned at z = ±1, so DC and
//! Nyquist are blocked by construction).

use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("invalid filter spec: {0}")]
    InvalidSpec(String),
    #[error("cannot filter an empty signal")]
    EmptySignal,
}

/// Band-pass design parameters. The defaults are the scoring-channel band.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FilterSpec {
    pub low_cut_hz: f64,
    pub high_cut_hz: f64,
    pub sampling_rate_hz: f64,
}

impl FilterSpec {
    pub fn new(low_cut_hz: f64, high_cut_hz: f64, sampling_rate_hz: f64) -> FilterSpec {
        FilterSpec { low_cut_hz, high_cut_hz, sampling_rate_hz }
    }

    /// The 0.5–35 Hz EEG scoring band at the given rate.
    pub fn eeg_default(sampling_rate_hz: f64) -> FilterSpec {
        FilterSpec::new(0.5, 35.0, sampling_rate_hz)
    }

    fn validate(&self) -> Result<(), FilterError> {
        if !(self.low_cut_hz > 0.0
            && self.low_cut_hz < self.high_cut_hz
            && self.high_cut_hz < self.sampling_rate_hz / 2.0)
        {
            return Err(FilterError::InvalidSpec(format!(
                "need 0 < low ({}) < high ({}) < Nyquist ({})",
                self.low_cut_hz,
                self.high_cut_hz,
                self.sampling_rate_hz / 2.0
            )));
        }
        Ok(())
    }
}

/// One second-order section: `y[n] = b0 x[n] + b1 x[n-1] + b2 x[n-2]
/// - a1 y[n-1] - a2 y[n-2]` (a0 normalized to 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiquadCoefficients {
    pub b: [f64; 3],
    pub a: [f64; 3],
    sampling_rate_hz: f64,
    low_cut_hz: f64,
}

/// How [`apply_filter_with`] runs the biquad over the signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum FilterMode {
    /// Forward pass, reverse, forward again, reverse. Squared magnitude,
    /// zero phase; preserves waveform morphology.
    #[default]
    ZeroPhase,
    /// Single causal pass (ablation switch).
    Causal,
}


/// Design the band-pass biquad for `spec`.
pub fn design_bandpass(spec: &FilterSpec) -> Result<BiquadCoefficients, FilterError> {
    spec.validate()?;
    let fs = spec.sampling_rate_hz;
    let omega_low = 2.0 * PI * spec.low_cut_hz;
    let omega_high = 2.0 * PI * spec.high_cut_hz;
    let omega_center = (omega_low * omega_high).sqrt();
    let bandwidth = omega_high - omega_low;

    // Single-point prewarp: pick the bilinear constant so the analog center
    // frequency lands exactly on the digital center frequency.
    let center_hz = (spec.low_cut_hz * spec.high_cut_hz).sqrt();
    let k = omega_center / (PI * center_hz / fs).tan();

    let a0 = k * k + bandwidth * k + omega_center * omega_center;
    let coeffs = BiquadCoefficients {
        b: [bandwidth * k / a0, 0.0, -bandwidth * k / a0],
        a: [
            1.0,
            (2.0 * omega_center * omega_center - 2.0 * k * k) / a0,
            (k * k - bandwidth * k + omega_center * omega_center) / a0,
        ],
        sampling_rate_hz: fs,
        low_cut_hz: spec.low_cut_hz,
    };
    debug_assert!(coeffs.is_stable(), "designed filter has poles outside the unit circle");
    Ok(coeffs)
}

impl BiquadCoefficients {
    /// Both poles strictly inside the unit circle.
    pub fn is_stable(&self) -> bool {
        // Jury criterion for z^2 + a1 z + a2.
        let (a1, a2) = (self.a[1], self.a[2]);
        a2.abs() < 1.0 && (a1.abs() < 1.0 + a2)
    }

    /// Single-pass magnitude response at `freq_hz`.
    pub fn magnitude_at(&self, freq_hz: f64) -> f64 {
        let w = 2.0 * PI * freq_hz / self.sampling_rate_hz;
        let z = num_at(w, &self.b);
        let p = num_at(w, &self.a);
        (z.0 * z.0 + z.1 * z.1).sqrt() / (p.0 * p.0 + p.1 * p.1).sqrt()
    }

    /// Samples needed for the slowest pole to decay by e^-1.
    fn time_constant_samples(&self) -> f64 {
        // Poles of z^2 + a1 z + a2.
        let (a1, a2) = (self.a[1], self.a[2]);
        let disc = a1 * a1 - 4.0 * a2;
        let max_mag = if disc >= 0.0 {
            let r1 = (-a1 + disc.sqrt()) / 2.0;
            let r2 = (-a1 - disc.sqrt()) / 2.0;
            r1.abs().max(r2.abs())
        } else {
            a2.sqrt()
        };
        if max_mag >= 1.0 {
            return self.sampling_rate_hz; // unstable designs never get here
        }
        -1.0 / max_mag.ln()
    }
}

fn num_at(w: f64, c: &[f64; 3]) -> (f64, f64) {
    // c0 + c1 e^{-jw} + c2 e^{-2jw}
    let re = c[0] + c[1] * w.cos() + c[2] * (2.0 * w).cos();
    let im = -c[1] * w.sin() - c[2] * (2.0 * w).sin();
    (re, im)
}

/// One causal pass, direct form II transposed, zero initial state.
pub fn filter_once(signal: &[f64], coeffs: &BiquadCoefficients) -> Vec<f64> {
    let [b0, b1, b2] = coeffs.b;
    let [_, a1, a2] = coeffs.a;
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    signal
        .iter()
        .map(|&x| {
            let y = b0 * x + s1;
            s1 = b1 * x - a1 * y + s2;
            s2 = b2 * x - a2 * y;
            y
        })
        .collect()
}

/// Zero-phase band-pass: mirror-pad by three filter time constants, run
/// forward, reverse, forward again, reverse, then trim the padding.
pub fn apply_filter(signal: &[f64], coeffs: &BiquadCoefficients) -> Result<Vec<f64>, FilterError> {
    apply_filter_with(signal, coeffs, FilterMode::ZeroPhase)
}

pub fn apply_filter_with(
    signal: &[f64],
    coeffs: &BiquadCoefficients,
    mode: FilterMode,
) -> Result<Vec<f64>, FilterError> {
    if signal.is_empty() {
        return Err(FilterError::EmptySignal);
    }
    match mode {
        FilterMode::Causal => Ok(filter_once(signal, coeffs)),
        FilterMode::ZeroPhase => {
            let pad = ((3.0 * coeffs.time_constant_samples()).ceil() as usize)
                .min(signal.len().saturating_sub(1));
            let mut padded = Vec::with_capacity(signal.len() + 2 * pad);
            padded.extend(signal[1..=pad].iter().rev());
            padded.extend_from_slice(signal);
            padded.extend(signal[signal.len() - 1 - pad..signal.len() - 1].iter().rev());

            let mut y = filter_once(&padded, coeffs);
            y.reverse();
            let mut y = filter_once(&y, coeffs);
            y.reverse();
            Ok(y[pad..pad + signal.len()].to_vec())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eeg_coeffs(fs: f64) -> BiquadCoefficients {
        design_bandpass(&FilterSpec::eeg_default(fs)).unwrap()
    }

    #[test]
    fn dc_and_nyquist_are_blocked() {
        let c = eeg_coeffs(100.0);
        // Numerator zeros at z = 1 and z = -1: b0 + b1 + b2 == 0, b0 - b1 + b2 == 0.
        assert!((c.b[0] + c.b[1] + c.b[2]).abs() < 1e-15);
        assert!((c.b[0] - c.b[1] + c.b[2]).abs() < 1e-15);
        assert!(c.magnitude_at(0.0) < 1e-12);
        assert!(c.magnitude_at(50.0) < 1e-12);
    }

    /// The EEG band where it is realizable; a proportionally clamped band
    /// at rates whose Nyquist sits below 35 Hz.
    fn realizable_band(fs: f64) -> FilterSpec {
        FilterSpec::new(0.5, 35.0_f64.min(0.4 * fs), fs)
    }

    #[test]
    fn designed_filter_is_stable() {
        for fs in [50.0, 100.0, 256.0, 512.0] {
            let c = design_bandpass(&realizable_band(fs)).unwrap();
            assert!(c.is_stable(), "unstable at fs = {fs}");
        }
    }

    #[test]
    fn invalid_specs_err() {
        assert!(design_bandpass(&FilterSpec::new(35.0, 0.5, 100.0)).is_err());
        assert!(design_bandpass(&FilterSpec::new(0.5, 60.0, 100.0)).is_err());
        assert!(design_bandpass(&FilterSpec::new(0.0, 35.0, 100.0)).is_err());
    }

    #[test]
    fn dc_input_is_suppressed() {
        let c = eeg_coeffs(100.0);
        let signal = vec![42.0; 3000];
        let out = apply_filter(&signal, &c).unwrap();
        // Central portion, away from edge transients.
        for &v in &out[500..2500] {
            assert!(v.abs() < 42.0 * 1e-6, "residual DC {v}");
        }
    }

    #[test]
    fn zero_input_zero_output() {
        let c = eeg_coeffs(100.0);
        let out = apply_filter(&vec![0.0; 1000], &c).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_signal_errs() {
        let c = eeg_coeffs(100.0);
        assert!(matches!(apply_filter(&[], &c), Err(FilterError::EmptySignal)));
    }

    #[test]
    fn output_length_matches_input() {
        let c = eeg_coeffs(100.0);
        for n in [1, 2, 5, 100, 3001] {
            let signal: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
            assert_eq!(apply_filter(&signal, &c).unwrap().len(), n);
        }
    }

    #[test]
    fn passband_sinusoid_has_squared_gain_and_zero_phase() {
        let fs = 100.0;
        let c = eeg_coeffs(fs);
        let f = (0.5_f64 * 35.0).sqrt(); // center, where gain is ~1
        let n = 3000;
        let signal: Vec<f64> =
            (0..n).map(|i| (2.0 * PI * f * i as f64 / fs).sin()).collect();
        let out = apply_filter(&signal, &c).unwrap();

        let expected_gain = c.magnitude_at(f).powi(2);
        // Central 80%: compare pointwise against gain * input with zero lag.
        let lo = n / 10;
        let hi = n - n / 10;
        for i in lo..hi {
            let want = expected_gain * signal[i];
            assert!(
                (out[i] - want).abs() < 2e-3,
                "sample {i}: got {}, want {want}",
                out[i]
            );
        }
    }

    #[test]
    fn linearity_within_1e9_relative() {
        let fs = 100.0;
        let c = eeg_coeffs(fs);
        let n = 2000;
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.11).sin()).collect();
        let y: Vec<f64> = (0..n).map(|i| (i as f64 * 0.053).cos()).collect();
        let (alpha, beta) = (2.5, -1.25);
        let mixed: Vec<f64> =
            x.iter().zip(&y).map(|(&a, &b)| alpha * a + beta * b).collect();
        let fx = apply_filter(&x, &c).unwrap();
        let fy = apply_filter(&y, &c).unwrap();
        let fmixed = apply_filter(&mixed, &c).unwrap();
        let scale = fmixed.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        for i in 0..n {
            let want = alpha * fx[i] + beta * fy[i];
            assert!((fmixed[i] - want).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn symmetric_pulse_stays_symmetric() {
        let fs = 100.0;
        let c = eeg_coeffs(fs);
        let n = 2001; // odd length, peak dead center
        let center = (n / 2) as f64;
        let signal: Vec<f64> = (0..n)
            .map(|i| (-((i as f64 - center) / 30.0).powi(2)).exp())
            .collect();
        let out = apply_filter(&signal, &c).unwrap();
        let peak = out.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        for i in 0..n {
            let asym = (out[i] - out[n - 1 - i]).abs();
            assert!(asym < 1e-9 * peak, "asymmetry {asym} at {i}");
        }
    }

    #[test]
    fn impulse_response_decays_within_60s() {
        for fs in [50.0, 100.0, 256.0, 512.0] {
            let c = design_bandpass(&realizable_band(fs)).unwrap();
            let n = (60.0 * fs) as usize;
            let mut impulse = vec![0.0; n];
            impulse[0] = 1.0;
            let h = filter_once(&impulse, &c);
            let peak = h.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            let tail = h[n - 1].abs();
            assert!(tail < 1e-12 * peak, "fs {fs}: tail {tail}, peak {peak}");
        }
    }
}
