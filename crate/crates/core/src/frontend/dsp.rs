//! Signal-level helpers: framing, windowing, spectra, resampling.

use rustfft::{num_complex::Complex, FftPlanner};

/// Frame length in samples at 8 kHz (25 ms).
pub const FRAME_LEN: usize = 200;
/// Frame skip in samples at 8 kHz (10 ms).
pub const FRAME_SKIP: usize = 80;
/// FFT size used for the 200-sample analysis frames.
pub const FFT_SIZE: usize = 256;

/// Number of frames produced by 25 ms / 10 ms framing at 8 kHz.
pub fn num_frames(num_samples: usize) -> Option<usize> {
    if num_samples < FRAME_LEN {
        None
    } else {
        Some((num_samples - FRAME_LEN) / FRAME_SKIP + 1)
    }
}

pub fn hamming_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (len as f64 - 1.0)).cos())
        .collect()
}

/// y[n] = x[n] - coeff * x[n-1], with y[0] = x[0] * (1 - coeff).
pub fn pre_emphasis(frame: &[f64], coeff: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(frame.len());
    if frame.is_empty() {
        return out;
    }
    out.push(frame[0] * (1.0 - coeff));
    for i in 1..frame.len() {
        out.push(frame[i] - coeff * frame[i - 1]);
    }
    out
}

/// Per-frame log-energy: ln(max(sum of squares, floor)).
pub fn log_energy(frame: &[f64], floor: f64) -> f64 {
    let e: f64 = frame.iter().map(|x| x * x).sum();
    e.max(floor).ln()
}

/// Power spectrum of a windowed frame, zero-padded to `FFT_SIZE`.
/// Returns `FFT_SIZE / 2 + 1` non-negative frequency bins.
pub fn power_spectrum(frame: &[f64]) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = frame
        .iter()
        .map(|&x| Complex::new(x, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(FFT_SIZE)
        .collect();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(FFT_SIZE);
    fft.process(&mut buf);
    buf[..FFT_SIZE / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
}

/// Iterator over frame start offsets.
pub fn frame_starts(num_samples: usize) -> impl Iterator<Item = usize> {
    let t = num_frames(num_samples).unwrap_or(0);
    (0..t).map(|i| i * FRAME_SKIP)
}

/// Decimate a 16 kHz signal to 8 kHz: low-pass FIR (windowed sinc, 3.8 kHz
/// cutoff, 101 taps) followed by keeping every second sample.
pub fn decimate_16k_to_8k(samples: &[f64]) -> Vec<f64> {
    const TAPS: usize = 101;
    const CUTOFF: f64 = 3800.0 / 16000.0; // normalized to input rate
    let mid = (TAPS - 1) as f64 / 2.0;
    let window = hamming_window(TAPS);
    let h: Vec<f64> = (0..TAPS)
        .map(|n| {
            let t = n as f64 - mid;
            let sinc = if t == 0.0 {
                2.0 * CUTOFF
            } else {
                (2.0 * std::f64::consts::PI * CUTOFF * t).sin() / (std::f64::consts::PI * t)
            };
            sinc * window[n]
        })
        .collect();

    let half = TAPS / 2;
    let n = samples.len();
    let mut out = Vec::with_capacity(n / 2 + 1);
    let mut i = 0;
    while i < n {
        let mut acc = 0.0;
        for (k, &hk) in h.iter().enumerate() {
            let idx = i as isize + half as isize - k as isize;
            if idx >= 0 && (idx as usize) < n {
                acc += hk * samples[idx as usize];
            }
        }
        out.push(acc);
        i += 2;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_formula() {
        assert_eq!(num_frames(8000), Some(98));
        assert_eq!(num_frames(200), Some(1));
        assert_eq!(num_frames(199), None);
        assert_eq!(num_frames(280), Some(2));
    }

    #[test]
    fn power_spectrum_of_dc() {
        let frame = vec![1.0; FRAME_LEN];
        let spec = power_spectrum(&frame);
        assert_eq!(spec.len(), FFT_SIZE / 2 + 1);
        assert!(spec[0] > 0.0);
    }

    #[test]
    fn decimation_halves_length_and_rejects_stopband() {
        let n = 16000;
        let tone = |f: f64| -> Vec<f64> {
            (0..n)
                .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / 16000.0).sin())
                .collect()
        };
        let pass = decimate_16k_to_8k(&tone(1000.0));
        let stop = decimate_16k_to_8k(&tone(5000.0));
        assert_eq!(pass.len(), n / 2);
        let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
        assert!(rms(&stop) < 0.05 * rms(&pass), "stopband tone not attenuated");
    }
}
