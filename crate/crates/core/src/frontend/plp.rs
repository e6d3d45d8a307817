//! PLP extraction: Bark-scale critical-band analysis, equal-loudness
//! pre-emphasis, cube-root compression, all-pole modelling, cepstra.

use ndarray::Array2;

use super::dsp;
use super::{AudioSignal, FeatureKind, FeatureMatrix, FrontendConfig};
use crate::error::Result;

fn hz_to_bark(hz: f64) -> f64 {
    let x = hz / 600.0;
    6.0 * (x + (x * x + 1.0).sqrt()).ln()
}

fn bark_to_hz(bark: f64) -> f64 {
    600.0 * (bark / 6.0).sinh()
}

/// Critical-band masking curve centred at zero, evaluated at a bark offset.
fn critical_band_weight(d: f64) -> f64 {
    if d < -1.3 || d > 2.5 {
        0.0
    } else if d <= -0.5 {
        10f64.powf(2.5 * (d + 0.5))
    } else if d <= 0.5 {
        1.0
    } else {
        10f64.powf(-1.0 * (d - 0.5))
    }
}

/// Equal-loudness weighting (40 dB curve approximation).
fn equal_loudness(hz: f64) -> f64 {
    let f2 = hz * hz;
    let num = (f2 + 56.8e6) * f2 * f2;
    let den = (f2 + 6.3e6).powi(2) * (f2 + 0.38e9);
    num / den
}

/// Bark filterbank with equal-loudness weights baked in, `bands x bins`.
pub(super) fn bark_filterbank(num_bands: usize, sample_rate: f64) -> Vec<Vec<f64>> {
    let n_bins = dsp::FFT_SIZE / 2 + 1;
    let nyquist_bark = hz_to_bark(sample_rate / 2.0);
    let mut bank = Vec::with_capacity(num_bands);
    for b in 1..=num_bands {
        let center_bark = nyquist_bark * b as f64 / (num_bands + 1) as f64;
        let loudness = equal_loudness(bark_to_hz(center_bark));
        let filt: Vec<f64> = (0..n_bins)
            .map(|k| {
                let hz = k as f64 * sample_rate / dsp::FFT_SIZE as f64;
                loudness * critical_band_weight(hz_to_bark(hz) - center_bark)
            })
            .collect();
        bank.push(filt);
    }
    bank
}

/// Autocorrelation of the symmetric auditory spectrum by inverse cosine
/// transform. `spectrum` holds band values 1..=B; edges are replicated.
fn auditory_autocorrelation(spectrum: &[f64], num_lags: usize) -> Vec<f64> {
    let b = spectrum.len();
    let m = b + 1;
    (0..num_lags)
        .map(|lag| {
            let edge = spectrum[0] + if lag % 2 == 0 { spectrum[b - 1] } else { -spectrum[b - 1] };
            let inner: f64 = spectrum
                .iter()
                .enumerate()
                .map(|(k, &s)| {
                    2.0 * s * (std::f64::consts::PI * lag as f64 * (k + 1) as f64 / m as f64).cos()
                })
                .sum();
            (edge + inner) / (2.0 * m as f64)
        })
        .collect()
}

/// Levinson-Durbin recursion. Returns prediction coefficients a[1..=order]
/// (x̂_t = Σ a_k x_{t-k}) or None when the autocorrelation is degenerate.
fn levinson_durbin(r: &[f64], order: usize) -> Option<Vec<f64>> {
    if r[0] <= 0.0 {
        return None;
    }
    let mut a = vec![0.0; order + 1];
    let mut err = r[0];
    for i in 1..=order {
        let mut acc = r[i];
        for j in 1..i {
            acc -= a[j] * r[i - j];
        }
        let k = acc / err;
        let mut new_a = a.clone();
        new_a[i] = k;
        for j in 1..i {
            new_a[j] = a[j] - k * a[i - j];
        }
        a = new_a;
        err *= 1.0 - k * k;
        if err <= 0.0 {
            return None;
        }
    }
    Some(a)
}

/// Cepstra of the all-pole model, c_1..=c_n (model gain term excluded).
fn lpc_to_cepstra(a: &[f64], order: usize, num_ceps: usize) -> Vec<f64> {
    let mut c = vec![0.0; num_ceps + 1];
    for n in 1..=num_ceps {
        let mut acc = if n <= order { a[n] } else { 0.0 };
        let lo = n.saturating_sub(order).max(1);
        for k in lo..n {
            acc += (k as f64 / n as f64) * c[k] * a[n - k];
        }
        c[n] = acc;
    }
    c[1..].to_vec()
}

pub fn compute_plp(signal: &AudioSignal, config: &FrontendConfig) -> Result<FeatureMatrix> {
    let samples = signal.at_8khz();
    let t = super::check_length(samples.len())?;
    let dim = config.base_dim();

    let window = dsp::hamming_window(dsp::FRAME_LEN);
    let bank = bark_filterbank(config.bark_filters, 8000.0);

    let mut data = Array2::zeros((t, dim));
    for (row, start) in dsp::frame_starts(samples.len()).enumerate() {
        let frame = &samples[start..start + dsp::FRAME_LEN];
        data[[row, 0]] = dsp::log_energy(frame, config.energy_floor);

        let windowed: Vec<f64> = frame.iter().zip(&window).map(|(x, w)| x * w).collect();
        let spec = dsp::power_spectrum(&windowed);

        let compressed: Vec<f64> = bank
            .iter()
            .map(|filt| {
                let e: f64 = filt.iter().zip(&spec).map(|(w, p)| w * p).sum();
                e.max(config.energy_floor).powf(1.0 / 3.0)
            })
            .collect();

        let r = auditory_autocorrelation(&compressed, config.lpc_order + 1);
        // Degenerate (silent) frames keep all-zero cepstra.
        if let Some(a) = levinson_durbin(&r, config.lpc_order) {
            let ceps = lpc_to_cepstra(&a, config.lpc_order, config.num_ceps);
            for (j, &c) in ceps.iter().enumerate() {
                data[[row, j + 1]] = c;
            }
        }
    }

    Ok(FeatureMatrix {
        data,
        energy_index: 0,
        frame_period: 0.010,
        kind: FeatureKind::Plp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bark_scale_monotone() {
        let mut prev = -1.0;
        for i in 0..40 {
            let b = hz_to_bark(i as f64 * 100.0);
            assert!(b > prev);
            prev = b;
        }
    }

    #[test]
    fn bark_roundtrip() {
        for &hz in &[50.0, 300.0, 1000.0, 3500.0] {
            assert!((bark_to_hz(hz_to_bark(hz)) - hz).abs() < 1e-6);
        }
    }

    #[test]
    fn levinson_recovers_ar1() {
        // AR(1) process autocorrelation r_k = rho^k has a_1 = rho.
        let rho: f64 = 0.7;
        let r: Vec<f64> = (0..4).map(|k| rho.powi(k)).collect();
        let a = levinson_durbin(&r, 2).unwrap();
        assert!((a[1] - rho).abs() < 1e-12);
        assert!(a[2].abs() < 1e-12);
    }

    #[test]
    fn levinson_rejects_zero_energy() {
        assert!(levinson_durbin(&[0.0, 0.0, 0.0], 2).is_none());
    }

    #[test]
    fn cepstra_of_first_order_model() {
        // For a pure AR(1) model, c_n = a^n / n.
        let a = vec![0.0, 0.5];
        let c = lpc_to_cepstra(&a, 1, 4);
        for (i, &cn) in c.iter().enumerate() {
            let n = i + 1;
            let expect = 0.5f64.powi(n as i32) / n as f64;
            assert!((cn - expect).abs() < 1e-12, "c_{n}: {cn} vs {expect}");
        }
    }
}
