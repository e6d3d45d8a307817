//! MFCC extraction: mel filterbank energies followed by a DCT.

use ndarray::Array2;

use super::dsp;
use super::{AudioSignal, FeatureKind, FeatureMatrix, FrontendConfig};
use crate::error::Result;

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

/// Triangular mel filterbank as a `filters x bins` weight matrix.
///
/// Filter edges are equally spaced on the mel scale between `low_hz` and
/// `high_hz`; weights are evaluated at bin center frequencies.
pub(super) fn mel_filterbank(
    num_filters: usize,
    low_hz: f64,
    high_hz: f64,
    sample_rate: f64,
) -> Vec<Vec<f64>> {
    let n_bins = dsp::FFT_SIZE / 2 + 1;
    let mel_lo = hz_to_mel(low_hz);
    let mel_hi = hz_to_mel(high_hz);
    let centers: Vec<f64> = (0..num_filters + 2)
        .map(|i| mel_lo + (mel_hi - mel_lo) * i as f64 / (num_filters + 1) as f64)
        .collect();

    let mut bank = Vec::with_capacity(num_filters);
    for m in 1..=num_filters {
        let (left, center, right) = (centers[m - 1], centers[m], centers[m + 1]);
        let filt: Vec<f64> = (0..n_bins)
            .map(|k| {
                let hz = k as f64 * sample_rate / dsp::FFT_SIZE as f64;
                let mel = hz_to_mel(hz);
                let up = (mel - left) / (center - left);
                let down = (right - mel) / (right - center);
                up.min(down).max(0.0)
            })
            .collect();
        bank.push(filt);
    }
    bank
}

/// DCT-II of the log filterbank energies, coefficients 1..=num_ceps.
/// Coefficient 0 is omitted; the log-energy channel takes its place.
fn dct_cepstra(log_energies: &[f64], num_ceps: usize) -> Vec<f64> {
    let m = log_energies.len() as f64;
    let scale = (2.0 / m).sqrt();
    (1..=num_ceps)
        .map(|k| {
            let s: f64 = log_energies
                .iter()
                .enumerate()
                .map(|(j, &e)| e * (std::f64::consts::PI * k as f64 * (j as f64 + 0.5) / m).cos())
                .sum();
            scale * s
        })
        .collect()
}

pub fn compute_mfcc(signal: &AudioSignal, config: &FrontendConfig) -> Result<FeatureMatrix> {
    let samples = signal.at_8khz();
    let t = super::check_length(samples.len())?;
    let dim = config.base_dim();

    let window = dsp::hamming_window(dsp::FRAME_LEN);
    let bank = mel_filterbank(config.mel_filters, config.mel_low_hz, config.mel_high_hz, 8000.0);

    let mut data = Array2::zeros((t, dim));
    for (row, start) in dsp::frame_starts(samples.len()).enumerate() {
        let frame = &samples[start..start + dsp::FRAME_LEN];
        data[[row, 0]] = dsp::log_energy(frame, config.energy_floor);

        let emphasized = dsp::pre_emphasis(frame, config.pre_emphasis);
        let windowed: Vec<f64> = emphasized.iter().zip(&window).map(|(x, w)| x * w).collect();
        let spec = dsp::power_spectrum(&windowed);

        let log_mel: Vec<f64> = bank
            .iter()
            .map(|filt| {
                let e: f64 = filt.iter().zip(&spec).map(|(w, p)| w * p).sum();
                e.max(config.energy_floor).ln()
            })
            .collect();
        let ceps = dct_cepstra(&log_mel, config.num_ceps);
        for (j, &c) in ceps.iter().enumerate() {
            data[[row, j + 1]] = c;
        }
    }

    Ok(FeatureMatrix {
        data,
        energy_index: 0,
        frame_period: 0.010,
        kind: FeatureKind::Mfcc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filterbank_rows_cover_band() {
        let bank = mel_filterbank(23, 20.0, 3800.0, 8000.0);
        assert_eq!(bank.len(), 23);
        for filt in &bank {
            assert!(filt.iter().any(|&w| w > 0.0), "empty mel filter");
            assert!(filt.iter().all(|&w| (0.0..=1.0).contains(&w)));
        }
    }

    #[test]
    fn dct_of_constant_is_zero() {
        let ceps = dct_cepstra(&[3.0; 23], 19);
        assert!(ceps.iter().all(|c| c.abs() < 1e-12));
    }
}
