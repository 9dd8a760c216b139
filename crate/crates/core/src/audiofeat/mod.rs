//! Audio ingestion: WAV loading, STFT, 80-bin log-mel, F0 / voicing, and
//! the low-band slice used by the pitch-consistency loss.
//!
//! Framing is 1024-sample periodic Hann windows with hop 256 and no center
//! padding, so `T = 1 + (len - 1024) / 256`. Mel bands follow the Slaney
//! scale with area normalization over 0 Hz to Nyquist; log values are
//! floored at `ln(1e-5)`.

mod features;
mod pitch;
mod spectral;
mod wav;

pub use features::FeatureMatrix;
pub use pitch::{estimate_f0_vuv, estimate_f0_vuv_with, PitchConfig, PitchTrack, VuvFlags};
pub use spectral::{
    hann_window, low_band, mel_spectrogram, mel_spectrogram_with, stft_magnitude, MelConfig, MelFilterbank,
    MelSpectrogram, Stft, LOW_BAND_BINS,
};
pub use wav::{load_wav, save_wav, Waveform};

/// Everything `featurize` writes for one utterance.
#[derive(Clone, Debug)]
pub struct UtteranceFeatures {
    pub mel: MelSpectrogram,
    pub pitch: PitchTrack,
    pub vuv: VuvFlags,
    pub low_band: FeatureMatrix,
}

pub fn extract_all(w: &Waveform) -> crate::Result<UtteranceFeatures> {
    let mel = mel_spectrogram(w)?;
    let (pitch, vuv) = estimate_f0_vuv(w)?;
    let low_band = low_band(&mel)?;
    Ok(UtteranceFeatures {
        mel,
        pitch,
        vuv,
        low_band,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    const SR: u32 = 22050;

    fn sine(freq: f64, amp: f64, len: usize) -> Waveform {
        let s = (0..len)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / SR as f64).sin())
            .collect();
        Waveform::new(s, SR)
    }

    fn noise(rms: f64, len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Uniform on [-a, a] has RMS a/sqrt(3).
        let a = rms * 3f64.sqrt();
        Waveform::new((0..len).map(|_| rng.gen_range(-a..a)).collect(), SR)
    }

    #[test]
    fn zero_signal_spectra() {
        let w = Waveform::new(vec![0.0; 4096], SR);
        let s = stft_magnitude(&w).unwrap();
        assert_eq!((s.rows(), s.cols()), (13, 513));
        assert!(s.data().iter().all(|&v| v == 0.0));
        let m = mel_spectrogram(&w).unwrap();
        let floor = (1e-5f64).ln() as f32;
        assert!(m.frames.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn too_short_is_an_error() {
        let w = Waveform::new(vec![0.0; 1023], SR);
        assert!(matches!(stft_magnitude(&w), Err(crate::Error::TooShort { needed: 1024, got: 1023 })));
        assert!(mel_spectrogram(&w).is_err());
    }

    #[test]
    fn bin_centered_tone_peaks_at_bin_20() {
        let f = 20.0 * SR as f64 / 1024.0;
        let s = stft_magnitude(&sine(f, 0.5, 8192)).unwrap();
        for row in s.iter_rows() {
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax, 20);
        }
    }

    fn direct_dft_magnitude(x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..=n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, &v) in x.iter().enumerate() {
                    let ang = -2.0 * PI * (k * t) as f64 / n as f64;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect()
    }

    #[test]
    fn matches_direct_dft_and_parseval() {
        let w = noise(0.2, 1024, 3);
        let hann = hann_window(1024);
        let windowed: Vec<f64> = w.samples.iter().zip(&hann).map(|(a, b)| a * b).collect();
        let oracle = direct_dft_magnitude(&windowed);
        let fast = Stft::new(MelConfig::default()).frame_magnitude(&w.samples, 0);
        for (a, b) in fast.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
        let energy: f64 = fast.iter().map(|m| m * m).sum();
        let time: f64 = windowed.iter().map(|v| v * v).sum();
        let rel = (energy - 512.0 * time).abs() / (512.0 * time);
        assert!(rel < 1e-2, "parseval relative error {rel}");
    }

    #[test]
    fn white_noise_fills_every_mel_band() {
        let m = mel_spectrogram(&noise(0.3, 1024, 9)).unwrap();
        let floor = (1e-5f64).ln() as f32;
        assert_eq!(m.num_bins(), 80);
        assert!(m.frames.row(0).iter().all(|&v| v > floor));
    }

    #[test]
    fn tone_maps_to_filter_nearest_its_frequency() {
        let fb = MelFilterbank::new(SR, &MelConfig::default());
        let f = 1000.0;
        let m = mel_spectrogram(&sine(f, 0.5, 8192)).unwrap();
        let argmaxes: Vec<usize> = m
            .frames
            .iter_rows()
            .map(|r| r.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0)
            .collect();
        assert!(argmaxes.iter().all(|&a| a == argmaxes[0]));
        let centers = fb.center_frequencies();
        let nearest = centers
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - f).abs().total_cmp(&(b.1 - f).abs()))
            .unwrap()
            .0;
        assert!(argmaxes[0].abs_diff(nearest) <= 1, "{} vs {nearest}", argmaxes[0]);
    }

    #[test]
    fn filterbank_centers_increase_to_nyquist() {
        let fb = MelFilterbank::new(SR, &MelConfig::default());
        let c = fb.center_frequencies();
        assert_eq!(c.len(), 80);
        assert!(c.windows(2).all(|p| p[0] < p[1]));
        assert!(c[79] < SR as f64 / 2.0);
        // Below 1 kHz the Slaney scale is linear.
        assert!((c[1] - 2.0 * c[0]).abs() < 1e-9);
    }

    #[test]
    fn low_band_is_a_prefix_slice() {
        let row: Vec<f32> = (0..80).map(|i| i as f32).collect();
        let m = MelSpectrogram {
            frames: FeatureMatrix::from_rows(&[row.clone(), row]).unwrap(),
            sample_rate: SR,
            hop: 256,
            win: 1024,
            n_fft: 1024,
        };
        let lb = low_band(&m).unwrap();
        assert_eq!(lb.cols(), 20);
        for t in 0..2 {
            for k in 0..20 {
                assert_eq!(lb.row(t)[k], m.frames.row(t)[k]);
            }
        }
        assert_eq!(lb.row(0), &(0..20).map(|i| i as f32).collect::<Vec<_>>()[..]);
        let zero = MelSpectrogram {
            frames: FeatureMatrix::zeros(3, 80),
            ..m
        };
        assert!(low_band(&zero).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn silence_is_unvoiced() {
        let (p, v) = estimate_f0_vuv(&Waveform::new(vec![0.0; 8192], SR)).unwrap();
        assert_eq!(v.voiced_count(), 0);
        assert!(p.f0.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn sine_220_is_tracked() {
        let (p, v) = estimate_f0_vuv(&sine(220.0, 0.5, 22050)).unwrap();
        assert_eq!(v.voiced_count(), v.len());
        for &f in &p.f0 {
            assert!((f - 220.0).abs() < 3.0, "f0 {f}");
        }
    }

    #[test]
    fn low_and_high_tones_are_tracked() {
        for freq in [80.0, 150.0, 310.0, 450.0] {
            let (p, v) = estimate_f0_vuv(&sine(freq, 0.3, 8192)).unwrap();
            assert_eq!(v.voiced_count(), v.len(), "{freq}");
            assert!(p.f0.iter().all(|f| (f - freq).abs() / freq < 0.02), "{freq}: {:?}", p.f0);
        }
    }

    #[test]
    fn white_noise_is_mostly_unvoiced() {
        let (_, v) = estimate_f0_vuv(&noise(0.3, 22050 * 2, 17)).unwrap();
        let unvoiced = v.len() - v.voiced_count();
        assert!(unvoiced as f64 >= 0.9 * v.len() as f64, "{unvoiced}/{}", v.len());
    }

    #[test]
    fn low_sample_rate_rejected() {
        let w = Waveform::new(vec![0.0; 4096], 4000);
        assert!(estimate_f0_vuv(&w).is_err());
    }

    #[test]
    fn vuv_feature_roundtrip() {
        let v = VuvFlags::new(vec![true, false, true]);
        let f = v.to_feature();
        assert_eq!(f.data(), &[1.0, 0.0, 1.0]);
        assert_eq!(VuvFlags::from_feature(&f).unwrap(), v);
    }

    fn voiced_mix(seed: u64, len: usize) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f0 = rng.gen_range(90.0..400.0);
        let mut s = sine(f0, 0.4, len).samples;
        // Second half is noise so both branches are exercised.
        for v in s.iter_mut().skip(len / 2) {
            *v = rng.gen_range(-0.5..0.5);
        }
        Waveform::new(s, SR)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn frame_counts_agree(len in 1024usize..6000) {
            let w = noise(0.1, len, len as u64);
            let m = mel_spectrogram(&w).unwrap();
            let (p, v) = estimate_f0_vuv(&w).unwrap();
            prop_assert_eq!(m.num_frames(), 1 + (len - 1024) / 256);
            prop_assert_eq!(p.f0.len(), m.num_frames());
            prop_assert_eq!(v.len(), m.num_frames());
            for (f, flag) in p.f0.iter().zip(&v.flags) {
                prop_assert_eq!(*f > 0.0, *flag);
                prop_assert!(*f == 0.0 || (50.0..=600.0).contains(f));
            }
        }

        #[test]
        fn pitch_is_gain_covariant(seed in 0u64..1000, gain in 0.1f64..1.0) {
            let w = voiced_mix(seed, 8192);
            let (p1, v1) = estimate_f0_vuv(&w).unwrap();
            let (p2, v2) = estimate_f0_vuv(&w.scaled(gain)).unwrap();
            prop_assert_eq!(&v1, &v2);
            for (a, b) in p1.f0.iter().zip(&p2.f0) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn stft_concatenates_on_hop_boundaries(a_hops in 4usize..12, b_hops in 4usize..12, seed in 0u64..100) {
            let a = noise(0.2, a_hops * 256, seed);
            let b = noise(0.2, b_hops * 256, seed + 1);
            let joined = Waveform::new([a.samples.clone(), b.samples.clone()].concat(), SR);
            let sj = stft_magnitude(&joined).unwrap();
            let sa = stft_magnitude(&a).unwrap();
            let sb = stft_magnitude(&b).unwrap();
            // Frames lying entirely inside either half must match exactly.
            for t in 0..sa.rows() {
                prop_assert_eq!(sj.row(t), sa.row(t));
            }
            for t in 0..sb.rows() {
                prop_assert_eq!(sj.row(a_hops + t), sb.row(t));
            }
        }
    }
}
