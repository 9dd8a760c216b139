use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

/// Mono samples scaled to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

const PCM16_SCALE: f64 = 32768.0;

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self::new(self.samples.iter().map(|s| s * gain).collect(), self.sample_rate)
    }
}

/// Reads a RIFF/WAVE file; only 16-bit integer PCM, mono, is accepted.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = WavReader::open(path)?;
    let spec = reader.spec();
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedFormat(format!(
            "{:?} {}-bit (expected PCM16)",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    if spec.channels != 1 {
        return Err(Error::UnsupportedChannels(spec.channels));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / PCM16_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if samples.is_empty() {
        return Err(Error::TooShort { needed: 1, got: 0 });
    }
    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Writes mono PCM16, clamping to the representable range.
pub fn save_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut w = WavWriter::create(path, spec)?;
    for &s in &wave.samples {
        let v = (s * PCM16_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64);
        w.write_sample(v as i16)?;
    }
    w.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(path: &Path, channels: u16, bits: u16, fmt: SampleFormat, values: &[i32]) {
        let spec = WavSpec {
            channels,
            sample_rate: 22050,
            bits_per_sample: bits,
            sample_format: fmt,
        };
        let mut w = WavWriter::create(path, spec).unwrap();
        for &v in values {
            if fmt == SampleFormat::Float {
                w.write_sample(v as f32).unwrap();
            } else if bits == 16 {
                w.write_sample(v as i16).unwrap();
            } else {
                w.write_sample(v).unwrap();
            }
        }
        w.finalize().unwrap();
    }

    #[test]
    fn zeros_load_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.wav");
        write_raw(&p, 1, 16, SampleFormat::Int, &vec![0; 2048]);
        let w = load_wav(&p).unwrap();
        assert_eq!(w.sample_rate, 22050);
        assert_eq!(w.samples, vec![0.0; 2048]);
    }

    #[test]
    fn most_negative_pcm_is_minus_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sq.wav");
        write_raw(&p, 1, 16, SampleFormat::Int, &[-32768, 32767, -32768, 32767]);
        let w = load_wav(&p).unwrap();
        assert_eq!(w.samples[0], -1.0);
        assert!(w.samples.iter().all(|s| s.abs() <= 1.0));
    }

    #[test]
    fn distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let stereo = dir.path().join("st.wav");
        write_raw(&stereo, 2, 16, SampleFormat::Int, &[0; 64]);
        let err = load_wav(&stereo).unwrap_err();
        assert_eq!(err.to_string(), "unsupported channel count: 2");

        let float = dir.path().join("f.wav");
        write_raw(&float, 1, 32, SampleFormat::Float, &[0; 64]);
        assert!(matches!(load_wav(&float), Err(Error::UnsupportedFormat(_))));

        let pcm24 = dir.path().join("p24.wav");
        write_raw(&pcm24, 1, 24, SampleFormat::Int, &[0; 64]);
        assert!(matches!(load_wav(&pcm24), Err(Error::UnsupportedFormat(_))));

        assert!(matches!(load_wav(dir.path().join("nope.wav")), Err(Error::MissingFile(_))));
    }

    #[test]
    fn save_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rt.wav");
        let w = Waveform::new(vec![0.5, -0.25, 0.0, -1.0], 16000);
        save_wav(&p, &w).unwrap();
        assert_eq!(load_wav(&p).unwrap(), w);
    }
}
