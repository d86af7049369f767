//! μ-law companding and 16-bit PCM WAV files.

use std::path::Path;

use crate::error::{invalid, CoreError, Result};

pub const MU_16BIT: f64 = 65535.0;
pub const MU_8BIT: f64 = 255.0;
pub const SAMPLE_RATE: u32 = 24_000;

fn check_unit(op: &'static str, x: f64) -> Result<()> {
    if x.is_finite() && x.abs() <= 1.0 {
        Ok(())
    } else {
        Err(invalid(op, format!("{x} outside [-1, 1]")))
    }
}

/// Continuous μ-law transform `sgn(x)·ln(1 + μ|x|)/ln(1 + μ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MuLaw {
    pub mu: f64,
}

impl Default for MuLaw {
    fn default() -> Self {
        Self { mu: MU_16BIT }
    }
}

impl MuLaw {
    pub fn new(mu: f64) -> Result<Self> {
        if mu.is_finite() && mu > 0.0 {
            Ok(Self { mu })
        } else {
            Err(invalid("mulaw", format!("mu must be positive, got {mu}")))
        }
    }

    pub fn encode(&self, x: f64) -> Result<f64> {
        check_unit("mulaw", x)?;
        Ok(x.signum() * (self.mu * x.abs()).ln_1p() / self.mu.ln_1p())
    }

    pub fn decode(&self, y: f64) -> Result<f64> {
        check_unit("mulaw_inverse", y)?;
        Ok(y.signum() * (((1.0 + self.mu).powf(y.abs()) - 1.0) / self.mu))
    }
}

pub fn mulaw(x: f64) -> Result<f64> {
    MuLaw::default().encode(x)
}

pub fn mulaw_inverse(y: f64) -> Result<f64> {
    MuLaw::default().decode(y)
}

/// Mono 16-bit PCM audio.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WavClip {
    pub sample_rate: u32,
    pub samples: Vec<i16>,
}

/// Round-to-nearest into `[-32767, 32767]`; inputs beyond ±1 clamp.
pub fn quantize(x: f64) -> i16 {
    (x * 32767.0).round().clamp(-32767.0, 32767.0) as i16
}

pub fn dequantize(s: i16) -> f64 {
    f64::from(s) / 32767.0
}

impl WavClip {
    pub fn from_real(sample_rate: u32, values: &[f64]) -> Self {
        Self {
            sample_rate,
            samples: values.iter().map(|&v| quantize(v)).collect(),
        }
    }

    pub fn to_real(&self) -> Vec<f64> {
        self.samples.iter().map(|&s| dequantize(s)).collect()
    }
}

fn wav_err(path: &Path, e: hound::Error) -> CoreError {
    match e {
        hound::Error::IoError(source) => CoreError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => CoreError::Format {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

pub fn write_wav(path: &Path, clip: &WavClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in &clip.samples {
        w.write_sample(s).map_err(|e| wav_err(path, e))?;
    }
    w.finalize().map_err(|e| wav_err(path, e))
}

pub fn read_wav(path: &Path) -> Result<WavClip> {
    let mut r = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = r.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(CoreError::Format {
            path: path.to_path_buf(),
            reason: format!(
                "unsupported encoding: {} channel(s), {} bits, {:?}",
                spec.channels, spec.bits_per_sample, spec.sample_format
            ),
        });
    }
    let samples = r
        .samples::<i16>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_err(path, e))?;
    Ok(WavClip {
        sample_rate: spec.sample_rate,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_zero() {
        for mu in [MU_8BIT, MU_16BIT] {
            let c = MuLaw::new(mu).unwrap();
            assert_eq!(c.encode(0.0).unwrap(), 0.0);
            assert_eq!(c.encode(1.0).unwrap(), 1.0);
            assert_eq!(c.encode(-1.0).unwrap(), -1.0);
            assert_eq!(c.decode(0.0).unwrap(), 0.0);
            assert_eq!(c.decode(1.0).unwrap(), 1.0);
            assert_eq!(c.decode(-1.0).unwrap(), -1.0);
        }
    }

    #[test]
    fn eight_bit_half() {
        let y = MuLaw::new(255.0).unwrap().encode(0.5).unwrap();
        assert!((y - 128.5f64.ln() / 256f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_is_an_error() {
        assert!(mulaw(1.5).is_err());
        assert!(mulaw_inverse(-1.0001).is_err());
        assert!(mulaw(f64::NAN).is_err());
        assert!(MuLaw::new(0.0).is_err());
    }

    #[test]
    fn quantization_convention() {
        assert_eq!(quantize(1.0), 32767);
        assert_eq!(quantize(-1.0), -32767);
        assert_eq!(quantize(2.0), 32767);
        assert_eq!(quantize(0.0), 0);
    }
}
