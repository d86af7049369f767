//! Synthetic conditioned waveforms.
//!
//! Feature channels per frame: five one-hot phoneme classes (class 0 is
//! silence, classes 1-3 voiced with distinct formant profiles, class 4
//! unvoiced noise), normalized log-f0, energy and a voicing flag. Audio is a
//! harmonic or noise source scaled by energy, plus a bounded noise floor,
//! then μ-law transformed.

use std::f64::consts::{LN_2, PI};

use gantts_tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::audio::MuLaw;
use crate::error::{CoreError, Result};

pub const PHONEMES: usize = 5;
pub const FEATURE_DIM: usize = PHONEMES + 3;
pub const SILENCE: usize = 0;
pub const UNVOICED: usize = 4;
const LOG_F0_CENTER: f64 = 5.0;
const MAX_HARMONICS: usize = 24;
const FORMANTS: [&[(f64, f64)]; 3] = [
    &[(700.0, 130.0), (1200.0, 150.0)],
    &[(300.0, 80.0), (2300.0, 250.0)],
    &[(500.0, 100.0), (1000.0, 120.0), (2500.0, 250.0)],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDatasetConfig {
    pub sample_rate: usize,
    pub lambda: usize,
    /// Conditioning frames per clip.
    pub tc: usize,
    pub segment_min: usize,
    pub segment_max: usize,
    pub silence_prob: f64,
    pub f0_min: f64,
    pub f0_max: f64,
    /// Per-frame standard deviation of the log-f0 random walk.
    pub f0_step: f64,
    pub energy_min: f64,
    pub energy_max: f64,
    /// Bound of the additive noise floor before companding.
    pub noise_floor: f64,
    pub mu: f64,
}

impl Default for SyntheticDatasetConfig {
    fn default() -> Self {
        Self {
            sample_rate: 24_000,
            lambda: 120,
            tc: 40,
            segment_min: 4,
            segment_max: 12,
            silence_prob: 0.2,
            f0_min: 80.0,
            f0_max: 300.0,
            f0_step: 0.03,
            energy_min: 0.05,
            energy_max: 0.6,
            noise_floor: 1e-5,
            mu: crate::audio::MU_16BIT,
        }
    }
}

impl SyntheticDatasetConfig {
    pub fn clip_len(&self) -> usize {
        self.tc * self.lambda
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(format!("dataset: {m}")));
        if self.tc == 0 || self.lambda == 0 || self.sample_rate == 0 {
            return bad("tc, lambda and sample_rate must be positive");
        }
        if self.segment_min == 0 || self.segment_min > self.segment_max {
            return bad("need 1 <= segment_min <= segment_max");
        }
        if !(0.0..=1.0).contains(&self.silence_prob) {
            return bad("silence_prob outside [0, 1]");
        }
        if !(self.f0_min > 0.0 && self.f0_min < self.f0_max) {
            return bad("need 0 < f0_min < f0_max");
        }
        if !(self.energy_min >= 0.0 && self.energy_min <= self.energy_max && self.energy_max + self.noise_floor <= 1.0) {
            return bad("need 0 <= energy_min <= energy_max and energy_max + noise_floor <= 1");
        }
        if !(self.noise_floor >= 0.0 && self.f0_step >= 0.0) {
            return bad("noise_floor and f0_step must be non-negative");
        }
        MuLaw::new(self.mu)?;
        Ok(())
    }
}

/// Per-frame generating controls.
#[derive(Debug, Clone, PartialEq)]
pub struct Controls {
    pub phoneme: Vec<usize>,
    pub f0: Vec<f64>,
    pub energy: Vec<f64>,
}

impl Controls {
    pub fn features(&self) -> Tensor {
        let tc = self.phoneme.len();
        let mut data = Vec::with_capacity(tc * FEATURE_DIM);
        for t in 0..tc {
            let p = self.phoneme[t];
            data.extend((0..PHONEMES).map(|c| if c == p { 1.0 } else { 0.0 }));
            data.push((self.f0[t].ln() - LOG_F0_CENTER) / LN_2);
            data.push(self.energy[t]);
            data.push(if is_voiced(p) { 1.0 } else { 0.0 });
        }
        Tensor::from_parts(&[tc, FEATURE_DIM], data)
    }
}

pub fn is_voiced(phoneme: usize) -> bool {
    (1..UNVOICED).contains(&phoneme)
}

pub fn sample_controls(cfg: &SyntheticDatasetConfig, rng: &mut Rng) -> Controls {
    let tc = cfg.tc;
    let mut phoneme = Vec::with_capacity(tc);
    let mut energy = Vec::with_capacity(tc);
    while phoneme.len() < tc {
        let len = cfg.segment_min + rng.below((cfg.segment_max - cfg.segment_min + 1) as u64) as usize;
        let class = if rng.uniform() < cfg.silence_prob {
            SILENCE
        } else {
            1 + rng.below((PHONEMES - 1) as u64) as usize
        };
        let e = if class == SILENCE {
            0.0
        } else {
            cfg.energy_min + (cfg.energy_max - cfg.energy_min) * rng.uniform()
        };
        for _ in 0..len.min(tc - phoneme.len()) {
            phoneme.push(class);
            energy.push(e);
        }
    }
    let (lo, hi) = (cfg.f0_min.ln(), cfg.f0_max.ln());
    let mut lf = lo + (hi - lo) * (0.25 + 0.5 * rng.uniform());
    let f0 = (0..tc)
        .map(|_| {
            lf = (lf + cfg.f0_step * rng.normal()).clamp(lo, hi);
            lf.exp()
        })
        .collect();
    Controls { phoneme, f0, energy }
}

fn formant_gain(class: usize, freq: f64) -> f64 {
    let peaks: f64 = FORMANTS[class - 1]
        .iter()
        .map(|&(f, bw)| (-0.5 * ((freq - f) / bw).powi(2)).exp())
        .sum();
    peaks + 0.05
}

/// Renders controls to μ-law audio of `λ·Tc` samples.
pub fn render(cfg: &SyntheticDatasetConfig, c: &Controls, rng: &mut Rng) -> Result<Vec<f64>> {
    let law = MuLaw::new(cfg.mu)?;
    let lambda = cfg.lambda;
    let n = c.phoneme.len() * lambda;
    let nyquist_guard = 0.45 * cfg.sample_rate as f64;
    let sigma = cfg.noise_floor / 2.0;
    let mut out = Vec::with_capacity(n);
    let mut phase = 0.0f64;
    let mut prev_noise = 0.0;
    let mut gains = [0.0; MAX_HARMONICS];
    for (t, &p) in c.phoneme.iter().enumerate() {
        let next = c.f0.get(t + 1).copied().unwrap_or(c.f0[t]);
        if is_voiced(p) {
            for (h, g) in gains.iter_mut().enumerate() {
                let f = (h + 1) as f64 * c.f0[t];
                *g = if f < nyquist_guard { formant_gain(p, f) } else { 0.0 };
            }
        }
        let norm: f64 = gains.iter().sum();
        for s in 0..lambda {
            let f0 = c.f0[t] + (next - c.f0[t]) * s as f64 / lambda as f64;
            phase = (phase + 2.0 * PI * f0 / cfg.sample_rate as f64) % (2.0 * PI);
            let white = rng.normal();
            let source = match p {
                SILENCE => 0.0,
                UNVOICED => ((white - prev_noise) / 4.0).clamp(-1.0, 1.0),
                _ => {
                    // e^{ihφ} by repeated complex multiplication.
                    let (s1, c1) = phase.sin_cos();
                    let (mut sh, mut ch) = (s1, c1);
                    let mut acc = 0.0;
                    for g in &gains {
                        acc += g * sh;
                        (sh, ch) = (sh * c1 + ch * s1, ch * c1 - sh * s1);
                    }
                    acc / norm
                }
            };
            prev_noise = white;
            let floor = (sigma * rng.normal()).clamp(-cfg.noise_floor, cfg.noise_floor);
            let x = (c.energy[t] * source + floor).clamp(-1.0, 1.0);
            out.push(law.encode(x)?);
        }
    }
    Ok(out)
}

/// One `(waveform, features)` pair: waveform `λ·Tc` samples in μ-law
/// domain, features `[Tc, 8]`.
pub fn synth_example(cfg: &SyntheticDatasetConfig, rng: &mut Rng) -> Result<(Vec<f64>, Tensor)> {
    cfg.validate()?;
    let controls = sample_controls(cfg, &mut rng.split(0));
    let audio = render(cfg, &controls, &mut rng.split(1))?;
    Ok((audio, controls.features()))
}

/// `count` examples, item `i` drawn from `rng.split(i)`; returns waveforms
/// `[B, N, 1]` and features `[B, Tc, F]`.
pub fn synth_batch(cfg: &SyntheticDatasetConfig, count: usize, rng: &Rng) -> Result<(Tensor, Tensor)> {
    let mut audio = Vec::with_capacity(count * cfg.clip_len());
    let mut feats = Vec::with_capacity(count * cfg.tc * FEATURE_DIM);
    for i in 0..count {
        let (a, f) = synth_example(cfg, &mut rng.split(i as u64))?;
        audio.extend(a);
        feats.extend_from_slice(f.data());
    }
    Ok((
        Tensor::from_parts(&[count, cfg.clip_len(), 1], audio),
        Tensor::from_parts(&[count, cfg.tc, FEATURE_DIM], feats),
    ))
}
