//! Generator assembly, masked variable-length generation and standing statistics.

use std::collections::BTreeMap;

use gantts_tensor::{Graph, ParamStore, Rng, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::blocks::{self, gblock_forward, init_gblock, BnMode, Binder, GBlockConfig, SnMode};
use crate::error::{invalid, CoreError, Result};

pub const LATENT_DIM: usize = 128;
pub const DEFAULT_STANDING_PASSES: usize = 100;
/// Base width of the toy generator.
pub const TOY_BASE: usize = 64;
const FULL_FACTORS: [usize; 7] = [1, 1, 2, 2, 2, 3, 5];
const KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorPlan {
    pub feature_dim: usize,
    pub latent_dim: usize,
    /// Speaker one-hot width appended to `z` (0 for single speaker).
    pub speakers: usize,
    /// Output channels of the input convolution.
    pub base_channels: usize,
    pub blocks: Vec<GBlockConfig>,
    /// Required product of the block upsample factors.
    pub lambda: usize,
}

impl GeneratorPlan {
    /// Channel schedule `c, c, c, c/2, c/2, c/2, c/4, c/8` over the standard factors.
    pub fn scaled(feature_dim: usize, base: usize) -> Self {
        let outs = [base, base, base / 2, base / 2, base / 2, base / 4, base / 8];
        let mut prev = base;
        let blocks = FULL_FACTORS
            .iter()
            .zip(outs)
            .map(|(&factor, out_ch)| {
                let b = GBlockConfig {
                    in_ch: prev,
                    out_ch,
                    factor,
                };
                prev = out_ch;
                b
            })
            .collect();
        Self {
            feature_dim,
            latent_dim: LATENT_DIM,
            speakers: 0,
            base_channels: base,
            blocks,
            lambda: 120,
        }
    }

    pub fn full() -> Self {
        Self::scaled(567, 768)
    }

    pub fn toy() -> Self {
        Self::scaled(crate::data::FEATURE_DIM, TOY_BASE)
    }

    /// Width of the CBN conditioning vector.
    pub fn cond_dim(&self) -> usize {
        self.latent_dim + self.speakers
    }

    pub fn upsampling(&self) -> usize {
        self.blocks.iter().map(|b| b.factor).product()
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(self.base_channels, |b| b.out_ch)
    }

    /// Cumulative upsampling at the input of each block, then at the output.
    pub fn units(&self) -> Vec<usize> {
        let mut u = vec![1];
        for b in &self.blocks {
            u.push(u.last().unwrap() * b.factor);
        }
        u
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.latent_dim == 0 || self.base_channels == 0 {
            return Err(CoreError::Config("generator plan has a zero dimension".into()));
        }
        let mut prev = self.base_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            b.validate()
                .map_err(|e| CoreError::Config(format!("generator block {i}: {e}")))?;
            if b.in_ch != prev {
                return Err(CoreError::Config(format!(
                    "generator block {i}: input channels {} != previous output {prev}",
                    b.in_ch
                )));
            }
            prev = b.out_ch;
        }
        if self.upsampling() != self.lambda {
            return Err(CoreError::Config(format!(
                "upsample factors multiply to {}, expected {}",
                self.upsampling(),
                self.lambda
            )));
        }
        Ok(())
    }
}

pub fn block_prefix(i: usize) -> String {
    format!("g.block{i}")
}

/// Orthogonally initialized generator parameters (zero biases).
pub fn build_generator(plan: &GeneratorPlan, rng: &mut Rng) -> Result<ParamStore> {
    plan.validate()?;
    let mut store = ParamStore::new();
    store.add_weight("g.conv_in.weight", &[KERNEL, plan.feature_dim, plan.base_channels], true, rng)?;
    store.add_bias("g.conv_in.bias", plan.base_channels)?;
    for (i, b) in plan.blocks.iter().enumerate() {
        init_gblock(&mut store, &block_prefix(i), b, plan.cond_dim(), rng)?;
    }
    store.add_weight("g.conv_out.weight", &[KERNEL, plan.out_channels(), 1], true, rng)?;
    store.add_bias("g.conv_out.bias", 1)?;
    Ok(store)
}

/// Zero-one masks over every temporal resolution of the generator.
#[derive(Debug, Clone)]
pub struct Masks {
    lengths: Vec<usize>,
    padded: usize,
    by_unit: BTreeMap<usize, Tensor>,
}

impl Masks {
    pub fn at(&self, unit: usize) -> Result<&Tensor> {
        self.by_unit
            .get(&unit)
            .ok_or_else(|| invalid("masks", format!("no mask at upsampling {unit}")))
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn padded(&self) -> usize {
        self.padded
    }
}

/// Masks for items of `lengths` frames padded to `padded` frames.
pub fn make_masks(lengths: &[usize], padded: usize, plan: &GeneratorPlan) -> Result<Masks> {
    if lengths.is_empty() {
        return Err(invalid("make_masks", "empty batch"));
    }
    if let Some(&l) = lengths.iter().find(|&&l| l > padded) {
        return Err(invalid("make_masks", format!("length {l} exceeds padded length {padded}")));
    }
    let mut by_unit = BTreeMap::new();
    for unit in plan.units() {
        let time = padded * unit;
        let mut data = Vec::with_capacity(lengths.len() * time);
        for &l in lengths {
            data.extend((0..time).map(|t| if t < l * unit { 1.0 } else { 0.0 }));
        }
        by_unit.insert(unit, Tensor::from_parts(&[lengths.len(), time], data));
    }
    Ok(Masks {
        lengths: lengths.to_vec(),
        padded,
        by_unit,
    })
}

fn masked(g: &mut Graph, x: Var, masks: Option<&Masks>, unit: usize) -> Result<Var> {
    match masks {
        Some(m) => Ok(g.mask_time(x, m.at(unit)?)?),
        None => Ok(x),
    }
}

/// `cond` is `[B, Tc, F]`, `z` is `[B, Dz]`; returns `[B, λ·Tc, 1]` in (−1, 1).
pub fn generator_forward(
    g: &mut Graph,
    b: &mut Binder,
    plan: &GeneratorPlan,
    cond: Var,
    z: Var,
    mode: BnMode,
    masks: Option<&Masks>,
) -> Result<Var> {
    let &[batch, tc, f] = g.shape(cond) else {
        return Err(invalid("generate", format!("conditioning must be [batch, Tc, F], got {:?}", g.shape(cond))));
    };
    if tc == 0 {
        return Err(invalid("generate", "empty conditioning"));
    }
    if f != plan.feature_dim {
        return Err(invalid("generate", format!("expected {} features, got {f}", plan.feature_dim)));
    }
    if g.shape(z) != [batch, plan.cond_dim()] {
        return Err(invalid(
            "generate",
            format!("latent must be [{batch}, {}], got {:?}", plan.cond_dim(), g.shape(z)),
        ));
    }
    if let Some(m) = masks {
        if m.lengths.len() != batch || m.padded != tc {
            return Err(invalid("generate", "masks do not match the batch"));
        }
    }
    let x = masked(g, cond, masks, 1)?;
    let w = b.weight(g, "g.conv_in.weight")?;
    let bias = b.weight(g, "g.conv_in.bias")?;
    let mut h = g.conv1d(x, w, Some(bias), 1)?;
    let units = plan.units();
    for (i, blk) in plan.blocks.iter().enumerate() {
        h = gblock_forward(g, b, &block_prefix(i), blk, h, z, mode, masks, units[i])?;
    }
    let h = masked(g, h, masks, plan.lambda)?;
    let w = b.weight(g, "g.conv_out.weight")?;
    let bias = b.weight(g, "g.conv_out.bias")?;
    let y = g.conv1d(h, w, Some(bias), 1)?;
    let y = g.tanh(y);
    masked(g, y, masks, plan.lambda)
}

/// Forward pass without gradients. Spectral state is read, not advanced.
pub fn generate(
    store: &mut ParamStore,
    plan: &GeneratorPlan,
    cond: &Tensor,
    z: &Tensor,
    mode: BnMode,
    masks: Option<&Masks>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let c = g.constant(cond.clone());
    let zv = g.constant(z.clone());
    let mut b = Binder::new(store, false, SnMode::Frozen);
    let y = generator_forward(&mut g, &mut b, plan, c, zv, mode, masks)?;
    Ok(g.value(y).clone())
}

/// `[batch, Dz]` latents: i.i.d. standard normal `z`, then the speaker one-hot if any.
pub fn sample_latents(plan: &GeneratorPlan, batch: usize, speaker: Option<usize>, rng: &mut Rng) -> Tensor {
    let mut data = Vec::with_capacity(batch * plan.cond_dim());
    for _ in 0..batch {
        data.extend(rng.normals(plan.latent_dim));
        data.extend((0..plan.speakers).map(|s| if Some(s) == speaker { 1.0 } else { 0.0 }));
    }
    Tensor::from_parts(&[batch, plan.cond_dim()], data)
}

/// Runs `n_passes` batch-statistics forward passes with fresh `z` and
/// conditioning drawn from `pool` (each `[Tc, F]`), then freezes the averaged
/// per-pass batch statistics for inference.
pub fn accumulate_standing_stats(
    store: &mut ParamStore,
    plan: &GeneratorPlan,
    n_passes: usize,
    batch_size: usize,
    pool: &[Tensor],
    rng: &mut Rng,
) -> Result<()> {
    if n_passes < 1 || batch_size < 1 {
        return Err(invalid("accumulate_standing_stats", "n_passes and batch_size must be >= 1"));
    }
    let Some(first) = pool.first() else {
        return Err(invalid("accumulate_standing_stats", "empty conditioning pool"));
    };
    let shape = first.shape().to_vec();
    if pool.iter().any(|c| c.shape() != shape.as_slice()) {
        return Err(invalid("accumulate_standing_stats", "conditioning pool has mixed shapes"));
    }
    blocks::reset_standing(store, "g.");
    for _ in 0..n_passes {
        let picks: Vec<&Tensor> = (0..batch_size)
            .map(|_| &pool[rng.below(pool.len() as u64) as usize])
            .collect();
        let cond = Tensor::concat0(&picks)?.reshape(&[batch_size, shape[0], shape[1]])?;
        let z = sample_latents(plan, batch_size, None, rng);
        generate(store, plan, &cond, &z, BnMode::Accumulate, None)?;
    }
    blocks::finalize_standing(store, "g.")
}
