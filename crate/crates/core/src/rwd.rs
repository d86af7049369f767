//! Random window discriminators and their ensembles.

use gantts_tensor::{Graph, ParamStore, Rng, Var};
use serde::{Deserialize, Serialize};

use crate::blocks::{dblock_forward, init_dblock, Binder, DBlockConfig};
use crate::error::{invalid, CoreError, Result};

pub const LAMBDA: usize = 120;
pub const BASE_WINDOW: usize = 240;
pub const MAIN_KS: [usize; 5] = [1, 2, 4, 8, 15];

pub const ABLATION_NAMES: [&str; 8] = [
    "full_d",
    "crwd1",
    "crwd_multi",
    "crwd1_urwd1",
    "crwd1_urwd1_x5",
    "rwd_nods_multiwindow",
    "rwd_star_480",
    "rwd_star_240",
];

fn prime_factors_desc(mut n: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut p = 2;
    while p * p <= n {
        while n % p == 0 {
            out.push(p);
            n /= p;
        }
        p += 1;
    }
    if n > 1 {
        out.push(n);
    }
    out.reverse();
    out
}

/// Downsample factors of the blocks after the initial reshape by `k`, for a
/// frequency ratio `lambda`.
pub fn downsample_plan_for(lambda: usize, k: usize, conditional: bool) -> Result<Vec<usize>> {
    if k == 0 || lambda % k != 0 {
        return Err(invalid("downsample_plan", format!("k={k} does not divide {lambda}")));
    }
    let mut f = prime_factors_desc(lambda / k);
    if !conditional {
        f.truncate(2);
    }
    Ok(f)
}

pub fn downsample_plan(k: usize, conditional: bool) -> Result<Vec<usize>> {
    downsample_plan_for(LAMBDA, k, conditional)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSchedule {
    pub start: usize,
    pub cap: usize,
}

impl ChannelSchedule {
    pub const TOY: Self = Self { start: 16, cap: 64 };
    pub const FULL: Self = Self { start: 64, cap: 512 };
}

/// Base window size after the reshape; `Full` spans the whole clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Window {
    Base(usize),
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RwdConfig {
    pub k: usize,
    pub window: Window,
    pub conditional: bool,
    pub channels: ChannelSchedule,
}

impl RwdConfig {
    /// Effective window `ω·k` in audio samples for a clip of `n` samples.
    pub fn span(&self, n: usize) -> usize {
        match self.window {
            Window::Base(w) => w * self.k,
            Window::Full => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Member {
    /// Parameter path prefix, unique within an ensemble.
    pub prefix: String,
    pub cfg: RwdConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub name: String,
    pub members: Vec<Member>,
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.members.iter().any(|m| m.cfg.conditional) {
            return Err(CoreError::Config(format!("ensemble `{}` has no conditional member", self.name)));
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.members {
            if !seen.insert(&m.prefix) {
                return Err(CoreError::Config(format!("duplicate member prefix `{}`", m.prefix)));
            }
        }
        Ok(())
    }
}

fn member(prefix: impl Into<String>, k: usize, window: Window, conditional: bool, channels: ChannelSchedule) -> Member {
    Member {
        prefix: prefix.into(),
        cfg: RwdConfig {
            k,
            window,
            conditional,
            channels,
        },
    }
}

fn tag(conditional: bool) -> char {
    if conditional {
        'c'
    } else {
        'u'
    }
}

/// Ensemble configurations by name; see [`ABLATION_NAMES`].
pub fn ablation_config(name: &str, channels: ChannelSchedule) -> Result<EnsembleConfig> {
    let base = Window::Base(BASE_WINDOW);
    let main = |w: usize| -> Vec<Member> {
        MAIN_KS
            .iter()
            .flat_map(|&k| {
                [true, false].map(|c| member(format!("d.{}{k}", tag(c)), k, Window::Base(w), c, channels))
            })
            .collect()
    };
    let members = match name {
        "full_d" => vec![member("d.full", 1, Window::Full, true, channels)],
        "crwd1" => vec![member("d.c1", 1, base, true, channels)],
        "crwd_multi" => MAIN_KS
            .iter()
            .map(|&k| member(format!("d.c{k}"), k, base, true, channels))
            .collect(),
        "crwd1_urwd1" => vec![member("d.c1", 1, base, true, channels), member("d.u1", 1, base, false, channels)],
        "crwd1_urwd1_x5" => (0..5)
            .flat_map(|i| [true, false].map(|c| member(format!("d.{}1x{i}", tag(c)), 1, base, c, channels)))
            .collect(),
        "rwd_nods_multiwindow" => MAIN_KS
            .iter()
            .flat_map(|&m| {
                let w = BASE_WINDOW * m;
                [true, false].map(|c| member(format!("d.{}1w{w}", tag(c)), 1, Window::Base(w), c, channels))
            })
            .collect(),
        "rwd_star_480" => main(480),
        "rwd_star_240" => main(BASE_WINDOW),
        other => {
            return Err(CoreError::Config(format!(
                "unknown ensemble `{other}` (expected one of {})",
                ABLATION_NAMES.join(", ")
            )))
        }
    };
    let ens = EnsembleConfig {
        name: name.to_string(),
        members,
    };
    ens.validate()?;
    Ok(ens)
}

/// Block layout of one base discriminator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorPlan {
    pub k: usize,
    /// Effective window in audio samples.
    pub span: usize,
    pub conditional: bool,
    pub factors: Vec<usize>,
    pub blocks: Vec<DBlockConfig>,
    pub out_channels: usize,
}

impl DiscriminatorPlan {
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Two convolutions per block plus the output projection.
    pub fn depth(&self) -> usize {
        2 * self.blocks.len() + 1
    }

    pub fn conditional_block(&self) -> Option<usize> {
        self.blocks.iter().position(DBlockConfig::is_conditional)
    }
}

/// Lays out the blocks for `cfg` on clips of `clip_len` samples at frequency
/// ratio `lambda`.
pub fn discriminator_plan(cfg: &RwdConfig, clip_len: usize, lambda: usize, feature_dim: usize) -> Result<DiscriminatorPlan> {
    let factors = downsample_plan_for(lambda, cfg.k, cfg.conditional)?;
    let span = cfg.span(clip_len);
    if span == 0 || span > clip_len {
        return Err(invalid("rwd", format!("window of {span} samples does not fit a clip of {clip_len}")));
    }
    if span % cfg.k != 0 {
        return Err(invalid("rwd", format!("window {span} not divisible by k={}", cfg.k)));
    }
    let total: usize = factors.iter().product::<usize>() * cfg.k;
    if span % total != 0 {
        return Err(invalid("rwd", format!("window {span} not divisible by total downsampling {total}")));
    }
    if cfg.conditional && span % lambda != 0 {
        return Err(invalid("rwd", format!("conditional window {span} is not a multiple of {lambda}")));
    }
    let ChannelSchedule { start, cap } = cfg.channels;
    // Last downsampling block, or the first block when nothing downsamples.
    let cond_at = factors.len();
    let mut blocks = Vec::with_capacity(factors.len() + 3);
    let cond_for = |i: usize| (cfg.conditional && i == cond_at).then_some(feature_dim);
    blocks.push(DBlockConfig {
        in_ch: cfg.k,
        out_ch: start,
        factor: 1,
        cond_features: cond_for(0),
    });
    let mut ch = start;
    for (i, &f) in factors.iter().enumerate() {
        let out = (2 * ch).min(cap);
        blocks.push(DBlockConfig {
            in_ch: ch,
            out_ch: out,
            factor: f,
            cond_features: cond_for(i + 1),
        });
        ch = out;
    }
    for _ in 0..2 {
        blocks.push(DBlockConfig {
            in_ch: ch,
            out_ch: ch,
            factor: 1,
            cond_features: None,
        });
    }
    Ok(DiscriminatorPlan {
        k: cfg.k,
        span,
        conditional: cfg.conditional,
        factors,
        blocks,
        out_channels: ch,
    })
}

pub fn init_discriminator(store: &mut ParamStore, prefix: &str, plan: &DiscriminatorPlan, rng: &mut Rng) -> Result<()> {
    for (i, b) in plan.blocks.iter().enumerate() {
        init_dblock(store, &format!("{prefix}.block{i}"), b, rng)?;
    }
    store.add_weight(format!("{prefix}.out.weight"), &[plan.out_channels, 1], true, rng)?;
    store.add_bias(format!("{prefix}.out.bias"), 1)?;
    Ok(())
}

/// Plans and parameters for every member of `ens`.
pub fn build_ensemble(
    ens: &EnsembleConfig,
    clip_len: usize,
    lambda: usize,
    feature_dim: usize,
    rng: &mut Rng,
) -> Result<(ParamStore, Vec<DiscriminatorPlan>)> {
    ens.validate()?;
    let mut store = ParamStore::new();
    let mut plans = Vec::with_capacity(ens.members.len());
    for (i, m) in ens.members.iter().enumerate() {
        let plan = discriminator_plan(&m.cfg, clip_len, lambda, feature_dim)?;
        init_discriminator(&mut store, &m.prefix, &plan, &mut rng.split(i as u64))?;
        plans.push(plan);
    }
    Ok((store, plans))
}

/// Runs the base discriminator on an already sliced window `[B, span, 1]`
/// (and conditioning slice `[B, span/λ, F]`), returning `[B, 1]`.
pub fn discriminator_forward(
    g: &mut Graph,
    b: &mut Binder,
    prefix: &str,
    plan: &DiscriminatorPlan,
    x: Var,
    cond: Option<Var>,
) -> Result<Var> {
    if g.shape(x)[1] != plan.span {
        return Err(invalid("rwd_forward", format!("expected window of {}, got {:?}", plan.span, g.shape(x))));
    }
    let mut h = g.block_reshape(x, plan.k)?;
    for (i, blk) in plan.blocks.iter().enumerate() {
        let c = if blk.is_conditional() { cond } else { None };
        h = dblock_forward(g, b, &format!("{prefix}.block{i}"), blk, h, c)?;
    }
    let pooled = g.mean_pool_time(h)?;
    let w = b.weight(g, &format!("{prefix}.out.weight"))?;
    let bias = b.weight(g, &format!("{prefix}.out.bias"))?;
    Ok(g.linear(pooled, w, Some(bias))?)
}

/// A sampled window position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSample {
    pub offset: usize,
    pub len: usize,
    /// Aligned conditioning frames `offset/λ .. (offset + len)/λ`.
    pub cond_start: usize,
    pub cond_end: usize,
}

fn window_stride(n: usize, span: usize, conditional: bool, lambda: usize) -> Result<usize> {
    if span == 0 || span > n {
        return Err(invalid("sample_window", format!("window of {span} exceeds clip of {n}")));
    }
    if conditional {
        if span % lambda != 0 || (n - span) % lambda != 0 {
            return Err(invalid(
                "sample_window",
                format!("conditional window {span} in clip {n} is not aligned to {lambda}"),
            ));
        }
        Ok(lambda)
    } else {
        Ok(1)
    }
}

/// Number of distinct window offsets.
pub fn window_support(n: usize, cfg: &RwdConfig, lambda: usize) -> Result<usize> {
    let span = cfg.span(n);
    let stride = window_stride(n, span, cfg.conditional, lambda)?;
    Ok((n - span) / stride + 1)
}

/// Draws `j` uniformly from `{0, s, 2s, …, n − span}` with `s = λ` for
/// conditional and `s = 1` for unconditional members.
pub fn sample_window(n: usize, cfg: &RwdConfig, lambda: usize, rng: &mut Rng) -> Result<WindowSample> {
    let span = cfg.span(n);
    let stride = window_stride(n, span, cfg.conditional, lambda)?;
    let count = (n - span) / stride + 1;
    let offset = rng.below(count as u64) as usize * stride;
    Ok(WindowSample {
        offset,
        len: span,
        cond_start: offset / lambda,
        cond_end: (offset + span) / lambda,
    })
}

/// One member on a batch: one window per item drawn in item order from
/// `rng`. `x` is `[B, N, 1]`, `cond` is `[B, N/λ, F]`. Returns `[B, 1]`.
#[allow(clippy::too_many_arguments)]
pub fn rwd_forward(
    g: &mut Graph,
    b: &mut Binder,
    m: &Member,
    plan: &DiscriminatorPlan,
    x: Var,
    cond: Option<Var>,
    lambda: usize,
    rng: &mut Rng,
) -> Result<Var> {
    let &[batch, n, _] = g.shape(x) else {
        return Err(invalid("rwd_forward", format!("waveform must be [batch, N, 1], got {:?}", g.shape(x))));
    };
    let mut offsets = Vec::with_capacity(batch);
    let mut cond_offsets = Vec::with_capacity(batch);
    for _ in 0..batch {
        let w = sample_window(n, &m.cfg, lambda, rng)?;
        offsets.push(w.offset);
        cond_offsets.push(w.cond_start);
    }
    let span = m.cfg.span(n);
    let xw = g.gather_windows(x, &offsets, span)?;
    let cw = if m.cfg.conditional {
        let Some(c) = cond else {
            return Err(invalid("rwd_forward", format!("{}: conditional member without conditioning", m.prefix)));
        };
        let ct = g.shape(c)[1];
        if ct * lambda != n {
            return Err(invalid("rwd_forward", format!("conditioning length {ct} misaligned with {n} samples")));
        }
        Some(g.gather_windows(c, &cond_offsets, span / lambda)?)
    } else {
        None
    };
    discriminator_forward(g, b, &m.prefix, plan, xw, cw)
}

/// Sum of member scores, member `i` drawing windows from `rng.split(i)`.
#[allow(clippy::too_many_arguments)]
pub fn ensemble_forward(
    g: &mut Graph,
    b: &mut Binder,
    ens: &EnsembleConfig,
    plans: &[DiscriminatorPlan],
    x: Var,
    cond: Option<Var>,
    lambda: usize,
    rng: &Rng,
) -> Result<Var> {
    if plans.len() != ens.members.len() {
        return Err(invalid("ensemble_forward", "plan count does not match members"));
    }
    let mut total: Option<Var> = None;
    for (i, (m, plan)) in ens.members.iter().zip(plans).enumerate() {
        if !b.store().contains(&format!("{}.out.weight", m.prefix)) {
            return Err(invalid("ensemble_forward", format!("missing member `{}`", m.prefix)));
        }
        let s = rwd_forward(g, b, m, plan, x, cond, lambda, &mut rng.split(i as u64))?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    total.ok_or_else(|| invalid("ensemble_forward", "empty ensemble"))
}
