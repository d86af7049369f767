//! Static architecture analysis: shape traces, layer counts, receptive field
//! and FLOPs, computed symbolically from plans.

use std::fmt::Write as _;

use crate::blocks::GBLOCK_DILATIONS;
use crate::error::Result;
use crate::generator::GeneratorPlan;
use crate::rwd::{self, ChannelSchedule, RwdConfig, Window};

/// A layer of a convolutional stack, as seen by the analyzers.
#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    /// `main` convolutions count toward depth; skip and embedding convolutions do not.
    Conv {
        k: usize,
        dilation: usize,
        cin: usize,
        cout: usize,
        main: bool,
    },
    Upsample(usize),
    /// Sum of two branches applied to the same input.
    Residual { main: Vec<Stage>, skip: Vec<Stage> },
}

fn conv(k: usize, dilation: usize, cin: usize, cout: usize, main: bool) -> Stage {
    Stage::Conv {
        k,
        dilation,
        cin,
        cout,
        main,
    }
}

/// Generator stages in execution order (normalizations and activations
/// omitted: they are pointwise in time at inference).
pub fn generator_stages(plan: &GeneratorPlan) -> Vec<Stage> {
    let [d1, d2, d3, d4] = GBLOCK_DILATIONS;
    let mut s = vec![conv(3, 1, plan.feature_dim, plan.base_channels, true)];
    for b in &plan.blocks {
        let (m, n, r) = (b.in_ch, b.out_ch, b.factor);
        let mut skip = vec![Stage::Upsample(r)];
        if b.has_skip_conv() {
            skip.push(conv(1, 1, m, n, false));
        }
        s.push(Stage::Residual {
            main: vec![Stage::Upsample(r), conv(3, d1, m, n, true), conv(3, d2, n, n, true)],
            skip,
        });
        s.push(Stage::Residual {
            main: vec![conv(3, d3, n, n, true), conv(3, d4, n, n, true)],
            skip: vec![],
        });
    }
    s.push(conv(3, 1, plan.out_channels(), 1, true));
    s
}

pub fn layer_count(stages: &[Stage]) -> usize {
    stages
        .iter()
        .map(|s| match s {
            Stage::Conv { main, .. } => usize::from(*main),
            Stage::Upsample(_) => 0,
            Stage::Residual { main, skip } => layer_count(main) + layer_count(skip),
        })
        .sum()
}

/// Total upsampling along a stage list (branches of a residual agree).
fn upsampling(stages: &[Stage]) -> usize {
    stages
        .iter()
        .map(|s| match s {
            Stage::Upsample(r) => *r,
            Stage::Residual { main, .. } => upsampling(main),
            Stage::Conv { .. } => 1,
        })
        .product()
}

/// Interval of input positions that can influence output positions `[lo, hi]`.
fn back_interval(stages: &[Stage], (mut lo, mut hi): (i64, i64)) -> (i64, i64) {
    for s in stages.iter().rev() {
        (lo, hi) = match s {
            Stage::Conv { k, dilation, .. } => {
                let reach = ((k - 1) / 2 * dilation) as i64;
                (lo - reach, hi + reach)
            }
            Stage::Upsample(r) => (lo.div_euclid(*r as i64), hi.div_euclid(*r as i64)),
            Stage::Residual { main, skip } => {
                let a = back_interval(main, (lo, hi));
                let b = back_interval(skip, (lo, hi));
                (a.0.min(b.0), a.1.max(b.1))
            }
        };
    }
    (lo, hi)
}

/// Largest number of input positions influencing any single output
/// position, over all output phases of the total upsampling.
pub fn receptive_field(stages: &[Stage]) -> usize {
    let total = upsampling(stages) as i64;
    (0..total)
        .map(|p| {
            let (lo, hi) = back_interval(stages, (p, p));
            (hi - lo + 1) as usize
        })
        .max()
        .unwrap_or(1)
}

/// Multiply-accumulates per input position, summed over all convolutions.
fn macs_per_input_step(stages: &[Stage], unit: usize) -> (usize, usize) {
    let mut u = unit;
    let mut macs = 0;
    for s in stages {
        match s {
            Stage::Conv { k, cin, cout, .. } => macs += k * cin * cout * u,
            Stage::Upsample(r) => u *= r,
            Stage::Residual { main, skip } => {
                let (a, ua) = macs_per_input_step(main, u);
                let (b, _) = macs_per_input_step(skip, u);
                macs += a + b;
                u = ua;
            }
        }
    }
    (macs, u)
}

/// Multiply-accumulates per output sample.
pub fn macs_per_sample(stages: &[Stage]) -> f64 {
    let (macs, u) = macs_per_input_step(stages, 1);
    macs as f64 / u as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorAnalysis {
    pub layer_count: usize,
    /// In conditioning frames.
    pub receptive_field_steps: usize,
    /// Two operations per multiply-accumulate, convolutions only.
    pub flops_per_sample: f64,
    pub macs_per_sample: f64,
}

pub fn analyze_generator(plan: &GeneratorPlan) -> Result<GeneratorAnalysis> {
    plan.validate()?;
    let s = generator_stages(plan);
    let macs = macs_per_sample(&s);
    Ok(GeneratorAnalysis {
        layer_count: layer_count(&s),
        receptive_field_steps: receptive_field(&s),
        flops_per_sample: 2.0 * macs,
        macs_per_sample: macs,
    })
}

/// `(layer, t, channels)` rows for a conditioning length `tc`.
pub fn shape_trace(plan: &GeneratorPlan, tc: usize) -> Vec<(String, usize, usize)> {
    let mut rows = vec![("input".to_string(), tc, plan.feature_dim)];
    rows.push(("conv_k3".to_string(), tc, plan.base_channels));
    let mut t = tc;
    for b in &plan.blocks {
        t *= b.factor;
        let name = if b.factor > 1 {
            format!("gblock_up{}", b.factor)
        } else {
            "gblock".to_string()
        };
        rows.push((name, t, b.out_ch));
    }
    rows.push(("conv_k3".to_string(), t, 1));
    rows
}

/// `(k, conditional factors, blocks, depth, unconditional factors, blocks, depth)`.
pub type DiscriminatorRow = (usize, Vec<usize>, usize, usize, Vec<usize>, usize, usize);

pub fn discriminator_table(clip_len: usize, channels: ChannelSchedule, feature_dim: usize) -> Result<Vec<DiscriminatorRow>> {
    rwd::MAIN_KS
        .iter()
        .map(|&k| {
            let plan = |conditional| {
                let cfg = RwdConfig {
                    k,
                    window: Window::Base(rwd::BASE_WINDOW),
                    conditional,
                    channels,
                };
                rwd::discriminator_plan(&cfg, clip_len, rwd::LAMBDA, feature_dim)
            };
            let (c, u) = (plan(true)?, plan(false)?);
            Ok((k, c.factors.clone(), c.num_blocks(), c.depth(), u.factors.clone(), u.num_blocks(), u.depth()))
        })
        .collect()
}

fn join(v: &[usize]) -> String {
    if v.is_empty() {
        "-".into()
    } else {
        v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
    }
}

/// `key: value` report for a profile's generator and discriminators.
pub fn report(plan: &GeneratorPlan, tc: usize, channels: ChannelSchedule) -> Result<String> {
    let a = analyze_generator(plan)?;
    let clip = tc * plan.lambda;
    let mut out = String::new();
    let w = &mut out;
    writeln!(w, "generator_layers: {}", a.layer_count).ok();
    writeln!(w, "generator_receptive_field_steps: {}", a.receptive_field_steps).ok();
    writeln!(w, "generator_flops_per_sample: {:.6}", a.flops_per_sample).ok();
    writeln!(w, "generator_macs_per_sample: {:.6}", a.macs_per_sample).ok();
    writeln!(w, "generator_upsampling: {}", plan.upsampling()).ok();
    for (i, (name, t, ch)) in shape_trace(plan, tc).iter().enumerate() {
        writeln!(w, "generator_trace_{i}: {name} t={t} ch={ch}").ok();
    }
    for (k, cf, cb, cd, uf, ub, ud) in discriminator_table(clip.max(rwd::BASE_WINDOW * 15), channels, plan.feature_dim)? {
        writeln!(
            w,
            "discriminator_k{k}: conditional factors={} blocks={cb} depth={cd}; unconditional factors={} blocks={ub} depth={ud}",
            join(&cf),
            join(&uf)
        )
        .ok();
    }
    for conditional in [true, false] {
        let cfg = RwdConfig {
            k: 15,
            window: Window::Base(rwd::BASE_WINDOW),
            conditional,
            channels,
        };
        let n = clip.max(cfg.span(clip));
        let label = if conditional { "conditional" } else { "unconditional" };
        writeln!(w, "windows_k15_{label}: {}", rwd::window_support(n, &cfg, rwd::LAMBDA)?).ok();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_conv_sees_three_steps() {
        assert_eq!(receptive_field(&[conv(3, 1, 1, 1, true)]), 3);
        assert_eq!(receptive_field(&[conv(3, 4, 1, 1, true)]), 9);
    }

    #[test]
    fn upsample_then_conv_merges_phases() {
        // Upsample by 2 then a k3 conv: output 0 reads upsampled -1..1, i.e. inputs -1..0.
        let s = [Stage::Upsample(2), conv(3, 1, 1, 1, true)];
        assert_eq!(receptive_field(&s), 2);
        assert_eq!(macs_per_sample(&s), 3.0);
    }

    #[test]
    fn residual_takes_the_wider_branch() {
        let s = [Stage::Residual {
            main: vec![conv(3, 8, 1, 1, true)],
            skip: vec![conv(1, 1, 1, 1, false)],
        }];
        assert_eq!(receptive_field(&s), 17);
        assert_eq!(layer_count(&s), 1);
    }

    #[test]
    fn toy_counts() {
        let a = analyze_generator(&GeneratorPlan::toy()).unwrap();
        assert_eq!(a.layer_count, 30);
        assert_eq!(a.flops_per_sample, 2.0 * a.macs_per_sample);
    }
}
