//! Residual blocks and conditional batch normalization.
//!
//! All sequence tensors are `[batch, time, channels]`. Parameters live in a
//! [`ParamStore`] under dotted paths and are bound into a [`Graph`] through a
//! [`Binder`], which also applies spectral normalization.

use std::collections::{BTreeMap, HashMap};

use gantts_tensor::{estimate_sigma, sigma_from, Gradients, Graph, ParamGrads, ParamStore, Rng, Tensor, Var};

use crate::error::{invalid, Result};
use crate::generator::Masks;

pub const CBN_MOMENTUM: f64 = 0.99;
pub const CBN_EPS: f64 = 1e-5;
const KERNEL: usize = 3;
pub const GBLOCK_DILATIONS: [usize; 4] = [1, 2, 4, 8];
pub const DBLOCK_DILATIONS: [usize; 2] = [1, 2];

/// How spectrally normalized weights obtain `σ̂`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnMode {
    /// Raw weights.
    Off,
    /// One power iteration per bind; the stored `u` advances.
    Update,
    /// One power iteration on a scratch copy of `u`.
    Frozen,
}

/// Binds stored parameters into a graph, at most once per path.
pub struct Binder<'s> {
    store: &'s mut ParamStore,
    trainable: bool,
    sn: SnMode,
    leaves: BTreeMap<String, Var>,
    effective: HashMap<String, Var>,
    sigmas: BTreeMap<String, f64>,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s mut ParamStore, trainable: bool, sn: SnMode) -> Self {
        Self {
            store,
            trainable,
            sn,
            leaves: BTreeMap::new(),
            effective: HashMap::new(),
            sigmas: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        self.store
    }

    /// The parameter at `path`, divided by `σ̂` if it carries spectral state.
    /// `σ̂` is treated as a constant in the backward pass.
    pub fn weight(&mut self, g: &mut Graph, path: &str) -> Result<Var> {
        if let Some(&v) = self.effective.get(path) {
            return Ok(v);
        }
        let param = self.store.get_mut(path)?;
        let leaf = if self.trainable {
            g.param(param.value.clone())
        } else {
            g.constant(param.value.clone())
        };
        let out = match (self.sn, param.sn_u.as_mut()) {
            (SnMode::Update, Some(u)) => {
                let sigma = estimate_sigma(&param.value, u, 1)?;
                self.sigmas.insert(path.to_string(), sigma);
                g.scale(leaf, 1.0 / sigma)
            }
            (SnMode::Frozen, Some(u)) => {
                let sigma = sigma_from(&param.value, u)?;
                self.sigmas.insert(path.to_string(), sigma);
                g.scale(leaf, 1.0 / sigma)
            }
            _ => leaf,
        };
        self.leaves.insert(path.to_string(), leaf);
        self.effective.insert(path.to_string(), out);
        Ok(out)
    }

    /// Gradients of every bound parameter, keyed by path.
    pub fn grads(&self, grads: &Gradients) -> ParamGrads {
        self.leaves
            .iter()
            .filter_map(|(p, v)| grads.get(*v).map(|t| (p.clone(), t.clone())))
            .collect()
    }

    /// `σ̂` used for each spectrally normalized parameter bound so far.
    pub fn sigmas(&self) -> &BTreeMap<String, f64> {
        &self.sigmas
    }

    pub fn leaf(&self, path: &str) -> Option<Var> {
        self.leaves.get(path).copied()
    }
}

/// Batch-norm statistics source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Standing statistics if accumulated, otherwise running statistics.
    Infer,
    /// Batch statistics, summed into the standing-statistics accumulators.
    Accumulate,
}

fn buf(prefix: &str, name: &str) -> String {
    format!("{prefix}.{name}")
}

/// Accumulated standing statistics of one CBN instance.
#[derive(Debug, Clone, PartialEq)]
pub struct StandingStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

pub fn standing_stats(store: &ParamStore, prefix: &str) -> Option<StandingStats> {
    let mean = store.buffer(&buf(prefix, "standing_mean"))?;
    let var = store.buffer(&buf(prefix, "standing_var"))?;
    let count = store.buffer(&buf(prefix, "standing_count"))?;
    Some(StandingStats {
        mean: mean.data().to_vec(),
        var: var.data().to_vec(),
        count: count.item() as usize,
    })
}

pub fn init_cbn(store: &mut ParamStore, prefix: &str, cond_dim: usize, channels: usize, rng: &mut Rng) -> Result<()> {
    for head in ["gamma", "beta"] {
        store.add_weight(format!("{prefix}.{head}.weight"), &[cond_dim, channels], false, rng)?;
        store.add_bias(format!("{prefix}.{head}.bias"), channels)?;
    }
    Ok(())
}

/// `γ(cond) ⊙ (h − μ) / √(σ² + ε) + β(cond)` with `γ = 1 + linear(cond)`,
/// `β = linear(cond)`. `h` is `[B, T, C]`, `cond` is `[B, Dz]`.
pub fn cbn_forward(g: &mut Graph, b: &mut Binder, prefix: &str, h: Var, cond: Var, mode: BnMode) -> Result<Var> {
    let &[_, _, ch] = g.shape(h) else {
        return Err(invalid("cbn_forward", format!("expected [batch, time, ch], got {:?}", g.shape(h))));
    };
    let normalized = match mode {
        BnMode::Train | BnMode::Accumulate => {
            let (n, mean, var) = g.batch_norm(h, CBN_EPS)?;
            let store = b.store_mut();
            if mode == BnMode::Train {
                let (rm, rv) = match (
                    store.buffer(&buf(prefix, "running_mean")),
                    store.buffer(&buf(prefix, "running_var")),
                ) {
                    (Some(m), Some(v)) => (m.data().to_vec(), v.data().to_vec()),
                    _ => (vec![0.0; ch], vec![1.0; ch]),
                };
                let blend = |r: &[f64], x: &[f64]| -> Vec<f64> {
                    r.iter().zip(x).map(|(r, x)| CBN_MOMENTUM * r + (1.0 - CBN_MOMENTUM) * x).collect()
                };
                store.set_buffer(buf(prefix, "running_mean"), Tensor::from_vec(blend(&rm, &mean)));
                store.set_buffer(buf(prefix, "running_var"), Tensor::from_vec(blend(&rv, &var)));
            } else {
                for (name, x) in [("acc_mean", &mean), ("acc_var", &var)] {
                    let key = buf(prefix, name);
                    let sum = match store.buffer(&key) {
                        Some(s) => s.data().iter().zip(x.iter()).map(|(a, b)| a + b).collect(),
                        None => x.clone(),
                    };
                    store.set_buffer(key, Tensor::from_vec(sum));
                }
                let key = buf(prefix, "acc_count");
                let count = store.buffer(&key).map_or(0.0, Tensor::item);
                store.set_buffer(key, Tensor::scalar(count + 1.0));
            }
            n
        }
        BnMode::Infer => {
            let store = b.store();
            let stats = ["standing", "running"].iter().find_map(|src| {
                let m = store.buffer(&buf(prefix, &format!("{src}_mean")))?;
                let v = store.buffer(&buf(prefix, &format!("{src}_var")))?;
                Some((m.data().to_vec(), v.data().to_vec()))
            });
            let Some((mean, var)) = stats else {
                return Err(invalid("cbn_forward", format!("{prefix}: inference before any statistics exist")));
            };
            g.normalize_with(h, &mean, &var, CBN_EPS)?
        }
    };
    let wg = b.weight(g, &format!("{prefix}.gamma.weight"))?;
    let bg = b.weight(g, &format!("{prefix}.gamma.bias"))?;
    let wb = b.weight(g, &format!("{prefix}.beta.weight"))?;
    let bb = b.weight(g, &format!("{prefix}.beta.bias"))?;
    let gamma = g.linear(cond, wg, Some(bg))?;
    let gamma = g.add_scalar(gamma, 1.0);
    let beta = g.linear(cond, wb, Some(bb))?;
    Ok(g.modulate(normalized, gamma, beta)?)
}

/// Moves the accumulators of every CBN under `prefix` into standing statistics.
pub(crate) fn finalize_standing(store: &mut ParamStore, prefix: &str) -> Result<()> {
    let keys: Vec<String> = store
        .buffers()
        .map(|(k, _)| k.clone())
        .filter(|k| k.starts_with(prefix) && k.ends_with(".acc_count"))
        .collect();
    for key in keys {
        let base = key.trim_end_matches(".acc_count").to_string();
        let count = store.remove_buffer(&key).map_or(0.0, |t| t.item());
        if count < 1.0 {
            return Err(invalid("accumulate_standing_stats", "no accumulated passes"));
        }
        for stat in ["mean", "var"] {
            let acc = store
                .remove_buffer(&buf(&base, &format!("acc_{stat}")))
                .ok_or_else(|| invalid("accumulate_standing_stats", format!("{base}: missing accumulator")))?;
            store.set_buffer(buf(&base, &format!("standing_{stat}")), acc.map(|v| v / count));
        }
        store.set_buffer(buf(&base, "standing_count"), Tensor::scalar(count));
    }
    Ok(())
}

/// Drops standing statistics and pending accumulators under `prefix`.
pub(crate) fn reset_standing(store: &mut ParamStore, prefix: &str) {
    let keys: Vec<String> = store
        .buffers()
        .map(|(k, _)| k.clone())
        .filter(|k| k.starts_with(prefix) && (k.contains(".standing_") || k.contains(".acc_")))
        .collect();
    for k in keys {
        store.remove_buffer(&k);
    }
}

fn conv(
    g: &mut Graph,
    b: &mut Binder,
    path: &str,
    x: Var,
    dilation: usize,
    bias: bool,
) -> Result<Var> {
    let w = b.weight(g, &format!("{path}.weight"))?;
    let bv = if bias {
        Some(b.weight(g, &format!("{path}.bias"))?)
    } else {
        None
    };
    Ok(g.conv1d(x, w, bv, dilation)?)
}

fn add_conv(store: &mut ParamStore, path: &str, k: usize, cin: usize, cout: usize, bias: bool, rng: &mut Rng) -> Result<()> {
    store.add_weight(format!("{path}.weight"), &[k, cin, cout], true, rng)?;
    if bias {
        store.add_bias(format!("{path}.bias"), cout)?;
    }
    Ok(())
}

fn masked(g: &mut Graph, x: Var, masks: Option<&Masks>, unit: usize) -> Result<Var> {
    match masks {
        Some(m) => Ok(g.mask_time(x, m.at(unit)?)?),
        None => Ok(x),
    }
}

/// Generator block: input channels `M`, output `N`, upsample factor `r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GBlockConfig {
    pub in_ch: usize,
    pub out_ch: usize,
    pub factor: usize,
}

impl GBlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.factor == 0 || self.in_ch == 0 || self.out_ch == 0 {
            return Err(invalid("gblock", format!("degenerate config {self:?}")));
        }
        if self.in_ch != self.out_ch && self.in_ch != 2 * self.out_ch {
            return Err(invalid("gblock", format!("M must equal N or 2N, got {self:?}")));
        }
        Ok(())
    }

    pub fn has_skip_conv(&self) -> bool {
        self.in_ch != self.out_ch
    }
}

pub fn init_gblock(store: &mut ParamStore, prefix: &str, cfg: &GBlockConfig, cond_dim: usize, rng: &mut Rng) -> Result<()> {
    cfg.validate()?;
    let (m, n) = (cfg.in_ch, cfg.out_ch);
    init_cbn(store, &format!("{prefix}.cbn1"), cond_dim, m, rng)?;
    add_conv(store, &format!("{prefix}.a.conv1"), KERNEL, m, n, true, rng)?;
    init_cbn(store, &format!("{prefix}.cbn2"), cond_dim, n, rng)?;
    add_conv(store, &format!("{prefix}.a.conv2"), KERNEL, n, n, true, rng)?;
    if cfg.has_skip_conv() {
        add_conv(store, &format!("{prefix}.a.skip"), 1, m, n, false, rng)?;
    }
    init_cbn(store, &format!("{prefix}.cbn3"), cond_dim, n, rng)?;
    add_conv(store, &format!("{prefix}.b.conv1"), KERNEL, n, n, true, rng)?;
    init_cbn(store, &format!("{prefix}.cbn4"), cond_dim, n, rng)?;
    add_conv(store, &format!("{prefix}.b.conv2"), KERNEL, n, n, true, rng)?;
    Ok(())
}

/// `h` is `[B, T, M]`; output `[B, rT, N]`. `unit` is the cumulative
/// upsampling of `h` relative to the conditioning rate (selects masks).
#[allow(clippy::too_many_arguments)]
pub fn gblock_forward(
    g: &mut Graph,
    b: &mut Binder,
    prefix: &str,
    cfg: &GBlockConfig,
    h: Var,
    cond: Var,
    mode: BnMode,
    masks: Option<&Masks>,
    unit: usize,
) -> Result<Var> {
    cfg.validate()?;
    let got = g.shape(h).last().copied().unwrap_or(0);
    if got != cfg.in_ch {
        return Err(invalid("gblock_forward", format!("{prefix}: expected {} input channels, got {got}", cfg.in_ch)));
    }
    let up = unit * cfg.factor;
    let [d1, d2, d3, d4] = GBLOCK_DILATIONS;

    let x = cbn_forward(g, b, &format!("{prefix}.cbn1"), h, cond, mode)?;
    let x = g.relu(x);
    let x = g.upsample_nearest(x, cfg.factor)?;
    let x = masked(g, x, masks, up)?;
    let x = conv(g, b, &format!("{prefix}.a.conv1"), x, d1, true)?;
    let x = cbn_forward(g, b, &format!("{prefix}.cbn2"), x, cond, mode)?;
    let x = g.relu(x);
    let x = masked(g, x, masks, up)?;
    let x = conv(g, b, &format!("{prefix}.a.conv2"), x, d2, true)?;

    let mut skip = g.upsample_nearest(h, cfg.factor)?;
    if cfg.has_skip_conv() {
        skip = masked(g, skip, masks, up)?;
        skip = conv(g, b, &format!("{prefix}.a.skip"), skip, 1, false)?;
    }
    let a = g.add(x, skip)?;

    let y = cbn_forward(g, b, &format!("{prefix}.cbn3"), a, cond, mode)?;
    let y = g.relu(y);
    let y = masked(g, y, masks, up)?;
    let y = conv(g, b, &format!("{prefix}.b.conv1"), y, d3, true)?;
    let y = cbn_forward(g, b, &format!("{prefix}.cbn4"), y, cond, mode)?;
    let y = g.relu(y);
    let y = masked(g, y, masks, up)?;
    let y = conv(g, b, &format!("{prefix}.b.conv2"), y, d4, true)?;
    Ok(g.add(y, a)?)
}

/// Discriminator block. `cond_features` is the conditioning width for the
/// conditional variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DBlockConfig {
    pub in_ch: usize,
    pub out_ch: usize,
    pub factor: usize,
    pub cond_features: Option<usize>,
}

impl DBlockConfig {
    pub fn stacked_ch(&self) -> usize {
        self.in_ch * self.factor
    }

    pub fn has_skip_conv(&self) -> bool {
        self.stacked_ch() != self.out_ch
    }

    pub fn is_conditional(&self) -> bool {
        self.cond_features.is_some()
    }
}

pub fn init_dblock(store: &mut ParamStore, prefix: &str, cfg: &DBlockConfig, rng: &mut Rng) -> Result<()> {
    if cfg.factor == 0 {
        return Err(invalid("dblock", "downsample factor must be >= 1"));
    }
    let cin = cfg.stacked_ch();
    add_conv(store, &format!("{prefix}.conv1"), KERNEL, cin, cfg.out_ch, true, rng)?;
    add_conv(store, &format!("{prefix}.conv2"), KERNEL, cfg.out_ch, cfg.out_ch, true, rng)?;
    if cfg.has_skip_conv() {
        add_conv(store, &format!("{prefix}.skip"), 1, cin, cfg.out_ch, false, rng)?;
    }
    if let Some(f) = cfg.cond_features {
        add_conv(store, &format!("{prefix}.cond_embed"), 1, f, cfg.out_ch, false, rng)?;
    }
    Ok(())
}

/// `h` is `[B, T, Cin]`; output `[B, T/f, Cout]`. `cond` (`[B, T/f, F]`) is
/// required exactly when the block is conditional.
pub fn dblock_forward(
    g: &mut Graph,
    b: &mut Binder,
    prefix: &str,
    cfg: &DBlockConfig,
    h: Var,
    cond: Option<Var>,
) -> Result<Var> {
    let &[_, time, ch] = g.shape(h) else {
        return Err(invalid("dblock_forward", format!("expected [batch, time, ch], got {:?}", g.shape(h))));
    };
    if ch != cfg.in_ch {
        return Err(invalid("dblock_forward", format!("{prefix}: expected {} channels, got {ch}", cfg.in_ch)));
    }
    if cfg.factor == 0 || time % cfg.factor != 0 {
        return Err(invalid(
            "dblock_forward",
            format!("{prefix}: length {time} not divisible by {}", cfg.factor),
        ));
    }
    let [d1, d2] = DBLOCK_DILATIONS;
    let x = if cfg.factor > 1 { g.block_reshape(h, cfg.factor)? } else { h };

    let y = g.relu(x);
    let mut y = conv(g, b, &format!("{prefix}.conv1"), y, d1, true)?;
    match (cfg.cond_features, cond) {
        (Some(_), Some(c)) => {
            let (ct, yt) = (g.shape(c)[1], g.shape(y)[1]);
            if ct != yt {
                return Err(invalid(
                    "cond_dblock_forward",
                    format!("{prefix}: conditioning length {ct} != activation length {yt}"),
                ));
            }
            let e = conv(g, b, &format!("{prefix}.cond_embed"), c, 1, false)?;
            y = g.add(y, e)?;
        }
        (None, None) => {}
        (Some(_), None) => return Err(invalid("cond_dblock_forward", format!("{prefix}: missing conditioning"))),
        (None, Some(_)) => return Err(invalid("dblock_forward", format!("{prefix}: unexpected conditioning"))),
    }
    let y = g.relu(y);
    let y = conv(g, b, &format!("{prefix}.conv2"), y, d2, true)?;

    let skip = if cfg.has_skip_conv() {
        conv(g, b, &format!("{prefix}.skip"), x, 1, false)?
    } else {
        x
    };
    Ok(g.add(y, skip)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gblock_channel_rule() {
        assert!(GBlockConfig { in_ch: 8, out_ch: 4, factor: 2 }.validate().is_ok());
        assert!(GBlockConfig { in_ch: 8, out_ch: 8, factor: 1 }.validate().is_ok());
        assert!(GBlockConfig { in_ch: 8, out_ch: 3, factor: 2 }.validate().is_err());
        assert!(GBlockConfig { in_ch: 8, out_ch: 8, factor: 0 }.validate().is_err());
    }

    #[test]
    fn infer_without_statistics_fails() {
        let mut rng = Rng::new(0);
        let mut store = ParamStore::new();
        init_cbn(&mut store, "n", 4, 2, &mut rng).unwrap();
        let mut g = Graph::new();
        let h = g.constant(Tensor::zeros(&[1, 3, 2]));
        let c = g.constant(Tensor::zeros(&[1, 4]));
        let mut b = Binder::new(&mut store, false, SnMode::Off);
        assert!(cbn_forward(&mut g, &mut b, "n", h, c, BnMode::Infer).is_err());
        cbn_forward(&mut g, &mut b, "n", h, c, BnMode::Train).unwrap();
        assert!(cbn_forward(&mut g, &mut b, "n", h, c, BnMode::Infer).is_ok());
    }

    #[test]
    fn running_stats_blend_with_momentum() {
        let mut rng = Rng::new(1);
        let mut store = ParamStore::new();
        init_cbn(&mut store, "n", 2, 1, &mut rng).unwrap();
        let mut g = Graph::new();
        let h = g.constant(Tensor::from_parts(&[1, 2, 1], vec![1.0, 3.0]));
        let c = g.constant(Tensor::zeros(&[1, 2]));
        let mut b = Binder::new(&mut store, false, SnMode::Off);
        cbn_forward(&mut g, &mut b, "n", h, c, BnMode::Train).unwrap();
        let m = store.buffer("n.running_mean").unwrap().item();
        let v = store.buffer("n.running_var").unwrap().item();
        assert!((m - 0.01 * 2.0).abs() < 1e-15);
        assert!((v - (0.99 + 0.01)).abs() < 1e-15);
    }

    #[test]
    fn binder_caches_and_updates_u_once() {
        let mut rng = Rng::new(2);
        let mut store = ParamStore::new();
        store.add_weight("w", &[3, 2, 2], true, &mut rng).unwrap();
        let u0 = store.get("w").unwrap().sn_u.clone().unwrap();
        let mut g = Graph::new();
        let mut b = Binder::new(&mut store, true, SnMode::Update);
        let a = b.weight(&mut g, "w").unwrap();
        let again = b.weight(&mut g, "w").unwrap();
        assert_eq!(a, again);
        let mut expect = u0.clone();
        estimate_sigma(store.value("w").unwrap(), &mut expect, 1).unwrap();
        assert_eq!(store.get("w").unwrap().sn_u.as_ref().unwrap(), &expect);

        let before = store.get("w").unwrap().sn_u.clone();
        let mut g = Graph::new();
        let mut b = Binder::new(&mut store, false, SnMode::Frozen);
        b.weight(&mut g, "w").unwrap();
        assert_eq!(store.get("w").unwrap().sn_u, before);
    }
}
