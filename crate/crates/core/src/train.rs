//! Hinge-loss adversarial training with checkpoints and metric logging.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use gantts_tensor::{adam_step, ema_update, sigma_from, AdamConfig, Graph, ParamStore, Rng, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::blocks::{BnMode, Binder, SnMode};
use crate::data::{self, SyntheticDatasetConfig};
use crate::distances::{estimate_from_features, DistanceReport, FeatureConfig, FeatureMatrix, SurrogateExtractor};
use crate::error::{io_err, CoreError, Result};
use crate::generator::{self, accumulate_standing_stats, generate, generator_forward, sample_latents, GeneratorPlan};
use crate::rwd::{self, ablation_config, build_ensemble, ensemble_forward, ChannelSchedule, DiscriminatorPlan, EnsembleConfig};

// Root stream layout: init, per-step, evaluation.
const STREAM_INIT: u64 = 0;
const STREAM_STEP: u64 = 1;
const STREAM_EVAL: u64 = 2;
const EVAL_CHUNK: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Toy,
    Full,
}

impl Profile {
    pub fn generator_plan(self, feature_dim: usize) -> GeneratorPlan {
        match self {
            Profile::Toy => GeneratorPlan::scaled(feature_dim, generator::TOY_BASE),
            Profile::Full => GeneratorPlan::scaled(feature_dim, 768),
        }
    }

    pub fn channels(self) -> ChannelSchedule {
        match self {
            Profile::Toy => ChannelSchedule::TOY,
            Profile::Full => ChannelSchedule::FULL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub profile: Profile,
    pub ensemble: String,
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub ema_decay: f64,
    /// Effective decay `min(ema_decay, (1 + n)/(10 + n))` after `n` updates.
    pub ema_warmup: bool,
    pub ortho_beta: f64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub eval_clips: usize,
    pub standing_passes: usize,
    pub standing_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            profile: Profile::Toy,
            ensemble: "rwd_star_240".into(),
            seed: 0,
            steps: 2000,
            batch_size: 8,
            lr_g: 3e-4,
            lr_d: 6e-4,
            adam_beta1: 0.0,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            ema_decay: 0.9999,
            ema_warmup: true,
            ortho_beta: 1e-4,
            log_every: 250,
            checkpoint_every: 500,
            eval_clips: 500,
            standing_passes: generator::DEFAULT_STANDING_PASSES,
            standing_batch: 8,
        }
    }
}

/// Complete run configuration, one TOML table per section.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub train: TrainConfig,
    pub data: SyntheticDatasetConfig,
    pub features: FeatureConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            CoreError::Config(m) => CoreError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        let bad = |m: String| Err(CoreError::Config(m));
        self.data.validate()?;
        self.features.validate()?;
        if t.batch_size == 0 || t.standing_batch == 0 || t.standing_passes == 0 {
            return bad("batch_size, standing_batch and standing_passes must be >= 1".into());
        }
        if t.eval_clips < 2 {
            return bad("eval_clips must be >= 2".into());
        }
        if t.log_every == 0 || t.checkpoint_every == 0 {
            return bad("log_every and checkpoint_every must be >= 1".into());
        }
        if !(t.lr_g >= 0.0 && t.lr_d >= 0.0 && t.ortho_beta >= 0.0) {
            return bad("learning rates and ortho_beta must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&t.ema_decay) {
            return bad(format!("ema_decay {} outside [0, 1]", t.ema_decay));
        }
        if self.data.clip_len() < self.features.window {
            return bad("clips are shorter than the feature window".into());
        }
        if self.data.lambda != rwd::LAMBDA {
            return bad(format!("lambda must be {}", rwd::LAMBDA));
        }
        ablation_config(&t.ensemble, t.profile.channels())?;
        Ok(())
    }

    pub fn generator_plan(&self) -> GeneratorPlan {
        self.train.profile.generator_plan(data::FEATURE_DIM)
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.train.adam_beta1,
            beta2: self.train.adam_beta2,
            eps: self.train.adam_eps,
        }
    }
}

/// Hinge losses on plain scores: `(mean(max(0, 1 − r)) + mean(max(0, 1 + f)), −mean(f))`.
pub fn hinge_losses(real: &[f64], fake: &[f64]) -> Result<(f64, f64)> {
    if real.is_empty() || fake.is_empty() {
        return Err(CoreError::Config("hinge_losses: empty score list".into()));
    }
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&x| f(x)).sum::<f64>() / v.len() as f64;
    let d = mean(real, &|s| (1.0 - s).max(0.0)) + mean(fake, &|s| (1.0 + s).max(0.0));
    Ok((d, -mean(fake, &|s| s)))
}

/// Discriminator hinge loss on score vars.
pub fn hinge_d(g: &mut Graph, real: Var, fake: Var) -> Var {
    let r = g.scale(real, -1.0);
    let r = g.add_scalar(r, 1.0);
    let r = g.relu(r);
    let r = g.mean_all(r);
    let f = g.add_scalar(fake, 1.0);
    let f = g.relu(f);
    let f = g.mean_all(f);
    g.add(r, f).expect("scalar shapes agree")
}

pub fn hinge_g(g: &mut Graph, fake: Var) -> Var {
    let m = g.mean_all(fake);
    g.scale(m, -1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss_d: f64,
    pub loss_g: f64,
    /// Range of `σ̂` of the normalized discriminator weights.
    pub sn_min: f64,
    pub sn_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub cfdsd_s: f64,
    pub ckdsd_s: f64,
    pub fdsd_s: f64,
    pub kdsd_s: f64,
    pub loss_d: f64,
    pub loss_g: f64,
    /// Range of normalized discriminator `σ̂` at the last step, if any step ran.
    pub sn_min: Option<f64>,
    pub sn_max: Option<f64>,
}

impl MetricRow {
    pub fn log_line(&self) -> String {
        format!(
            "step {} cfdsd_s {:.6e} ckdsd_s {:.6e} fdsd_s {:.6e} kdsd_s {:.6e} loss_d {:.6e} loss_g {:.6e}",
            self.step, self.cfdsd_s, self.ckdsd_s, self.fdsd_s, self.kdsd_s, self.loss_d, self.loss_g
        )
    }
}

/// Held-out conditioning with matched and independent real features.
pub struct EvalSet {
    pub cond: Vec<Tensor>,
    pub matched: FeatureMatrix,
    pub independent: FeatureMatrix,
    pub z: Tensor,
}

impl EvalSet {
    pub fn build(cfg: &Config, plan: &GeneratorPlan, ex: &SurrogateExtractor) -> Result<Self> {
        let n = cfg.train.eval_clips;
        let root = Rng::new(cfg.train.seed).split(STREAM_EVAL);
        let mut cond = Vec::with_capacity(n);
        let mut matched = Vec::with_capacity(n);
        let mut independent = Vec::with_capacity(n);
        for i in 0..n as u64 {
            let (a, f) = data::synth_example(&cfg.data, &mut root.split(0).split(i))?;
            matched.push(ex.clip_features(&a)?);
            cond.push(f);
            let (b, _) = data::synth_example(&cfg.data, &mut root.split(1).split(i))?;
            independent.push(ex.clip_features(&b)?);
        }
        let z = sample_latents(plan, n, None, &mut root.split(2));
        Ok(Self {
            cond,
            matched: FeatureMatrix::from_rows(&matched)?,
            independent: FeatureMatrix::from_rows(&independent)?,
            z,
        })
    }
}

/// Generates the evaluation clips with standing statistics accumulated on a
/// copy of `store`.
pub fn eval_generator(
    store: &ParamStore,
    plan: &GeneratorPlan,
    cfg: &Config,
    eval: &EvalSet,
    ex: &SurrogateExtractor,
) -> Result<DistanceReport> {
    let mut s = store.clone();
    let mut rng = Rng::new(cfg.train.seed).split(STREAM_EVAL).split(3);
    accumulate_standing_stats(&mut s, plan, cfg.train.standing_passes, cfg.train.standing_batch, &eval.cond, &mut rng)?;
    let n = eval.cond.len();
    let dz = plan.cond_dim();
    let mut rows = Vec::with_capacity(n);
    for start in (0..n).step_by(EVAL_CHUNK) {
        let len = EVAL_CHUNK.min(n - start);
        let refs: Vec<&Tensor> = eval.cond[start..start + len].iter().collect();
        let tc = refs[0].shape()[0];
        let cond = Tensor::concat0(&refs)?.reshape(&[len, tc, plan.feature_dim])?;
        let z = Tensor::from_parts(&[len, dz], eval.z.data()[start * dz..(start + len) * dz].to_vec());
        let audio = generate(&mut s, plan, &cond, &z, BnMode::Infer, None)?;
        for clip in audio.data().chunks(tc * plan.lambda) {
            rows.push(ex.clip_features(clip)?);
        }
    }
    estimate_from_features(&FeatureMatrix::from_rows(&rows)?, Some(&eval.matched), Some(&eval.independent))
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainerFile {
    step: u64,
    config: Config,
    log: Vec<MetricRow>,
    last: Option<StepStats>,
}

pub struct Trainer {
    pub cfg: Config,
    pub plan: GeneratorPlan,
    pub ensemble: EnsembleConfig,
    pub d_plans: Vec<DiscriminatorPlan>,
    pub gen: ParamStore,
    pub ema: ParamStore,
    pub disc: ParamStore,
    pub step: u64,
    pub log: Vec<MetricRow>,
    pub last: Option<StepStats>,
    extractor: SurrogateExtractor,
    eval: Option<EvalSet>,
}

impl Trainer {
    pub fn new(cfg: Config) -> Result<Self> {
        cfg.validate()?;
        let plan = cfg.generator_plan();
        let ensemble = ablation_config(&cfg.train.ensemble, cfg.train.profile.channels())?;
        let init = Rng::new(cfg.train.seed).split(STREAM_INIT);
        let gen = generator::build_generator(&plan, &mut init.split(0))?;
        let (disc, d_plans) = build_ensemble(&ensemble, cfg.data.clip_len(), cfg.data.lambda, data::FEATURE_DIM, &mut init.split(1))?;
        let extractor = SurrogateExtractor::new(cfg.features)?;
        Ok(Self {
            ema: gen.clone(),
            cfg,
            plan,
            ensemble,
            d_plans,
            gen,
            disc,
            step: 0,
            log: Vec::new(),
            last: None,
            extractor,
            eval: None,
        })
    }

    fn step_rng(&self, step: u64) -> Rng {
        Rng::new(self.cfg.train.seed).split(STREAM_STEP).split(step)
    }

    /// Real clips `[B, N, 1]` and conditioning `[B, Tc, F]` of a step.
    pub fn batch(&self, step: u64) -> Result<(Tensor, Tensor)> {
        data::synth_batch(&self.cfg.data, self.cfg.train.batch_size, &self.step_rng(step).split(0))
    }

    fn frozen_scores(&self, g: &mut Graph, disc: &mut ParamStore, x: Var, c: Var, rng: &Rng) -> Result<Var> {
        let mut b = Binder::new(disc, false, SnMode::Frozen);
        ensemble_forward(g, &mut b, &self.ensemble, &self.d_plans, x, Some(c), self.cfg.data.lambda, rng)
    }

    /// One discriminator update followed by one generator update and an EMA update.
    pub fn train_step(&mut self) -> Result<StepStats> {
        let step = self.step;
        let r = self.step_rng(step);
        let batch = self.cfg.train.batch_size;
        let (real, cond) = self.batch(step)?;

        // Discriminator update on real and generated clips sharing conditioning.
        let z = sample_latents(&self.plan, batch, None, &mut r.split(1));
        let fake = generate(&mut self.gen, &self.plan, &cond, &z, BnMode::Train, None)?;
        let x = Tensor::concat0(&[&real, &fake])?;
        let c2 = Tensor::concat0(&[&cond, &cond])?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let cv = g.constant(c2);
        let mut disc = std::mem::take(&mut self.disc);
        let res = (|| -> Result<(f64, gantts_tensor::ParamGrads, Vec<(String, f64)>)> {
            let mut b = Binder::new(&mut disc, true, SnMode::Update);
            let s = ensemble_forward(&mut g, &mut b, &self.ensemble, &self.d_plans, xv, Some(cv), self.cfg.data.lambda, &r.split(2))?;
            let sr = g.slice_rows(s, 0, batch)?;
            let sf = g.slice_rows(s, batch, batch)?;
            let loss = hinge_d(&mut g, sr, sf);
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(CoreError::NonFinite {
                    step,
                    detail: format!("discriminator loss {lv}"),
                });
            }
            let grads = g.backward(loss)?;
            let sig = b.sigmas().iter().map(|(k, v)| (k.clone(), *v)).collect();
            Ok((lv, b.grads(&grads), sig))
        })();
        let (loss_d, d_grads, sigmas) = match res {
            Ok(v) => v,
            Err(e) => {
                self.disc = disc;
                return Err(e);
            }
        };
        let (mut sn_min, mut sn_max) = (f64::INFINITY, f64::NEG_INFINITY);
        for (path, sigma) in &sigmas {
            let p = disc.get(path)?;
            if let Some(u) = &p.sn_u {
                let ratio = sigma_from(&p.value, u)? / sigma;
                sn_min = sn_min.min(ratio);
                sn_max = sn_max.max(ratio);
            }
        }
        adam_step(&mut disc, &d_grads, &self.cfg.adam(self.cfg.train.lr_d))?;
        self.disc = disc;

        // Generator update on fresh latents.
        let z = sample_latents(&self.plan, batch, None, &mut r.split(3));
        let mut g = Graph::new();
        let cv = g.constant(cond);
        let zv = g.constant(z);
        let mut bg = Binder::new(&mut self.gen, true, SnMode::Update);
        let fake = generator_forward(&mut g, &mut bg, &self.plan, cv, zv, BnMode::Train, None)?;
        let mut bd = Binder::new(&mut self.disc, false, SnMode::Frozen);
        let s = ensemble_forward(&mut g, &mut bd, &self.ensemble, &self.d_plans, fake, Some(cv), self.cfg.data.lambda, &r.split(4))?;
        let adv = hinge_g(&mut g, s);
        let loss_g = g.value(adv).item();
        let mut total = adv;
        if self.cfg.train.ortho_beta > 0.0 {
            let spectral: Vec<String> = bg
                .store()
                .iter()
                .filter(|(_, p)| p.sn_u.is_some())
                .map(|(k, _)| k.clone())
                .collect();
            for path in spectral {
                if let Some(leaf) = bg.leaf(&path) {
                    let pen = g.orthogonal_offdiag_penalty(leaf, self.cfg.train.ortho_beta);
                    total = g.add(total, pen)?;
                }
            }
        }
        let tv = g.value(total).item();
        if !tv.is_finite() {
            return Err(CoreError::NonFinite {
                step,
                detail: format!("generator loss {tv}"),
            });
        }
        let grads = g.backward(total)?;
        let g_grads = bg.grads(&grads);
        adam_step(&mut self.gen, &g_grads, &self.cfg.adam(self.cfg.train.lr_g))?;

        let decay = if self.cfg.train.ema_warmup {
            self.cfg.train.ema_decay.min((1.0 + step as f64) / (10.0 + step as f64))
        } else {
            self.cfg.train.ema_decay
        };
        ema_update(&mut self.ema, &self.gen, decay)?;
        self.step += 1;
        let stats = StepStats {
            loss_d,
            loss_g,
            sn_min,
            sn_max,
        };
        self.last = Some(stats);
        Ok(stats)
    }

    /// Losses on the batch of the current step without changing any state.
    pub fn probe_losses(&self) -> Result<(f64, f64)> {
        let batch = self.cfg.train.batch_size;
        let r = self.step_rng(self.step);
        let (real, cond) = self.batch(self.step)?;
        let mut gen = self.gen.clone();
        let z = sample_latents(&self.plan, batch, None, &mut r.split(1));
        let fake = generate(&mut gen, &self.plan, &cond, &z, BnMode::Train, None)?;
        let mut disc = self.disc.clone();
        let mut g = Graph::new();
        let xv = g.constant(Tensor::concat0(&[&real, &fake])?);
        let cv = g.constant(Tensor::concat0(&[&cond, &cond])?);
        let s = self.frozen_scores(&mut g, &mut disc, xv, cv, &r.split(2))?;
        let scores = g.value(s).data().to_vec();
        hinge_losses(&scores[..batch], &scores[batch..])
    }

    fn eval_set(&mut self) -> Result<&EvalSet> {
        if self.eval.is_none() {
            self.eval = Some(EvalSet::build(&self.cfg, &self.plan, &self.extractor)?);
        }
        Ok(self.eval.as_ref().expect("built above"))
    }

    /// Distances of the EMA generator on the held-out set.
    pub fn evaluate(&mut self) -> Result<DistanceReport> {
        self.eval_set()?;
        let eval = self.eval.as_ref().expect("built above");
        eval_generator(&self.ema, &self.plan, &self.cfg, eval, &self.extractor)
    }

    /// Evaluates and appends a metric row.
    pub fn log_metrics(&mut self) -> Result<MetricRow> {
        let report = self.evaluate()?;
        let (loss_d, loss_g, sn_min, sn_max) = match self.last {
            Some(s) => (s.loss_d, s.loss_g, Some(s.sn_min), Some(s.sn_max)),
            None => {
                let (d, g) = self.probe_losses()?;
                (d, g, None, None)
            }
        };
        let v = |x: Option<f64>| x.unwrap_or(f64::NAN);
        let row = MetricRow {
            step: self.step,
            cfdsd_s: v(report.cfdsd_s),
            ckdsd_s: v(report.ckdsd_s),
            fdsd_s: v(report.fdsd_s),
            kdsd_s: v(report.kdsd_s),
            loss_d,
            loss_g,
            sn_min,
            sn_max,
        };
        self.log.push(row.clone());
        Ok(row)
    }

    pub fn log_text(&self) -> String {
        self.log.iter().map(|r| r.log_line() + "\n").collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        self.gen.save(&dir.join("generator.gtts"))?;
        self.ema.save(&dir.join("ema.gtts"))?;
        self.disc.save(&dir.join("discriminator.gtts"))?;
        let file = TrainerFile {
            step: self.step,
            config: self.cfg.clone(),
            log: self.log.clone(),
            last: self.last,
        };
        let path = dir.join("trainer.json");
        let text = serde_json::to_string_pretty(&file).map_err(|e| CoreError::Format {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        fs::write(&path, text).map_err(io_err(&path))
    }

    /// Restores a checkpoint. `cfg` may change the step budget and logging
    /// cadence; seed, profile, ensemble and data must match.
    pub fn load(dir: &Path, cfg: Option<Config>) -> Result<Self> {
        let path = dir.join("trainer.json");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let file: TrainerFile = serde_json::from_str(&text).map_err(|e| CoreError::Format {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let cfg = match cfg {
            Some(c) => {
                let (a, b) = (&c.train, &file.config.train);
                if a.seed != b.seed || a.profile != b.profile || a.ensemble != b.ensemble || c.data != file.config.data {
                    return Err(CoreError::Config(format!(
                        "{}: checkpoint was written with a different seed, profile, ensemble or dataset",
                        dir.display()
                    )));
                }
                c
            }
            None => file.config,
        };
        let mut t = Self::new(cfg)?;
        t.gen = ParamStore::load(&dir.join("generator.gtts"))?;
        t.ema = ParamStore::load(&dir.join("ema.gtts"))?;
        t.disc = ParamStore::load(&dir.join("discriminator.gtts"))?;
        t.step = file.step;
        t.log = file.log;
        t.last = file.last;
        Ok(t)
    }
}

pub fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoint")
}

pub const LOG_FILE: &str = "train.log";

/// Trains up to `cfg.train.steps`, evaluating at step 0, every `log_every`
/// steps and at the end, and checkpointing every `checkpoint_every` steps
/// and at the end. With `resume`, continues from `out/checkpoint` if present.
pub fn train(cfg: Config, out: &Path, resume: bool) -> Result<Trainer> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let ck = checkpoint_dir(out);
    let mut t = if resume && ck.join("trainer.json").exists() {
        Trainer::load(&ck, Some(cfg))?
    } else {
        Trainer::new(cfg)?
    };
    let log_path = out.join(LOG_FILE);
    let write_log = |t: &Trainer| -> Result<()> {
        let mut f = fs::File::create(&log_path).map_err(io_err(&log_path))?;
        f.write_all(t.log_text().as_bytes()).map_err(io_err(&log_path))
    };
    if t.log.is_empty() {
        let row = t.log_metrics()?;
        log::info!("{}", row.log_line());
        write_log(&t)?;
    }
    let total = t.cfg.train.steps;
    while t.step < total {
        t.train_step()?;
        let s = t.step;
        if s % t.cfg.train.log_every == 0 || s == total {
            let row = t.log_metrics()?;
            log::info!("{}", row.log_line());
            write_log(&t)?;
        }
        if s % t.cfg.train.checkpoint_every == 0 {
            t.save(&ck)?;
        }
    }
    t.save(&ck)?;
    write_log(&t)?;
    Ok(t)
}
