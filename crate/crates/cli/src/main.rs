//! `gantts`: synthetic datasets, training, generation, evaluation and
//! architecture analysis.
//!
//! Exit status: 0 on success, 1 on usage errors, 2 on runtime failures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gantts_core::analysis;
use gantts_core::audio::{read_wav, write_wav, MuLaw, WavClip};
use gantts_core::blocks::BnMode;
use gantts_core::data;
use gantts_core::distances::{estimate_from_sets, FeatureMatrix, SurrogateExtractor};
use gantts_core::error::{CoreError, Result};
use gantts_core::generator::{accumulate_standing_stats, generate, make_masks, sample_latents};
use gantts_core::rwd::{ablation_config, Window};
use gantts_core::train::{self, Config, Profile, Trainer};
use gantts_tensor::{Rng, Tensor};

// Root stream of `make-dataset`; training uses streams 0-2 of the same seed.
const STREAM_DATASET: u64 = 3;
const WAV_EXT: &str = "wav";
const FEATURE_EXT: &str = "gtfm";

#[derive(Parser)]
#[command(name = "gantts", version, about = "Waveform GAN with random window discriminators")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic clips (WAV) and their conditioning tracks.
    MakeDataset(MakeDataset),
    /// Train a generator against a discriminator ensemble.
    Train(Train),
    /// Synthesize audio from conditioning tracks with the EMA generator.
    Generate(Generate),
    /// Surrogate distances between generated and real clips.
    Evaluate(Evaluate),
    /// Layer counts, receptive field, FLOPs and discriminator layouts.
    Analyze(Analyze),
    /// Resolve an ensemble name to its members.
    Ablation(Ablation),
}

#[derive(Args)]
struct MakeDataset {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    /// Defaults to `train.seed` of the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    ensemble: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_g: Option<f64>,
    #[arg(long)]
    lr_d: Option<f64>,
    #[arg(long)]
    ema_decay: Option<f64>,
    #[arg(long)]
    log_every: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    eval_clips: Option<usize>,
    #[arg(long)]
    standing_passes: Option<usize>,
    /// Continue from `OUT/checkpoint` when present.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct Generate {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// A `.gtfm` conditioning track, or a directory of them.
    #[arg(long)]
    features: PathBuf,
    /// Output WAV for a single track, output directory otherwise.
    #[arg(long)]
    out: PathBuf,
    /// Truncate every track to at most this many frames.
    #[arg(long)]
    length_frames: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    gen: PathBuf,
    #[arg(long)]
    real: PathBuf,
    /// Real clips share conditioning with generated clips, index by index.
    #[arg(long)]
    matched: bool,
    #[arg(long)]
    out: PathBuf,
    /// Reads the `[features]` and `[data]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct Analyze {
    #[arg(long, value_enum)]
    profile: ProfileArg,
}

#[derive(Args)]
struct Ablation {
    #[arg(long)]
    name: String,
    #[arg(long, value_enum, default_value_t = ProfileArg::Toy)]
    profile: ProfileArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Toy,
    Full,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Toy => Profile::Toy,
            ProfileArg::Full => Profile::Full,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            e.print().ok();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let res = match cli.command {
        Command::MakeDataset(a) => make_dataset(a),
        Command::Train(a) => run_train(a),
        Command::Generate(a) => run_generate(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Analyze(a) => run_analyze(a),
        Command::Ablation(a) => run_ablation(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CoreError + '_ {
    move |source| CoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

/// Files with extension `ext` in `dir`, sorted by name.
fn list(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io(dir))? {
        let p = entry.map_err(io(dir))?.path();
        if p.is_file() && p.extension().is_some_and(|e| e == ext) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn make_dataset(a: MakeDataset) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let seed = a.seed.unwrap_or(cfg.train.seed);
    let law = MuLaw::new(cfg.data.mu)?;
    fs::create_dir_all(&a.out).map_err(io(&a.out))?;
    let root = Rng::new(seed).split(STREAM_DATASET);
    for i in 0..a.count {
        let (audio, feats) = data::synth_example(&cfg.data, &mut root.split(i as u64))?;
        let linear = audio.iter().map(|&y| law.decode(y)).collect::<Result<Vec<_>>>()?;
        let stem = a.out.join(format!("clip_{i:05}"));
        write_wav(&stem.with_extension(WAV_EXT), &WavClip::from_real(cfg.data.sample_rate as u32, &linear))?;
        FeatureMatrix::new(cfg.data.tc, data::FEATURE_DIM, feats.data().to_vec())?.save(&stem.with_extension(FEATURE_EXT))?;
    }
    println!("wrote {} clips to {}", a.count, a.out.display());
    Ok(())
}

fn run_train(a: Train) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    let t = &mut cfg.train;
    if let Some(v) = a.ensemble {
        t.ensemble = v;
    }
    if let Some(v) = a.profile {
        t.profile = v.into();
    }
    macro_rules! set {
        ($($field:ident),*) => { $( if let Some(v) = a.$field { t.$field = v; } )* };
    }
    set!(seed, steps, batch_size, lr_g, lr_d, ema_decay, log_every, checkpoint_every, eval_clips, standing_passes);
    cfg.validate()?;
    let trainer = train::train(cfg, &a.out, a.resume)?;
    print!("{}", trainer.log_text());
    Ok(())
}

fn read_track(path: &Path, limit: Option<usize>, feature_dim: usize) -> Result<Tensor> {
    let m = FeatureMatrix::load(path)?;
    if m.dim() != feature_dim {
        return Err(CoreError::Format {
            path: path.to_path_buf(),
            reason: format!("{} feature channels, expected {feature_dim}", m.dim()),
        });
    }
    let frames = limit.map_or(m.rows(), |l| l.min(m.rows()));
    Ok(Tensor::from_parts(&[frames, feature_dim], m.data()[..frames * feature_dim].to_vec()))
}

fn run_generate(a: Generate) -> Result<()> {
    if a.length_frames == Some(0) {
        return Err(CoreError::Config("--length-frames must be >= 1".into()));
    }
    let t = Trainer::load(&a.checkpoint, None)?;
    let plan = &t.plan;
    let single = a.features.is_file();
    let inputs = if single {
        vec![a.features.clone()]
    } else {
        list(&a.features, FEATURE_EXT)?
    };
    if inputs.is_empty() {
        return Err(CoreError::Config(format!("no .{FEATURE_EXT} files in {}", a.features.display())));
    }
    let tracks = inputs
        .iter()
        .map(|p| read_track(p, a.length_frames, plan.feature_dim))
        .collect::<Result<Vec<_>>>()?;
    let lengths: Vec<usize> = tracks.iter().map(|c| c.shape()[0]).collect();
    let padded = *lengths.iter().max().expect("nonempty");
    let shortest = *lengths.iter().min().expect("nonempty");

    // Standing statistics from the tracks themselves, cropped to a common length.
    let f = plan.feature_dim;
    let pool: Vec<Tensor> = tracks
        .iter()
        .map(|c| Tensor::from_parts(&[shortest, f], c.data()[..shortest * f].to_vec()))
        .collect();
    let mut ema = t.ema.clone();
    let root = Rng::new(a.seed);
    let tc = &t.cfg.train;
    accumulate_standing_stats(&mut ema, plan, tc.standing_passes, tc.standing_batch, &pool, &mut root.split(1))?;

    let mut batch = Vec::with_capacity(tracks.len() * padded * f);
    for c in &tracks {
        batch.extend_from_slice(c.data());
        batch.resize(batch.len() + (padded - c.shape()[0]) * f, 0.0);
    }
    let cond = Tensor::from_parts(&[tracks.len(), padded, f], batch);
    let z = sample_latents(plan, tracks.len(), None, &mut root.split(0));
    let masks = make_masks(&lengths, padded, plan)?;
    let audio = generate(&mut ema, plan, &cond, &z, BnMode::Infer, Some(&masks))?;

    let law = MuLaw::new(t.cfg.data.mu)?;
    let rate = t.cfg.data.sample_rate as u32;
    if !single {
        fs::create_dir_all(&a.out).map_err(io(&a.out))?;
    }
    let per_item = padded * plan.lambda;
    for (i, (input, &len)) in inputs.iter().zip(&lengths).enumerate() {
        let clip = &audio.data()[i * per_item..i * per_item + len * plan.lambda];
        let linear = clip.iter().map(|&y| law.decode(y.clamp(-1.0, 1.0))).collect::<Result<Vec<_>>>()?;
        let path = if single {
            a.out.clone()
        } else {
            a.out.join(input.file_stem().expect("listed file")).with_extension(WAV_EXT)
        };
        write_wav(&path, &WavClip::from_real(rate, &linear))?;
    }
    println!("generated {} clip(s) from step {}", inputs.len(), t.step);
    Ok(())
}

/// Clip features of `dir`: WAV clips in the model's μ-law domain, or else
/// `.gtfm` feature files whose rows are concatenated in name order.
fn read_set(dir: &Path, law: &MuLaw, ex: &SurrogateExtractor) -> Result<FeatureMatrix> {
    let wavs = list(dir, WAV_EXT)?;
    if !wavs.is_empty() {
        let clips = wavs
            .iter()
            .map(|p| read_wav(p)?.to_real().into_iter().map(|x| law.encode(x)).collect())
            .collect::<Result<Vec<Vec<f64>>>>()?;
        return ex.feature_matrix(&clips);
    }
    let mut rows = Vec::new();
    for p in list(dir, FEATURE_EXT)? {
        let m = FeatureMatrix::load(&p)?;
        rows.extend((0..m.rows()).map(|i| m.row(i).to_vec()));
    }
    if rows.is_empty() {
        return Err(CoreError::Config(format!(
            "no .{WAV_EXT} or .{FEATURE_EXT} files in {}",
            dir.display()
        )));
    }
    FeatureMatrix::from_rows(&rows)
}

fn run_evaluate(a: Evaluate) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let law = MuLaw::new(cfg.data.mu)?;
    let ex = SurrogateExtractor::new(cfg.features)?;
    let gen = read_set(&a.gen, &law, &ex)?;
    let real = read_set(&a.real, &law, &ex)?;
    let report = estimate_from_sets(&gen, &real, a.matched)?;
    let text = report.to_text();
    fs::write(&a.out, &text).map_err(io(&a.out))?;
    print!("{text}");
    Ok(())
}

fn run_analyze(a: Analyze) -> Result<()> {
    let profile = Profile::from(a.profile);
    let (plan, tc) = match profile {
        Profile::Full => (gantts_core::generator::GeneratorPlan::full(), 400),
        Profile::Toy => (profile.generator_plan(data::FEATURE_DIM), data::SyntheticDatasetConfig::default().tc),
    };
    print!("{}", analysis::report(&plan, tc, profile.channels())?);
    Ok(())
}

fn run_ablation(a: Ablation) -> Result<()> {
    let ens = ablation_config(&a.name, Profile::from(a.profile).channels())?;
    println!("name: {}", ens.name);
    println!("members: {}", ens.members.len());
    for m in &ens.members {
        let window = match m.cfg.window {
            Window::Base(w) => w.to_string(),
            Window::Full => "full".to_string(),
        };
        println!(
            "member: {} k={} window={} conditional={}",
            m.prefix, m.cfg.k, window, m.cfg.conditional
        );
    }
    Ok(())
}
