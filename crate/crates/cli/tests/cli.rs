use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gantts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gantts"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn no_arguments_prints_usage_and_exits_1() {
    let o = gantts(&[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(gantts(&["transmogrify"]).status.code(), Some(1));
    assert_eq!(gantts(&["analyze", "--profile", "huge"]).status.code(), Some(1));
    assert_eq!(gantts(&["ablation"]).status.code(), Some(1));
    assert_eq!(gantts(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_2() {
    let o = gantts(&["ablation", "--name", "nope"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown ensemble"));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.toml");
    let o = gantts(&["train", "--config", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn analyze_full_profile() {
    let o = gantts(&["analyze", "--profile", "full"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("generator_layers: 30"));
    assert!(text.contains("generator_trace_0: input t=400 ch=567"));
    assert!(text.contains("generator_trace_9: conv_k3 t=48000 ch=1"));
    assert!(text.contains("windows_k15_conditional: 371"));
    assert!(text.contains("windows_k15_unconditional: 44401"));
}

#[test]
fn ablation_lists_members() {
    let o = gantts(&["ablation", "--name", "rwd_star_240"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("members: 10"));
    assert_eq!(text.lines().filter(|l| l.starts_with("member: ")).count(), 10);
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("run.toml");
    let text = "[train]\nbatch_size = 2\nsteps = 2\nlog_every = 1\ncheckpoint_every = 1\neval_clips = 4\nstanding_passes = 2\nstanding_batch = 2\nensemble = \"crwd1_urwd1\"\n\n[data]\ntc = 8\n";
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn dataset_train_generate_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let cfg = write_config(dir.path());

    let o = gantts(&["make-dataset", "--config", &cfg, "--out", &d("data"), "--count", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("data/clip_00002.wav").exists());
    assert!(dir.path().join("data/clip_00002.gtfm").exists());

    let o = gantts(&["train", "--config", &cfg, "--out", &d("run"), "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(dir.path().join("run/train.log")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.lines().all(|l| l.starts_with("step ") && l.contains(" loss_g ")));
    assert_eq!(stdout(&o), log);

    let o = gantts(&[
        "generate",
        "--checkpoint",
        &d("run/checkpoint"),
        "--features",
        &d("data"),
        "--out",
        &d("gen"),
        "--length-frames",
        "6",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for i in 0..3 {
        let wav = gantts_core::audio::read_wav(&dir.path().join(format!("gen/clip_{i:05}.wav"))).unwrap();
        assert_eq!(wav.samples.len(), 6 * 120);
        assert_eq!(wav.sample_rate, 24_000);
    }

    let o = gantts(&["evaluate", "--gen", &d("gen"), "--real", &d("data"), "--matched", "--out", &d("report.txt")]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(report.contains("n: 3"));
    assert!(report.contains("cfdsd_s: ") && !report.contains("cfdsd_s: n/a"));
    assert!(report.contains("fdsd_s: n/a"));
}

#[test]
fn training_is_deterministic_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = gantts(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--steps", "1"]);
        assert_eq!(o.status.code(), Some(0));
        (
            fs::read(out.join("train.log")).unwrap(),
            fs::read(out.join("checkpoint/generator.gtts")).unwrap(),
        )
    };
    assert_eq!(run("a"), run("b"));
}
