use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use egonoise::dsp::{read_wav, write_wav, AudioClip, WavEncoding};
use egonoise::metrics::{aggregate, parse_scene_table};
use egonoise::mnmf::EgoPrior;
use egonoise::scenes::Manifest;

const SMALL: &str = r#"
seed = 11

[scene]
duration_s = 1.0

[data]
speech_clips = 2
ego_duration_s = 2.0

[vae]
max_epochs = 5
patience = 5

[ego]
max_sweeps = 15

[mcem]
em_iters = 2
r_samples = 2
burn_in = 2
"#;

fn egonoise(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("run.toml");
    if !config.exists() {
        fs::write(&config, SMALL).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_egonoise"))
        .args(args)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "status {:?}\nstderr:\n{}", out.status, String::from_utf8_lossy(&out.stderr));
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn simulate_writes_manifest_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        ok(&egonoise(d.path(), &["simulate", "--scenario", "ego", "--count", "8", "--seed", "7"]));
    }
    let text = fs::read_to_string(a.path().join("scenes/manifest.tsv")).unwrap();
    assert_eq!(text, fs::read_to_string(b.path().join("scenes/manifest.tsv")).unwrap());
    let manifest = Manifest::parse(&text).unwrap();
    assert_eq!(manifest.entries.len(), 8);
    for e in &manifest.entries {
        assert_eq!(e.snr_env_db, None);
        let env = read_wav(a.path().join("scenes").join(&e.env)).unwrap();
        assert!(env.samples().iter().all(|&v| v == 0.0));
        let mix_a = fs::read(a.path().join("scenes").join(&e.mixture)).unwrap();
        assert_eq!(mix_a, fs::read(b.path().join("scenes").join(&e.mixture)).unwrap());
    }
}

#[test]
fn training_writes_checkpoints_with_histories() {
    let dir = tempfile::tempdir().unwrap();
    ok(&egonoise(dir.path(), &["train-vae"]));
    let history = fs::read_to_string(dir.path().join("checkpoints/vae_history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 5);
    let ck = egonoise::checkpoint::Checkpoint::load(dir.path().join("checkpoints/vae.ckpt")).unwrap();
    assert_eq!(ck.tensor("history").unwrap().dims, vec![5, 3]);

    ok(&egonoise(dir.path(), &["train-ego", "--scheme", "partial", "--dict-size", "96"]));
    let prior = EgoPrior::load(dir.path().join("checkpoints/ego_k64.ckpt")).unwrap();
    assert_eq!(prior.rank(), 64);
    assert!(prior.loss_history.windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0].abs()));

    // Retraining with the same configuration reproduces the files byte for byte.
    let first = fs::read(dir.path().join("checkpoints/ego_k64.ckpt")).unwrap();
    ok(&egonoise(dir.path(), &["train-ego", "--scheme", "partial", "--dict-size", "96"]));
    assert_eq!(first, fs::read(dir.path().join("checkpoints/ego_k64.ckpt")).unwrap());

    let out = egonoise(dir.path(), &["train-ego", "--scheme", "adaptive"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn enhance_follows_the_scheme_contract() {
    let dir = tempfile::tempdir().unwrap();
    ok(&egonoise(dir.path(), &["simulate", "--count", "2"]));
    ok(&egonoise(dir.path(), &["train-vae"]));

    // fixed needs an ego prior that does not exist yet
    let out = egonoise(dir.path(), &["enhance", "--scheme", "fixed", "--dict-size", "32"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-ego"));

    // adaptive needs none
    ok(&egonoise(dir.path(), &["enhance", "--scheme", "adaptive", "--dict-size", "32", "--workers", "2"]));
    let manifest = Manifest::read(dir.path().join("scenes/manifest.tsv")).unwrap();
    for e in &manifest.entries {
        let base = dir.path().join("enhanced/adaptive_k32");
        let est = read_wav(base.join(format!("{}.wav", e.id))).unwrap();
        let mix = read_wav(dir.path().join("scenes").join(&e.mixture)).unwrap();
        assert_eq!((est.channels(), est.len()), (mix.channels(), mix.len()));
        let log = fs::read_to_string(base.join(format!("{}.jsonl", e.id))).unwrap();
        assert_eq!(log.lines().count(), 2);
        for line in log.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v["loss_after"].as_f64().unwrap() <= v["loss_before"].as_f64().unwrap() * (1.0 + 1e-8));
        }
    }

    ok(&egonoise(dir.path(), &["train-ego", "--scheme", "partial", "--dict-size", "96"]));
    let id = &manifest.entries[0].id;
    ok(&egonoise(dir.path(), &["enhance", "--scheme", "partial", "--dict-size", "96", "--scene", id]));
    assert!(dir.path().join(format!("enhanced/partial_k96/{id}.wav")).exists());
    assert_eq!(code(&egonoise(dir.path(), &["enhance", "--scheme", "partial", "--scene", "nope"])), 3);
}

fn fake_estimates(dir: &Path, manifest: &Manifest, scheme: &str, k: usize, weight: f64) -> PathBuf {
    let base = dir.join(format!("enhanced/{scheme}_k{k}"));
    fs::create_dir_all(&base).unwrap();
    for e in &manifest.entries {
        let mix = read_wav(dir.join("scenes").join(&e.mixture)).unwrap();
        let speech = read_wav(dir.join("scenes").join(&e.speech)).unwrap();
        let est = AudioClip::new(speech.samples() + &(mix.samples() - speech.samples()).mapv(|v| v * weight), 16000).unwrap();
        write_wav(base.join(format!("{}.wav", e.id)), &est, WavEncoding::Float32).unwrap();
    }
    base
}

#[test]
fn evaluate_grid_tables_and_missing_outputs() {
    let dir = tempfile::tempdir().unwrap();
    ok(&egonoise(dir.path(), &["simulate", "--count", "10"]));
    let manifest = Manifest::read(dir.path().join("scenes/manifest.tsv")).unwrap();
    let schemes = ["fixed", "adaptive", "partial"];
    for (i, scheme) in schemes.iter().enumerate() {
        for k in [32, 96] {
            fake_estimates(dir.path(), &manifest, scheme, k, 0.1 * (i + 1) as f64 + k as f64 / 1000.0);
        }
    }
    fs::write(
        dir.path().join("run.toml"),
        format!("{SMALL}\n[evaluate]\nschemes = [\"fixed\", \"adaptive\", \"partial\"]\ndict_sizes = [32, 96]\n"),
    )
    .unwrap();
    let out = egonoise(dir.path(), &["evaluate"]);
    ok(&out);
    let summary = fs::read_to_string(dir.path().join("metrics.tsv")).unwrap();
    assert_eq!(String::from_utf8_lossy(&out.stdout), summary);
    let rows: Vec<&str> = summary.lines().skip(2).collect();
    assert_eq!(rows.len(), 6);

    // Aggregates recomputed from the per-scene rows.
    let scenes = parse_scene_table(&fs::read_to_string(dir.path().join("metrics_scenes.tsv")).unwrap()).unwrap();
    assert_eq!(scenes.len(), 60);
    for row in rows {
        let c: Vec<&str> = row.split('\t').collect();
        let k: usize = c[2].parse().unwrap();
        let deltas: Vec<f64> =
            scenes.iter().filter(|s| s.1 == c[1] && s.2 == k).map(|s| s.3.output_db - s.3.input_db).collect();
        let agg = aggregate(&deltas).unwrap();
        assert_eq!(c[3], "10");
        assert_eq!(c[6], format!("{:.4}", agg.mean));
        assert_eq!(c[7], format!("{:.4}", agg.half_width));
    }

    // Second run is byte-identical.
    ok(&egonoise(dir.path(), &["evaluate"]));
    assert_eq!(summary, fs::read_to_string(dir.path().join("metrics.tsv")).unwrap());

    // A missing estimate is listed, the table is still written, exit code 3.
    let gone = format!("enhanced/partial_k96/{}.wav", manifest.entries[3].id);
    fs::remove_file(dir.path().join(&gone)).unwrap();
    let out = egonoise(dir.path(), &["evaluate"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains(&gone));
    let partial = fs::read_to_string(dir.path().join("metrics.tsv")).unwrap();
    assert_eq!(partial.lines().count(), 8);
    assert!(partial.lines().any(|l| l.contains("partial\t96\t9\t")));
}

#[test]
fn empty_manifest_and_bad_config_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("scenes")).unwrap();
    fs::write(dir.path().join("scenes/manifest.tsv"), Manifest::default().to_text()).unwrap();
    assert_eq!(code(&egonoise(dir.path(), &["evaluate"])), 3);

    fs::write(dir.path().join("run.toml"), "[mcem]\nscheme = \"fixed\"\ndict_size = 96\nk_env = 8\n").unwrap();
    assert_eq!(code(&egonoise(dir.path(), &["simulate"])), 2);
    fs::write(dir.path().join("run.toml"), "not = [valid").unwrap();
    assert_eq!(code(&egonoise(dir.path(), &["simulate"])), 2);
}
