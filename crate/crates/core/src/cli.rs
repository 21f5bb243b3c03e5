//! Command-line front end: `simulate`, `train-vae`, `train-ego`, `enhance`
//! and `evaluate`, driven by a TOML [`RunConfig`] plus flag overrides.
//!
//! Output layout under `paths.out`:
//!
//! ```text
//! checkpoints/vae.ckpt            speech prior (+ vae_history.jsonl)
//! checkpoints/ego_k<K_E>.ckpt     ego-noise prior with K_E atoms
//! scenes/manifest.tsv             test set, one directory of stems per scene
//! enhanced/<scheme>_k<K>/<id>.wav estimate; <id>.jsonl holds the EM log
//! metrics.tsv                     aggregated SI-SDR table
//! metrics_scenes.tsv              per-scene rows
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dsp::{read_wav, write_wav, WavEncoding};
use crate::mcem::{McemError, Scheme, SchemeConfig};
use crate::metrics::{scene_table, summary_table, MetricError, MetricReport, SceneMetric};
use crate::mnmf::{EgoPrior, EgoTrainConfig, MnmfError};
use crate::pipeline::{
    ego_training_clip, enhance, speech_training_frames, train_ego_prior, train_speech_prior, PipelineError,
};
use crate::scenes::{build_testset_with, load_stems, write_scene, Manifest, Scenario, SceneError, SceneSpec};
use crate::vae::{EpochStats, TrainingConfig, VaeError, VaeModel};
use crate::wiener::WienerError;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const SUMMARY_FILE: &str = "metrics.tsv";
pub const SCENES_FILE: &str = "metrics_scenes.tsv";

/// Error category, which fixes the process exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numerical => 4,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Config, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Data, message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label = match self.kind {
            ErrorKind::Config => "configuration error",
            ErrorKind::Data => "data error",
            ErrorKind::Numerical => "numerical failure",
        };
        write!(f, "{label}: {}", self.message)
    }
}

impl std::error::Error for CliError {}

fn vae_kind(e: &VaeError) -> ErrorKind {
    match e {
        VaeError::Config(_) => ErrorKind::Config,
        VaeError::Diverged { .. } => ErrorKind::Numerical,
        _ => ErrorKind::Data,
    }
}

fn mnmf_kind(e: &MnmfError) -> ErrorKind {
    match e {
        MnmfError::Invalid(_) => ErrorKind::Config,
        MnmfError::Dimension(_) | MnmfError::Checkpoint(_) => ErrorKind::Data,
        _ => ErrorKind::Numerical,
    }
}

fn kind_of(e: &PipelineError) -> ErrorKind {
    match e {
        PipelineError::Dsp(_) | PipelineError::Metric(MetricError::Parse(_)) => ErrorKind::Data,
        PipelineError::Scene(SceneError::Invalid(_)) => ErrorKind::Config,
        PipelineError::Scene(_) => ErrorKind::Data,
        PipelineError::Vae(v) => vae_kind(v),
        PipelineError::Mnmf(m) => mnmf_kind(m),
        PipelineError::Mcem(m) => match m {
            McemError::Config(_) | McemError::MissingEgoPrior(_) | McemError::EgoPriorMismatch(_) => ErrorKind::Config,
            McemError::Dimension(_) => ErrorKind::Data,
            McemError::Vae(v) => vae_kind(v),
            McemError::Mnmf(m) => mnmf_kind(m),
            _ => ErrorKind::Numerical,
        },
        PipelineError::Wiener(w) => match w {
            WienerError::Dimension(_) | WienerError::Dsp(_) => ErrorKind::Data,
            _ => ErrorKind::Numerical,
        },
        PipelineError::Metric(_) => ErrorKind::Numerical,
    }
}

impl<E: Into<PipelineError>> From<E> for CliError {
    fn from(e: E) -> Self {
        let e = e.into();
        Self { kind: kind_of(&e), message: e.to_string() }
    }
}

fn io_err(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::data(format!("{}: {e}", path.display()))
}

/// Output locations. `checkpoints` and `scenes` default to subdirectories
/// of `out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out: PathBuf,
    pub checkpoints: Option<PathBuf>,
    pub scenes: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self { out: PathBuf::from("egonoise-run"), checkpoints: None, scenes: None }
    }
}

impl Paths {
    pub fn checkpoints(&self) -> PathBuf {
        self.checkpoints.clone().unwrap_or_else(|| self.out.join("checkpoints"))
    }

    pub fn scenes(&self) -> PathBuf {
        self.scenes.clone().unwrap_or_else(|| self.out.join("scenes"))
    }

    pub fn vae(&self) -> PathBuf {
        self.checkpoints().join("vae.ckpt")
    }

    pub fn ego(&self, k_ego: usize) -> PathBuf {
        self.checkpoints().join(format!("ego_k{k_ego}.ckpt"))
    }

    pub fn manifest(&self) -> PathBuf {
        self.scenes().join(MANIFEST_FILE)
    }

    pub fn enhanced(&self, scheme: Scheme, dict_size: usize) -> PathBuf {
        self.out.join("enhanced").join(format!("{scheme}_k{dict_size}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestsetSection {
    pub scenario: Scenario,
    pub count: usize,
}

impl Default for TestsetSection {
    fn default() -> Self {
        Self { scenario: Scenario::EgoEnv, count: 10 }
    }
}

/// Synthetic training material for the two priors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub speech_clips: usize,
    pub ego_duration_s: f64,
    pub ego_gating_rate: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { speech_clips: 20, ego_duration_s: 10.0, ego_gating_rate: 1.0 }
    }
}

/// Inference settings. `k_ego` and `k_env` default to the scheme's split of
/// `dict_size`; explicit values must sum to it and respect the scheme.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McemSection {
    pub scheme: Scheme,
    pub dict_size: usize,
    pub k_ego: Option<usize>,
    pub k_env: Option<usize>,
    pub em_iters: usize,
    pub r_samples: usize,
    pub burn_in: usize,
    pub mh_proposal_std: Option<f64>,
    pub early_stop_tol: f64,
    pub early_stop_window: usize,
}

impl Default for McemSection {
    fn default() -> Self {
        let d = SchemeConfig::new(Scheme::Partial, 96).expect("default split");
        Self {
            scheme: d.scheme,
            dict_size: d.dict_size,
            k_ego: None,
            k_env: None,
            em_iters: d.em_iters,
            r_samples: d.r_samples,
            burn_in: d.burn_in,
            mh_proposal_std: d.mh_proposal_std,
            early_stop_tol: d.early_stop_tol,
            early_stop_window: d.early_stop_window,
        }
    }
}

impl McemSection {
    pub fn scheme_config(&self, scheme: Scheme, dict_size: usize, seed: u64) -> Result<SchemeConfig, CliError> {
        let mut cfg = SchemeConfig::new(scheme, dict_size)?;
        if let Some(k) = self.k_ego {
            cfg.k_ego = k;
        }
        if let Some(k) = self.k_env {
            cfg.k_env = k;
        }
        cfg.em_iters = self.em_iters;
        cfg.r_samples = self.r_samples;
        cfg.burn_in = self.burn_in;
        cfg.mh_proposal_std = self.mh_proposal_std;
        cfg.early_stop_tol = self.early_stop_tol;
        cfg.early_stop_window = self.early_stop_window;
        cfg.rng_seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Scheme × dictionary-size grid scored by `evaluate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub schemes: Vec<Scheme>,
    pub dict_sizes: Vec<usize>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self { schemes: Scheme::ALL.to_vec(), dict_sizes: vec![96] }
    }
}

/// Everything a command needs. The global `seed` replaces the seed fields
/// of the individual sections.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Scene-level worker threads; 0 uses every core.
    pub workers: usize,
    pub paths: Paths,
    pub scene: SceneSpec,
    pub testset: TestsetSection,
    pub data: DataSection,
    pub vae: TrainingConfig,
    pub ego: EgoTrainConfig,
    pub mcem: McemSection,
    pub evaluate: EvaluateSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies flag overrides; a scheme or size flag narrows the evaluation
    /// grid to that value.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.scheme {
            self.mcem.scheme = s;
            self.evaluate.schemes = vec![s];
        }
        if let Some(k) = o.dict_size {
            self.mcem.dict_size = k;
            self.evaluate.dict_sizes = vec![k];
        }
        if let Some(s) = o.scenario {
            self.testset.scenario = s;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        if let Some(out) = &o.out {
            self.paths.out = out.clone();
        }
    }

    /// Checks every section before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        self.scene.validate().map_err(|e| CliError::config(e.to_string()))?;
        self.mcem.scheme_config(self.mcem.scheme, self.mcem.dict_size, self.seed)?;
        for &scheme in &self.evaluate.schemes {
            for &k in &self.evaluate.dict_sizes {
                SchemeConfig::new(scheme, k)?;
            }
        }
        if !(self.data.ego_duration_s > 0.0) || !(self.data.ego_gating_rate >= 0.0) {
            return Err(CliError::config("data.ego_duration_s must be positive and ego_gating_rate nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, Args)]
pub struct Overrides {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// fixed, adaptive or partial.
    #[arg(long, global = true)]
    pub scheme: Option<Scheme>,
    /// Total noise dictionary size K.
    #[arg(long = "dict-size", global = true)]
    pub dict_size: Option<usize>,
    /// ego or egoenv.
    #[arg(long, global = true)]
    pub scenario: Option<Scenario>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Scene-level worker threads (0 = all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output root directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Parser)]
#[command(name = "egonoise", version, about = "Ego-noise and environmental-noise suppression for robot microphone arrays")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic test set and its manifest.
    Simulate {
        /// Number of scenes (overrides testset.count).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the speech VAE on synthetic clean speech.
    TrainVae,
    /// Train the ego-noise prior with K_E atoms for the selected scheme and K.
    TrainEgo,
    /// Enhance every scene of the manifest (or one with --scene).
    Enhance {
        #[arg(long)]
        scene: Option<String>,
    },
    /// Score enhanced outputs and write the metric tables.
    Evaluate,
    /// Print the effective configuration as TOML.
    Config,
}

/// Parses arguments, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ErrorKind::Config.exit_code() } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("egonoise: {e}");
            e.exit_code()
        }
    }
}

pub fn effective_config(o: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = match &o.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(o);
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = effective_config(&cli.overrides)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| CliError::config(format!("worker pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Simulate { count } => cmd_simulate(&cfg, count.unwrap_or(cfg.testset.count)).map(|_| ()),
        Command::TrainVae => cmd_train_vae(&cfg).map(|_| ()),
        Command::TrainEgo => cmd_train_ego(&cfg).map(|_| ()),
        Command::Enhance { scene } => cmd_enhance(&cfg, scene.as_deref()).map(|_| ()),
        Command::Evaluate => {
            let out = cmd_evaluate(&cfg)?;
            print!("{}", out.summary);
            match out.missing.is_empty() {
                true => Ok(()),
                false => Err(CliError::data(format!("{} enhanced outputs missing", out.missing.len()))),
            }
        }
        Command::Config => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    })
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Builds the test set and writes its stems and manifest.
pub fn cmd_simulate(cfg: &RunConfig, count: usize) -> Result<Manifest, CliError> {
    if count == 0 {
        return Err(CliError::config("scene count must be positive"));
    }
    let dir = cfg.paths.scenes();
    create_dir(&dir)?;
    let scenes = build_testset_with(&cfg.scene, count, cfg.testset.scenario, cfg.seed)?;
    let entries = scenes.par_iter().map(|s| write_scene(&dir, s)).collect::<Result<Vec<_>, _>>()?;
    let manifest = Manifest { entries };
    write_text(&cfg.paths.manifest(), &manifest.to_text())?;
    log::info!("wrote {count} scenes to {}", dir.display());
    Ok(manifest)
}

/// Trains the speech prior; the checkpoint carries the epoch history.
pub fn cmd_train_vae(cfg: &RunConfig) -> Result<Vec<EpochStats>, CliError> {
    let dir = cfg.paths.checkpoints();
    create_dir(&dir)?;
    let frames = speech_training_frames(&cfg.scene, cfg.data.speech_clips, cfg.seed)?;
    let training = TrainingConfig { rng_seed: cfg.seed, ..cfg.vae.clone() };
    let outcome = train_speech_prior(&frames, &training)?;
    let mut ck = outcome.model.to_checkpoint();
    let h = &outcome.history;
    ck.set_meta("best_epoch", outcome.best_epoch);
    ck.insert(
        "history",
        vec![h.len(), 3],
        h.iter().flat_map(|e| [e.epoch as f64, e.train_loss, e.validation_loss]).collect(),
    );
    let path = cfg.paths.vae();
    ck.save(&path).map_err(|e| io_err(&path, e))?;
    let mut log = String::new();
    for e in h {
        log.push_str(&serde_json::to_string(e).expect("epoch stats serialize"));
        log.push('\n');
    }
    write_text(&dir.join("vae_history.jsonl"), &log)?;
    log::info!("speech prior: {} epochs, best {}", h.len(), outcome.best_epoch);
    Ok(outcome.history)
}

/// Ego-prior rank needed by the configured scheme and dictionary size.
pub fn ego_rank(cfg: &RunConfig) -> Result<usize, CliError> {
    let sc = cfg.mcem.scheme_config(cfg.mcem.scheme, cfg.mcem.dict_size, cfg.seed)?;
    if sc.k_ego == 0 {
        return Err(CliError::config(format!("scheme {} uses no ego-noise prior", sc.scheme)));
    }
    Ok(sc.k_ego)
}

pub fn cmd_train_ego(cfg: &RunConfig) -> Result<EgoPrior, CliError> {
    let rank = ego_rank(cfg)?;
    create_dir(&cfg.paths.checkpoints())?;
    let clip = ego_training_clip(&cfg.scene, cfg.data.ego_duration_s, cfg.data.ego_gating_rate, cfg.seed)?;
    let prior = train_ego_prior(&clip, rank, &EgoTrainConfig { seed: cfg.seed, ..cfg.ego.clone() })?;
    let path = cfg.paths.ego(rank);
    prior.save(&path).map_err(|e| io_err(&path, e))?;
    log::info!("ego prior K_E = {rank}: {} sweeps", prior.loss_history.len());
    Ok(prior)
}

pub fn load_vae(cfg: &RunConfig) -> Result<VaeModel, CliError> {
    let path = cfg.paths.vae();
    if !path.exists() {
        return Err(CliError::config(format!("speech prior {} not found; run train-vae first", path.display())));
    }
    let ck = Checkpoint::load(&path).map_err(|e| io_err(&path, e))?;
    Ok(VaeModel::from_checkpoint(&ck)?)
}

/// Ego prior for `sc`, or `None` when the scheme needs none.
pub fn load_ego(cfg: &RunConfig, sc: &SchemeConfig) -> Result<Option<EgoPrior>, CliError> {
    if sc.k_ego == 0 {
        return Ok(None);
    }
    let path = cfg.paths.ego(sc.k_ego);
    if !path.exists() {
        return Err(CliError::config(format!(
            "scheme {} with K = {} needs an ego-noise prior with K_E = {} at {}; run train-ego --scheme {} --dict-size {}",
            sc.scheme,
            sc.dict_size,
            sc.k_ego,
            path.display(),
            sc.scheme,
            sc.dict_size
        )));
    }
    Ok(Some(EgoPrior::load(&path)?))
}

fn read_manifest(cfg: &RunConfig) -> Result<Manifest, CliError> {
    let path = cfg.paths.manifest();
    let manifest = Manifest::read(&path).map_err(|e| io_err(&path, e))?;
    if manifest.entries.is_empty() {
        return Err(CliError::data(format!("{} lists no scenes", path.display())));
    }
    Ok(manifest)
}

/// Summary of one enhanced scene.
#[derive(Clone, Debug)]
pub struct EnhanceSummary {
    pub scene: String,
    pub iterations: usize,
    pub final_loss: f64,
}

/// Enhances the manifest's scenes with the configured scheme, writing the
/// estimate and a JSON-lines iteration log per scene.
pub fn cmd_enhance(cfg: &RunConfig, only: Option<&str>) -> Result<Vec<EnhanceSummary>, CliError> {
    let sc = cfg.mcem.scheme_config(cfg.mcem.scheme, cfg.mcem.dict_size, cfg.seed)?;
    let vae = Arc::new(load_vae(cfg)?);
    let ego = load_ego(cfg, &sc)?;
    let manifest = read_manifest(cfg)?;
    let entries: Vec<_> = manifest.entries.iter().filter(|e| only.is_none_or(|id| e.id == id)).collect();
    if let Some(id) = only.filter(|_| entries.is_empty()) {
        return Err(CliError::data(format!("scene {id} is not in the manifest")));
    }
    let out_dir = cfg.paths.enhanced(sc.scheme, sc.dict_size);
    create_dir(&out_dir)?;
    let scene_dir = cfg.paths.scenes();
    entries
        .par_iter()
        .map(|entry| {
            let mixture = read_wav(scene_dir.join(&entry.mixture)).map_err(|e| io_err(&entry.mixture, e))?;
            let mut log = String::new();
            let done = enhance(&mixture, vae.clone(), ego.as_ref(), &sc, |rec| {
                log.push_str(&serde_json::to_string(rec).expect("records serialize"));
                log.push('\n');
            })?;
            let wav = out_dir.join(format!("{}.wav", entry.id));
            write_wav(&wav, &done.result.speech_clip, WavEncoding::Float32).map_err(|e| io_err(&wav, e))?;
            write_text(&out_dir.join(format!("{}.jsonl", entry.id)), &log)?;
            let last = done.history.last().map_or(f64::NAN, |r| r.loss_after);
            log::info!("{} {}: {} iterations, loss {last:.6e}", sc.scheme, entry.id, done.history.len());
            Ok(EnhanceSummary { scene: entry.id.clone(), iterations: done.history.len(), final_loss: last })
        })
        .collect()
}

/// Tables written by [`cmd_evaluate`] and the outputs it could not find.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub reports: Vec<MetricReport>,
    pub summary: String,
    pub scenes: String,
    pub missing: Vec<PathBuf>,
}

/// Scores every (scenario, scheme, K) group of the evaluation grid. Missing
/// estimates are reported and skipped; groups with fewer than two scored
/// scenes are left out of the tables.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<Evaluation, CliError> {
    let manifest = read_manifest(cfg)?;
    let scene_dir = cfg.paths.scenes();
    let refs = manifest
        .entries
        .par_iter()
        .map(|e| {
            let [mixture, speech, _, _] = load_stems(&scene_dir, e)?;
            Ok((mixture.channel(0), speech.channel(0)))
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    let mut reports = Vec::new();
    let mut missing = Vec::new();
    for &scheme in &cfg.evaluate.schemes {
        for &k in &cfg.evaluate.dict_sizes {
            let dir = cfg.paths.enhanced(scheme, k);
            let scored = manifest
                .entries
                .par_iter()
                .zip(&refs)
                .map(|(e, (mixture, speech))| {
                    let path = dir.join(format!("{}.wav", e.id));
                    if !path.exists() {
                        return Ok((e.scenario, Err(path)));
                    }
                    let est = read_wav(&path).map_err(|err| io_err(&path, err))?;
                    let m = SceneMetric::new(e.id.clone(), speech, mixture, &est.channel(0))
                        .map_err(|err| CliError::data(format!("{}: {err}", path.display())))?;
                    Ok((e.scenario, Ok(m)))
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            let mut groups: BTreeMap<String, Vec<SceneMetric>> = BTreeMap::new();
            for (scenario, r) in scored {
                match r {
                    Ok(m) => groups.entry(scenario.to_string()).or_default().push(m),
                    Err(p) => missing.push(p),
                }
            }
            for (scenario, scenes) in groups {
                if scenes.len() < 2 {
                    log::warn!("{scenario} {scheme} K={k}: only {} scored scene, no aggregate", scenes.len());
                    continue;
                }
                reports.push(MetricReport::new(scheme.name(), k, scenario, scenes)?);
            }
        }
    }
    let summary = summary_table(&reports);
    let scenes = scene_table(&reports);
    create_dir(&cfg.paths.out)?;
    write_text(&cfg.paths.out.join(SUMMARY_FILE), &summary)?;
    write_text(&cfg.paths.out.join(SCENES_FILE), &scenes)?;
    if !missing.is_empty() {
        let mut err = std::io::stderr().lock();
        let _ = writeln!(err, "missing enhanced outputs:");
        for p in &missing {
            let _ = writeln!(err, "  {}", p.display());
        }
    }
    Ok(Evaluation { reports, summary, scenes, missing })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_and_bad_splits_are_config_errors() {
        let e = RunConfig::from_toml("[mcem]\nschem = \"fixed\"\n").unwrap_err();
        assert_eq!(e.kind, ErrorKind::Config);
        let cfg = RunConfig::from_toml("[mcem]\nscheme = \"partial\"\ndict_size = 96\nk_ego = 64\nk_env = 48\n").unwrap();
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
        let cfg = RunConfig::from_toml("[mcem]\nscheme = \"fixed\"\ndict_size = 96\nk_ego = 64\nk_env = 32\n").unwrap();
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
        let cfg = RunConfig::from_toml("[mcem]\nscheme = \"partial\"\ndict_size = 96\nk_ego = 64\nk_env = 32\n").unwrap();
        cfg.validate().unwrap();
    }

    #[test]
    fn flags_override_the_file() {
        let mut cfg = RunConfig::from_toml("seed = 3\n[mcem]\nscheme = \"fixed\"\ndict_size = 32\n").unwrap();
        cfg.apply(&Overrides { scheme: Some(Scheme::Partial), dict_size: Some(96), seed: Some(9), ..Overrides::default() });
        assert_eq!((cfg.mcem.scheme, cfg.mcem.dict_size, cfg.seed), (Scheme::Partial, 96, 9));
        assert_eq!(cfg.evaluate.schemes, vec![Scheme::Partial]);
        assert_eq!(cfg.evaluate.dict_sizes, vec![96]);
    }

    #[test]
    fn partial_k96_uses_the_table_split() {
        let cfg = RunConfig::default();
        let sc = cfg.mcem.scheme_config(Scheme::Partial, 96, 0).unwrap();
        assert_eq!((sc.k_ego, sc.k_env), (64, 32));
        assert_eq!(ego_rank(&cfg).unwrap(), 64);
        let adaptive = RunConfig { mcem: McemSection { scheme: Scheme::Adaptive, ..McemSection::default() }, ..cfg };
        assert_eq!(ego_rank(&adaptive).unwrap_err().kind, ErrorKind::Config);
    }

    #[test]
    fn error_kinds_map_to_exit_codes() {
        assert_eq!(CliError::from(McemError::MissingEgoPrior(Scheme::Fixed)).exit_code(), 2);
        assert_eq!(CliError::from(SceneError::Manifest("x".into())).exit_code(), 3);
        assert_eq!(CliError::from(McemError::Singular { f: 0, t: 0 }).exit_code(), 4);
        assert_eq!(CliError::from(WienerError::NonFinite { f: 1, t: 2 }).exit_code(), 4);
    }

    #[test]
    fn usage_errors_exit_with_config_code() {
        assert_eq!(main_with_args(["egonoise", "enhance", "--scheme", "bogus"]), 2);
        assert_eq!(main_with_args(["egonoise", "frobnicate"]), 2);
    }
}
