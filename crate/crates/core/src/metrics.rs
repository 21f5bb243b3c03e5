//! Scale-invariant SDR and per-scheme aggregation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Magnitude cap of [`si_sdr`] in dB.
pub const SI_SDR_CAP_DB: f64 = 100.0;

/// Two-sided 95 % normal quantile.
pub const Z95: f64 = 1.96;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("reference has {reference} samples, estimate has {estimate}")]
    Length { reference: usize, estimate: usize },
    #[error("reference signal is all zeros")]
    ZeroReference,
    #[error("non-finite sample in {0}")]
    NonFinite(&'static str),
    #[error("aggregation needs at least 2 values, got {0}")]
    TooFew(usize),
    #[error("metric table: {0}")]
    Parse(String),
}

/// `10 log10(|a r|^2 / |e - a r|^2)` with `a = <e, r> / |r|^2`, clamped to
/// `+-SI_SDR_CAP_DB`.
pub fn si_sdr(reference: &[f64], estimate: &[f64]) -> Result<f64, MetricError> {
    if reference.len() != estimate.len() {
        return Err(MetricError::Length { reference: reference.len(), estimate: estimate.len() });
    }
    if reference.iter().any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite("reference"));
    }
    if estimate.iter().any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite("estimate"));
    }
    let rr: f64 = reference.iter().map(|r| r * r).sum();
    if rr == 0.0 {
        return Err(MetricError::ZeroReference);
    }
    let er: f64 = reference.iter().zip(estimate).map(|(r, e)| r * e).sum();
    let alpha = er / rr;
    let (mut target, mut resid) = (0.0, 0.0);
    for (r, e) in reference.iter().zip(estimate) {
        let t = alpha * r;
        target += t * t;
        resid += (e - t) * (e - t);
    }
    let db = if resid == 0.0 && target > 0.0 {
        SI_SDR_CAP_DB
    } else if target == 0.0 {
        -SI_SDR_CAP_DB
    } else {
        10.0 * (target / resid).log10()
    };
    Ok(db.clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}

/// Mean and 95 % confidence half-width `1.96 sd / sqrt(n)` with the
/// population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub half_width: f64,
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate, MetricError> {
    let n = values.len();
    if n < 2 {
        return Err(MetricError::TooFew(n));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite("aggregate input"));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    Ok(Aggregate { n, mean, std, half_width: Z95 * std / (n as f64).sqrt() })
}

/// SI-SDR of one scene before and after enhancement (reference channel).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetric {
    pub scene: String,
    pub input_db: f64,
    pub output_db: f64,
}

impl SceneMetric {
    pub fn new(scene: impl Into<String>, speech: &[f64], mixture: &[f64], estimate: &[f64]) -> Result<Self, MetricError> {
        Ok(Self { scene: scene.into(), input_db: si_sdr(speech, mixture)?, output_db: si_sdr(speech, estimate)? })
    }

    pub fn delta_db(&self) -> f64 {
        self.output_db - self.input_db
    }
}

/// Results of one scheme and dictionary size on one scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scheme: String,
    pub dict_size: usize,
    pub scenario: String,
    pub scenes: Vec<SceneMetric>,
    pub input: Aggregate,
    pub output: Aggregate,
    pub delta: Aggregate,
}

impl MetricReport {
    pub fn new(
        scheme: impl Into<String>,
        dict_size: usize,
        scenario: impl Into<String>,
        scenes: Vec<SceneMetric>,
    ) -> Result<Self, MetricError> {
        let col = |f: fn(&SceneMetric) -> f64| aggregate(&scenes.iter().map(f).collect::<Vec<_>>());
        Ok(Self {
            input: col(|s| s.input_db)?,
            output: col(|s| s.output_db)?,
            delta: col(SceneMetric::delta_db)?,
            scheme: scheme.into(),
            dict_size,
            scenario: scenario.into(),
            scenes,
        })
    }
}

pub const SUMMARY_HEADER: &str = "# egonoise metrics v1 (SI-SDR, dB)";
const SUMMARY_COLUMNS: &str = "scenario\tscheme\tK\tn\tinput_mean\toutput_mean\tdelta_mean\tdelta_ci95";
pub const SCENE_HEADER: &str = "# egonoise per-scene metrics v1 (SI-SDR, dB)";
const SCENE_COLUMNS: &str = "scenario\tscheme\tK\tscene\tinput_db\toutput_db\tdelta_db";

/// One row per report with 4-decimal aggregates.
pub fn summary_table(reports: &[MetricReport]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n{SUMMARY_COLUMNS}\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            r.scenario, r.scheme, r.dict_size, r.delta.n, r.input.mean, r.output.mean, r.delta.mean, r.delta.half_width
        );
    }
    out
}

/// One row per scene with round-trippable values.
pub fn scene_table(reports: &[MetricReport]) -> String {
    let mut out = format!("{SCENE_HEADER}\n{SCENE_COLUMNS}\n");
    for r in reports {
        for s in &r.scenes {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:?}\t{:?}\t{:?}",
                r.scenario,
                r.scheme,
                r.dict_size,
                s.scene,
                s.input_db,
                s.output_db,
                s.delta_db()
            );
        }
    }
    out
}

/// Per-scene rows of a [`scene_table`]: `(scenario, scheme, K, metric)`.
pub fn parse_scene_table(text: &str) -> Result<Vec<(String, String, usize, SceneMetric)>, MetricError> {
    let mut lines = text.lines();
    if lines.next() != Some(SCENE_HEADER) || lines.next() != Some(SCENE_COLUMNS) {
        return Err(MetricError::Parse("missing header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let c: Vec<&str> = l.split('\t').collect();
            if c.len() != 7 {
                return Err(MetricError::Parse(format!("expected 7 columns: {l}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| MetricError::Parse(format!("bad number `{s}`")));
            let k = c[2].parse().map_err(|_| MetricError::Parse(format!("bad K `{}`", c[2])))?;
            Ok((c[0].to_string(), c[1].to_string(), k, SceneMetric { scene: c[3].to_string(), input_db: num(c[4])?, output_db: num(c[5])? }))
        })
        .collect()
}
