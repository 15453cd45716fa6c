//! Flag / environment / config-file resolution and value parsing.
//!
//! Every option can come from a flag, a `RISKSET_*` environment variable, or a
//! TOML config file with the same keys in snake_case. Flags win over the
//! environment, which wins over the file.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Deserializer, Serialize};

use riskset::oracle::{
    exact_oracle, indicator_similarity, normalized_oracle, EquivalenceOracle, JaccardSimilarity, RemoteConfig,
    RemoteOracle,
};
use riskset::simulation::{ProbLaw, SyntheticSpec};
use riskset::ReliabilityMeasure;

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Options {
    /// Dataset in JSON Lines format.
    #[arg(long, global = true, env = "RISKSET_DATA")]
    pub data: Option<PathBuf>,

    /// Calibration JSON written by `calibrate` (for `predict`).
    #[arg(long, global = true, env = "RISKSET_CALIBRATION")]
    pub calibration: Option<PathBuf>,

    /// Stage-1 risk level: a value, a comma list, or start:stop:step.
    #[arg(long, global = true, env = "RISKSET_ALPHA")]
    #[serde(deserialize_with = "grid_text")]
    pub alpha: Option<String>,

    /// Stage-2 risk level (same syntax as --alpha).
    #[arg(long, global = true, env = "RISKSET_BETA")]
    #[serde(deserialize_with = "grid_text")]
    pub beta: Option<String>,

    /// Overall risk level grid for `dedup-report`.
    #[arg(long, global = true, env = "RISKSET_EPSILON")]
    #[serde(deserialize_with = "grid_text")]
    pub epsilon: Option<String>,

    /// Fraction of records used for calibration [default: 0.5].
    #[arg(long, global = true, env = "RISKSET_SPLIT_RATIO")]
    pub split_ratio: Option<f64>,

    /// Master seed for splits and synthetic data [default: 42].
    #[arg(long, global = true, env = "RISKSET_SEED")]
    pub seed: Option<u64>,

    /// Number of trials [default: 1; 500 for `simulate`].
    #[arg(long, global = true, env = "RISKSET_TRIALS")]
    pub trials: Option<usize>,

    /// exact | normalized | remote:<URL> [default: exact].
    #[arg(long, global = true, env = "RISKSET_ORACLE")]
    pub oracle: Option<String>,

    /// frequency | semantic-diversity[:indicator|:jaccard] [default: frequency].
    #[arg(long, global = true, env = "RISKSET_MEASURE")]
    pub measure: Option<String>,

    /// Worker threads [default: all cores].
    #[arg(long, global = true, env = "RISKSET_WORKERS")]
    pub workers: Option<usize>,

    /// Output file.
    #[arg(long, global = true, env = "RISKSET_OUT")]
    pub out: Option<PathBuf>,

    /// Remote oracle request timeout in seconds [default: 10].
    #[arg(long, global = true, env = "RISKSET_REMOTE_TIMEOUT")]
    pub remote_timeout: Option<f64>,

    /// Remote oracle retries after a transport failure [default: 2].
    #[arg(long, global = true, env = "RISKSET_REMOTE_RETRIES")]
    pub remote_retries: Option<usize>,

    /// Synthetic questions per trial [default: 200].
    #[arg(long, global = true, env = "RISKSET_N_QUESTIONS")]
    pub n_questions: Option<usize>,

    /// Synthetic samples per question [default: 30].
    #[arg(long, global = true, env = "RISKSET_MAX_SAMPLES")]
    pub max_samples: Option<usize>,

    /// fixed:P | uniform:LO:HI | two-point:LOW:HIGH:W [default: uniform:0.3:0.9].
    #[arg(long, global = true, env = "RISKSET_CORRECT_PROB")]
    pub correct_prob: Option<String>,

    /// Wrong answers per synthetic question [default: 4].
    #[arg(long, global = true, env = "RISKSET_DISTRACTORS")]
    pub distractors: Option<usize>,

    /// TOML file pre-filling any of the options above.
    #[arg(long, global = true, env = "RISKSET_CONFIG")]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

/// Accepts `0.1`, `"0.1:0.5:0.1"` or `[0.1, 0.2]` in config files.
fn grid_text<'de, D: Deserializer<'de>>(d: D) -> Result<Option<String>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
        List(Vec<f64>),
    }
    Ok(Option::<Raw>::deserialize(d)?.map(|raw| match raw {
        Raw::Num(x) => x.to_string(),
        Raw::Text(s) => s,
        Raw::List(v) => v.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
    }))
}

macro_rules! prefer {
    ($a:ident, $b:ident, $($field:ident),*) => {
        Options { $($field: $a.$field.or($b.$field),)* config: $a.config }
    };
}

impl Options {
    /// Fills options not given on the command line from the config file.
    pub fn resolve(self) -> Result<Self> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let file = load_config(&path)?;
        let cli = self;
        Ok(prefer!(
            cli,
            file,
            data,
            calibration,
            alpha,
            beta,
            epsilon,
            split_ratio,
            seed,
            trials,
            oracle,
            measure,
            workers,
            out,
            remote_timeout,
            remote_retries,
            n_questions,
            max_samples,
            correct_prob,
            distractors
        ))
    }

    pub fn data(&self) -> Result<&Path> {
        self.data.as_deref().context("--data is required")
    }

    pub fn split_ratio(&self) -> f64 {
        self.split_ratio.unwrap_or(0.5)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(42)
    }

    pub fn trials(&self, default: usize) -> Result<usize> {
        match self.trials.unwrap_or(default) {
            0 => bail!("--trials must be at least 1"),
            t => Ok(t),
        }
    }

    pub fn alphas(&self) -> Result<Vec<f64>> {
        parse_grid(self.alpha.as_deref().unwrap_or("0.1")).context("--alpha")
    }

    pub fn betas(&self) -> Result<Vec<f64>> {
        parse_grid(self.beta.as_deref().unwrap_or("0.1")).context("--beta")
    }

    pub fn alpha(&self) -> Result<f64> {
        single(self.alphas()?, "--alpha")
    }

    pub fn beta(&self) -> Result<f64> {
        single(self.betas()?, "--beta")
    }

    pub fn epsilons(&self) -> Result<Vec<f64>> {
        let text = self.epsilon.as_deref().context("--epsilon is required")?;
        parse_grid(text).context("--epsilon")
    }

    pub fn oracle(&self) -> Result<Arc<dyn EquivalenceOracle>> {
        let spec = self.oracle.as_deref().unwrap_or("exact");
        Ok(match spec {
            "exact" => Arc::new(exact_oracle()),
            "normalized" => Arc::new(normalized_oracle()),
            _ => match spec.strip_prefix("remote:") {
                Some(url) if !url.is_empty() => {
                    let mut config = RemoteConfig::new(url);
                    if let Some(secs) = self.remote_timeout {
                        if !(secs > 0.0 && secs.is_finite()) {
                            bail!("--remote-timeout must be positive");
                        }
                        config.timeout = Duration::from_secs_f64(secs);
                    }
                    if let Some(r) = self.remote_retries {
                        config.retries = r;
                    }
                    Arc::new(RemoteOracle::new(config))
                }
                _ => bail!("unknown oracle `{spec}` (expected exact, normalized or remote:<URL>)"),
            },
        })
    }

    pub fn measure(&self, oracle: &Arc<dyn EquivalenceOracle>) -> Result<ReliabilityMeasure> {
        let spec = self.measure.as_deref().unwrap_or("frequency");
        Ok(match spec {
            "frequency" => ReliabilityMeasure::Frequency,
            "semantic-diversity" | "semantic-diversity:indicator" => {
                ReliabilityMeasure::SemanticDiversity(Arc::new(indicator_similarity(oracle.clone())))
            }
            "semantic-diversity:jaccard" => ReliabilityMeasure::SemanticDiversity(Arc::new(JaccardSimilarity)),
            _ => bail!("unknown measure `{spec}` (expected frequency or semantic-diversity[:indicator|:jaccard])"),
        })
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        let default = SyntheticSpec::default();
        let correct_prob = match &self.correct_prob {
            Some(text) => text.parse::<ProbLaw>()?,
            None => default.correct_prob,
        };
        Ok(SyntheticSpec {
            n_questions: self.n_questions.unwrap_or(default.n_questions),
            max_samples: self.max_samples.unwrap_or(default.max_samples),
            correct_prob,
            distractor_count: self.distractors.unwrap_or(default.distractor_count),
            seed: self.seed(),
        })
    }
}

fn load_config(path: &Path) -> Result<Options> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn single(values: Vec<f64>, flag: &str) -> Result<f64> {
    match values.as_slice() {
        [v] => Ok(*v),
        _ => bail!("{flag} takes a single value for this command"),
    }
}

/// `x`, `x,y,z` or `start:stop:step` (inclusive of `stop`).
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let num = |s: &str| -> Result<f64> {
        let v: f64 = s.trim().parse().with_context(|| format!("`{s}` is not a number"))?;
        if !v.is_finite() {
            bail!("`{s}` is not finite");
        }
        Ok(v)
    };
    let parts: Vec<&str> = text.split(':').collect();
    match parts.as_slice() {
        [start, stop, step] => {
            let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
            if step <= 0.0 || stop < start {
                bail!("grid `{text}` needs step > 0 and stop >= start");
            }
            let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
            // rounding keeps 0.1 + 2 * 0.1 from printing as 0.30000000000000004
            Ok((0..count)
                .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
                .collect())
        }
        [_] => text.split(',').map(num).collect(),
        _ => bail!("grid `{text}` must be a value, a comma list, or start:stop:step"),
    }
}
