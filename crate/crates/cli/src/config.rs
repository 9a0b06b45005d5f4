//! Flat key-value configuration: one `key = value` pair per line, `#`
//! comments, dotted keys. Lists are comma-separated; synthetic words are
//! comma-separated groups of space-separated phone ids.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use zrspeech_core::matching::FrameMetric;
use zrspeech_core::matlayers::GranularityGrid;
use zrspeech_core::reinforce::FusionConfig;

use crate::error::{CliError, Result};

/// Raw parsed key-value pairs with typed accessors that track which keys
/// were consumed (unknown keys are configuration errors).
pub struct RawConfig {
    values: BTreeMap<String, String>,
    consumed: std::cell::RefCell<std::collections::BTreeSet<String>>,
    base_dir: PathBuf,
}

impl RawConfig {
    pub fn parse(path: impl AsRef<Path>) -> Result<RawConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut values = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!(
                    "{}:{}: expected `key = value`",
                    path.display(),
                    idx + 1
                ))
            })?;
            let key = key.trim().to_string();
            if values.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(CliError::Config(format!(
                    "{}:{}: duplicate key `{key}`",
                    path.display(),
                    idx + 1
                )));
            }
        }
        Ok(RawConfig {
            values,
            consumed: Default::default(),
            base_dir: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        })
    }

    fn get(&self, key: &str) -> Option<&str> {
        let v = self.values.get(key).map(String::as_str);
        if v.is_some() {
            self.consumed.borrow_mut().insert(key.to_string());
        }
        v
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| CliError::Config(format!("missing required key `{key}`")))
    }

    pub fn str_or(&self, key: &str, default: &str) -> String {
        self.get(key).unwrap_or(default).to_string()
    }

    pub fn opt_path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(|v| self.resolve(v))
    }

    /// Paths are resolved relative to the config file's directory.
    pub fn resolve(&self, value: &str) -> PathBuf {
        let p = Path::new(value);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn parse_as<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse::<T>()
                .map_err(|_| CliError::Config(format!("key `{key}`: cannot parse `{v}`"))),
        }
    }

    pub fn list_usize(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .map_err(|_| CliError::Config(format!("key `{key}`: bad integer `{p}`")))
                })
                .collect(),
        }
    }

    pub fn list_f64(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<f64>()
                        .map_err(|_| CliError::Config(format!("key `{key}`: bad number `{p}`")))
                })
                .collect(),
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(CliError::Config(format!(
                "key `{key}`: expected true or false, got `{v}`"
            ))),
        }
    }

    /// Fails on keys that no consumer asked for; catches typos early.
    pub fn finish(&self) -> Result<()> {
        let consumed = self.consumed.borrow();
        let unknown: Vec<&String> = self
            .values
            .keys()
            .filter(|k| !consumed.contains(*k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(format!(
                "unknown configuration keys: {}",
                unknown
                    .iter()
                    .map(|s| s.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            )))
        }
    }
}

/// Synthetic language description for the corpus generator.
#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub phones: usize,
    pub dim: usize,
    /// Words as phone-id sequences.
    pub words: Vec<Vec<usize>>,
    /// Inclusive per-phone duration range in frames.
    pub duration: (usize, usize),
    pub utt_words: usize,
    pub speakers: usize,
    /// Scale of phone mean separation.
    pub phone_sep: f64,
    /// Scale of per-speaker mean shifts.
    pub speaker_shift: f64,
    /// Frame noise standard deviation.
    pub noise: f64,
    pub utterances: usize,
    pub queries: usize,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.phones == 0 || self.dim == 0 {
            return Err(CliError::Config("synth.phones and synth.dim must be >= 1".into()));
        }
        if self.words.is_empty() || self.words.iter().any(Vec::is_empty) {
            return Err(CliError::Config("synth.words must be non-empty".into()));
        }
        if self.words.iter().flatten().any(|&p| p >= self.phones) {
            return Err(CliError::Config("synth.words uses a phone id out of range".into()));
        }
        if self.duration.0 < 3 || self.duration.1 < self.duration.0 {
            return Err(CliError::Config(
                "synth.duration must be an increasing range with minimum >= 3 frames".into(),
            ));
        }
        if self.utt_words == 0 || self.speakers == 0 || self.utterances == 0 || self.queries == 0 {
            return Err(CliError::Config(
                "synth utterance, word, speaker and query counts must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Everything the pipeline needs, resolved and validated.
#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus_manifest: PathBuf,
    pub gold_phones: Option<PathBuf>,
    pub gold_words: Option<PathBuf>,
    pub query_manifest: Option<PathBuf>,
    pub relevance: Option<PathBuf>,
    pub cmvn: bool,
    pub context: usize,
    pub aux_utt: Option<PathBuf>,
    pub aux_frame: Vec<PathBuf>,
    pub grid: GranularityGrid,
    pub max_epochs: usize,
    pub mr_rounds: usize,
    pub fusion: FusionConfig,
    pub mr_weights: Option<Vec<f64>>,
    pub lda_beta: f64,
    pub lda_sweeps: usize,
    pub net_hidden: Vec<usize>,
    pub net_bottleneck: usize,
    pub net_learning_rate: f64,
    pub net_minibatch: usize,
    pub net_epochs: usize,
    pub iterations: usize,
    pub search_metric: FrameMetric,
    pub search_znorm: bool,
    pub eval_tolerance: usize,
    pub abx_max_per_pair: usize,
    pub synth: Option<SynthSpec>,
    pub synth_dir: Option<PathBuf>,
}

/// Parses words like `0 1 2,3 4`: comma-separated words of space-separated
/// phone ids.
fn parse_words(raw: &str) -> Result<Vec<Vec<usize>>> {
    raw.split(',')
        .map(|word| {
            word.split_whitespace()
                .map(|p| {
                    p.parse::<usize>()
                        .map_err(|_| CliError::Config(format!("synth.words: bad phone id `{p}`")))
                })
                .collect::<Result<Vec<usize>>>()
        })
        .collect()
}

pub fn load_config(path: impl AsRef<Path>, seed_override: Option<u64>) -> Result<PipelineConfig> {
    let raw = RawConfig::parse(path)?;
    let seed = match seed_override {
        Some(s) => {
            // Consume the key if present so it does not trip finish().
            let _ = raw.parse_as::<u64>("seed", 0)?;
            s
        }
        None => raw
            .require("seed")?
            .parse::<u64>()
            .map_err(|_| CliError::Config("key `seed`: not an integer".into()))?,
    };
    let out_dir = raw.resolve(raw.require("out.dir")?);

    let synth = if raw.values.keys().any(|k| k.starts_with("synth.")) {
        let duration = raw.list_usize("synth.duration", &[4, 8])?;
        if duration.len() != 2 {
            return Err(CliError::Config("synth.duration expects `min,max`".into()));
        }
        let spec = SynthSpec {
            phones: raw.parse_as("synth.phones", 6usize)?,
            dim: raw.parse_as("synth.dim", 12usize)?,
            words: parse_words(&raw.str_or("synth.words", "0 1,2 3,4 5"))?,
            duration: (duration[0], duration[1]),
            utt_words: raw.parse_as("synth.utt_words", 4usize)?,
            speakers: raw.parse_as("synth.speakers", 2usize)?,
            phone_sep: raw.parse_as("synth.phone_sep", 2.0f64)?,
            speaker_shift: raw.parse_as("synth.speaker_shift", 1.0f64)?,
            noise: raw.parse_as("synth.noise", 0.3f64)?,
            utterances: raw.parse_as("synth.utterances", 50usize)?,
            queries: raw.parse_as("synth.queries", 5usize)?,
        };
        spec.validate()?;
        Some(spec)
    } else {
        None
    };
    let synth_dir = raw.opt_path("synth.dir");

    let kernel = raw.list_f64("mr.kernel", &[0.25, 0.5, 0.25])?;
    if kernel.len() != 3 {
        return Err(CliError::Config("mr.kernel expects three numbers".into()));
    }
    let fusion = FusionConfig {
        kernel: [kernel[0], kernel[1], kernel[2]],
        theta: raw.parse_as("mr.theta", 1.0f64)?,
        merge_radius: raw.parse_as("mr.merge_radius", 3usize)?,
        min_len: raw.parse_as("mr.min_segment", 3usize)?,
    };
    let mr_weights = match raw.get("mr.weights") {
        None => None,
        Some(v) => Some(
            v.split(',')
                .map(|p| {
                    p.trim()
                        .parse::<f64>()
                        .map_err(|_| CliError::Config(format!("mr.weights: bad number `{p}`")))
                })
                .collect::<Result<Vec<f64>>>()?,
        ),
    };

    let grid = GranularityGrid::new(
        raw.list_usize("grid.m", &[3, 5, 7])?,
        raw.list_usize("grid.n", &[4, 8, 16])?,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;

    let metric: FrameMetric = raw
        .str_or("search.metric", "euclidean")
        .parse()
        .map_err(|e: zrspeech_core::Error| CliError::Config(e.to_string()))?;

    let config = PipelineConfig {
        seed,
        out_dir,
        corpus_manifest: raw.resolve(raw.require("corpus.manifest")?),
        gold_phones: raw.opt_path("corpus.gold_phones"),
        gold_words: raw.opt_path("corpus.gold_words"),
        query_manifest: raw.opt_path("corpus.queries"),
        relevance: raw.opt_path("corpus.relevance"),
        cmvn: raw.bool_or("frontend.cmvn", true)?,
        context: raw.parse_as("frontend.context", 4usize)?,
        aux_utt: raw.opt_path("frontend.aux_utt"),
        aux_frame: match raw.get("frontend.aux_frame") {
            None => Vec::new(),
            Some(v) => v.split(',').map(|p| raw.resolve(p.trim())).collect(),
        },
        grid,
        max_epochs: raw.parse_as("mat.max_epochs", 10usize)?,
        mr_rounds: raw.parse_as("mr.rounds", 1usize)?,
        fusion,
        mr_weights,
        lda_beta: raw.parse_as("lda.beta", 0.01f64)?,
        lda_sweeps: raw.parse_as("lda.sweeps", 200usize)?,
        net_hidden: raw.list_usize("net.hidden", &[256, 256])?,
        net_bottleneck: raw.parse_as("net.bottleneck", 39usize)?,
        net_learning_rate: raw.parse_as("net.learning_rate", 0.1f64)?,
        net_minibatch: raw.parse_as("net.minibatch", 64usize)?,
        net_epochs: raw.parse_as("net.epochs", 20usize)?,
        iterations: raw.parse_as("pipeline.iterations", 1usize)?,
        search_metric: metric,
        search_znorm: raw.bool_or("search.znorm", true)?,
        eval_tolerance: raw.parse_as("eval.tolerance", 2usize)?,
        abx_max_per_pair: raw.parse_as("eval.abx_max_per_pair", 50usize)?,
        synth,
        synth_dir,
    };
    if config.iterations == 0 {
        return Err(CliError::Config("pipeline.iterations must be >= 1".into()));
    }
    raw.finish()?;
    Ok(config)
}
