//! Run configuration. Precedence: command-line flags, then the TOML config
//! file, then built-in defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tkgqa_agent::runtime::ObservationRole;
use tkgqa_core::embed::RemoteEmbedderConfig;
use tkgqa_core::search::{SearchSettings, TimeOrder};
use tkgqa_core::SortMode;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    #[default]
    Hash,
    Remote,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub graph: Option<PathBuf>,
    pub store_dir: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub questions: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub library: Option<PathBuf>,
    pub gold_facts: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub dimension: usize,
    pub hash_seed: u64,
    pub url: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub batch_size: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        let remote = RemoteEmbedderConfig::default();
        Self {
            kind: EmbedderKind::Hash,
            dimension: remote.dimension,
            hash_seed: 0,
            url: remote.url,
            model: remote.model,
            api_key_env: remote.api_key_env,
            timeout_secs: remote.timeout_secs,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    /// Chat-completions URL, or `scripted:<path>` for a script file.
    pub url: Option<String>,
    pub model: String,
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub trace: Option<PathBuf>,
    pub observation_role: ObservationRole,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            url: None,
            model: "gpt-4o-mini".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 120,
            max_in_flight: 8,
            trace: None,
            observation_role: ObservationRole::Tool,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub t_max: usize,
    pub limit: usize,
    pub rerank_pool: usize,
    pub sort: SortMode,
    pub time_order: TimeOrder,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub malformed_retry_budget: usize,
    pub observation_cap_bytes: usize,
    pub samples: usize,
    pub record_timings: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        let s = SearchSettings::default();
        Self {
            t_max: 20,
            limit: s.limit,
            rerank_pool: s.rerank_pool,
            sort: s.sort,
            time_order: s.time_order,
            temperature: 1.0,
            max_output_tokens: 4096,
            malformed_retry_budget: 2,
            observation_cap_bytes: 4096,
            samples: 1,
            record_timings: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    pub k_shots: usize,
    pub group_size: usize,
    pub batch_size: usize,
    pub rounds: usize,
    pub validation_size: usize,
    pub top_k: usize,
    pub resample_budget: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            k_shots: 3,
            group_size: 4,
            batch_size: 50,
            rounds: 1,
            validation_size: 200,
            top_k: 1,
            resample_budget: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub embedder: EmbedderConfig,
    pub endpoint: EndpointConfig,
    pub agent: AgentConfig,
    pub mining: MiningConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            data: DataConfig::default(),
            embedder: EmbedderConfig::default(),
            endpoint: EndpointConfig::default(),
            agent: AgentConfig::default(),
            mining: MiningConfig::default(),
        }
    }
}

/// Values given on the command line; `None` leaves the config value alone.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub t_max: Option<usize>,
    pub limit: Option<usize>,
    pub rerank_pool: Option<usize>,
    pub sort: Option<SortMode>,
    pub k_shots: Option<usize>,
    pub group_size: Option<usize>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub embedder: Option<EmbedderKind>,
    pub dimension: Option<usize>,
    pub out: Option<PathBuf>,
    pub store: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub samples: Option<usize>,
    pub rounds: Option<usize>,
    pub library: Option<PathBuf>,
    pub questions: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub gold_facts: Option<PathBuf>,
    pub trace: Option<PathBuf>,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    /// Parses a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let d = &mut cfg.data;
        for p in [
            &mut d.graph,
            &mut d.store_dir,
            &mut d.index,
            &mut d.questions,
            &mut d.train,
            &mut d.validation,
            &mut d.library,
            &mut d.gold_facts,
            &mut cfg.endpoint.trace,
        ] {
            resolve(base, p);
        }
        if cfg.out.is_relative() {
            cfg.out = base.join(&cfg.out);
        }
        if let Some(url) = &cfg.endpoint.url {
            if let Some(script) = url.strip_prefix("scripted:") {
                let p = Path::new(script);
                if p.is_relative() {
                    cfg.endpoint.url = Some(format!("scripted:{}", base.join(p).display()));
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(config: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match config {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        fn set<T: Clone>(dst: &mut T, src: &Option<T>) {
            if let Some(v) = src {
                *dst = v.clone();
            }
        }
        fn set_opt<T: Clone>(dst: &mut Option<T>, src: &Option<T>) {
            if src.is_some() {
                *dst = src.clone();
            }
        }
        set(&mut self.seed, &o.seed);
        set(&mut self.agent.t_max, &o.t_max);
        set(&mut self.agent.limit, &o.limit);
        set(&mut self.agent.rerank_pool, &o.rerank_pool);
        set(&mut self.agent.sort, &o.sort);
        set(&mut self.agent.samples, &o.samples);
        set(&mut self.mining.k_shots, &o.k_shots);
        set(&mut self.mining.group_size, &o.group_size);
        set(&mut self.mining.rounds, &o.rounds);
        set_opt(&mut self.endpoint.url, &o.endpoint);
        set(&mut self.endpoint.model, &o.model);
        set_opt(&mut self.endpoint.trace, &o.trace);
        set(&mut self.embedder.kind, &o.embedder);
        set(&mut self.embedder.dimension, &o.dimension);
        set(&mut self.out, &o.out);
        set_opt(&mut self.data.store_dir, &o.store);
        set_opt(&mut self.data.index, &o.index);
        set_opt(&mut self.data.library, &o.library);
        set_opt(&mut self.data.questions, &o.questions);
        set_opt(&mut self.data.train, &o.train);
        set_opt(&mut self.data.validation, &o.validation);
        set_opt(&mut self.data.gold_facts, &o.gold_facts);
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Usage(m));
        let a = &self.agent;
        if !(1..=100).contains(&a.t_max) {
            return bad(format!("t_max must be in [1, 100], got {}", a.t_max));
        }
        if !(1..=100).contains(&a.limit) {
            return bad(format!("limit must be in [1, 100], got {}", a.limit));
        }
        if a.rerank_pool < a.limit {
            return bad(format!("rerank_pool ({}) must be at least limit ({})", a.rerank_pool, a.limit));
        }
        if a.temperature.is_nan() || a.temperature < 0.0 {
            return bad("temperature must be non-negative".into());
        }
        if a.samples == 0 || a.max_output_tokens == 0 {
            return bad("samples and max_output_tokens must be positive".into());
        }
        if self.embedder.dimension < 2 {
            return bad("embedder dimension must be at least 2".into());
        }
        if self.endpoint.max_in_flight == 0 {
            return bad("max_in_flight must be positive".into());
        }
        let m = &self.mining;
        if m.group_size == 0 || m.batch_size == 0 || m.rounds == 0 || m.validation_size == 0 {
            return bad("group_size, batch_size, rounds and validation_size must be positive".into());
        }
        Ok(())
    }

    pub fn store_dir(&self) -> Result<PathBuf, CliError> {
        self.data
            .store_dir
            .clone()
            .ok_or_else(|| CliError::Usage("no store directory given (--store or data.store_dir)".into()))
    }

    pub fn index_path(&self) -> Result<PathBuf, CliError> {
        match &self.data.index {
            Some(p) => Ok(p.clone()),
            None => Ok(self.store_dir()?.join("index.bin")),
        }
    }

    pub fn search_settings(&self) -> SearchSettings {
        SearchSettings {
            limit: self.agent.limit,
            rerank_pool: self.agent.rerank_pool,
            sort: self.agent.sort,
            time_order: self.agent.time_order,
        }
    }
}

/// Fails with a config error when a referenced input file is missing.
pub fn require(path: Option<&PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    let p = path.ok_or_else(|| CliError::Usage(format!("no {what} given")))?;
    if !p.exists() {
        return Err(CliError::Usage(format!("{what} {} does not exist", p.display())));
    }
    Ok(p.clone())
}
