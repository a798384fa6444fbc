//! Pipeline configuration: a TOML file, overridden by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lmrc::align::{AlignmentConfig, Embedder, HashingEmbedder, TableEmbedder};
use lmrc::backend::{BatchOptions, HttpConfig, MockScript};
use lmrc::prompting::PromptConfig;
use lmrc::rcp::{HashingEncoderSpec, RcpConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusPaths {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Relation inventory (`rel_info.json`).
    pub relations: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSpec {
    pub kind: BackendKind,
    pub mock: MockScript,
    pub http: HttpConfig,
    pub parallelism: usize,
    pub rate_per_second: Option<f64>,
    pub max_tokens: u32,
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec {
            kind: BackendKind::Mock,
            mock: MockScript::default(),
            http: HttpConfig::default(),
            parallelism: 4,
            rate_per_second: None,
            max_tokens: 1024,
        }
    }
}

impl BackendSpec {
    pub fn batch(&self) -> BatchOptions {
        BatchOptions {
            parallelism: self.parallelism,
            rate_per_second: self.rate_per_second,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbedderSpec {
    Hashing { dim: usize },
    Table { path: PathBuf },
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec::Hashing { dim: 512 }
    }
}

impl EmbedderSpec {
    pub fn build(&self) -> Result<Box<dyn Embedder>> {
        Ok(match self {
            EmbedderSpec::Hashing { dim } => {
                if *dim == 0 {
                    bail!(lmrc::Error::Config("embedder dim must be at least 1".into()));
                }
                Box::new(HashingEmbedder { dim: *dim })
            }
            EmbedderSpec::Table { path } => Box::new(TableEmbedder::load(path)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Overrides every other seed in the file.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus: CorpusPaths,
    pub encoder: HashingEncoderSpec,
    pub rcp: RcpConfig,
    pub prompt: PromptConfig,
    pub backend: BackendSpec,
    pub alignment: AlignmentConfig,
    pub embedder: EmbedderSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            output_dir: "out".into(),
            corpus: CorpusPaths::default(),
            encoder: HashingEncoderSpec::default(),
            rcp: RcpConfig::default(),
            prompt: PromptConfig::default(),
            backend: BackendSpec::default(),
            alignment: AlignmentConfig::default(),
            embedder: EmbedderSpec::default(),
        }
    }
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| lmrc::Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| lmrc::Error::Config(format!("{}: {e}", path.display())))?;
        if cfg.backend.http.api_key.is_some() {
            bail!(lmrc::Error::Config(format!(
                "{}: api keys belong in the environment, not the config file",
                path.display()
            )));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let c = &mut cfg.corpus;
        for p in [&mut c.train, &mut c.dev, &mut c.test, &mut c.relations].into_iter().flatten() {
            rebase(base, p);
        }
        rebase(base, &mut cfg.output_dir);
        if let EmbedderSpec::Table { path } = &mut cfg.embedder {
            rebase(base, path);
        }
        Ok(cfg)
    }

    /// Pushes the top-level seed into every seeded component.
    pub fn propagate_seed(&mut self) {
        self.rcp.seed = self.seed;
        self.encoder.seed = self.seed;
        self.backend.mock.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.rcp.validate()?;
        self.prompt.validate()?;
        self.alignment.validate()?;
        self.backend.mock.validate()?;
        if self.backend.parallelism == 0 {
            bail!(lmrc::Error::Config("backend parallelism must be at least 1".into()));
        }
        if self.backend.max_tokens == 0 {
            bail!(lmrc::Error::Config("max_tokens must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Fails with a config error when a required input is unset or missing.
pub fn require<'a>(what: &str, p: &'a Option<PathBuf>) -> Result<&'a Path> {
    let Some(p) = p else {
        bail!(lmrc::Error::Config(format!("no {what} path configured")));
    };
    if !p.exists() {
        bail!(lmrc::Error::Config(format!("{what} path {} does not exist", p.display())));
    }
    Ok(p)
}

pub fn require_file(what: &str, p: &Path) -> Result<()> {
    if !p.exists() {
        bail!(lmrc::Error::Config(format!("{what} {} does not exist", p.display())));
    }
    Ok(())
}

pub fn read(p: &Path) -> Result<String> {
    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}
