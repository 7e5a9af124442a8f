//! Run configuration: one TOML file covering paths, corpus, network widths,
//! the four training phases and the evaluation protocol.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use mdfr_core::critics::{CriticConfig, EmbedderConfig};
use mdfr_core::data::CorpusConfig;
use mdfr_core::evaluation::{default_yaw_bins, YawBin};
use mdfr_core::generator::GeneratorConfig;
use mdfr_core::geometry::NUM_KEYPOINTS;
use mdfr_core::training::{PhaseConfig, PhaseKind};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Corpus directory, relative to the config file unless absolute.
    pub corpus: PathBuf,
    /// Run directory for logs, checkpoints and reports.
    pub run_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Networks {
    pub generator: GeneratorConfig,
    /// Stage widths of both critics.
    pub critic_widths: Vec<usize>,
    pub embedder_widths: Vec<usize>,
    pub embedding_dim: usize,
    /// Initialization seed; each network derives its own stream.
    pub seed: u64,
}

impl Default for Networks {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            critic_widths: vec![64, 128, 256, 512, 512],
            embedder_widths: vec![8, 16, 32, 64],
            embedding_dim: 128,
            seed: 0,
        }
    }
}

impl Networks {
    pub fn embedder(&self, image_size: usize, n_classes: usize) -> EmbedderConfig {
        EmbedderConfig { image_size, widths: self.embedder_widths.clone(), dim: self.embedding_dim, n_classes }
    }

    pub fn pose_critic(&self, image_size: usize) -> CriticConfig {
        CriticConfig::vgg11(image_size, NUM_KEYPOINTS, &self.critic_widths)
    }

    pub fn identity_critic(&self, image_size: usize, map_channels: usize) -> CriticConfig {
        CriticConfig::vgg11(image_size, map_channels, &self.critic_widths)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phases {
    pub embedder: PhaseConfig,
    pub frn_s: PhaseConfig,
    pub ffn_s: PhaseConfig,
    pub frn_ti: PhaseConfig,
}

impl Default for Phases {
    fn default() -> Self {
        let mut embedder = PhaseConfig::new(PhaseKind::Embedder);
        embedder.max_steps = 300;
        Self {
            embedder,
            frn_s: PhaseConfig::new(PhaseKind::FrnS),
            ffn_s: PhaseConfig::new(PhaseKind::FfnS),
            frn_ti: PhaseConfig::new(PhaseKind::FrnTi),
        }
    }
}

impl Phases {
    pub fn get(&self, phase: PhaseKind) -> &PhaseConfig {
        match phase {
            PhaseKind::Embedder => &self.embedder,
            PhaseKind::FrnS => &self.frn_s,
            PhaseKind::FfnS => &self.ffn_s,
            PhaseKind::FrnTi => &self.frn_ti,
        }
    }

    pub fn get_mut(&mut self, phase: PhaseKind) -> &mut PhaseConfig {
        match phase {
            PhaseKind::Embedder => &mut self.embedder,
            PhaseKind::FrnS => &mut self.frn_s,
            PhaseKind::FfnS => &mut self.ffn_s,
            PhaseKind::FrnTi => &mut self.frn_ti,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub yaw_bins: Vec<YawBin>,
    /// Seed for drawing the different-identity verification pairs.
    pub pair_seed: u64,
    /// Rows of the report contact sheet.
    pub sheet_rows: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { yaw_bins: default_yaw_bins(), pair_seed: 0, sheet_rows: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub corpus: CorpusConfig,
    pub networks: Networks,
    pub phases: Phases,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths { corpus: "corpus".into(), run_dir: "run".into() },
            corpus: CorpusConfig::default(),
            networks: Networks::default(),
            phases: Phases::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// One validation finding, located in the source text when possible.
#[derive(Clone, Debug, PartialEq)]
pub struct Issue {
    pub line: Option<usize>,
    /// Dotted key path, e.g. `phases.frn_s.lr_frn`.
    pub field: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}: {}", self.field, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

/// Finds the 1-based line of `key` inside table `table` (dotted), tracking
/// `[header]` lines. Falls back to the table header line.
pub fn locate(text: &str, table: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    let mut header_line = None;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = h.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if current == table {
                header_line = Some(n + 1);
            }
            continue;
        }
        if current == table {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim().trim_matches('"') == key {
                    return Some(n + 1);
                }
            }
        }
    }
    header_line
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl RunConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }

    /// Parses TOML text; syntax and type errors carry their line.
    pub fn parse(text: &str) -> std::result::Result<Self, Vec<Issue>> {
        toml::from_str(text).map_err(|e| {
            vec![Issue {
                line: e.span().map(|s| line_of_offset(text, s.start)),
                field: "config".into(),
                message: e.message().to_string(),
            }]
        })
    }

    /// Invariant checks; `text` is used to attach line numbers.
    pub fn issues(&self, text: Option<&str>, base: &Path) -> Vec<Issue> {
        let mut out = Vec::new();
        let mut push = |table: &str, key: &str, message: String| {
            out.push(Issue {
                line: text.and_then(|t| locate(t, table, key)),
                field: if key.is_empty() { table.to_string() } else { format!("{table}.{key}") },
                message,
            });
        };
        // leading identifier of a core error message names the offending key
        let key_of = |msg: &str| -> String {
            let body = msg.split_once(": ").map_or(msg, |(_, b)| b);
            body.split_whitespace().next().unwrap_or("").to_string()
        };

        for (key, p) in [("corpus", &self.paths.corpus), ("run_dir", &self.paths.run_dir)] {
            if p.as_os_str().is_empty() {
                push("paths", key, "path is empty".into());
                continue;
            }
            let full = resolve(base, p);
            let anchor = full.ancestors().find(|a| a.exists());
            if !anchor.is_some_and(|a| a.is_dir()) {
                push("paths", key, format!("{} cannot be created: no existing parent directory", full.display()));
            }
        }
        if let Err(e) = self.corpus.validate() {
            let msg = e.to_string();
            push("corpus", &key_of(&msg), msg);
        }
        let size = self.corpus.image_size;
        let net = &self.networks;
        if let Err(e) = net.generator.validate() {
            push("networks.generator", "", e.to_string());
        } else if net.generator.image_size != size {
            push("networks.generator", "image_size", format!("{} differs from corpus image size {size}", net.generator.image_size));
        }
        if let Err(e) = net.pose_critic(size).validate() {
            push("networks", "critic_widths", e.to_string());
        }
        let emb = net.embedder(size, self.corpus.n_identities.max(1));
        if let Err(e) = emb.validate() {
            push("networks", "embedder_widths", e.to_string());
        } else if !size.is_multiple_of(1 << net.embedder_widths.len()) {
            push("networks", "embedder_widths", format!("{} stride-2 blocks do not divide image size {size}", net.embedder_widths.len()));
        }
        for kind in [PhaseKind::Embedder, PhaseKind::FrnS, PhaseKind::FfnS, PhaseKind::FrnTi] {
            let table = format!("phases.{}", kind.name().replace('-', "_"));
            let p = self.phases.get(kind);
            if p.phase != kind {
                push(&table, "phase", format!("block holds a {} config", p.phase));
            }
            if let Err(e) = p.validate() {
                let msg = e.to_string();
                let key = key_of(&msg);
                let t = if key.starts_with("lambda") { format!("{table}.weights") } else { table.clone() };
                push(&t, &key, msg);
            }
        }
        if self.eval.yaw_bins.is_empty() {
            push("eval", "yaw_bins", "at least one yaw bin is required".into());
        }
        for b in &self.eval.yaw_bins {
            if !(b.lo >= 0.0 && b.lo <= b.hi && b.hi.is_finite()) {
                push("eval", "yaw_bins", format!("bin '{}' has bad bounds [{}, {}]", b.label, b.lo, b.hi));
            }
        }
        if self.eval.sheet_rows == 0 {
            push("eval", "sheet_rows", "must be positive".into());
        }
        out
    }
}

/// Directory that relative paths in the config file at `path` resolve against.
pub fn config_base(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads, parses and fully validates a config file.
pub fn validate_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| CliError::Io { path: path.to_path_buf(), source: e })?;
    let base = config_base(path);
    let cfg = RunConfig::parse(&text).map_err(|issues| CliError::Validation { path: path.to_path_buf(), issues })?;
    let issues = cfg.issues(Some(&text), &base);
    if !issues.is_empty() {
        return Err(CliError::Validation { path: path.to_path_buf(), issues });
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_constants() {
        let c = RunConfig::default();
        assert_eq!(c.corpus.image_size, 128);
        for kind in [PhaseKind::FrnS, PhaseKind::FfnS, PhaseKind::FrnTi] {
            let p = c.phases.get(kind);
            assert_eq!(p.batch_size, 8);
            let w = p.weights;
            assert_eq!([w.lambda1, w.lambda2, w.lambda3, w.lambda4, w.lambda5], [1e4, 1e4, 1e4, 0.1, 1.0]);
            assert_eq!([p.lr_frn, p.lr_ffn, p.lr_pcd, p.lr_icd], [1e-4, 1e-4, 1e-3, 1e-3]);
        }
        assert!(c.issues(None, Path::new(".")).is_empty());
    }

    #[test]
    fn locate_tracks_tables() {
        let text = "[a]\nx = 1\n[b.c]\ny = 2\nx = 3\n";
        assert_eq!(locate(text, "a", "x"), Some(2));
        assert_eq!(locate(text, "b.c", "x"), Some(5));
        assert_eq!(locate(text, "b.c", "z"), Some(3));
        assert_eq!(locate(text, "q", "x"), None);
    }
}
