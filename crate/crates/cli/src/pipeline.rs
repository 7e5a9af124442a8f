//! Orchestration of corpus building, the four training phases, evaluation
//! and reporting over one run directory.
//!
//! ```text
//! <run_dir>/checkpoints/{embedder,frn-s,ffn,pcd,icd,frn-ti}.bin
//! <run_dir>/<phase>/train.log and <run_dir>/<phase>/<step>/ snapshots
//! <run_dir>/eval/{result.json,metrics.csv,metrics.txt,recognition.txt}
//! <run_dir>/report/{report.txt,contact_sheet.png}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use mdfr_core::critics::{Critic, Embedder};
use mdfr_core::data::{build_corpus, derive_seed, Corpus, Sample};
use mdfr_core::evaluation::{format_bins, run_protocol, ProtocolResult};
use mdfr_core::generator::Generator;
use mdfr_core::image::FaceImage;
use mdfr_core::nn::NetRole;
use mdfr_core::training::{
    train_embedder, train_ffn_s, train_frn_s, train_frn_ti, FfnNets, PhaseKind, RunOutput, TrainLog,
};

use crate::config::{resolve, RunConfig};
use crate::error::{CliError, Result};

pub const EMBEDDER_FILE: &str = "embedder.bin";
pub const FRN_S_FILE: &str = "frn-s.bin";
pub const FFN_FILE: &str = "ffn.bin";
pub const FRN_TI_FILE: &str = "frn-ti.bin";

/// Seed stream of each freshly initialized network.
fn init_stream(role: NetRole) -> u64 {
    match role {
        NetRole::Embedder => 1,
        NetRole::Frn => 2,
        NetRole::Ffn => 3,
        NetRole::Pcd => 4,
        NetRole::Icd => 5,
    }
}

#[derive(Clone, Debug)]
pub struct Run {
    pub config: RunConfig,
    pub corpus_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Run {
    /// Resolves relative paths against `base`; `run_dir` overrides the configured one.
    pub fn new(config: RunConfig, base: &Path, run_dir: Option<PathBuf>) -> Self {
        let corpus_dir = resolve(base, &config.paths.corpus);
        let run_dir = run_dir.unwrap_or_else(|| resolve(base, &config.paths.run_dir));
        Self { config, corpus_dir, run_dir }
    }

    pub fn checkpoint(&self, file: &str) -> PathBuf {
        self.run_dir.join("checkpoints").join(file)
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.run_dir.join("eval")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.run_dir.join("report")
    }

    fn seed(&self, role: NetRole) -> u64 {
        derive_seed(self.config.networks.seed, init_stream(role))
    }

    pub fn build_data(&self) -> Result<Corpus> {
        Ok(build_corpus(&self.config.corpus, &self.corpus_dir)?)
    }

    pub fn open_corpus(&self) -> Result<Corpus> {
        if !self.corpus_dir.join("manifest.jsonl").is_file() {
            return Err(CliError::Missing { what: "corpus (run `data build` first)", path: self.corpus_dir.clone() });
        }
        Ok(Corpus::open(&self.corpus_dir)?)
    }

    fn require(&self, file: &str, what: &'static str) -> Result<PathBuf> {
        let p = self.checkpoint(file);
        if !p.is_file() {
            return Err(CliError::Missing { what, path: p });
        }
        Ok(p)
    }

    pub fn load_embedder(&self) -> Result<Embedder<f32>> {
        Ok(Embedder::load(self.require(EMBEDDER_FILE, "embedder checkpoint")?)?)
    }

    pub fn load_frn(&self, file: &str) -> Result<Generator<f32>> {
        Ok(Generator::load(self.require(file, "restoration checkpoint")?, Some(NetRole::Frn))?)
    }

    pub fn load_ffn(&self) -> Result<Generator<f32>> {
        Ok(Generator::load(self.require(FFN_FILE, "frontalization checkpoint")?, Some(NetRole::Ffn))?)
    }

    /// Runs one phase on every corpus sample and stores its final networks.
    pub fn train(&self, phase: PhaseKind) -> Result<TrainLog> {
        let corpus = self.open_corpus()?;
        let samples = corpus.load_all()?;
        self.train_on(phase, &corpus, &samples)
    }

    pub fn train_on(&self, phase: PhaseKind, corpus: &Corpus, samples: &[Sample]) -> Result<TrainLog> {
        let cfg = self.config.phases.get(phase);
        let nets = &self.config.networks;
        let size = corpus.image_size();
        let out = RunOutput::new(&self.run_dir);
        fs::create_dir_all(self.run_dir.join("checkpoints")).map_err(|e| io_err(&self.run_dir, e))?;
        match phase {
            PhaseKind::Embedder => {
                let net = Embedder::new(nets.embedder(size, corpus.num_identities()), self.seed(NetRole::Embedder))?;
                let (net, log) = train_embedder(cfg, corpus, samples, net, Some(&out))?;
                net.save(self.checkpoint(EMBEDDER_FILE))?;
                Ok(log)
            }
            PhaseKind::FrnS => {
                let embedder = self.load_embedder()?;
                let frn = Generator::new(NetRole::Frn, nets.generator.clone(), self.seed(NetRole::Frn))?;
                let (frn, log) = train_frn_s(cfg, corpus, samples, &embedder, frn, Some(&out))?;
                frn.save(self.checkpoint(FRN_S_FILE))?;
                Ok(log)
            }
            PhaseKind::FfnS => {
                let embedder = self.load_embedder()?;
                let map_channels = embedder.config().map_channels();
                let start = FfnNets {
                    ffn: Generator::new(NetRole::Ffn, nets.generator.clone(), self.seed(NetRole::Ffn))?,
                    pcd: Critic::new(NetRole::Pcd, nets.pose_critic(size), self.seed(NetRole::Pcd))?,
                    icd: Critic::new(NetRole::Icd, nets.identity_critic(size, map_channels), self.seed(NetRole::Icd))?,
                };
                let (trained, log) = train_ffn_s(cfg, corpus, samples, &embedder, start, Some(&out))?;
                trained.save(&self.run_dir.join("checkpoints"))?;
                Ok(log)
            }
            PhaseKind::FrnTi => {
                let embedder = self.load_embedder()?;
                let ffn = self.load_ffn()?;
                let frn = self.load_frn(FRN_S_FILE)?;
                let (frn, log) = train_frn_ti(cfg, corpus, samples, &embedder, &ffn, frn, Some(&out))?;
                frn.save(self.checkpoint(FRN_TI_FILE))?;
                Ok(log)
            }
        }
    }

    /// Evaluates the task-integrated network and writes the eval directory.
    pub fn evaluate(&self) -> Result<ProtocolResult> {
        let corpus = self.open_corpus()?;
        let samples = corpus.load_all()?;
        let embedder = self.load_embedder()?;
        let net = self.load_frn(FRN_TI_FILE)?;
        let ev = &self.config.eval;
        let result = run_protocol(&corpus, &samples, &embedder, &net, &ev.yaw_bins, ev.pair_seed)?;
        let dir = self.eval_dir();
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let json = serde_json::to_string_pretty(&result).map_err(mdfr_core::Error::from)?;
        write(&dir.join("result.json"), json)?;
        write(&dir.join("metrics.csv"), format!("{}{}", result.degraded.to_csv(), csv_body(&result.frontalized.to_csv())))?;
        write(&dir.join("metrics.txt"), format!("{}\n{}", result.degraded, result.frontalized))?;
        write(&dir.join("recognition.txt"), recognition_text(&result))?;
        Ok(result)
    }

    pub fn load_result(&self) -> Result<Option<ProtocolResult>> {
        let p = self.eval_dir().join("result.json");
        if !p.is_file() {
            return Ok(None);
        }
        let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
        Ok(Some(serde_json::from_str(&text).map_err(mdfr_core::Error::from)?))
    }

    /// Writes the report text and contact sheet; returns the text.
    pub fn report(&self) -> Result<String> {
        let Some(result) = self.load_result()? else {
            return Ok(format!("no results in {}\n", self.run_dir.display()));
        };
        let mut text = report_text(&result);
        if let Ok(corpus) = self.open_corpus() {
            let sheet = self.contact_sheet(&corpus)?;
            let dir = self.report_dir();
            fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
            sheet.save_png(dir.join("contact_sheet.png"))?;
            text.push_str(&format!(
                "\ncontact sheet: {} rows (input | degraded | restored | frontalized | ground truth)\n",
                sheet.height() / corpus.image_size()
            ));
            write(&dir.join("report.txt"), text.clone())?;
        }
        Ok(text)
    }

    /// Rows spread evenly over the corpus; columns are input, degraded,
    /// restored, frontalized and ground truth. Missing networks leave gray tiles.
    pub fn contact_sheet(&self, corpus: &Corpus) -> Result<FaceImage> {
        let n = corpus.len();
        let rows = self.config.eval.sheet_rows.min(n);
        let size = corpus.image_size();
        let frn_s = self.load_frn(FRN_S_FILE).ok();
        let frn_ti = self.load_frn(FRN_TI_FILE).ok();
        let blank = FaceImage::constant(size, size, 0.5);
        let mut tiles: Vec<Vec<FaceImage>> = Vec::with_capacity(rows);
        for r in 0..rows {
            let s = corpus.load_sample(r * n / rows)?;
            let restored = frn_s.as_ref().map_or(Ok(blank.clone()), |f| f.restore(&s.lq))?;
            let frontalized = frn_ti.as_ref().map_or(Ok(blank.clone()), |f| f.restore(&s.lq))?;
            tiles.push(vec![s.hq, s.lq, restored, frontalized, s.frontal]);
        }
        Ok(FaceImage::from_fn(rows * size, 5 * size, |y, x, c| tiles[y / size][x / size].get(y % size, x % size, c)))
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io { path: path.to_path_buf(), source: e }
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn csv_body(csv: &str) -> &str {
    csv.split_once('\n').map_or("", |(_, rest)| rest)
}

pub fn recognition_text(r: &ProtocolResult) -> String {
    format!(
        "{}\n{}\nverification accuracy, degraded: {:.2}%\nverification accuracy, restored: {:.2}%\n",
        format_bins("rank-1, degraded probes", &r.raw.bins),
        format_bins("rank-1, restored probes", &r.restored.bins),
        100.0 * r.raw.verification_accuracy,
        100.0 * r.restored.verification_accuracy,
    )
}

pub fn report_text(r: &ProtocolResult) -> String {
    format!("{}\n{}\n{}", recognition_text(r), r.degraded, r.frontalized)
}
