//! Training phases: embedder pretraining, separate restoration (FRN-S) and
//! frontalization (FFN-S) training, and task-integrated restoration (FRN-TI)
//! distilled from a frozen frontalization teacher.
//!
//! Every phase is single-threaded and deterministic given its configuration,
//! data and initial weights. Networks that a phase does not train are only
//! borrowed immutably.

use std::fmt::{self, Write as _};
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use mdfr_autograd::{clip_global_norm, Adam, AdamConfig, Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::critics::{resize_maps, Critic, Embedder};
use crate::data::{derive_seed, Batch, Corpus, Phase, Sample};
use crate::error::{invalid, Error, Result};
use crate::generator::Generator;
use crate::image::FaceImage;
use crate::losses::{adv_d_graph, adv_g_graph, fa_graph, id_graph, pixel_graph, weighted_sum, AdvForm, LossWeights};
use crate::nn::{Bound, NetRole, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PhaseKind {
    #[serde(rename = "embedder")]
    Embedder,
    #[serde(rename = "frn-s")]
    FrnS,
    #[serde(rename = "ffn-s")]
    FfnS,
    #[serde(rename = "frn-ti")]
    FrnTi,
}

impl PhaseKind {
    pub fn name(self) -> &'static str {
        match self {
            PhaseKind::Embedder => "embedder",
            PhaseKind::FrnS => "frn-s",
            PhaseKind::FfnS => "ffn-s",
            PhaseKind::FrnTi => "frn-ti",
        }
    }
}

impl fmt::Display for PhaseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PhaseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embedder" => Ok(PhaseKind::Embedder),
            "frn-s" => Ok(PhaseKind::FrnS),
            "ffn-s" => Ok(PhaseKind::FfnS),
            "frn-ti" => Ok(PhaseKind::FrnTi),
            other => Err(invalid(format!("unknown phase '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub phase: PhaseKind,
    pub batch_size: usize,
    pub lr_frn: f64,
    pub lr_ffn: f64,
    pub lr_pcd: f64,
    pub lr_icd: f64,
    /// Learning rate of embedder pretraining.
    pub lr_embedder: f64,
    pub weights: LossWeights,
    pub max_steps: usize,
    pub seed: u64,
    pub adv_form: AdvForm,
    /// Global gradient norm limit per network.
    pub grad_clip: f64,
    /// Snapshot interval in steps; 0 writes only the final snapshot.
    pub checkpoint_every: usize,
    /// Stop early once the primary pixel loss of a step is at or below this value.
    pub target_loss: Option<f64>,
}

impl PhaseConfig {
    pub fn new(phase: PhaseKind) -> Self {
        Self {
            phase,
            batch_size: 8,
            lr_frn: 1e-4,
            lr_ffn: 1e-4,
            lr_pcd: 1e-3,
            lr_icd: 1e-3,
            lr_embedder: 1e-3,
            weights: LossWeights::default(),
            max_steps: 1000,
            seed: 0,
            adv_form: AdvForm::MinMax,
            grad_clip: 10.0,
            checkpoint_every: 0,
            target_loss: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        for (name, v) in [
            ("lr_frn", self.lr_frn),
            ("lr_ffn", self.lr_ffn),
            ("lr_pcd", self.lr_pcd),
            ("lr_icd", self.lr_icd),
            ("lr_embedder", self.lr_embedder),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(t) = self.target_loss {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(invalid(format!("target_loss must be non-negative, got {t}")));
            }
        }
        self.weights.validate()
    }

    fn expect(&self, phase: PhaseKind) -> Result<()> {
        if self.phase != phase {
            return Err(invalid(format!("{} config passed to the {} phase", self.phase, phase)));
        }
        self.validate()
    }
}

/// Adam with the shared moment settings and the learning rate `cfg` assigns to `role`.
pub fn make_optimizer(cfg: &PhaseConfig, role: NetRole, params: &ParamSet<f32>) -> Adam {
    let lr = match role {
        NetRole::Frn => cfg.lr_frn,
        NetRole::Ffn => cfg.lr_ffn,
        NetRole::Pcd => cfg.lr_pcd,
        NetRole::Icd => cfg.lr_icd,
        NetRole::Embedder => cfg.lr_embedder,
    };
    Adam::new(AdamConfig::with_lr(lr), params.tensors())
}

/// One logged training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub phase: PhaseKind,
    pub components: Vec<(&'static str, f64)>,
    pub total: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

impl StepLog {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|(n, _)| *n == name).map(|&(_, v)| v)
    }

    pub fn line(&self) -> String {
        let mut s = format!("step={} phase={}", self.step, self.phase);
        for (name, v) in &self.components {
            let _ = write!(s, " {name}={v:.9e}");
        }
        let _ = write!(s, " total={:.9e} grad_norm={:.6e}", self.total, self.grad_norm);
        if self.clipped {
            s.push_str(" clipped=1");
        }
        s
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepLog>,
}

impl TrainLog {
    pub fn to_text(&self) -> String {
        self.records.iter().map(|r| r.line() + "\n").collect()
    }

    pub fn last(&self) -> Option<&StepLog> {
        self.records.last()
    }

    /// Trailing mean of a component over the `window` steps ending at `step` (1-based).
    pub fn moving_average(&self, name: &str, window: usize, step: usize) -> Option<f64> {
        let end = self.records.iter().position(|r| r.step == step)? + 1;
        let start = end.saturating_sub(window);
        let vals: Vec<f64> = self.records[start..end].iter().filter_map(|r| r.get(name)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Where a phase writes its log and snapshots: `<root>/<phase>/`.
#[derive(Clone, Debug)]
pub struct RunOutput {
    root: PathBuf,
}

impl RunOutput {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn phase_dir(&self, phase: PhaseKind) -> PathBuf {
        self.root.join(phase.name())
    }

    pub fn log_path(&self, phase: PhaseKind) -> PathBuf {
        self.phase_dir(phase).join("train.log")
    }

    pub fn snapshot_dir(&self, phase: PhaseKind, step: usize) -> PathBuf {
        self.phase_dir(phase).join(step.to_string())
    }

    fn start(&self, phase: PhaseKind) -> Result<()> {
        fs::create_dir_all(self.phase_dir(phase))?;
        fs::write(self.log_path(phase), "")?;
        Ok(())
    }

    fn append(&self, rec: &StepLog) -> Result<()> {
        let mut f = OpenOptions::new().append(true).create(true).open(self.log_path(rec.phase))?;
        writeln!(f, "{}", rec.line())?;
        Ok(())
    }
}

/// Serializable position of the batch-order generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    fn of(rng: &ChaCha8Rng) -> Self {
        Self { seed: hex::encode(rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| invalid(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| invalid("rng seed must be 32 bytes"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|e| invalid(format!("rng position: {e}")))?);
        Ok(rng)
    }
}

/// Epoch-shuffled batch order over `n` samples.
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(seed: u64, n: usize) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 0)), order: (0..n).collect(), pos: n }
    }

    fn next(&mut self, batch: usize) -> Vec<usize> {
        let batch = batch.min(self.order.len());
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn snapshot(
    out: Option<&RunOutput>,
    cfg: &PhaseConfig,
    step: usize,
    rng: &ChaCha8Rng,
    save: impl FnOnce(&Path) -> Result<()>,
) -> Result<()> {
    let Some(out) = out else { return Ok(()) };
    let dir = out.snapshot_dir(cfg.phase, step);
    fs::create_dir_all(&dir)?;
    save(&dir)?;
    fs::write(dir.join("phase.json"), serde_json::to_vec_pretty(cfg)?)?;
    fs::write(dir.join("rng.json"), serde_json::to_vec_pretty(&RngState::of(rng))?)?;
    Ok(())
}

fn due(cfg: &PhaseConfig, step: usize) -> bool {
    cfg.checkpoint_every > 0 && step.is_multiple_of(cfg.checkpoint_every)
}

fn gather_grads(grads: &mut mdfr_autograd::Grads<f32>, bound: &Bound, params: &ParamSet<f32>) -> Vec<Tensor<f32>> {
    bound.vars().iter().zip(params.tensors()).map(|(&v, t)| grads.take_or_zeros(v, t.shape())).collect()
}

/// Clips and applies one update; returns the pre-clip norm.
fn apply(opt: &mut Adam, params: &mut ParamSet<f32>, mut grads: Vec<Tensor<f32>>, clip: f64) -> Result<f64> {
    let norm = clip_global_norm(&mut grads, clip);
    if !norm.is_finite() {
        return Err(Error::Diverged(format!("non-finite gradient norm {norm}")));
    }
    opt.step(params.tensors_mut(), &grads);
    Ok(norm)
}

fn check_finite(phase: PhaseKind, step: usize, components: &[(&'static str, f64)]) -> Result<()> {
    if let Some((name, v)) = components.iter().find(|(_, v)| !v.is_finite()) {
        let detail: Vec<String> = components.iter().map(|(n, v)| format!("{n}={v}")).collect();
        return Err(Error::Diverged(format!("{phase} step {step}: {name} is {v} ({})", detail.join(" "))));
    }
    Ok(())
}

fn check_samples(samples: &[Sample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    Ok(())
}

fn pick<'a>(samples: &'a [Sample], idx: &[usize]) -> Vec<&'a Sample> {
    idx.iter().map(|&i| &samples[i]).collect()
}

fn rows_tensor(rows: &[&Vec<f64>]) -> Tensor<f32> {
    let d = rows.first().map_or(0, |r| r.len());
    Tensor::new(&[rows.len(), d], rows.iter().flat_map(|r| r.iter().map(|&v| v as f32)).collect())
}

fn require(t: &Option<Tensor<f32>>, what: &str) -> Result<Tensor<f32>> {
    t.clone().ok_or_else(|| Error::Data(format!("batch is missing {what}")))
}

/// Pretrains the identity embedder as a classifier over corpus identities.
///
/// Uses the clean profile and frontal renders of every sample.
pub fn train_embedder(
    cfg: &PhaseConfig,
    corpus: &Corpus,
    samples: &[Sample],
    mut net: Embedder<f32>,
    out: Option<&RunOutput>,
) -> Result<(Embedder<f32>, TrainLog)> {
    cfg.expect(PhaseKind::Embedder)?;
    check_samples(samples)?;
    if net.config().n_classes < corpus.num_identities() {
        return Err(invalid("embedder has fewer classes than the corpus has identities"));
    }
    let mut images: Vec<(&FaceImage, usize)> = Vec::new();
    for s in samples {
        let label = corpus.records()[s.record].identity;
        images.push((&s.hq, label));
        images.push((&s.frontal, label));
    }
    let mut opt = make_optimizer(cfg, NetRole::Embedder, net.params());
    let mut sampler = Sampler::new(cfg.seed, images.len());
    let mut log = TrainLog::default();
    if let Some(o) = out {
        o.start(cfg.phase)?;
    }
    for step in 1..=cfg.max_steps {
        let idx = sampler.next(cfg.batch_size);
        let x = FaceImage::batch(&idx.iter().map(|&i| images[i].0).collect::<Vec<_>>())?;
        let labels: Vec<usize> = idx.iter().map(|&i| images[i].1).collect();
        let mut g = Graph::new();
        let p = net.bind(&mut g, true);
        let xv = g.input(x);
        let z = net.logits_graph(&mut g, &p, xv);
        let loss = g.softmax_cross_entropy(z, &labels);
        let ce = g.scalar_value(loss) as f64;
        let acc = {
            let k = net.config().n_classes;
            let zv = g.value(z).data();
            labels
                .iter()
                .enumerate()
                .filter(|&(i, &l)| {
                    let r = &zv[i * k..(i + 1) * k];
                    (0..k).max_by(|&a, &b| r[a].total_cmp(&r[b])) == Some(l)
                })
                .count() as f64
                / labels.len() as f64
        };
        let components = vec![("ce", ce), ("acc", acc)];
        check_finite(cfg.phase, step, &components)?;
        let mut grads = g.backward(loss);
        let gv = gather_grads(&mut grads, &p, net.params());
        let norm = apply(&mut opt, net.params_mut(), gv, cfg.grad_clip)?;
        let rec = StepLog { step, phase: cfg.phase, components, total: ce, grad_norm: norm, clipped: norm > cfg.grad_clip };
        if let Some(o) = out {
            o.append(&rec)?;
        }
        log.records.push(rec);
        if due(cfg, step) {
            snapshot(out, cfg, step, &sampler.rng, |d| net.save(d.join("embedder.bin")))?;
        }
    }
    snapshot(out, cfg, cfg.max_steps, &sampler.rng, |d| net.save(d.join("embedder.bin")))?;
    Ok((net, log))
}

/// Raw embeddings of images, as rows.
fn embed_all(embedder: &Embedder<f32>, imgs: &[&FaceImage]) -> Result<Vec<Vec<f64>>> {
    embedder.embed_images(imgs)
}

fn check_generator(net: &Generator<f32>, role: NetRole, corpus: &Corpus) -> Result<()> {
    if net.role() != role {
        return Err(invalid(format!("expected a {} generator, got {}", role.name(), net.role().name())));
    }
    if net.config().image_size != corpus.image_size() {
        return Err(invalid("generator image size differs from the corpus"));
    }
    Ok(())
}

/// Restoration trained alone on `{I_l, I_h}` pairs against a frozen embedder.
pub fn train_frn_s(
    cfg: &PhaseConfig,
    corpus: &Corpus,
    samples: &[Sample],
    embedder: &Embedder<f32>,
    mut frn: Generator<f32>,
    out: Option<&RunOutput>,
) -> Result<(Generator<f32>, TrainLog)> {
    cfg.expect(PhaseKind::FrnS)?;
    check_samples(samples)?;
    check_generator(&frn, NetRole::Frn, corpus)?;
    let targets = embed_all(embedder, &samples.iter().map(|s| &s.hq).collect::<Vec<_>>())?;
    let w = cfg.weights;
    let mut opt = make_optimizer(cfg, NetRole::Frn, frn.params());
    let mut sampler = Sampler::new(cfg.seed, samples.len());
    let mut log = TrainLog::default();
    if let Some(o) = out {
        o.start(cfg.phase)?;
    }
    let mut last_step = 0;
    for step in 1..=cfg.max_steps {
        last_step = step;
        let idx = sampler.next(cfg.batch_size);
        let batch = Batch::from_samples(corpus, &pick(samples, &idx), Phase::FrnS)?;
        let mut g = Graph::new();
        let p = frn.bind(&mut g, true);
        let pe = embedder.bind(&mut g, false);
        let x = g.input(require(&batch.lq, "lq")?);
        let y = g.input(require(&batch.hq, "hq")?);
        let dec = frn.restore_graph(&mut g, &p, x);
        let pixel = pixel_graph(&mut g, dec.image, y);
        let e_out = embedder.embed_graph(&mut g, &pe, dec.image);
        let e_tgt = g.input(rows_tensor(&idx.iter().map(|&i| &targets[i]).collect::<Vec<_>>()));
        let id = id_graph(&mut g, e_out, e_tgt);
        let total = weighted_sum(&mut g, pixel, &[(w.lambda1, id)]);
        let components = vec![("pixel", g.scalar_value(pixel) as f64), ("id", g.scalar_value(id) as f64)];
        let total_v = g.scalar_value(total) as f64;
        check_finite(cfg.phase, step, &components)?;
        let mut grads = g.backward(total);
        let gv = gather_grads(&mut grads, &p, frn.params());
        let norm = apply(&mut opt, frn.params_mut(), gv, cfg.grad_clip)?;
        let primary = components[0].1;
        let rec = StepLog { step, phase: cfg.phase, components, total: total_v, grad_norm: norm, clipped: norm > cfg.grad_clip };
        if let Some(o) = out {
            o.append(&rec)?;
        }
        log.records.push(rec);
        if due(cfg, step) {
            snapshot(out, cfg, step, &sampler.rng, |d| frn.save(d.join("frn.bin")))?;
        }
        if cfg.target_loss.is_some_and(|t| primary <= t) {
            break;
        }
    }
    snapshot(out, cfg, last_step, &sampler.rng, |d| frn.save(d.join("frn.bin")))?;
    Ok((frn, log))
}

/// The networks trained by the frontalization phase.
#[derive(Clone, Debug)]
pub struct FfnNets {
    pub ffn: Generator<f32>,
    pub pcd: Critic<f32>,
    pub icd: Critic<f32>,
}

impl FfnNets {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.ffn.save(dir.join("ffn.bin"))?;
        self.pcd.save(dir.join("pcd.bin"))?;
        self.icd.save(dir.join("icd.bin"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            ffn: Generator::load(dir.join("ffn.bin"), Some(NetRole::Ffn))?,
            pcd: Critic::load(dir.join("pcd.bin"), NetRole::Pcd)?,
            icd: Critic::load(dir.join("icd.bin"), NetRole::Icd)?,
        })
    }
}

/// Identity maps `[N, C, S, S]` from cached small maps.
fn identity_cond(small: &[Tensor<f32>], idx: &[usize], size: usize) -> Tensor<f32> {
    let stacked = Tensor::stack(&idx.iter().map(|&i| &small[i]).collect::<Vec<_>>());
    resize_maps(&stacked, size)
}

/// Frontalization trained with alternating critic and generator updates.
pub fn train_ffn_s(
    cfg: &PhaseConfig,
    corpus: &Corpus,
    samples: &[Sample],
    embedder: &Embedder<f32>,
    mut nets: FfnNets,
    out: Option<&RunOutput>,
) -> Result<(FfnNets, TrainLog)> {
    cfg.expect(PhaseKind::FfnS)?;
    check_samples(samples)?;
    check_generator(&nets.ffn, NetRole::Ffn, corpus)?;
    let size = corpus.image_size();
    if nets.pcd.role() != NetRole::Pcd || nets.icd.role() != NetRole::Icd {
        return Err(invalid("critic roles are swapped"));
    }
    if nets.icd.config().cond_channels != embedder.config().map_channels() {
        return Err(invalid("identity critic condition width differs from the embedder map"));
    }
    let frontals: Vec<&FaceImage> = samples.iter().map(|s| &s.frontal).collect();
    let targets = embed_all(embedder, &frontals)?;
    let mut small_maps = Vec::with_capacity(samples.len());
    for chunk in frontals.chunks(16) {
        let maps = embedder.raw_maps(&FaceImage::batch(chunk)?)?;
        small_maps.extend((0..chunk.len()).map(|i| maps.index_first(i)));
    }
    let w = cfg.weights;
    let mut opt_g = make_optimizer(cfg, NetRole::Ffn, nets.ffn.params());
    let mut opt_p = make_optimizer(cfg, NetRole::Pcd, nets.pcd.params());
    let mut opt_i = make_optimizer(cfg, NetRole::Icd, nets.icd.params());
    let mut sampler = Sampler::new(cfg.seed, samples.len());
    let mut log = TrainLog::default();
    if let Some(o) = out {
        o.start(cfg.phase)?;
    }
    let mut last_step = 0;
    for step in 1..=cfg.max_steps {
        last_step = step;
        let idx = sampler.next(cfg.batch_size);
        let batch = Batch::from_samples(corpus, &pick(samples, &idx), Phase::FfnS)?;
        let real = require(&batch.frontal, "frontal")?;
        let heat_t = require(&batch.heat_frontal, "frontal heatmaps")?;
        let pt = identity_cond(&small_maps, &idx, size);

        let mut g = Graph::new();
        let pf = nets.ffn.bind(&mut g, true);
        let x = g.input(require(&batch.hq, "hq")?);
        let lp = g.input(require(&batch.heat_profile, "profile heatmaps")?);
        let lt = g.input(heat_t.clone());
        let dec = nets.ffn.frontalize_graph(&mut g, &pf, x, lp, lt);
        let fake = g.value(dec.image).clone();

        // critic update on the current generator output
        let (d_pcd, d_icd, d_norm) = {
            let mut gd = Graph::new();
            let pp = nets.pcd.bind(&mut gd, true);
            let pi = nets.icd.bind(&mut gd, true);
            let real_v = gd.input(real.clone());
            let fake_v = gd.input(fake);
            let cp = gd.input(heat_t);
            let ci = gd.input(pt.clone());
            let zr = nets.pcd.logits_graph(&mut gd, &pp, real_v, cp);
            let zf = nets.pcd.logits_graph(&mut gd, &pp, fake_v, cp);
            let lp_d = adv_d_graph(&mut gd, zr, zf);
            let zr = nets.icd.logits_graph(&mut gd, &pi, real_v, ci);
            let zf = nets.icd.logits_graph(&mut gd, &pi, fake_v, ci);
            let li_d = adv_d_graph(&mut gd, zr, zf);
            let both = gd.add(lp_d, li_d);
            let (vp, vi) = (gd.scalar_value(lp_d) as f64, gd.scalar_value(li_d) as f64);
            check_finite(cfg.phase, step, &[("d_pcd", vp), ("d_icd", vi)])?;
            let mut grads = gd.backward(both);
            let gp = gather_grads(&mut grads, &pp, nets.pcd.params());
            let gi = gather_grads(&mut grads, &pi, nets.icd.params());
            let np = apply(&mut opt_p, nets.pcd.params_mut(), gp, cfg.grad_clip)?;
            let ni = apply(&mut opt_i, nets.icd.params_mut(), gi, cfg.grad_clip)?;
            (vp, vi, np.max(ni))
        };

        // generator update against the updated critics
        let cp = nets.pcd.bind(&mut g, false);
        let ci_b = nets.icd.bind(&mut g, false);
        let pe = embedder.bind(&mut g, false);
        let y = g.input(real);
        let pixel = pixel_graph(&mut g, dec.image, y);
        let e_out = embedder.embed_graph(&mut g, &pe, dec.image);
        let e_tgt = g.input(rows_tensor(&idx.iter().map(|&i| &targets[i]).collect::<Vec<_>>()));
        let id = id_graph(&mut g, e_out, e_tgt);
        let zp = nets.pcd.logits_graph(&mut g, &cp, dec.image, lt);
        let adv_p = adv_g_graph(&mut g, zp, cfg.adv_form);
        let ci = g.input(pt);
        let zi = nets.icd.logits_graph(&mut g, &ci_b, dec.image, ci);
        let adv_i = adv_g_graph(&mut g, zi, cfg.adv_form);
        let adv = g.add(adv_p, adv_i);
        let total = weighted_sum(&mut g, pixel, &[(w.lambda2, id), (w.lambda3, adv)]);
        let components = vec![
            ("pixel", g.scalar_value(pixel) as f64),
            ("id", g.scalar_value(id) as f64),
            ("adv_pcd", g.scalar_value(adv_p) as f64),
            ("adv_icd", g.scalar_value(adv_i) as f64),
            ("d_pcd", d_pcd),
            ("d_icd", d_icd),
        ];
        let total_v = g.scalar_value(total) as f64;
        check_finite(cfg.phase, step, &components)?;
        let mut grads = g.backward(total);
        let gv = gather_grads(&mut grads, &pf, nets.ffn.params());
        let norm = apply(&mut opt_g, nets.ffn.params_mut(), gv, cfg.grad_clip)?;
        let primary = components[0].1;
        let rec = StepLog {
            step,
            phase: cfg.phase,
            components,
            total: total_v,
            grad_norm: norm,
            clipped: norm > cfg.grad_clip || d_norm > cfg.grad_clip,
        };
        if let Some(o) = out {
            o.append(&rec)?;
        }
        log.records.push(rec);
        if due(cfg, step) {
            snapshot(out, cfg, step, &sampler.rng, |d| nets.save(d))?;
        }
        if cfg.target_loss.is_some_and(|t| primary <= t) {
            break;
        }
    }
    snapshot(out, cfg, last_step, &sampler.rng, |d| nets.save(d))?;
    Ok((nets, log))
}

/// Frozen teacher outputs for one training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherOutput {
    /// `[3, S, S]`.
    pub image: Tensor<f32>,
    /// Last decoder block output, `[C, S, S]`.
    pub features: Tensor<f32>,
}

/// Runs the frozen frontalization teacher on every sample, towards the
/// pose-normalized frontal landmarks.
pub fn teacher_outputs(corpus: &Corpus, samples: &[Sample], ffn: &Generator<f32>) -> Result<Vec<TeacherOutput>> {
    let mut out = Vec::with_capacity(samples.len());
    let all: Vec<usize> = (0..samples.len()).collect();
    for chunk in all.chunks(8) {
        let batch = Batch::from_samples(corpus, &pick(samples, chunk), Phase::FrnTi)?;
        let mut g = Graph::new();
        let p = ffn.bind(&mut g, false);
        let x = g.input(require(&batch.hq, "hq")?);
        let lp = g.input(require(&batch.heat_profile, "profile heatmaps")?);
        let lf = g.input(require(&batch.heat_frontal, "frontal heatmaps")?);
        let dec = ffn.frontalize_graph(&mut g, &p, x, lp, lf);
        let (img, feat) = (g.value(dec.image), g.value(dec.features));
        for i in 0..chunk.len() {
            out.push(TeacherOutput { image: img.index_first(i), features: feat.index_first(i) });
        }
    }
    Ok(out)
}

/// Task-integrated restoration: the student maps `I_l` straight to the frozen
/// teacher's frontal output and aligns its last decoder block with the teacher's.
pub fn train_frn_ti(
    cfg: &PhaseConfig,
    corpus: &Corpus,
    samples: &[Sample],
    embedder: &Embedder<f32>,
    ffn: &Generator<f32>,
    mut frn: Generator<f32>,
    out: Option<&RunOutput>,
) -> Result<(Generator<f32>, TrainLog)> {
    cfg.expect(PhaseKind::FrnTi)?;
    check_samples(samples)?;
    check_generator(&frn, NetRole::Frn, corpus)?;
    check_generator(ffn, NetRole::Ffn, corpus)?;
    if !frn.params().congruent(ffn.params()) {
        return Err(invalid("student and teacher generators are not shape-congruent"));
    }
    let teacher = teacher_outputs(corpus, samples, ffn)?;
    let teacher_imgs = teacher
        .iter()
        .map(|t| FaceImage::unbatch(&t.image.clone().reshape(&[1, 3, corpus.image_size(), corpus.image_size()])))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect::<Vec<_>>();
    let targets = embed_all(embedder, &teacher_imgs.iter().collect::<Vec<_>>())?;
    let w = cfg.weights;
    let mut opt = make_optimizer(cfg, NetRole::Frn, frn.params());
    let mut sampler = Sampler::new(cfg.seed, samples.len());
    let mut log = TrainLog::default();
    if let Some(o) = out {
        o.start(cfg.phase)?;
    }
    let mut last_step = 0;
    for step in 1..=cfg.max_steps {
        last_step = step;
        let idx = sampler.next(cfg.batch_size);
        let lq = FaceImage::batch(&idx.iter().map(|&i| &samples[i].lq).collect::<Vec<_>>())?;
        let mut g = Graph::new();
        let p = frn.bind(&mut g, true);
        let pe = embedder.bind(&mut g, false);
        let x = g.input(lq);
        let dec = frn.restore_graph(&mut g, &p, x);
        let t_img = g.input(Tensor::stack(&idx.iter().map(|&i| &teacher[i].image).collect::<Vec<_>>()));
        let t_feat = g.input(Tensor::stack(&idx.iter().map(|&i| &teacher[i].features).collect::<Vec<_>>()));
        let pixel = pixel_graph(&mut g, t_img, dec.image);
        let e_out = embedder.embed_graph(&mut g, &pe, dec.image);
        let e_tgt = g.input(rows_tensor(&idx.iter().map(|&i| &targets[i]).collect::<Vec<_>>()));
        let id = id_graph(&mut g, e_tgt, e_out);
        let fa = fa_graph(&mut g, t_feat, dec.features);
        let total = weighted_sum(&mut g, pixel, &[(w.lambda4, id), (w.lambda5, fa)]);
        let components = vec![
            ("pixel", g.scalar_value(pixel) as f64),
            ("id", g.scalar_value(id) as f64),
            ("fa", g.scalar_value(fa) as f64),
        ];
        let total_v = g.scalar_value(total) as f64;
        check_finite(cfg.phase, step, &components)?;
        let mut grads = g.backward(total);
        let gv = gather_grads(&mut grads, &p, frn.params());
        let norm = apply(&mut opt, frn.params_mut(), gv, cfg.grad_clip)?;
        let primary = components[0].1;
        let rec = StepLog { step, phase: cfg.phase, components, total: total_v, grad_norm: norm, clipped: norm > cfg.grad_clip };
        if let Some(o) = out {
            o.append(&rec)?;
        }
        log.records.push(rec);
        if due(cfg, step) {
            snapshot(out, cfg, step, &sampler.rng, |d| frn.save(d.join("frn.bin")))?;
        }
        if cfg.target_loss.is_some_and(|t| primary <= t) {
            break;
        }
    }
    snapshot(out, cfg, last_step, &sampler.rng, |d| frn.save(d.join("frn.bin")))?;
    Ok((frn, log))
}

/// Mean pixel MSE of restoration outputs against `targets`, in batches.
pub fn restoration_mse(frn: &Generator<f32>, inputs: &[&FaceImage], targets: &[&FaceImage]) -> Result<f64> {
    if inputs.len() != targets.len() || inputs.is_empty() {
        return Err(invalid("need equally many non-zero inputs and targets"));
    }
    let mut total = 0.0;
    for (xs, ys) in inputs.chunks(8).zip(targets.chunks(8)) {
        let out = frn.restore_batch(xs)?;
        for (o, y) in out.iter().zip(ys) {
            total += image_mse(o, y)?;
        }
    }
    Ok(total / inputs.len() as f64)
}

/// Mean pixel MSE of the frontalization teacher's outputs against the frontal ground truth.
pub fn frontalization_mse(corpus: &Corpus, samples: &[Sample], ffn: &Generator<f32>) -> Result<f64> {
    check_samples(samples)?;
    let size = corpus.image_size();
    let mut total = 0.0;
    for (t, s) in teacher_outputs(corpus, samples, ffn)?.iter().zip(samples) {
        let img = FaceImage::unbatch(&t.image.clone().reshape(&[1, 3, size, size]))?.remove(0);
        total += image_mse(&img, &s.frontal)?;
    }
    Ok(total / samples.len() as f64)
}

pub(crate) fn image_mse(a: &FaceImage, b: &FaceImage) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(crate::error::shape_err("images differ in size"));
    }
    let n = a.pixels().len() as f64;
    Ok(a.pixels().iter().zip(b.pixels()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / n)
}
