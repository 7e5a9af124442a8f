//! Image fidelity metrics and identity recognition protocols.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::critics::Embedder;
use crate::data::{Corpus, Sample};
use crate::error::{invalid, shape_err, Result};
use crate::generator::Generator;
use crate::image::FaceImage;

/// Peak signal-to-noise ratio in dB with peak 1; identical images give `+inf`.
pub fn psnr(a: &FaceImage, b: &FaceImage) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(shape_err(format!("psnr of {:?} and {:?} images", a.dims(), b.dims())));
    }
    let n = a.pixels().len() as f64;
    let mse = a.pixels().iter().zip(b.pixels()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / n;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

/// Formats a PSNR value, printing the identical-image sentinel as `inf`.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn gray(img: &FaceImage) -> Vec<f64> {
    let (h, w) = img.dims();
    (0..h * w).map(|i| (0..3).map(|c| img.plane(c)[i] as f64).sum::<f64>() / 3.0).collect()
}

/// Separable 'valid' filtering with the SSIM window.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            tmp[y * ow + x0] = (0..n).map(|j| k[j] * x[y * w + x0 + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..n).map(|i| k[i] * tmp[(y0 + i) * ow + x0]).sum();
        }
    }
    out
}

/// Mean structural similarity of the channel-mean gray images over all
/// fully contained 11×11 Gaussian windows.
pub fn ssim(a: &FaceImage, b: &FaceImage) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(shape_err(format!("ssim of {:?} and {:?} images", a.dims(), b.dims())));
    }
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid(format!("ssim needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}")));
    }
    let (x, y) = (gray(a), gray(b));
    let k = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
    let mx = filter_valid(&x, h, w, &k);
    let my = filter_valid(&y, h, w, &k);
    let mxx = filter_valid(&prod(&x, &x), h, w, &k);
    let myy = filter_valid(&prod(&y, &y), h, w, &k);
    let mxy = filter_valid(&prod(&x, &y), h, w, &k);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        total += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
            / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
    }
    Ok((total / mx.len() as f64).clamp(-1.0, 1.0))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// An embedding with its identity label.
#[derive(Clone, Debug, PartialEq)]
pub struct Labeled {
    pub embedding: Vec<f64>,
    pub label: usize,
}

/// Index of the gallery entry most cosine-similar to `probe`; ties keep the earliest.
pub fn nearest(gallery: &[Labeled], probe: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, g) in gallery.iter().enumerate() {
        let s = cosine(&g.embedding, probe);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// Per-probe rank-1 outcomes.
pub fn rank1_hits(gallery: &[Labeled], probes: &[Labeled]) -> Result<Vec<bool>> {
    if gallery.is_empty() {
        return Err(invalid("rank-1 needs a non-empty gallery"));
    }
    Ok(probes
        .iter()
        .map(|p| nearest(gallery, &p.embedding).is_some_and(|i| gallery[i].label == p.label))
        .collect())
}

/// Fraction of probes whose nearest gallery embedding shares their label.
pub fn rank1(gallery: &[Labeled], probes: &[Labeled]) -> Result<f64> {
    if probes.is_empty() {
        return Err(invalid("rank-1 needs at least one probe"));
    }
    let hits = rank1_hits(gallery, probes)?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Verification {
    pub accuracy: f64,
    /// Pairs with cosine similarity at or above this are declared the same identity.
    pub threshold: f64,
}

/// Best accuracy over all cosine thresholds.
pub fn verify(pairs: &[(Vec<f64>, Vec<f64>, bool)]) -> Result<Verification> {
    if pairs.is_empty() {
        return Err(invalid("verification needs at least one pair"));
    }
    let mut scored: Vec<(f64, bool)> = pairs.iter().map(|(a, b, same)| (cosine(a, b), *same)).collect();
    scored.sort_by(|x, y| x.0.total_cmp(&y.0));
    let n = scored.len();
    let positives = scored.iter().filter(|s| s.1).count();
    // threshold above every score: everything is declared different
    let mut best = Verification { accuracy: (n - positives) as f64 / n as f64, threshold: f64::INFINITY };
    // sweep thresholds down through the sorted scores
    let mut correct = n - positives;
    let mut i = n;
    while i > 0 {
        let t = scored[i - 1].0;
        while i > 0 && scored[i - 1].0 == t {
            if scored[i - 1].1 {
                correct += 1;
            } else {
                correct -= 1;
            }
            i -= 1;
        }
        let acc = correct as f64 / n as f64;
        if acc > best.accuracy {
            best = Verification { accuracy: acc, threshold: t };
        }
    }
    Ok(best)
}

/// Absolute-yaw interval `[lo, hi]` in degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct YawBin {
    pub label: String,
    pub lo: f64,
    pub hi: f64,
}

impl YawBin {
    pub fn contains(&self, yaw: f64) -> bool {
        (self.lo..=self.hi).contains(&yaw.abs())
    }
}

/// Bins centred on 90°, 60°, 30° and 0° of absolute yaw.
pub fn default_yaw_bins() -> Vec<YawBin> {
    [("±90°", 75.0, 90.0), ("±60°", 45.0, 74.999), ("±30°", 15.0, 44.999), ("0°", 0.0, 14.999)]
        .into_iter()
        .map(|(l, lo, hi)| YawBin { label: l.into(), lo, hi })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub label: String,
    pub total: usize,
    pub correct: usize,
}

impl BinRow {
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

/// Rank-1 outcomes grouped by yaw bin; outcomes outside every bin are dropped.
pub fn pose_binned_report(results: &[(f64, bool)], bins: &[YawBin]) -> Vec<BinRow> {
    bins.iter()
        .map(|b| {
            let inside: Vec<bool> = results.iter().filter(|(y, _)| b.contains(*y)).map(|&(_, h)| h).collect();
            BinRow { label: b.label.clone(), total: inside.len(), correct: inside.iter().filter(|&&h| h).count() }
        })
        .collect()
}

/// Renders bin rows as a one-line-per-bin table; empty bins show `-`.
pub fn format_bins(title: &str, rows: &[BinRow]) -> String {
    let mut s = format!("{title}\n{:<8} {:>6} {:>8} {:>9}\n", "yaw", "probes", "correct", "rank-1 %");
    for r in rows {
        let acc = r.accuracy().map_or("-".to_string(), |a| format!("{:.2}", 100.0 * a));
        let _ = writeln!(s, "{:<8} {:>6} {:>8} {:>9}", r.label, r.total, r.correct, acc);
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetric {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// PSNR/SSIM over image pairs with aggregate means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub protocol: String,
    pub pairs: Vec<PairMetric>,
}

impl MetricReport {
    pub fn new(protocol: impl Into<String>) -> Self {
        Self { protocol: protocol.into(), pairs: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, a: &FaceImage, b: &FaceImage) -> Result<()> {
        self.pairs.push(PairMetric { name: name.into(), psnr: psnr(a, b)?, ssim: ssim(a, b)? });
        Ok(())
    }

    /// Mean PSNR over finite values, and how many identical pairs were left out.
    pub fn mean_psnr(&self) -> (Option<f64>, usize) {
        let finite: Vec<f64> = self.pairs.iter().map(|p| p.psnr).filter(|v| v.is_finite()).collect();
        let skipped = self.pairs.len() - finite.len();
        ((!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64), skipped)
    }

    pub fn mean_ssim(&self) -> Option<f64> {
        (!self.pairs.is_empty()).then(|| self.pairs.iter().map(|p| p.ssim).sum::<f64>() / self.pairs.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("protocol,name,psnr_db,ssim\n");
        for p in &self.pairs {
            let _ = writeln!(s, "{},{},{},{:.6}", self.protocol, p.name, format_db(p.psnr), p.ssim);
        }
        s
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (mp, skipped) = self.mean_psnr();
        writeln!(f, "protocol: {}", self.protocol)?;
        writeln!(f, "pairs: {}", self.pairs.len())?;
        match mp {
            Some(v) => writeln!(f, "mean psnr: {v:.4} dB")?,
            None if self.pairs.is_empty() => writeln!(f, "mean psnr: -")?,
            None => writeln!(f, "mean psnr: inf")?,
        }
        if skipped > 0 {
            writeln!(f, "identical pairs excluded from mean psnr: {skipped}")?;
        }
        match self.mean_ssim() {
            Some(v) => writeln!(f, "mean ssim: {v:.6}"),
            None => writeln!(f, "mean ssim: -"),
        }
    }
}

/// Deterministic verification pairs: every same-identity pair, each matched
/// with one different-identity pair drawn with `seed`.
pub fn balanced_pairs(labels: &[usize], seed: u64) -> Vec<(usize, usize, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            if labels[i] != labels[j] {
                continue;
            }
            out.push((i, j, true));
            let others: Vec<usize> = (0..labels.len()).filter(|&k| labels[k] != labels[i]).collect();
            if !others.is_empty() {
                out.push((i, others[rng.random_range(0..others.len())], false));
            }
        }
    }
    out
}

/// Recognition of one probe set against the frontal gallery.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recognition {
    pub bins: Vec<BinRow>,
    pub verification_accuracy: f64,
    pub verification_threshold: f64,
}

impl Recognition {
    /// Pooled rank-1 over the bins whose labels are listed.
    pub fn pooled_rank1(&self, labels: &[&str]) -> Option<f64> {
        let (t, c) = self
            .bins
            .iter()
            .filter(|b| labels.contains(&b.label.as_str()))
            .fold((0, 0), |(t, c), b| (t + b.total, c + b.correct));
        (t > 0).then(|| c as f64 / t as f64)
    }
}

/// Full evaluation of a restoration network on a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolResult {
    /// Degraded inputs against their clean profiles.
    pub degraded: MetricReport,
    /// Network outputs against the frontal ground truth.
    pub frontalized: MetricReport,
    pub raw: Recognition,
    pub restored: Recognition,
}

/// Gallery, one frontal render per identity, from the record with the smallest |yaw|.
pub fn frontal_gallery(corpus: &Corpus, samples: &[Sample], embedder: &Embedder<f32>) -> Result<Vec<Labeled>> {
    let mut best: Vec<Option<&Sample>> = vec![None; corpus.num_identities()];
    for s in samples {
        let rec = &corpus.records()[s.record];
        let slot = &mut best[rec.identity];
        if slot.is_none_or(|b| rec.yaw.abs() < corpus.records()[b.record].yaw.abs()) {
            *slot = Some(s);
        }
    }
    let chosen: Vec<&Sample> = best.into_iter().flatten().collect();
    let embs = embedder.embed_images(&chosen.iter().map(|s| &s.frontal).collect::<Vec<_>>())?;
    Ok(chosen.iter().zip(embs).map(|(s, e)| Labeled { embedding: e, label: corpus.records()[s.record].identity }).collect())
}

fn recognition(
    corpus: &Corpus,
    samples: &[Sample],
    gallery: &[Labeled],
    embeddings: Vec<Vec<f64>>,
    bins: &[YawBin],
    pair_seed: u64,
) -> Result<Recognition> {
    let labels: Vec<usize> = samples.iter().map(|s| corpus.records()[s.record].identity).collect();
    let probes: Vec<Labeled> =
        embeddings.iter().zip(&labels).map(|(e, &l)| Labeled { embedding: e.clone(), label: l }).collect();
    let hits = rank1_hits(gallery, &probes)?;
    let yaws: Vec<(f64, bool)> = samples.iter().zip(hits).map(|(s, h)| (corpus.records()[s.record].yaw, h)).collect();
    let pairs: Vec<_> = balanced_pairs(&labels, pair_seed)
        .into_iter()
        .map(|(i, j, same)| (embeddings[i].clone(), embeddings[j].clone(), same))
        .collect();
    let v = verify(&pairs)?;
    Ok(Recognition { bins: pose_binned_report(&yaws, bins), verification_accuracy: v.accuracy, verification_threshold: v.threshold })
}

/// Evaluates `net` as a single-input restoration and frontalization network:
/// image fidelity against the frontal ground truth, and rank-1 and
/// verification over embedder features before and after the network.
pub fn run_protocol(
    corpus: &Corpus,
    samples: &[Sample],
    embedder: &Embedder<f32>,
    net: &Generator<f32>,
    bins: &[YawBin],
    pair_seed: u64,
) -> Result<ProtocolResult> {
    if samples.is_empty() {
        return Err(invalid("evaluation needs at least one sample"));
    }
    let gallery = frontal_gallery(corpus, samples, embedder)?;
    let lq: Vec<&FaceImage> = samples.iter().map(|s| &s.lq).collect();
    let mut outputs = Vec::with_capacity(samples.len());
    for chunk in lq.chunks(8) {
        outputs.extend(net.restore_batch(chunk)?);
    }
    let mut degraded = MetricReport::new("degraded-vs-profile");
    let mut frontalized = MetricReport::new("output-vs-frontal");
    for (s, out) in samples.iter().zip(&outputs) {
        let name = corpus.records()[s.record].hq.trim_end_matches("/hq.png").to_string();
        degraded.push(name.clone(), &s.lq, &s.hq)?;
        frontalized.push(name, out, &s.frontal)?;
    }
    let raw = recognition(corpus, samples, &gallery, embedder.embed_images(&lq)?, bins, pair_seed)?;
    let restored =
        recognition(corpus, samples, &gallery, embedder.embed_images(&outputs.iter().collect::<Vec<_>>())?, bins, pair_seed)?;
    Ok(ProtocolResult { degraded, frontalized, raw, restored })
}
