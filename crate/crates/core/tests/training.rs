use std::fs;

use mdfr_core::critics::{Critic, CriticConfig, Embedder, EmbedderConfig};
use mdfr_core::data::{build_corpus, Corpus, CorpusConfig, Sample};
use mdfr_core::generator::{Generator, GeneratorConfig};
use mdfr_core::geometry::NUM_KEYPOINTS;
use mdfr_core::nn::NetRole;
use mdfr_core::training::*;

struct Fixture {
    _dir: tempfile::TempDir,
    corpus: Corpus,
    samples: Vec<Sample>,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CorpusConfig { n_identities: 4, poses: vec![-60.0, 30.0], image_size: 32, ..Default::default() };
    let corpus = build_corpus(&cfg, dir.path().join("corpus")).unwrap();
    let samples = corpus.load_all().unwrap();
    Fixture { _dir: dir, corpus, samples }
}

fn gen_config() -> GeneratorConfig {
    GeneratorConfig::pyramid(32, &[4, 8, 8], &[8, 4, 4])
}

fn embedder() -> Embedder<f32> {
    Embedder::new(EmbedderConfig { image_size: 32, widths: vec![4, 8], dim: 16, n_classes: 4 }, 1).unwrap()
}

fn ffn_nets(emb: &Embedder<f32>) -> FfnNets {
    FfnNets {
        ffn: Generator::new(NetRole::Ffn, gen_config(), 3).unwrap(),
        pcd: Critic::new(NetRole::Pcd, CriticConfig::vgg11(32, NUM_KEYPOINTS, &[4; 5]), 4).unwrap(),
        icd: Critic::new(NetRole::Icd, CriticConfig::vgg11(32, emb.config().map_channels(), &[4; 5]), 5).unwrap(),
    }
}

fn phase(kind: PhaseKind, steps: usize) -> PhaseConfig {
    let mut c = PhaseConfig::new(kind);
    c.max_steps = steps;
    c.batch_size = 4;
    c
}

#[test]
fn phases_are_deterministic_and_respect_freezes() {
    let f = fixture();
    let run = || {
        let out_dir = tempfile::tempdir().unwrap();
        let out = RunOutput::new(out_dir.path());
        let (emb, _) = train_embedder(&phase(PhaseKind::Embedder, 4), &f.corpus, &f.samples, embedder(), Some(&out)).unwrap();
        let emb_hash = emb.params().hash();
        let frn0 = Generator::new(NetRole::Frn, gen_config(), 2).unwrap();
        let (frn, _) = train_frn_s(&phase(PhaseKind::FrnS, 3), &f.corpus, &f.samples, &emb, frn0, Some(&out)).unwrap();
        assert_eq!(emb.params().hash(), emb_hash);
        let (nets, _) = train_ffn_s(&phase(PhaseKind::FfnS, 3), &f.corpus, &f.samples, &emb, ffn_nets(&emb), Some(&out)).unwrap();
        assert_eq!(emb.params().hash(), emb_hash);
        let ffn_hash = nets.ffn.params().hash();
        let (frn, _) = train_frn_ti(&phase(PhaseKind::FrnTi, 3), &f.corpus, &f.samples, &emb, &nets.ffn, frn, Some(&out)).unwrap();
        assert_eq!(nets.ffn.params().hash(), ffn_hash);
        assert_eq!(emb.params().hash(), emb_hash);
        let logs: Vec<String> = ["embedder", "frn-s", "ffn-s", "frn-ti"]
            .iter()
            .map(|p| fs::read_to_string(out_dir.path().join(p).join("train.log")).unwrap())
            .collect();
        let ffn_file = fs::read(out_dir.path().join("ffn-s/3/ffn.bin")).unwrap();
        (logs, frn.params().hash(), ffn_hash, ffn_file)
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_eq!(a.0[1].lines().count(), 3);
    assert!(a.0[2].lines().next().unwrap().contains("adv_pcd="));
}

#[test]
fn zero_steps_leave_networks_unchanged() {
    let f = fixture();
    let emb = embedder();
    let h = emb.params().hash();
    let (emb, log) = train_embedder(&phase(PhaseKind::Embedder, 0), &f.corpus, &f.samples, emb, None).unwrap();
    assert!(log.records.is_empty());
    assert_eq!(emb.params().hash(), h);
    let frn = Generator::new(NetRole::Frn, gen_config(), 2).unwrap();
    let h = frn.params().hash();
    let (frn, _) = train_frn_s(&phase(PhaseKind::FrnS, 0), &f.corpus, &f.samples, &emb, frn, None).unwrap();
    assert_eq!(frn.params().hash(), h);
    let nets = ffn_nets(&emb);
    let hs = [nets.ffn.params().hash(), nets.pcd.params().hash(), nets.icd.params().hash()];
    let (nets, _) = train_ffn_s(&phase(PhaseKind::FfnS, 0), &f.corpus, &f.samples, &emb, nets, None).unwrap();
    assert_eq!([nets.ffn.params().hash(), nets.pcd.params().hash(), nets.icd.params().hash()], hs);
    let (frn2, _) = train_frn_ti(&phase(PhaseKind::FrnTi, 0), &f.corpus, &f.samples, &emb, &nets.ffn, frn, None).unwrap();
    assert_eq!(frn2.params().hash(), h);
}

#[test]
fn snapshots_record_config_and_rng() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = RunOutput::new(dir.path());
    let mut cfg = phase(PhaseKind::FrnS, 4);
    cfg.checkpoint_every = 2;
    let emb = embedder();
    let frn = Generator::new(NetRole::Frn, gen_config(), 2).unwrap();
    let (frn, _) = train_frn_s(&cfg, &f.corpus, &f.samples, &emb, frn, Some(&out)).unwrap();
    for step in [2, 4] {
        let snap = out.snapshot_dir(PhaseKind::FrnS, step);
        let stored: PhaseConfig = serde_json::from_slice(&fs::read(snap.join("phase.json")).unwrap()).unwrap();
        assert_eq!(stored, cfg);
        let rng: RngState = serde_json::from_slice(&fs::read(snap.join("rng.json")).unwrap()).unwrap();
        rng.restore().unwrap();
    }
    let last = Generator::<f32>::load(out.snapshot_dir(PhaseKind::FrnS, 4).join("frn.bin"), Some(NetRole::Frn)).unwrap();
    assert_eq!(last.params().hash(), frn.params().hash());
}

#[test]
fn early_stop_and_wrong_inputs() {
    let f = fixture();
    let emb = embedder();
    let mut cfg = phase(PhaseKind::FrnS, 50);
    cfg.target_loss = Some(10.0);
    let frn = Generator::new(NetRole::Frn, gen_config(), 2).unwrap();
    let (frn, log) = train_frn_s(&cfg, &f.corpus, &f.samples, &emb, frn, None).unwrap();
    assert_eq!(log.records.len(), 1);

    assert!(train_frn_s(&phase(PhaseKind::FfnS, 1), &f.corpus, &f.samples, &emb, frn.clone(), None).is_err());
    assert!(train_frn_s(&phase(PhaseKind::FrnS, 1), &f.corpus, &[], &emb, frn.clone(), None).is_err());
    let ffn_as_frn = frn.with_role(NetRole::Ffn).unwrap();
    assert!(train_frn_s(&phase(PhaseKind::FrnS, 1), &f.corpus, &f.samples, &emb, ffn_as_frn, None).is_err());
    let mut bad = phase(PhaseKind::FrnS, 1);
    bad.lr_frn = -1.0;
    assert!(train_frn_s(&bad, &f.corpus, &f.samples, &emb, frn, None).is_err());
}
