use mdfr_core::critics::{Embedder, EmbedderConfig};
use mdfr_core::data::{build_corpus, render_face, CorpusConfig};
use mdfr_core::geometry::RigidParams;
use mdfr_core::image::FaceImage;
use mdfr_core::training::{train_embedder, PhaseConfig, PhaseKind};
use mdfr_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn embedder_separates_identities_on_held_out_renders() {
    let dir = tempfile::tempdir().unwrap();
    let n_ids = 8;
    let cfg = CorpusConfig {
        n_identities: n_ids,
        poses: vec![-90.0, -60.0, -30.0, 0.0, 30.0, 60.0, 90.0],
        image_size: 64,
        seed: 21,
        ..Default::default()
    };
    let corpus = build_corpus(&cfg, dir.path()).unwrap();
    let samples = corpus.load_all().unwrap();
    let mut pc = PhaseConfig::new(PhaseKind::Embedder);
    pc.max_steps = 400;
    let net = Embedder::new(EmbedderConfig::new(64, n_ids), 7).unwrap();
    let (net, _) = train_embedder(&pc, &corpus, &samples, net, None).unwrap();

    // unseen yaw angles, pitch, roll and lighting of the same identities
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for id in 0..n_ids {
        let identity = corpus.identity(id * cfg.poses.len()).unwrap();
        for yaw in [-75.0, -45.0, -15.0, 15.0, 45.0, 75.0] {
            let rigid = RigidParams::from_angles(
                0.3 * 64.0 * rng.random_range(0.97..1.03),
                yaw + rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                [32.0 + rng.random_range(-1.0..1.0), 32.0 + rng.random_range(-1.0..1.0)],
            )
            .unwrap();
            let (img, _) = render_face(corpus.basis(), &identity, &rigid, rng.random_range(0.85..1.15), 64).unwrap();
            images.push(img.quantized());
            labels.push(id);
        }
    }
    let mut correct = 0;
    for (chunk, labs) in images.chunks(16).zip(labels.chunks(16)) {
        let x: Tensor<f32> = FaceImage::batch(&chunk.iter().collect::<Vec<_>>()).unwrap();
        let pred = net.classify(&x).unwrap();
        correct += pred.iter().zip(labs).filter(|(p, l)| p == l).count();
    }
    let acc = correct as f64 / images.len() as f64;
    // chance is 1/8; lighting outside the training range costs a few near-frontal probes
    assert!(acc >= 0.9, "held-out accuracy {acc}");
}
