use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mdfr_cli::config::RunConfig;
use mdfr_cli::{validate_config, CliError};
use mdfr_core::evaluation::{format_bins, MetricReport};
use mdfr_core::generator::GeneratorConfig;
use mdfr_core::image::FaceImage;

fn mdfr(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdfr")).args(args).current_dir(dir).env_remove("MDFR_RUN_DIR").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn test_image(seed: u32) -> FaceImage {
    FaceImage::from_fn(32, 32, |y, x, c| ((x * 7 + y * 13 + c * 5 + seed as usize) % 17) as f32 / 16.0)
}

/// Eight samples at 32×32 with narrow networks and a few steps per phase.
fn mini_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.corpus.n_identities = 4;
    c.corpus.poses = vec![-60.0, 30.0];
    c.corpus.image_size = 32;
    c.networks.generator = GeneratorConfig::pyramid(32, &[4, 8, 8], &[8, 4, 4]);
    c.networks.critic_widths = vec![4, 4, 4, 4, 4];
    c.networks.embedder_widths = vec![4, 8];
    c.networks.embedding_dim = 16;
    for p in [&mut c.phases.embedder, &mut c.phases.frn_s, &mut c.phases.ffn_s, &mut c.phases.frn_ti] {
        p.max_steps = 3;
    }
    c.eval.sheet_rows = 3;
    c
}

#[test]
fn psnr_of_identical_images_prints_inf() {
    let dir = tempfile::tempdir().unwrap();
    test_image(0).save_png(dir.path().join("a.png")).unwrap();
    let o = mdfr(&["eval", "--metric", "psnr", "a.png", "a.png"], dir.path());
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "inf");
    let o = mdfr(&["eval", "--metric", "ssim", "a.png", "a.png"], dir.path());
    assert_eq!(stdout(&o).trim(), "1.000000");
}

#[test]
fn degrade_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    test_image(3).save_png(dir.path().join("in.png")).unwrap();
    for out in ["o1.png", "o2.png"] {
        assert!(mdfr(&["degrade", "--seed", "7", "in.png", out], dir.path()).status.success());
    }
    let a = fs::read(dir.path().join("o1.png")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("o2.png")).unwrap());
    assert!(mdfr(&["degrade", "--seed", "8", "in.png", "o3.png"], dir.path()).status.success());
    assert_ne!(a, fs::read(dir.path().join("o3.png")).unwrap());
}

#[test]
fn unknown_subcommands_and_flags_fail_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["frobnicate"][..], &["eval", "--bogus"], &["train", "frn-x"], &[]] {
        let o = mdfr(args, dir.path());
        assert!(!o.status.success(), "{args:?}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains("Usage") || err.contains("--help"), "{args:?}: {err}");
    }
}

#[test]
fn missing_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let o = mdfr(&["train", "frn-s"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("data build"));
}

#[test]
fn default_config_round_trips_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    assert!(mdfr(&["config", "init", "run.toml"], dir.path()).status.success());
    let parsed = validate_config(&path).unwrap();
    assert_eq!(parsed, RunConfig::default());
    assert_eq!(RunConfig::parse(&parsed.to_toml().unwrap()).unwrap(), parsed);
    assert!(mdfr(&["config", "check", "run.toml"], dir.path()).status.success());
}

#[test]
fn negative_learning_rate_is_reported_with_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    let text = RunConfig::default().to_toml().unwrap();
    let mut in_frn_s = false;
    let mut target = 0;
    let edited: Vec<String> = text
        .lines()
        .enumerate()
        .map(|(n, l)| {
            if l.starts_with('[') {
                in_frn_s = l == "[phases.frn_s]";
            }
            if in_frn_s && l.starts_with("lr_frn") {
                target = n + 1;
                "lr_frn = -0.5".to_string()
            } else {
                l.to_string()
            }
        })
        .collect();
    assert!(target > 0);
    fs::write(&path, edited.join("\n")).unwrap();
    match validate_config(&path) {
        Err(CliError::Validation { issues, .. }) => {
            assert_eq!(issues.len(), 1);
            assert_eq!(issues[0].field, "phases.frn_s.lr_frn");
            assert_eq!(issues[0].line, Some(target));
        }
        other => panic!("expected a validation error, got {other:?}"),
    }
    let o = mdfr(&["config", "check", "run.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains(&format!("line {target}: phases.frn_s.lr_frn")));
}

#[test]
fn syntax_and_unknown_keys_carry_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    let text = RunConfig::default().to_toml().unwrap().replacen("[corpus]", "[corpus]\nbogus_key = 1", 1);
    let line = text.lines().position(|l| l == "bogus_key = 1").unwrap() + 1;
    fs::write(&path, text).unwrap();
    let Err(CliError::Validation { issues, .. }) = validate_config(&path) else { panic!() };
    assert_eq!(issues[0].line, Some(line));
    assert!(issues[0].message.contains("bogus_key"));
}

#[test]
fn report_of_empty_run_says_so() {
    let dir = tempfile::tempdir().unwrap();
    let o = mdfr(&["report", "--run-dir", "nothing"], dir.path());
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("no results"));
}

#[test]
fn mini_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.toml"), mini_config().to_toml().unwrap()).unwrap();
    for args in [
        &["data", "build"][..],
        &["train", "embedder"],
        &["train", "frn-s"],
        &["train", "ffn-s"],
        &["train", "frn-ti"],
        &["eval"],
        &["report"],
    ] {
        let mut full = vec!["--config", "run.toml"];
        full.extend_from_slice(args);
        let o = mdfr(&full, d);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["embedder", "frn-s", "ffn", "pcd", "icd", "frn-ti"] {
        assert!(d.join(format!("run/checkpoints/{f}.bin")).is_file(), "{f}");
    }
    for phase in ["embedder", "frn-s", "ffn-s", "frn-ti"] {
        let log = fs::read_to_string(d.join(format!("run/{phase}/train.log"))).unwrap();
        assert_eq!(log.lines().count(), 3);
    }

    // the report mirrors the stored evaluation numbers
    let result: mdfr_core::evaluation::ProtocolResult =
        serde_json::from_str(&fs::read_to_string(d.join("run/eval/result.json")).unwrap()).unwrap();
    assert_eq!(result.frontalized.pairs.len(), 8);
    let report = fs::read_to_string(d.join("run/report/report.txt")).unwrap();
    assert!(report.contains(&format_bins("rank-1, restored probes", &result.restored.bins)));
    assert!(report.contains(&result.frontalized.to_string()));
    let csv = fs::read_to_string(d.join("run/eval/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 16);

    // table numbers agree with a direct recomputation for one pair
    let corpus = mdfr_core::data::Corpus::open(d.join("corpus")).unwrap();
    let s = corpus.load_sample(0).unwrap();
    let net = mdfr_core::generator::Generator::<f32>::load(d.join("run/checkpoints/frn-ti.bin"), None).unwrap();
    let mut direct = MetricReport::new("x");
    direct.push("0", &net.restore(&s.lq).unwrap(), &s.frontal).unwrap();
    assert_eq!(direct.pairs[0].psnr, result.frontalized.pairs[0].psnr);
    assert_eq!(direct.pairs[0].ssim, result.frontalized.pairs[0].ssim);

    let sheet = FaceImage::load_png(d.join("run/report/contact_sheet.png")).unwrap();
    assert_eq!(sheet.dims(), (3 * 32, 5 * 32));

    // single-image inference without target pose, and the landmark-driven path
    let lq = d.join("corpus").join(&corpus.records()[0].lq);
    let o = mdfr(&["--config", "run.toml", "infer", "frontalize", lq.to_str().unwrap(), "front.png"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(FaceImage::load_png(d.join("front.png")).unwrap().dims(), (32, 32));
    let rec = &corpus.records()[0];
    fs::write(d.join("lp.json"), serde_json::to_string(&rec.landmarks_profile).unwrap()).unwrap();
    fs::write(d.join("lt.json"), serde_json::to_string(&rec.landmarks_frontal).unwrap()).unwrap();
    let hq = d.join("corpus").join(&rec.hq);
    let o = mdfr(
        &[
            "--config",
            "run.toml",
            "infer",
            "frontalize",
            "--with-landmarks",
            "--source-landmarks",
            "lp.json",
            "--target-landmarks",
            "lt.json",
            hq.to_str().unwrap(),
            "ffn.png",
        ],
        d,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = mdfr(&["--config", "run.toml", "infer", "restore", hq.to_str().unwrap(), "restored.png"], d);
    assert!(o.status.success());

    // MDFR_RUN_DIR redirects the run directory
    let o = Command::new(env!("CARGO_BIN_EXE_mdfr"))
        .args(["--config", "run.toml", "report"])
        .current_dir(d)
        .env("MDFR_RUN_DIR", d.join("elsewhere"))
        .output()
        .unwrap();
    assert!(stdout(&o).starts_with("no results"));
}
