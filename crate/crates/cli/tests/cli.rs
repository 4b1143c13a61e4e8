use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use apt_core::config::RunConfig;
use apt_core::io::{self, Checkpoint};
use apt_core::pipeline;

const TINY: &str = "\
# tiny run for tests
seed = 3
shots = 1
n_test = 4
epochs = 4
meta_rounds = 2
pretrain_steps = 3
pretrain_batch = 4
corpus_size = 8
data_dir = data
checkpoint = enc.ckpt
prompts_checkpoint = prompts.ckpt
out_dir = out
";

fn apt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_apt"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn apt")
}

fn setup(extra: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, format!("{TINY}{extra}")).unwrap();
    (dir, cfg)
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = walk(dir)
        .into_iter()
        .map(|p| (p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn gen_data_layout_and_determinism() {
    let (dir, cfg) = setup("");
    ok(&apt(&["gen-data", "--config", s(&cfg)]));
    let data = dir.path().join("data");
    assert_eq!(fs::read_dir(data.join("images")).unwrap().count(), 1 + 4);
    assert_eq!(fs::read_dir(data.join("masks")).unwrap().count(), 2);
    let split = fs::read_to_string(data.join("split.txt")).unwrap();
    assert_eq!(split.lines().count(), 5);
    assert!(split.starts_with("train_000 train normal\n"));
    let captions = fs::read_to_string(data.join("captions.txt")).unwrap();
    assert_eq!(captions.lines().next(), Some("a photo of a disk"));
    let first = files(&data);

    let again = dir.path().join("again");
    ok(&apt(&["gen-data", "--config", s(&cfg), "--out", s(&again)]));
    assert_eq!(files(&again), first);

    let img = fs::read(data.join("images/test_001.pgm")).unwrap();
    assert!(img.starts_with(b"P5\n64 64 255\n"));
}

#[test]
fn usage_and_config_errors() {
    let (dir, cfg) = setup("");
    assert_eq!(apt(&["gen-data"]).status.code(), Some(1));
    assert_eq!(apt(&["frobnicate", "--config", s(&cfg)]).status.code(), Some(1));
    let missing = dir.path().join("nope.cfg");
    assert_eq!(apt(&["gen-data", "--config", s(&missing)]).status.code(), Some(3));

    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "seed = 1\nsede = 2\n").unwrap();
    let out = apt(&["gen-data", "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2") && err.contains("sede"), "{err}");

    let empty = dir.path().join("empty.cfg");
    fs::write(&empty, "data_dir =\n").unwrap();
    assert_eq!(apt(&["gen-data", "--config", s(&empty)]).status.code(), Some(1));
}

#[test]
fn pretrain_train_eval_round_trip() {
    let (dir, cfg) = setup("");
    let root = dir.path();
    ok(&apt(&["pretrain", "--config", s(&cfg)]));
    let enc_bytes = fs::read(root.join("enc.ckpt")).unwrap();
    assert!(enc_bytes.starts_with(b"APTCKPT1\n"));
    let log = fs::read_to_string(root.join("out/pretrain.csv")).unwrap();
    assert!(log.starts_with("step,loss,info_nce,dense,tau,lr\n"));
    assert_eq!(log.lines().count(), 1 + 3);

    // same seed, same bytes
    let other = root.join("second.cfg");
    fs::write(&other, TINY.replace("enc.ckpt", "enc2.ckpt")).unwrap();
    ok(&apt(&["pretrain", "--config", s(&other)]));
    assert_eq!(fs::read(root.join("enc2.ckpt")).unwrap(), enc_bytes);

    ok(&apt(&["train", "--config", s(&cfg)]));
    let train = fs::read_to_string(root.join("out/train.csv")).unwrap();
    let mut lines = train.lines();
    assert_eq!(
        lines.next(),
        Some("epoch,meta_round,L_ano,L_div,C_lnp,C_lap,calibrated_lnp,calibrated_lap,lr")
    );
    assert_eq!(lines.count(), 4);
    let prompts = Checkpoint::load(&root.join("prompts.ckpt")).unwrap();
    for name in ["prompts.lnp", "prompts.lap", "prompts.mnp", "prompts.map", "tau", "adam.state"] {
        assert!(prompts.entries.contains_key(name), "{name}");
    }

    let render = root.join("maps");
    ok(&apt(&["eval", "--config", s(&cfg), "--render", s(&render)]));
    let eval = fs::read_to_string(root.join("out/eval.csv")).unwrap();
    assert!(eval.starts_with("auroc_pixel_s,auroc_pixel_svg\n"));
    let row: Vec<f64> = eval.lines().nth(1).unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(fs::read_dir(&render).unwrap().count(), 4);

    ok(&apt(&["eval", "--config", s(&cfg), "--jobs", "3"]));
    assert_eq!(fs::read_to_string(root.join("out/eval.csv")).unwrap(), eval);

    // rendered values are round(255·clamp(S)) of the tuned map
    let rc = RunConfig::parse(TINY).unwrap();
    let enc = io::encoder_from_checkpoint(
        &Checkpoint::from_bytes(&enc_bytes).unwrap(),
        rc.visual_config(),
        rc.text_config(),
    )
    .unwrap();
    let bank = io::prompts_from_checkpoint(&prompts).unwrap();
    let split = pipeline::dataset(&rc).unwrap();
    let scorer =
        apt_core::eval::PromptScorer::learnable(&enc, &bank, apt_core::encoders::DensePath::Locality).unwrap();
    let maps = apt_core::eval::score_image(&enc, &scorer, &split.test[2]).unwrap();
    let up = apt_core::scoring::upsample_scores(&maps.s, 64, 64);
    let (w, h, px) = io::decode_pgm(&fs::read(render.join("test_002.pgm")).unwrap()).unwrap();
    assert_eq!((w, h), (64, 64));
    let expect: Vec<u8> = up.iter().map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8).collect();
    assert_eq!(px, expect);

    let alt = root.join("alt");
    ok(&apt(&["render", "--config", s(&cfg), "--render", s(&alt)]));
    assert_eq!(files(&alt), files(&render));
}

#[test]
fn train_without_self_optimisation_keeps_meta_prompts() {
    let (dir, cfg) = setup("enable_so = false\n");
    ok(&apt(&["pretrain", "--config", s(&cfg)]));
    ok(&apt(&["train", "--config", s(&cfg)]));
    let rc = RunConfig::parse(&format!("{TINY}enable_so = false\n")).unwrap();
    let enc = io::encoder_from_checkpoint(
        &Checkpoint::load(&dir.path().join("enc.ckpt")).unwrap(),
        rc.visual_config(),
        rc.text_config(),
    )
    .unwrap();
    let init = pipeline::initial_bank(&enc, &rc).unwrap();
    let tuned = io::prompts_from_checkpoint(&Checkpoint::load(&dir.path().join("prompts.ckpt")).unwrap()).unwrap();
    assert_eq!(tuned.mnp, init.mnp);
    assert_eq!(tuned.map, init.map);
    assert_ne!(tuned.lnp, init.lnp);
}

#[test]
fn damaged_checkpoints_are_io_errors() {
    let (dir, cfg) = setup("");
    ok(&apt(&["pretrain", "--config", s(&cfg)]));
    let path = dir.path().join("enc.ckpt");
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    let out = apt(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tau"));

    fs::write(&path, b"PK\x03\x04 not a checkpoint").unwrap();
    let out = apt(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}

#[test]
fn gradcheck_command_passes() {
    let (dir, cfg) = setup("");
    ok(&apt(&["gradcheck", "--config", s(&cfg), "--cases", "4"]));
    let csv = fs::read_to_string(dir.path().join("out/gradcheck.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
}
