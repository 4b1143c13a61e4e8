use std::path::{Path, PathBuf};

use apt_core::config::RunConfig;
use apt_core::data::Sample;
use apt_core::encoders::DualEncoder;
use apt_core::eval::{score_all, PromptScorer};
use apt_core::gradcheck::{run_suite, SUITE_TOLERANCE};
use apt_core::image::Image;
use apt_core::io::{self, Cell, Checkpoint, Csv};
use apt_core::pipeline;
use apt_core::scoring::{build_memory_bank, upsample_scores};

use crate::error::CliError;

pub const TRAIN_COLUMNS: [&str; 9] = [
    "epoch",
    "meta_round",
    "L_ano",
    "L_div",
    "C_lnp",
    "C_lap",
    "calibrated_lnp",
    "calibrated_lap",
    "lr",
];
pub const EVAL_COLUMNS: [&str; 2] = ["auroc_pixel_s", "auroc_pixel_svg"];
pub const PRETRAIN_COLUMNS: [&str; 6] = ["step", "loss", "info_nce", "dense", "tau", "lr"];
pub const GRADCHECK_COLUMNS: [&str; 7] = ["case", "d", "t", "grid", "rel_error_ano", "rel_error_div", "passed"];

/// Parsed config plus the directory its relative paths resolve against.
pub struct Context {
    pub cfg: RunConfig,
    base: PathBuf,
    out: Option<PathBuf>,
    pub jobs: usize,
}

impl Context {
    pub fn load(config: &Path, seed: Option<u64>, out: Option<PathBuf>, jobs: usize) -> Result<Self, CliError> {
        let bytes = io::read_file(config)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| CliError::Usage(format!("{}: config is not UTF-8", config.display())))?;
        let mut cfg = RunConfig::parse(&text)?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.check()?;
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        let base = config.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { cfg, base, out, jobs })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() || p.as_os_str().is_empty() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// `--out` if given, else the configured output directory.
    pub fn out_dir(&self) -> Result<PathBuf, CliError> {
        let dir = match &self.out {
            Some(d) => d.clone(),
            None => self.resolve(&self.cfg.out_dir),
        };
        if dir.as_os_str().is_empty() {
            return Err(CliError::Usage("no output directory (set out_dir or pass --out)".into()));
        }
        Ok(dir)
    }

    fn encoder(&self) -> Result<DualEncoder, CliError> {
        let ckpt = Checkpoint::load(&self.resolve(&self.cfg.checkpoint))?;
        Ok(io::encoder_from_checkpoint(&ckpt, self.cfg.visual_config(), self.cfg.text_config())?)
    }
}

fn sample_name(set: &str, i: usize) -> String {
    format!("{set}_{i:03}")
}

pub fn gen_data(ctx: &Context) -> Result<PathBuf, CliError> {
    let dir = match &ctx.out {
        Some(d) => d.clone(),
        None => ctx.resolve(&ctx.cfg.data_dir),
    };
    if dir.as_os_str().is_empty() {
        return Err(CliError::Usage("no dataset directory (set data_dir or pass --out)".into()));
    }
    let split = pipeline::dataset(&ctx.cfg)?;
    let mut captions = String::new();
    let mut index = String::new();
    let sets: [(&str, &[Sample]); 2] = [("train", &split.train), ("test", &split.test)];
    for (set, samples) in sets {
        for (i, s) in samples.iter().enumerate() {
            let name = sample_name(set, i);
            io::write_file(&dir.join("images").join(format!("{name}.pgm")), &io::image_to_pgm(&s.image)?)?;
            if s.label == 1 {
                io::write_file(&dir.join("masks").join(format!("{name}.pgm")), &io::mask_to_pgm(&s.mask)?)?;
            }
            let kind = if s.label == 1 { "anomalous" } else { "normal" };
            captions.push_str(&s.caption);
            captions.push('\n');
            index.push_str(&format!("{name} {set} {kind}\n"));
        }
    }
    io::write_file(&dir.join("captions.txt"), captions.as_bytes())?;
    io::write_file(&dir.join("split.txt"), index.as_bytes())?;
    Ok(dir)
}

pub fn pretrain(ctx: &Context) -> Result<PathBuf, CliError> {
    let out = ctx.out_dir()?;
    let (enc, log) = pipeline::build_encoder(&ctx.cfg)?;
    let mut csv = Csv::new(&PRETRAIN_COLUMNS);
    for l in &log {
        csv.push(vec![l.step.into(), l.loss.into(), l.info_nce.into(), l.dense.into(), l.tau.into(), l.lr.into()])?;
    }
    csv.save(&out.join("pretrain.csv"))?;
    let path = ctx.resolve(&ctx.cfg.checkpoint);
    io::encoder_checkpoint(&enc).save(&path)?;
    if let Some(last) = log.last() {
        log::info!("pretrained {} steps, final InfoNCE {:.4}, tau {:.4}", log.len(), last.info_nce, enc.tau);
    }
    Ok(path)
}

pub fn train(ctx: &Context) -> Result<PathBuf, CliError> {
    let out = ctx.out_dir()?;
    let enc = ctx.encoder()?;
    let split = pipeline::dataset(&ctx.cfg)?;
    let outcome = pipeline::tune(&enc, &split, &ctx.cfg)?;
    let mut csv = Csv::new(&TRAIN_COLUMNS);
    for e in &outcome.epochs {
        csv.push(vec![
            e.epoch.into(),
            e.meta_round.into(),
            e.l_ano.into(),
            e.l_div.into(),
            e.c_lnp.into(),
            e.c_lap.into(),
            e.calibrated_lnp.into(),
            e.calibrated_lap.into(),
            e.lr.into(),
        ])?;
    }
    csv.save(&out.join("train.csv"))?;
    let mut ckpt = Checkpoint::new();
    io::add_prompts(&mut ckpt, &outcome.state.bank);
    ckpt.insert("tau", apt_core::diff::Tensor::new(vec![1], vec![enc.tau]).expect("scalar"));
    io::add_adam(&mut ckpt, &outcome.state.adam);
    let path = ctx.resolve(&ctx.cfg.prompts_checkpoint);
    ckpt.save(&path)?;
    if let Some(last) = outcome.epochs.last() {
        log::info!("tuned {} epochs, final L_ano {:.4}", outcome.epochs.len(), last.l_ano);
    }
    Ok(path)
}

fn tuned_scorer(ctx: &Context, enc: &DualEncoder, train: &[Sample]) -> Result<PromptScorer, CliError> {
    let bank = io::prompts_from_checkpoint(&Checkpoint::load(&ctx.resolve(&ctx.cfg.prompts_checkpoint))?)?;
    let path = ctx.cfg.train_config().dense_path();
    let mut scorer = PromptScorer::learnable(enc, &bank, path)?;
    if ctx.cfg.use_vg {
        let images: Vec<Image> = train.iter().map(|s| s.image.clone()).collect();
        scorer = scorer.with_bank(build_memory_bank(&images, &enc.visual, path)?);
    }
    Ok(scorer)
}

/// Write one 8-bit map of `S` per test image into `dir`.
fn write_renders(dir: &Path, test: &[Sample], maps: &[apt_core::eval::ImageScores]) -> Result<(), CliError> {
    for (i, (s, m)) in test.iter().zip(maps).enumerate() {
        let up = upsample_scores(&m.s, s.image.height, s.image.width);
        let px: Vec<u8> = up.iter().map(|&v| io::quantize(v)).collect();
        let bytes = io::encode_pgm(s.image.width, s.image.height, &px)?;
        io::write_file(&dir.join(format!("{}.pgm", sample_name("test", i))), &bytes)?;
    }
    Ok(())
}

pub fn eval(ctx: &Context, render: Option<&Path>) -> Result<PathBuf, CliError> {
    let out = ctx.out_dir()?;
    let enc = ctx.encoder()?;
    let split = pipeline::dataset(&ctx.cfg)?;
    let scorer = tuned_scorer(ctx, &enc, &split.train)?;
    let report = apt_core::eval::eval_pixel_auroc_jobs(&enc, &split.test, &scorer, ctx.jobs)?;
    let svg = report.s_vg.as_ref().map_or(f64::NAN, |a| a.pooled);
    let mut csv = Csv::new(&EVAL_COLUMNS);
    csv.push(vec![report.s.pooled.into(), svg.into()])?;
    let path = out.join("eval.csv");
    csv.save(&path)?;
    log::info!("pixel AUROC S {:.4}, S_VG {:.4}", report.s.pooled, svg);
    if let Some(dir) = render {
        write_renders(dir, &split.test, &report.maps)?;
    }
    Ok(path)
}

pub fn render(ctx: &Context, render: Option<&Path>) -> Result<PathBuf, CliError> {
    let dir = match render {
        Some(d) => d.to_path_buf(),
        None => ctx.out_dir()?.join("render"),
    };
    let enc = ctx.encoder()?;
    let split = pipeline::dataset(&ctx.cfg)?;
    let scorer = tuned_scorer(ctx, &enc, &split.train)?;
    let maps = score_all(&enc, &split.test, &scorer, ctx.jobs)?;
    write_renders(&dir, &split.test, &maps)?;
    Ok(dir)
}

pub fn gradcheck(ctx: &Context, cases: usize) -> Result<PathBuf, CliError> {
    let out = ctx.out_dir()?;
    let reports = run_suite(cases, ctx.cfg.seed, SUITE_TOLERANCE);
    let mut csv = Csv::new(&GRADCHECK_COLUMNS);
    let mut failed = 0;
    let mut worst: f64 = 0.0;
    for r in &reports {
        if !r.passed() {
            failed += 1;
        }
        worst = worst.max(r.max_rel_error());
        let pass = if r.passed() { "true" } else { "false" };
        csv.push(vec![
            r.case.into(),
            r.shape.d.into(),
            r.shape.t.into(),
            r.shape.grid.into(),
            r.anomaly.max_rel_error().into(),
            r.divergence.max_rel_error().into(),
            Cell::from(pass),
        ])?;
    }
    let path = out.join("gradcheck.csv");
    csv.save(&path)?;
    println!("gradcheck: {} cases, {} failed, max relative error {worst:.3e}", reports.len(), failed);
    if failed > 0 {
        return Err(CliError::Numeric(format!("{failed} gradient checks exceeded {SUITE_TOLERANCE:e}")));
    }
    Ok(path)
}
