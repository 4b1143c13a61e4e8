//! End-to-end glue: pretrain, tune, evaluate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{gen_corpus, gen_dataset, DatasetSplit};
use crate::encoders::DualEncoder;
use crate::error::Result;
use crate::eval::{eval_pixel_auroc_jobs, EvalReport, PromptScorer};
use crate::image::Image;
use crate::pretrain::{pretrain_contrastive, PretrainLog};
use crate::prompts::{ObjectPrompt, PromptBank};
use crate::scoring::build_memory_bank;
use crate::tuning::{prepare_shots, run_meta_rounds, TrainOutcome};

const CORPUS_SALT: u64 = 0xc0de_0000_0000_0001;
const INIT_SALT: u64 = 0x1417_0000_0000_0002;

/// Initialise and pretrain the encoder for `cfg.seed`.
pub fn build_encoder(cfg: &RunConfig) -> Result<(DualEncoder, Vec<PretrainLog>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_SALT);
    let mut enc = DualEncoder::init(cfg.visual_config(), cfg.text_config(), cfg.tau, &mut rng)?;
    let corpus = gen_corpus(&cfg.spec(), cfg.corpus_size, cfg.seed ^ CORPUS_SALT)?;
    let log = pretrain_contrastive(&mut enc, &corpus, &cfg.pretrain_config())?;
    Ok((enc, log))
}

pub fn dataset(cfg: &RunConfig) -> Result<DatasetSplit> {
    gen_dataset(&cfg.spec(), cfg.shots, cfg.n_test, cfg.seed)
}

pub fn initial_bank(enc: &DualEncoder, cfg: &RunConfig) -> Result<PromptBank> {
    let (normal, abnormal) = cfg.templates();
    PromptBank::new(&enc.text, normal, abnormal, cfg.t, cfg.prompt_init, cfg.seed)
}

pub fn tune(enc: &DualEncoder, split: &DatasetSplit, cfg: &RunConfig) -> Result<TrainOutcome> {
    let train = cfg.train_config();
    let images: Vec<Image> = split.train.iter().map(|s| s.image.clone()).collect();
    let object = ObjectPrompt::new(cfg.object.name())?;
    let shots = prepare_shots(enc, &images, &object, &train)?;
    run_meta_rounds(
        initial_bank(enc, cfg)?,
        &enc.text,
        enc.tau as f64,
        &shots,
        &cfg.cfg_config(),
        &train,
    )
}

/// Score a prompt pair (normal, abnormal matrices) on the test split using
/// `jobs` threads.
pub fn evaluate(
    enc: &DualEncoder,
    split: &DatasetSplit,
    cfg: &RunConfig,
    normal: &crate::diff::Tensor,
    abnormal: &crate::diff::Tensor,
    jobs: usize,
) -> Result<EvalReport> {
    let path = cfg.train_config().dense_path();
    let mut scorer = PromptScorer::from_matrices(enc, normal, abnormal, path)?;
    if cfg.use_vg {
        let images: Vec<Image> = split.train.iter().map(|s| s.image.clone()).collect();
        scorer = scorer.with_bank(build_memory_bank(&images, &enc.visual, path)?);
    }
    eval_pixel_auroc_jobs(enc, &split.test, &scorer, jobs)
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    /// Initial meta prompts, no tuning.
    pub baseline: EvalReport,
    pub tuned: EvalReport,
    pub outcome: TrainOutcome,
}

/// Tune on `split` with a pretrained encoder and evaluate both the zero-shot
/// baseline and the tuned prompts.
pub fn run_experiment(enc: &DualEncoder, split: &DatasetSplit, cfg: &RunConfig) -> Result<ExperimentResult> {
    let init = initial_bank(enc, cfg)?;
    let baseline = evaluate(enc, split, cfg, &init.mnp, &init.map, 1)?;
    let outcome = tune(enc, split, cfg)?;
    let tuned = evaluate(enc, split, cfg, &outcome.state.bank.lnp, &outcome.state.bank.lap, 1)?;
    Ok(ExperimentResult {
        baseline,
        tuned,
        outcome,
    })
}
