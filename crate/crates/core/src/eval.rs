//! Pixel-level evaluation of prompt score maps.

use crate::data::Sample;
use crate::diff::Tensor;
use crate::encoders::{DensePath, DualEncoder};
use crate::error::{Error, Result};
use crate::image::Mask;
use crate::metrics::auroc;
use crate::prompts::PromptBank;
use crate::scoring::{
    fuse_scores, fuse_vg, prompt_logits, upsample_scores, vision_guided_score, MemoryBank,
    ScoreMap,
};

/// Encoded normal/abnormal prompts ready for scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptScorer {
    pub z_normal: Tensor,
    pub z_abnormal: Tensor,
    pub tau: f32,
    pub path: DensePath,
    pub bank: Option<MemoryBank>,
}

impl PromptScorer {
    /// Score with the learnable prompts of `bank`.
    pub fn learnable(enc: &DualEncoder, prompts: &PromptBank, path: DensePath) -> Result<Self> {
        Self::from_matrices(enc, &prompts.lnp, &prompts.lap, path)
    }

    /// Score with the meta prompts of `bank`.
    pub fn meta(enc: &DualEncoder, prompts: &PromptBank, path: DensePath) -> Result<Self> {
        Self::from_matrices(enc, &prompts.mnp, &prompts.map, path)
    }

    pub fn from_matrices(enc: &DualEncoder, normal: &Tensor, abnormal: &Tensor, path: DensePath) -> Result<Self> {
        Ok(Self {
            z_normal: enc.text.encode_matrix(normal)?,
            z_abnormal: enc.text.encode_matrix(abnormal)?,
            tau: enc.tau,
            path,
            bank: None,
        })
    }

    pub fn with_bank(mut self, bank: MemoryBank) -> Self {
        self.bank = Some(bank);
        self
    }
}

/// Patch-grid maps for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageScores {
    pub s: ScoreMap,
    pub s_vg: Option<ScoreMap>,
}

pub fn score_image(enc: &DualEncoder, scorer: &PromptScorer, sample: &Sample) -> Result<ImageScores> {
    let feats = enc.visual.encode(&sample.image, scorer.path)?;
    let ln = prompt_logits(&feats.features, &scorer.z_normal)?;
    let la = prompt_logits(&feats.features, &scorer.z_abnormal)?;
    let s = fuse_scores(&la, &ln, scorer.tau)?;
    let s_vg = match &scorer.bank {
        Some(bank) => Some(fuse_vg(&s, &vision_guided_score(&feats.taps, bank)?)?),
        None => None,
    };
    Ok(ImageScores { s, s_vg })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AurocPair {
    /// All pixels of all images in one ranking.
    pub pooled: f64,
    /// Mean over images with both classes present.
    pub per_image: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub s: AurocPair,
    pub s_vg: Option<AurocPair>,
    pub maps: Vec<ImageScores>,
}

/// Pooled and per-image AUROC of upsampled maps against pixel masks.
pub fn pixel_auroc(maps: &[Vec<f32>], masks: &[&Mask]) -> Result<AurocPair> {
    if maps.len() != masks.len() {
        return Err(Error::LengthMismatch {
            what: "maps/masks",
            left: maps.len(),
            right: masks.len(),
        });
    }
    let mut all_scores = Vec::new();
    let mut all_labels = Vec::new();
    let mut per = Vec::new();
    for (m, mask) in maps.iter().zip(masks) {
        if m.len() != mask.bits.len() {
            return Err(Error::LengthMismatch {
                what: "map/mask pixels",
                left: m.len(),
                right: mask.bits.len(),
            });
        }
        all_scores.extend_from_slice(m);
        all_labels.extend_from_slice(&mask.bits);
        let on = mask.count();
        if on > 0 && on < mask.bits.len() {
            per.push(auroc(m, &mask.bits)?);
        }
    }
    let pooled = auroc(&all_scores, &all_labels)?;
    let per_image = if per.is_empty() {
        f64::NAN
    } else {
        per.iter().sum::<f64>() / per.len() as f64
    };
    Ok(AurocPair { pooled, per_image })
}

pub fn eval_pixel_auroc(enc: &DualEncoder, test: &[Sample], scorer: &PromptScorer) -> Result<EvalReport> {
    eval_pixel_auroc_jobs(enc, test, scorer, 1)
}

/// Score every test image, spreading images over `jobs` threads. Output
/// order and values do not depend on `jobs`.
pub fn score_all(enc: &DualEncoder, test: &[Sample], scorer: &PromptScorer, jobs: usize) -> Result<Vec<ImageScores>> {
    let jobs = jobs.clamp(1, test.len().max(1));
    if jobs == 1 {
        return test.iter().map(|s| score_image(enc, scorer, s)).collect();
    }
    let chunk = test.len().div_ceil(jobs);
    std::thread::scope(|scope| {
        let handles: Vec<_> = test
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|s| score_image(enc, scorer, s)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("scoring thread panicked"))
            .collect()
    })
}

pub fn eval_pixel_auroc_jobs(
    enc: &DualEncoder,
    test: &[Sample],
    scorer: &PromptScorer,
    jobs: usize,
) -> Result<EvalReport> {
    let maps = score_all(enc, test, scorer, jobs)?;
    let masks: Vec<&Mask> = test.iter().map(|s| &s.mask).collect();
    let up = |m: &ScoreMap, s: &Sample| upsample_scores(m, s.image.height, s.image.width);
    let s_maps: Vec<Vec<f32>> = maps.iter().zip(test).map(|(m, s)| up(&m.s, s)).collect();
    let s = pixel_auroc(&s_maps, &masks)?;
    let s_vg = if scorer.bank.is_some() {
        let v: Vec<Vec<f32>> = maps
            .iter()
            .zip(test)
            .map(|(m, s)| up(m.s_vg.as_ref().expect("bank present"), s))
            .collect();
        Some(pixel_auroc(&v, &masks)?)
    } else {
        None
    };
    Ok(EvalReport { s, s_vg, maps })
}
