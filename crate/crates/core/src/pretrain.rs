//! Contrastive pretraining of the dual encoder on the synthetic corpus.
//!
//! The loss is a symmetric InfoNCE between image embeddings and caption
//! embeddings with a learnable temperature, plus a dense term that pulls
//! defect-free object patches towards the object-prompt embedding (cosine
//! above 0.5) and background and defect patches away from it.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{ObjectKind, Sample};
use crate::diff::{AdamState, DiffError, Graph, Real, Tensor, Var};
use crate::encoders::{DensePath, DualEncoder};
use crate::error::{Error, Result};
use crate::prompts::OBJECT_TEMPLATE;

pub const TAU_RANGE: (f32, f32) = (0.01, 1.0);

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub tau_init: f32,
    /// Weight of the dense object-alignment term; 0 disables it.
    pub dense_weight: f64,
    /// Slope of the dense term's sigmoid around the 0.5 cosine threshold.
    pub dense_slope: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 16,
            lr: 2e-3,
            tau_init: 0.07,
            dense_weight: 1.0,
            dense_slope: 10.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainLog {
    pub step: usize,
    pub loss: f64,
    pub info_nce: f64,
    pub dense: f64,
    pub tau: f64,
    pub lr: f64,
}

fn object_text(object: ObjectKind) -> String {
    OBJECT_TEMPLATE.replace("{object}", object.name())
}

/// Soft InfoNCE targets: uniform over the batch entries sharing a caption.
fn targets(captions: &[&str]) -> Tensor {
    let b = captions.len();
    let mut t = Tensor::zeros(&[b, b]);
    for i in 0..b {
        let same: Vec<usize> = (0..b).filter(|&j| captions[j] == captions[i]).collect();
        let w = 1.0 / same.len() as f32;
        for j in same {
            t.row_mut(i)[j] = w;
        }
    }
    t
}

/// Symmetric soft-target InfoNCE over `B×d` unit image/text rows.
pub fn info_nce_node<T: Real>(
    g: &mut Graph<T>,
    images: Var,
    texts: Var,
    inv_tau: Var,
    targets: &Tensor,
) -> Result<Var, DiffError> {
    let b = targets.rows() as f64;
    let tt = g.transpose(texts)?;
    let sims = g.matmul(images, tt)?;
    let logits = g.mul(sims, inv_tau)?;
    let t = g.constant(targets);
    let mut total = None;
    for dir in [logits, g.transpose(logits)?] {
        let p = g.softmax(dir)?;
        let lp = g.log(p)?;
        let weighted = g.mul(t, lp)?;
        let s = g.sum(weighted)?;
        let l = g.scale(s, -1.0 / (2.0 * b))?;
        total = Some(match total {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
    }
    Ok(total.expect("two directions"))
}

/// Weighted BCE of `sigmoid((cos − 0.5)·slope)` against per-patch labels.
fn dense_node(g: &mut Graph<f32>, dense: Var, z_obj: Var, labels: &[(u8, f32)], slope: f64) -> Result<Var> {
    let zt = g.transpose(z_obj)?;
    let cos = g.matmul(dense, zt)?;
    let shifted = g.add_scalar(cos, -0.5)?;
    let scaled = g.scale(shifted, slope)?;
    let p = g.sigmoid(scaled)?;
    let n = labels.len();
    let q = g.clamp(p, crate::tuning::PROB_CLAMP, 1.0 - crate::tuning::PROB_CLAMP)?;
    let total: f32 = labels.iter().map(|l| l.1).sum::<f32>().max(1.0);
    let pos = g.constant(&Tensor::new(vec![n, 1], labels.iter().map(|&(y, w)| w * y as f32 / total).collect())?);
    let neg = g.constant(&Tensor::new(vec![n, 1], labels.iter().map(|&(y, w)| w * (1 - y) as f32 / total).collect())?);
    let log_q = g.log(q)?;
    let neg_q = g.scale(q, -1.0)?;
    let one_minus = g.add_scalar(neg_q, 1.0)?;
    let log_1q = g.log(one_minus)?;
    let a = g.mul(pos, log_q)?;
    let b = g.mul(neg, log_1q)?;
    let s = g.add(a, b)?;
    let sum = g.sum(s)?;
    Ok(g.scale(sum, -1.0)?)
}

/// Per-patch (label, weight): patches more than half covered by the object
/// are positives unless a defect touches them; everything else is negative.
fn object_labels(sample: &Sample, patch: usize) -> Vec<(u8, f32)> {
    let obj = sample.object_mask.patch_coverage(patch);
    let def = sample.mask.patch_coverage(patch);
    obj.iter()
        .zip(&def)
        .map(|(&c, &d)| ((c > 0.5 && d == 0.0) as u8, 1.0))
        .collect()
}

/// Train every encoder parameter and τ in place.
pub fn pretrain_contrastive(
    enc: &mut DualEncoder,
    corpus: &[Sample],
    config: &PretrainConfig,
) -> Result<Vec<PretrainLog>> {
    if corpus.is_empty() || config.batch < 2 {
        return Err(Error::Invalid("pretraining needs a corpus and batch >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(config.lr, config.steps);
    let mut log_tau = Tensor::scalar(config.tau_init.ln());
    let patch = enc.visual.config().patch_size;
    let mut logs = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let batch: Vec<&Sample> = (0..config.batch)
            .map(|_| &corpus[rng.random_range(0..corpus.len())])
            .collect();

        let mut g = Graph::<f32>::new();
        let vvars = enc.visual.bind(&mut g, true);
        let tvars = enc.text.bind(&mut g, true, true);
        let lt = g.leaf(&log_tau);
        let neg = g.scale(lt, -1.0)?;
        let inv_tau = g.exp(neg)?;

        let mut texts: BTreeMap<String, Var> = BTreeMap::new();
        let mut caption_var = |g: &mut Graph<f32>, text: &str| -> Result<Var> {
            if let Some(&v) = texts.get(text) {
                return Ok(v);
            }
            let ids = enc.text.tokenize(text)?;
            let v = enc.text.forward_ids(g, &tvars, &ids)?;
            texts.insert(text.to_string(), v);
            Ok(v)
        };

        let mut cls_rows = Vec::with_capacity(batch.len());
        let mut txt_rows = Vec::with_capacity(batch.len());
        let mut dense_terms = Vec::new();
        for s in &batch {
            let p = g.constant(&enc.visual.patchify(&s.image)?);
            let out = enc.visual.forward(&mut g, &vvars, p, DensePath::Locality)?;
            cls_rows.push(out.cls);
            txt_rows.push(caption_var(&mut g, &s.caption)?);
            if config.dense_weight > 0.0 {
                let z_obj = caption_var(&mut g, &object_text(s.object))?;
                let labels = object_labels(s, patch);
                dense_terms.push(dense_node(&mut g, out.dense, z_obj, &labels, config.dense_slope)?);
                dense_terms.push(dense_node(&mut g, out.global_dense, z_obj, &labels, config.dense_slope)?);
            }
        }
        let images = g.concat_rows(&cls_rows)?;
        let texts_m = g.concat_rows(&txt_rows)?;
        let caps: Vec<&str> = batch.iter().map(|s| s.caption.as_str()).collect();
        let nce = info_nce_node(&mut g, images, texts_m, inv_tau, &targets(&caps))?;
        let mut loss = nce;
        let mut dense_val = 0.0;
        if !dense_terms.is_empty() {
            let cat = g.concat_rows(&dense_terms)?;
            let mean = g.mean(cat)?;
            dense_val = g.scalar(mean) as f64;
            let weighted = g.scale(mean, config.dense_weight)?;
            loss = g.add(loss, weighted)?;
        }
        let loss_val = g.scalar(loss) as f64;
        if !loss_val.is_finite() {
            return Err(Error::NonFiniteLoss {
                what: "pretraining loss",
                epoch: step,
                sample: 0,
            });
        }
        let grads = g.backward(loss)?;

        let mut grad_list = Vec::new();
        for &v in vvars.bound().vars().iter().chain(tvars.bound().vars()) {
            grad_list.push(grads.tensor(v).expect("leaf gradient"));
        }
        grad_list.push(grads.tensor(lt).expect("leaf gradient"));
        let mut params: Vec<&mut Tensor> = enc
            .visual
            .params_mut()
            .tensors_mut()
            .chain(enc.text.params_mut().tensors_mut())
            .collect();
        params.push(&mut log_tau);
        let refs: Vec<&Tensor> = grad_list.iter().collect();
        let lr = adam.step(&mut params, &refs)?;
        let lo = TAU_RANGE.0.ln();
        let hi = TAU_RANGE.1.ln();
        log_tau.data_mut()[0] = log_tau.data()[0].clamp(lo, hi);
        enc.tau = log_tau.data()[0].exp();

        logs.push(PretrainLog {
            step,
            loss: loss_val,
            info_nce: g.scalar(nce) as f64,
            dense: dense_val,
            tau: enc.tau as f64,
            lr,
        });
        log::debug!("pretrain step {step} loss {loss_val:.5}");
    }
    Ok(logs)
}

/// Mean cosine of matched image/caption pairs and of mismatched pairs
/// (different captions).
pub fn alignment_gap(enc: &DualEncoder, samples: &[Sample]) -> Result<(f64, f64)> {
    let mut cache: BTreeMap<&str, Tensor> = BTreeMap::new();
    for s in samples {
        if !cache.contains_key(s.caption.as_str()) {
            cache.insert(&s.caption, enc.text.encode_text(&s.caption)?);
        }
    }
    let imgs = samples
        .iter()
        .map(|s| Ok(enc.visual.encode(&s.image, DensePath::Locality)?.cls))
        .collect::<Result<Vec<_>>>()?;
    let dot = |a: &Tensor, b: &Tensor| -> f64 {
        a.data().iter().zip(b.data()).map(|(&x, &y)| x as f64 * y as f64).sum()
    };
    let (mut m, mut mn, mut x, mut xn) = (0.0, 0usize, 0.0, 0usize);
    for (i, s) in samples.iter().enumerate() {
        for (cap, z) in &cache {
            if *cap == s.caption {
                m += dot(&imgs[i], z);
                mn += 1;
            } else {
                x += dot(&imgs[i], z);
                xn += 1;
            }
        }
    }
    if mn == 0 || xn == 0 {
        return Err(Error::SingleClass);
    }
    Ok((m / mn as f64, x / xn as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{finite_diff_check, Objective};

    struct Nce(Tensor);
    impl Objective for Nce {
        fn build<T: Real>(&self, g: &mut Graph<T>, x: &[Var]) -> Result<Var, DiffError> {
            let i = g.l2_normalize(x[0])?;
            let t = g.l2_normalize(x[1])?;
            let neg = g.scale(x[2], -1.0)?;
            let inv = g.exp(neg)?;
            info_nce_node(g, i, t, inv, &self.0)
        }
    }

    #[test]
    fn info_nce_gradients_and_uniform_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let imgs = crate::encoders::normal_tensor(&mut rng, &[4, 5], 1.0);
        let txts = crate::encoders::normal_tensor(&mut rng, &[4, 5], 1.0);
        let caps = ["a", "b", "a", "c"];
        let obj = Nce(targets(&caps));
        let r = finite_diff_check(&obj, &[imgs, txts, Tensor::scalar(0.0)], 1e-4);
        assert!(r.passed, "{r:?}");

        let same = Tensor::filled(&[16, 4], 0.5);
        let mut g = Graph::<f64>::new();
        let a = g.constant(&same);
        let inv = g.constant(&Tensor::scalar(1.0 / 0.07));
        let all: Vec<String> = (0..16).map(|i| i.to_string()).collect();
        let caps: Vec<&str> = all.iter().map(String::as_str).collect();
        let l = info_nce_node(&mut g, a, a, inv, &targets(&caps)).unwrap();
        assert!((g.scalar(l) - 16f64.ln()).abs() < 1e-9);
    }
}
