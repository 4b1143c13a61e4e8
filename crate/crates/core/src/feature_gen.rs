//! Synthetic anomalies in feature space.
//!
//! The object is located by thresholding the cosine between each feature
//! row and the object-prompt embedding, then Gaussian noise is added to a
//! (possibly capped, blob-shaped) subset of those rows.

use std::collections::VecDeque;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diff::Tensor;
use crate::error::{Error, Result};

pub const TF_THRESHOLD: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseScale {
    /// Multiple of the element standard deviation of the feature map.
    Relative(f64),
    Absolute(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CfgConfig {
    pub sigma: NoiseScale,
    /// Fraction of the object cells that become anomalous, grown as one
    /// connected blob. 1.0 uses the whole object mask.
    pub anomaly_fraction_cap: f64,
    pub regenerate_noise_each_epoch: bool,
}

impl Default for CfgConfig {
    fn default() -> Self {
        Self {
            sigma: NoiseScale::Relative(1.0),
            anomaly_fraction_cap: 0.25,
            regenerate_noise_each_epoch: true,
        }
    }
}

impl CfgConfig {
    pub fn validate(&self) -> Result<()> {
        let s = match self.sigma {
            NoiseScale::Relative(s) | NoiseScale::Absolute(s) => s,
        };
        if !(s >= 0.0 && s.is_finite()) {
            return Err(Error::Invalid(format!("sigma must be >= 0, got {s}")));
        }
        if !(self.anomaly_fraction_cap > 0.0 && self.anomaly_fraction_cap <= 1.0) {
            return Err(Error::Invalid(format!(
                "anomaly_fraction_cap must be in (0, 1], got {}",
                self.anomaly_fraction_cap
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// Perturbed `s×d` features; rows outside the anomaly mask are copies.
    pub features: Tensor,
    pub anomaly_mask: Vec<u8>,
    /// Raw noise added before re-normalisation (zero outside the mask).
    pub noise: Tensor,
    pub sigma: f64,
    pub source: usize,
    pub seed: u64,
}

impl SyntheticSample {
    pub fn normal_mask(&self) -> Vec<u8> {
        self.anomaly_mask.iter().map(|&m| 1 - m).collect()
    }
}

/// Cosine of every feature row with the object embedding.
pub fn target_focus_scores(features: &Tensor, z_obj: &Tensor) -> Result<Vec<f32>> {
    crate::scoring::prompt_logits(features, z_obj)
}

/// Strict `score > 0.5` thresholding.
pub fn threshold_mask(scores: &[f32]) -> Vec<u8> {
    scores.iter().map(|&s| (s > TF_THRESHOLD) as u8).collect()
}

pub fn target_focus_mask(features: &Tensor, z_obj: &Tensor) -> Result<Vec<u8>> {
    let mask = threshold_mask(&target_focus_scores(features, z_obj)?);
    if mask.iter().all(|&m| m == 0) {
        log::warn!("target focus found no object cells; no anomalies will be injected");
    }
    Ok(mask)
}

/// Absolute noise standard deviation for a feature map.
pub fn resolve_sigma(scale: NoiseScale, features: &Tensor) -> f64 {
    match scale {
        NoiseScale::Absolute(s) => s,
        NoiseScale::Relative(k) => {
            let n = features.numel() as f64;
            let mean = features.data().iter().map(|&x| x as f64).sum::<f64>() / n;
            let var = features
                .data()
                .iter()
                .map(|&x| (x as f64 - mean).powi(2))
                .sum::<f64>()
                / n;
            k * var.sqrt()
        }
    }
}

/// Grow a 4-connected blob of `target` cells inside `allowed`.
fn grow_blob<R: Rng>(allowed: &[u8], grid: usize, target: usize, rng: &mut R) -> Vec<u8> {
    let mut out = vec![0u8; allowed.len()];
    let cells: Vec<usize> = (0..allowed.len()).filter(|&i| allowed[i] == 1).collect();
    let Some(&start) = cells.as_slice().choose(rng) else {
        return out;
    };
    let mut frontier = VecDeque::from([start]);
    out[start] = 1;
    let mut count = 1;
    while count < target {
        let Some(cell) = frontier.pop_front() else { break };
        let (y, x) = (cell / grid, cell % grid);
        let mut nbrs = Vec::with_capacity(4);
        if y > 0 {
            nbrs.push(cell - grid);
        }
        if y + 1 < grid {
            nbrs.push(cell + grid);
        }
        if x > 0 {
            nbrs.push(cell - 1);
        }
        if x + 1 < grid {
            nbrs.push(cell + 1);
        }
        nbrs.shuffle(rng);
        for n in nbrs {
            if count < target && allowed[n] == 1 && out[n] == 0 {
                out[n] = 1;
                count += 1;
                frontier.push_back(n);
            }
        }
    }
    out
}

pub fn inject_noise(
    features: &Tensor,
    object_mask: &[u8],
    cfg: &CfgConfig,
    seed: u64,
    source: usize,
) -> Result<SyntheticSample> {
    let (s, d) = (features.rows(), features.cols());
    if object_mask.len() != s {
        return Err(Error::LengthMismatch {
            what: "object mask",
            left: object_mask.len(),
            right: s,
        });
    }
    let sigma = resolve_sigma(cfg.sigma, features);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let on = object_mask.iter().filter(|&&m| m == 1).count();
    let anomaly_mask = if cfg.anomaly_fraction_cap >= 1.0 {
        object_mask.to_vec()
    } else {
        let target = ((on as f64) * cfg.anomaly_fraction_cap).ceil() as usize;
        let grid = (s as f64).sqrt().round() as usize;
        grow_blob(object_mask, grid, target, &mut rng)
    };

    let mut out = features.clone();
    let mut noise = Tensor::zeros(features.shape());
    if sigma > 0.0 {
        let dist = Normal::new(0.0, sigma).expect("finite sigma");
        for j in (0..s).filter(|&j| anomaly_mask[j] == 1) {
            let draws: Vec<f64> = (0..d).map(|_| dist.sample(&mut rng)).collect();
            let perturbed: Vec<f64> = features
                .row(j)
                .iter()
                .zip(&draws)
                .map(|(&f, &n)| f as f64 + n)
                .collect();
            let norm = perturbed.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for (o, p) in out.row_mut(j).iter_mut().zip(&perturbed) {
                *o = (p / norm) as f32;
            }
            for (o, &n) in noise.row_mut(j).iter_mut().zip(&draws) {
                *o = n as f32;
            }
        }
    }
    Ok(SyntheticSample {
        features: out,
        anomaly_mask,
        noise,
        sigma,
        source,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows(s: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(s * d);
        for _ in 0..s {
            let row: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = row.iter().map(|x| x * x).sum::<f32>().sqrt();
            data.extend(row.iter().map(|x| x / n));
        }
        Tensor::new(vec![s, d], data).unwrap()
    }

    #[test]
    fn threshold_is_strict() {
        assert_eq!(threshold_mask(&[0.6, 0.4, 0.5]), vec![1, 0, 0]);
        assert_eq!(threshold_mask(&[1.0; 3]), vec![1; 3]);
        assert_eq!(threshold_mask(&[0.0; 3]), vec![0; 3]);
    }

    #[test]
    fn zero_sigma_and_empty_mask_leave_features_alone() {
        let f = unit_rows(16, 8, 1);
        let cfg = CfgConfig {
            sigma: NoiseScale::Absolute(0.0),
            anomaly_fraction_cap: 1.0,
            ..Default::default()
        };
        let mask = vec![1u8; 16];
        let s = inject_noise(&f, &mask, &cfg, 3, 0).unwrap();
        assert_eq!(s.features, f);
        assert_eq!(s.anomaly_mask, mask);

        let s = inject_noise(&f, &[0u8; 16], &CfgConfig::default(), 3, 0).unwrap();
        assert_eq!(s.features, f);
        assert!(s.anomaly_mask.iter().all(|&m| m == 0));
    }

    #[test]
    fn anomalies_stay_on_object_and_rest_is_bitwise_equal() {
        let f = unit_rows(64, 16, 2);
        let mask: Vec<u8> = (0..64).map(|i| ((i / 8) % 7 > 1 && i % 8 > 2) as u8).collect();
        for cap in [0.25, 0.6, 1.0] {
            let cfg = CfgConfig {
                anomaly_fraction_cap: cap,
                ..Default::default()
            };
            let s = inject_noise(&f, &mask, &cfg, 11, 0).unwrap();
            for j in 0..64 {
                if s.anomaly_mask[j] == 1 {
                    assert_eq!(mask[j], 1);
                } else {
                    assert_eq!(s.features.row(j), f.row(j));
                }
                assert_eq!(s.anomaly_mask[j] + s.normal_mask()[j], 1);
            }
            let want = (mask.iter().filter(|&&m| m == 1).count() as f64 * cap).ceil() as usize;
            assert!(s.anomaly_mask.iter().filter(|&&m| m == 1).count() <= want);
        }
    }

    #[test]
    fn same_seed_same_sample() {
        let f = unit_rows(36, 8, 4);
        let mask = vec![1u8; 36];
        let cfg = CfgConfig::default();
        assert_eq!(
            inject_noise(&f, &mask, &cfg, 9, 0).unwrap(),
            inject_noise(&f, &mask, &cfg, 9, 0).unwrap()
        );
        assert_ne!(
            inject_noise(&f, &mask, &cfg, 9, 0).unwrap().features,
            inject_noise(&f, &mask, &cfg, 10, 0).unwrap().features
        );
    }

    #[test]
    fn blob_is_connected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let allowed = vec![1u8; 64];
        let blob = grow_blob(&allowed, 8, 12, &mut rng);
        let cells: Vec<usize> = (0..64).filter(|&i| blob[i] == 1).collect();
        assert_eq!(cells.len(), 12);
        let mut seen = vec![cells[0]];
        let mut stack = vec![cells[0]];
        while let Some(c) = stack.pop() {
            for &o in &cells {
                let (dy, dx) = ((c / 8).abs_diff(o / 8), (c % 8).abs_diff(o % 8));
                if dy + dx == 1 && !seen.contains(&o) {
                    seen.push(o);
                    stack.push(o);
                }
            }
        }
        assert_eq!(seen.len(), 12);
    }
}
