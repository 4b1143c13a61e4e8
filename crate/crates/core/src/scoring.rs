//! Prompt-conditioned score maps, the normal-patch memory bank and
//! resolution handling.

use crate::diff::{sigmoid, DiffError, Graph, Real, Tensor, Var};
use crate::encoders::{DensePath, VisualEncoder};
use crate::error::{Error, Result};
use crate::image::Image;

const UNIT_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreKind {
    PerPrompt,
    Fused,
    Meta,
    VisionGuided,
    FusedVg,
}

/// Per-patch scores on a `g×g` grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub grid: usize,
    pub values: Vec<f32>,
    pub kind: ScoreKind,
}

impl ScoreMap {
    pub fn new(grid: usize, values: Vec<f32>, kind: ScoreKind) -> Result<Self> {
        if values.len() != grid * grid {
            return Err(Error::LengthMismatch {
                what: "score map",
                left: values.len(),
                right: grid * grid,
            });
        }
        Ok(Self { grid, values, kind })
    }

    /// Index of the highest score (first on ties).
    pub fn argmax(&self) -> usize {
        self.values
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |best, (i, &v)| {
                if v > best.1 {
                    (i, v)
                } else {
                    best
                }
            })
            .0
    }
}

fn grid_of(rows: usize) -> Result<usize> {
    let g = (rows as f64).sqrt().round() as usize;
    if g * g != rows {
        return Err(Error::Invalid(format!("{rows} locations do not form a square grid")));
    }
    Ok(g)
}

fn check_unit_rows(what: &'static str, t: &Tensor) -> Result<()> {
    for i in 0..t.rows() {
        let n = t.row(i).iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::NotUnitNorm { what, norm: n });
        }
    }
    Ok(())
}

/// Raw inner products `F_j · z` for every location.
pub fn prompt_logits(features: &Tensor, z: &Tensor) -> Result<Vec<f32>> {
    check_unit_rows("features", features)?;
    check_unit_rows("text embedding", z)?;
    if features.cols() != z.numel() {
        return Err(Error::LengthMismatch {
            what: "feature/embedding dim",
            left: features.cols(),
            right: z.numel(),
        });
    }
    Ok((0..features.rows())
        .map(|j| {
            features
                .row(j)
                .iter()
                .zip(z.data())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum::<f64>() as f32
        })
        .collect())
}

/// `sigmoid(F_j · z / τ)` per location.
pub fn prompt_score_map(features: &Tensor, z: &Tensor, tau: f32) -> Result<ScoreMap> {
    let logits = prompt_logits(features, z)?;
    let grid = grid_of(logits.len())?;
    let values = logits
        .iter()
        .map(|&l| sigmoid(l as f64 / tau as f64) as f32)
        .collect();
    ScoreMap::new(grid, values, ScoreKind::PerPrompt)
}

/// `sigmoid((S_a − S_n) / τ)`: the anomaly entry of a two-class softmax.
pub fn fuse_scores(abnormal: &[f32], normal: &[f32], tau: f32) -> Result<ScoreMap> {
    if abnormal.len() != normal.len() {
        return Err(Error::LengthMismatch {
            what: "fuse_scores",
            left: abnormal.len(),
            right: normal.len(),
        });
    }
    let grid = grid_of(abnormal.len())?;
    let values = abnormal
        .iter()
        .zip(normal)
        .map(|(&a, &n)| sigmoid((a as f64 - n as f64) / tau as f64) as f32)
        .collect();
    ScoreMap::new(grid, values, ScoreKind::Fused)
}

/// Differentiable `s×1` score column `sigmoid(F zᵀ / τ)`.
pub fn score_column<T: Real>(
    g: &mut Graph<T>,
    features: Var,
    z: Var,
    tau: f64,
) -> std::result::Result<Var, DiffError> {
    let zt = g.transpose(z)?;
    let logits = g.matmul(features, zt)?;
    let scaled = g.scale(logits, 1.0 / tau)?;
    g.sigmoid(scaled)
}

/// Unit-norm tap features of the few-shot normal images, per tap layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    pub layers: [Tensor; 2],
}

impl MemoryBank {
    pub fn from_taps(taps: &[[Tensor; 2]]) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::NoShots);
        }
        let stack = |layer: usize| -> Result<Tensor> {
            let cols = taps[0][layer].cols();
            let mut data = Vec::new();
            for t in taps {
                if t[layer].cols() != cols {
                    return Err(Error::LengthMismatch {
                        what: "tap width",
                        left: t[layer].cols(),
                        right: cols,
                    });
                }
                for i in 0..t[layer].rows() {
                    let row = t[layer].row(i);
                    let n = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
                    data.extend(row.iter().map(|&x| (x as f64 / n) as f32));
                }
            }
            Ok(Tensor::new(vec![data.len() / cols, cols], data)?)
        };
        Ok(Self {
            layers: [stack(0)?, stack(1)?],
        })
    }

    pub fn rows_per_layer(&self) -> usize {
        self.layers[0].rows()
    }
}

pub fn build_memory_bank(
    shots: &[Image],
    enc: &VisualEncoder,
    path: DensePath,
) -> Result<MemoryBank> {
    if shots.is_empty() {
        return Err(Error::NoShots);
    }
    let taps = shots
        .iter()
        .map(|img| enc.encode(img, path).map(|f| f.taps))
        .collect::<Result<Vec<_>>>()?;
    MemoryBank::from_taps(&taps)
}

/// Per location, `(1 − max cosine to the bank) / 2`, averaged over the two
/// tap layers.
pub fn vision_guided_score(taps: &[Tensor; 2], bank: &MemoryBank) -> Result<ScoreMap> {
    let s = taps[0].rows();
    let mut values = vec![0.0f64; s];
    for (tap, stored) in taps.iter().zip(&bank.layers) {
        if tap.cols() != stored.cols() || tap.rows() != s {
            return Err(Error::LengthMismatch {
                what: "tap/bank dim",
                left: tap.cols(),
                right: stored.cols(),
            });
        }
        for (j, v) in values.iter_mut().enumerate() {
            let q = tap.row(j);
            let qn = q.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
            let best = (0..stored.rows())
                .map(|r| {
                    stored
                        .row(r)
                        .iter()
                        .zip(q)
                        .map(|(&a, &b)| a as f64 * b as f64)
                        .sum::<f64>()
                        / qn
                })
                .fold(f64::NEG_INFINITY, f64::max)
                .clamp(-1.0, 1.0);
            *v += (1.0 - best) / 2.0 / 2.0;
        }
    }
    ScoreMap::new(
        grid_of(s)?,
        values.into_iter().map(|v| v as f32).collect(),
        ScoreKind::VisionGuided,
    )
}

/// `S + S_v`, range [0, 2].
pub fn fuse_vg(s: &ScoreMap, sv: &ScoreMap) -> Result<ScoreMap> {
    if s.grid != sv.grid {
        return Err(Error::LengthMismatch {
            what: "fuse_vg grid",
            left: s.grid,
            right: sv.grid,
        });
    }
    let values = s.values.iter().zip(&sv.values).map(|(a, b)| a + b).collect();
    ScoreMap::new(s.grid, values, ScoreKind::FusedVg)
}

/// Corner-aligned bilinear resampling of a `rows×cols` grid to `h×w`.
pub fn upsample(values: &[f32], rows: usize, cols: usize, h: usize, w: usize) -> Vec<f32> {
    let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if n_in == 1 || n_out == 1 {
            return (0, 0, 0.0);
        }
        let s = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (s.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1, fy) = coord(y, h, rows);
        for x in 0..w {
            let (x0, x1, fx) = coord(x, w, cols);
            let v = |r: usize, c: usize| values[r * cols + c] as f64;
            let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
            let bottom = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    out
}

pub fn upsample_scores(map: &ScoreMap, h: usize, w: usize) -> Vec<f32> {
    upsample(&map.values, map.grid, map.grid, h, w)
}
