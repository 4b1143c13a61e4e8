//! Locality-aware vision transformer.
//!
//! The global path is an ordinary pre-norm ViT and carries the residual
//! stream from block to block. Each block also runs a locality path that
//! reuses the block's Q, K, V and output projection under a radius mask;
//! its attention outputs are summed onto a separate dense stream that
//! starts from the token embeddings. Dense features and memory-bank taps
//! are read from that stream, the image embedding from the global CLS.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::block::{block_forward, init_block, layer_norm_affine, BlockVars};
use super::mask::LocalityMask;
use super::params::{normal_tensor, Bound, ParamStore};
use crate::diff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::Image;

/// Fixed pixel normalisation applied by [`VisualEncoder::patchify`].
pub const PIXEL_MEAN: f32 = 0.5;
pub const PIXEL_STD: f32 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct VisualConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub joint_dim: usize,
    pub radius: f64,
    pub tap_layers: [usize; 2],
    pub mlp_hidden: usize,
}

impl Default for VisualConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            depth: 4,
            width: 32,
            joint_dim: 32,
            radius: 1.5,
            tap_layers: [2, 3],
            mlp_hidden: 64,
        }
    }
}

impl VisualConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::ImageShape {
                height: self.image_size,
                width: self.image_size,
                patch: self.patch_size,
            });
        }
        let [a, b] = self.tap_layers;
        if a == b || a >= self.depth || b >= self.depth {
            return Err(Error::Invalid(format!(
                "tap layers {:?} must be distinct and below depth {}",
                self.tap_layers, self.depth
            )));
        }
        if self.radius < 0.0 {
            return Err(Error::Invalid("locality radius must be >= 0".into()));
        }
        Ok(())
    }
}

/// Which stream dense features are read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DensePath {
    /// Locality-masked dense stream.
    Locality,
    /// Plain global-attention tokens (vanilla ViT read-out).
    Global,
}

/// Frozen-encoder outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    /// `s×d` unit rows in the joint space.
    pub features: Tensor,
    /// Two `s×d_v` unit-row maps from the tap layers.
    pub taps: [Tensor; 2],
    /// `1×d` unit image embedding.
    pub cls: Tensor,
}

/// Graph handles produced by [`VisualEncoder::forward`].
pub struct VisualOutputs {
    pub cls: Var,
    pub dense: Var,
    /// Dense read-out of the global tokens; equals `dense` on the global path.
    pub global_dense: Var,
    pub taps: [Var; 2],
}

/// Outputs of a single LAT block run in isolation.
#[derive(Clone, Debug)]
pub struct LatBlockResult {
    pub global: Tensor,
    pub local: Tensor,
    pub attn_global: Tensor,
    pub attn_local: Tensor,
}

pub struct VisualVars {
    bound: Bound,
    blocks: Vec<BlockVars>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualEncoder {
    config: VisualConfig,
    params: ParamStore,
    mask: LocalityMask,
}

impl VisualEncoder {
    pub fn init<R: Rng>(config: VisualConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, p2, n) = (config.width, config.patch_size.pow(2), config.patches() + 1);
        let mut params = ParamStore::new();
        params.insert(
            "visual.patch_embed.w",
            normal_tensor(rng, &[p2, d], 1.0 / (p2 as f64).sqrt()),
        );
        params.insert("visual.patch_embed.b", Tensor::zeros(&[1, d]));
        params.insert("visual.cls", normal_tensor(rng, &[1, d], 0.02));
        params.insert("visual.pos", normal_tensor(rng, &[n, d], 0.02));
        for b in 0..config.depth {
            init_block(&mut params, &format!("visual.blocks.{b}"), d, config.mlp_hidden, rng);
        }
        params.insert("visual.ln_post.g", Tensor::filled(&[1, d], 1.0));
        params.insert("visual.ln_post.b", Tensor::zeros(&[1, d]));
        params.insert(
            "visual.proj",
            normal_tensor(rng, &[d, config.joint_dim], 1.0 / (d as f64).sqrt()),
        );
        let mask = LocalityMask::new(config.grid(), config.radius);
        Ok(Self {
            config,
            params,
            mask,
        })
    }

    pub fn from_params(config: VisualConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::init(config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        reference.params.check_layout(&params)?;
        Ok(Self {
            mask: reference.mask,
            config,
            params,
        })
    }

    pub fn config(&self) -> &VisualConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn mask(&self) -> &LocalityMask {
        &self.mask
    }

    /// Cut an image into `g²` rows of `patch²` pixels.
    pub fn patchify(&self, image: &Image) -> Result<Tensor> {
        let p = self.config.patch_size;
        if image.height != image.width
            || image.height != self.config.image_size
            || image.height % p != 0
        {
            return Err(Error::ImageShape {
                height: image.height,
                width: image.width,
                patch: p,
            });
        }
        let g = image.height / p;
        let mut data = Vec::with_capacity(image.pixels.len());
        for gy in 0..g {
            for gx in 0..g {
                for y in 0..p {
                    for x in 0..p {
                        data.push((image.get(gy * p + y, gx * p + x) - PIXEL_MEAN) / PIXEL_STD);
                    }
                }
            }
        }
        Ok(Tensor::new(vec![g * g, p * p], data)?)
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> VisualVars {
        let bound = self.params.bind(g, trainable);
        let blocks = (0..self.config.depth)
            .map(|b| BlockVars::new(&bound, &format!("visual.blocks.{b}")))
            .collect();
        VisualVars { bound, blocks }
    }

    fn embed<T: Real>(&self, g: &mut Graph<T>, vars: &VisualVars, patches: Var) -> Result<Var> {
        let v = |n: &str| vars.bound.var(n);
        let emb = g.matmul(patches, v("visual.patch_embed.w"))?;
        let emb = g.add(emb, v("visual.patch_embed.b"))?;
        let x = g.concat_rows(&[v("visual.cls"), emb])?;
        Ok(g.add(x, v("visual.pos"))?)
    }

    fn project<T: Real>(&self, g: &mut Graph<T>, vars: &VisualVars, x: Var) -> Result<Var> {
        let v = |n: &str| vars.bound.var(n);
        let h = layer_norm_affine(g, x, v("visual.ln_post.g"), v("visual.ln_post.b"))?;
        let z = g.matmul(h, v("visual.proj"))?;
        Ok(g.l2_normalize(z)?)
    }

    /// Full forward pass on a `g²×patch²` patch matrix.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        vars: &VisualVars,
        patches: Var,
        path: DensePath,
    ) -> Result<VisualOutputs> {
        let s = self.config.patches();
        let mut x = self.embed(g, vars, patches)?;
        let mask = match path {
            DensePath::Locality => Some(g.constant_raw(
                vec![s + 1, s + 1],
                self.mask.values().iter().map(|&m| T::lit(m as f64)).collect(),
            )?),
            DensePath::Global => None,
        };
        let mut dense = x;
        let mut taps = Vec::with_capacity(2);
        for (b, block) in vars.blocks.iter().enumerate() {
            let out = block_forward(g, x, block, mask)?;
            x = out.global;
            if let Some(update) = out.local_update {
                dense = g.add(dense, update)?;
            } else {
                dense = x;
            }
            if self.config.tap_layers.contains(&b) {
                let rows = g.slice_rows(dense, 1, s + 1)?;
                taps.push((b, g.l2_normalize(rows)?));
            }
        }
        taps.sort_by_key(|(b, _)| self.config.tap_layers.iter().position(|t| t == b));
        let cls_tok = g.slice_rows(x, 0, 1)?;
        let cls = self.project(g, vars, cls_tok)?;
        let dense_rows = g.slice_rows(dense, 1, s + 1)?;
        let dense_out = self.project(g, vars, dense_rows)?;
        let global_dense = if dense == x {
            dense_out
        } else {
            let rows = g.slice_rows(x, 1, s + 1)?;
            self.project(g, vars, rows)?
        };
        Ok(VisualOutputs {
            cls,
            dense: dense_out,
            global_dense,
            taps: [taps[0].1, taps[1].1],
        })
    }

    pub fn encode(&self, image: &Image, path: DensePath) -> Result<ImageFeatures> {
        let patches = self.patchify(image)?;
        let mut g = Graph::<f32>::new();
        let vars = self.bind(&mut g, false);
        let p = g.constant(&patches);
        let out = self.forward(&mut g, &vars, p, path)?;
        Ok(ImageFeatures {
            features: g.tensor(out.dense),
            taps: [g.tensor(out.taps[0]), g.tensor(out.taps[1])],
            cls: g.tensor(out.cls),
        })
    }

    /// Run block `index` on arbitrary `(g²+1)×d_v` tokens under `mask`.
    pub fn lat_block_forward(
        &self,
        tokens: &Tensor,
        index: usize,
        mask: &LocalityMask,
    ) -> Result<LatBlockResult> {
        let n = mask.tokens();
        if tokens.shape() != [n, self.config.width] {
            return Err(Error::ParamShape {
                name: "tokens".into(),
                expected: vec![n, self.config.width],
                found: tokens.shape().to_vec(),
            });
        }
        if index >= self.config.depth {
            return Err(Error::Invalid(format!("block {index} out of range")));
        }
        let mut g = Graph::<f64>::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(tokens);
        let m = g.constant_raw(
            vec![n, n],
            mask.values().iter().map(|&v| v as f64).collect(),
        )?;
        let out = block_forward(&mut g, x, &vars.blocks[index], Some(m))?;
        Ok(LatBlockResult {
            global: g.tensor(out.global),
            local: g.tensor(out.local.expect("mask supplied")),
            attn_global: g.tensor(out.attn_global),
            attn_local: g.tensor(out.attn_local.expect("mask supplied")),
        })
    }
}

impl VisualVars {
    pub fn bound(&self) -> &Bound {
        &self.bound
    }
}
