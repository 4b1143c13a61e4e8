use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::block::{block_forward, init_block, layer_norm_affine, BlockVars};
use super::params::{normal_tensor, Bound, ParamStore};
use super::tokenizer;
use crate::diff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

pub const TOKEN_TABLE: &str = "text.token_embed";

#[derive(Clone, Debug, PartialEq)]
pub struct TextConfig {
    pub vocab: usize,
    /// Token width; equals the joint embedding dimension.
    pub width: usize,
    pub depth: usize,
    pub max_len: usize,
    pub mlp_hidden: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            vocab: 4096,
            width: 32,
            depth: 2,
            max_len: 16,
            mlp_hidden: 64,
        }
    }
}

/// Transformer text tower: `t×d` token matrix → unit vector in ℝᵈ.
/// Pooling is the mean over tokens followed by a linear projection.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    config: TextConfig,
    params: ParamStore,
}

/// Text parameters placed on a graph.
pub struct TextVars {
    bound: Bound,
    blocks: Vec<BlockVars>,
}

impl TextEncoder {
    pub fn init<R: Rng>(config: TextConfig, rng: &mut R) -> Self {
        let d = config.width;
        let mut params = ParamStore::new();
        params.insert(TOKEN_TABLE, normal_tensor(rng, &[config.vocab, d], 0.02));
        params.insert("text.pos", normal_tensor(rng, &[config.max_len, d], 0.01));
        for b in 0..config.depth {
            init_block(&mut params, &format!("text.blocks.{b}"), d, config.mlp_hidden, rng);
        }
        params.insert("text.ln_final.g", Tensor::filled(&[1, d], 1.0));
        params.insert("text.ln_final.b", Tensor::zeros(&[1, d]));
        params.insert("text.proj", normal_tensor(rng, &[d, d], 1.0 / (d as f64).sqrt()));
        Self { config, params }
    }

    /// Rebuild from stored parameters; the layout must match `config`.
    pub fn from_params(config: TextConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::init(config.clone(), &mut ChaCha8Rng::seed_from_u64(0));
        reference.params.check_layout(&params)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &TextConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn dim(&self) -> usize {
        self.config.width
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        tokenizer::tokenize(text, self.config.vocab)
    }

    /// Rows of the token table for `ids`.
    pub fn embed_tokens(&self, ids: &[usize]) -> Result<Tensor> {
        let table = self.params.get(TOKEN_TABLE)?;
        let rows: Vec<Vec<f32>> = ids
            .iter()
            .map(|&i| {
                if i >= self.config.vocab {
                    Err(Error::Invalid(format!("token id {i} out of vocabulary")))
                } else {
                    Ok(table.row(i).to_vec())
                }
            })
            .collect::<Result<_>>()?;
        Ok(Tensor::from_rows(&rows)?)
    }

    /// Bind parameters. The token table is skipped unless `with_table`,
    /// since continuous prompts never read it.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, trainable: bool, with_table: bool) -> TextVars {
        let mut store = ParamStore::new();
        for (name, t) in self.params.iter() {
            if with_table || name != TOKEN_TABLE {
                store.insert(name, t.clone());
            }
        }
        let bound = store.bind(g, trainable);
        let blocks = (0..self.config.depth)
            .map(|b| BlockVars::new(&bound, &format!("text.blocks.{b}")))
            .collect();
        TextVars { bound, blocks }
    }

    fn check_len(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.config.max_len {
            return Err(Error::PromptLength {
                len: t,
                max: self.config.max_len,
            });
        }
        Ok(())
    }

    /// Differentiable encoding of a `t×d` prompt matrix into a `1×d` unit row.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, vars: &TextVars, prompt: Var) -> Result<Var> {
        let shape = g.shape(prompt).to_vec();
        let t = shape[0];
        self.check_len(t)?;
        if shape.len() != 2 || shape[1] != self.config.width {
            return Err(Error::ParamShape {
                name: "prompt".into(),
                expected: vec![t, self.config.width],
                found: shape,
            });
        }
        let pos = g.slice_rows(vars.bound.var("text.pos"), 0, t)?;
        let mut x = g.add(prompt, pos)?;
        for block in &vars.blocks {
            x = block_forward(g, x, block, None)?.global;
        }
        let x = layer_norm_affine(
            g,
            x,
            vars.bound.var("text.ln_final.g"),
            vars.bound.var("text.ln_final.b"),
        )?;
        let pooled = g.mean_rows(x)?;
        let z = g.matmul(pooled, vars.bound.var("text.proj"))?;
        Ok(g.l2_normalize(z)?)
    }

    /// Encode token ids; requires vars bound `with_table`.
    pub fn forward_ids<T: Real>(&self, g: &mut Graph<T>, vars: &TextVars, ids: &[usize]) -> Result<Var> {
        self.check_len(ids.len())?;
        let rows = g.gather_rows(vars.bound.var(TOKEN_TABLE), ids)?;
        self.forward(g, vars, rows)
    }

    pub fn encode_matrix(&self, prompt: &Tensor) -> Result<Tensor> {
        let mut g = Graph::<f32>::new();
        let vars = self.bind(&mut g, false, false);
        let p = g.constant(prompt);
        let z = self.forward(&mut g, &vars, p)?;
        Ok(g.tensor(z))
    }

    pub fn encode_ids(&self, ids: &[usize]) -> Result<Tensor> {
        self.check_len(ids.len())?;
        self.encode_matrix(&self.embed_tokens(ids)?)
    }

    pub fn encode_text(&self, text: &str) -> Result<Tensor> {
        self.encode_ids(&self.tokenize(text)?)
    }
}

impl TextVars {
    pub fn bound(&self) -> &Bound {
        &self.bound
    }
}
