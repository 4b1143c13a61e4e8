//! Learnable and meta prompt blocks, and the object prompt used to locate
//! the inspected item.

use std::cell::OnceCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diff::Tensor;
use crate::encoders::{normal_tensor, tokenizer::PAD_TOKEN, TextEncoder};
use crate::error::{Error, Result};

pub const NORMAL_TEMPLATE: &str = "this is an object without defect";
pub const ABNORMAL_TEMPLATE: &str = "this is an object with defect";
pub const SIMPLE_NORMAL_TEMPLATE: &str = "object good";
pub const SIMPLE_ABNORMAL_TEMPLATE: &str = "object bad";
pub const OBJECT_TEMPLATE: &str = "This is a photo of {object}.";
pub const DEFAULT_PROMPT_LEN: usize = 8;

/// The four `t×d` prompt blocks. `lnp`/`lap` are the tuned ones; `mnp`/`map`
/// are only ever replaced wholesale at meta-round boundaries.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    pub lnp: Tensor,
    pub lap: Tensor,
    pub mnp: Tensor,
    pub map: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptInit {
    /// Copy the meta prompts.
    FromMeta,
    /// i.i.d. N(0, 0.02²) entries.
    Random,
}

/// Token-embedding rows of a template, right-padded with the padding token's
/// embedding up to `len` rows.
pub fn template_prompt(text: &str, enc: &TextEncoder, len: usize) -> Result<Tensor> {
    let mut ids = enc.tokenize(text)?;
    if ids.len() > len || len > enc.config().max_len {
        return Err(Error::PromptLength {
            len: ids.len().max(len),
            max: len.min(enc.config().max_len),
        });
    }
    ids.resize(len, PAD_TOKEN);
    enc.embed_tokens(&ids)
}

pub fn init_meta_prompts(
    normal_template: &str,
    abnormal_template: &str,
    enc: &TextEncoder,
    len: usize,
) -> Result<(Tensor, Tensor)> {
    Ok((
        template_prompt(normal_template, enc, len)?,
        template_prompt(abnormal_template, enc, len)?,
    ))
}

pub fn init_learnable_prompts(
    mode: PromptInit,
    mnp: &Tensor,
    map: &Tensor,
    seed: u64,
) -> (Tensor, Tensor) {
    match mode {
        PromptInit::FromMeta => (mnp.clone(), map.clone()),
        PromptInit::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (
                normal_tensor(&mut rng, mnp.shape(), 0.02),
                normal_tensor(&mut rng, map.shape(), 0.02),
            )
        }
    }
}

impl PromptBank {
    pub fn new(
        enc: &TextEncoder,
        normal_template: &str,
        abnormal_template: &str,
        len: usize,
        init: PromptInit,
        seed: u64,
    ) -> Result<Self> {
        let (mnp, map) = init_meta_prompts(normal_template, abnormal_template, enc, len)?;
        let (lnp, lap) = init_learnable_prompts(init, &mnp, &map, seed);
        Ok(Self { lnp, lap, mnp, map })
    }

    pub fn len(&self) -> usize {
        self.lnp.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.lnp.numel() == 0
    }

    /// Overwrite the meta prompts with copies of the learnable ones.
    pub fn refresh_meta(&mut self) {
        self.mnp = self.lnp.clone();
        self.map = self.lap.clone();
    }
}

/// `"This is a photo of {object}."` with a lazily cached embedding.
#[derive(Clone, Debug)]
pub struct ObjectPrompt {
    template: String,
    object: String,
    cached: OnceCell<Tensor>,
}

impl ObjectPrompt {
    pub fn new(object: &str) -> Result<Self> {
        Self::with_template(OBJECT_TEMPLATE, object)
    }

    pub fn with_template(template: &str, object: &str) -> Result<Self> {
        if object.trim().is_empty() {
            return Err(Error::EmptyObjectName);
        }
        Ok(Self {
            template: template.to_string(),
            object: object.trim().to_string(),
            cached: OnceCell::new(),
        })
    }

    pub fn object(&self) -> &str {
        &self.object
    }

    pub fn text(&self) -> String {
        self.template.replace("{object}", &self.object)
    }

    /// Unit-norm `1×d` embedding, computed once.
    pub fn embedding(&self, enc: &TextEncoder) -> Result<&Tensor> {
        if let Some(z) = self.cached.get() {
            return Ok(z);
        }
        let z = enc.encode_text(&self.text())?;
        Ok(self.cached.get_or_init(|| z))
    }
}
