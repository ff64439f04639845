//! Joint vision-and-language transformer encoder.

use rand::Rng;

use crate::data::patch_index;
use crate::error::{Error, Result};
use crate::nn::{normal, LayerNorm, Linear};
use crate::tensor::{Bound, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

const INIT_STD: f64 = 0.02;
const MASK_BIAS: f64 = -1e9;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub patch: usize,
    pub text_len: usize,
    pub image_size: usize,
    pub channels: usize,
    pub vocab_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden: 128,
            layers: 4,
            heads: 4,
            ffn: 512,
            patch: 8,
            text_len: 16,
            image_size: 64,
            channels: 3,
            vocab_size: 64,
        }
    }
}

impl EncoderConfig {
    /// Small enough for finite-difference checks.
    pub fn tiny() -> Self {
        EncoderConfig {
            hidden: 8,
            layers: 1,
            heads: 2,
            ffn: 16,
            patch: 8,
            text_len: 4,
            image_size: 32,
            channels: 3,
            vocab_size: 64,
        }
    }

    /// Patch count `N`.
    pub fn patches(&self) -> usize {
        let g = self.image_size / self.patch.max(1);
        g * g
    }

    /// Side of the patch grid, `√N`.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch.max(1)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn", self.ffn),
            ("patch", self.patch),
            ("text_len", self.text_len),
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("encoder {name} must be positive")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch
            )));
        }
        Ok(())
    }
}

/// Text representations `T̂` (L×e) and visual priors `V̂` (N×e).
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub text: Var,
    pub visual: Var,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub token_embedding: ParamId,
    pub text_position: ParamId,
    pub image_position: ParamId,
    pub type_embedding: ParamId,
    pub vmask: ParamId,
    patch_proj: Linear,
    blocks: Vec<Block>,
    final_ln: Option<LayerNorm>,
}

fn tag_layer(layer: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric(m) => Error::Numeric(format!("encoder layer {layer}: {m}")),
        other => other,
    }
}

impl Encoder {
    pub fn new<T: Scalar>(
        cfg: EncoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.hidden;
        let token_embedding = store.add(
            "enc.token_embedding",
            normal(rng, &[cfg.vocab_size, e], INIT_STD),
        );
        let text_position = store.add(
            "enc.text_position",
            normal(rng, &[cfg.text_len, e], INIT_STD),
        );
        let image_position = store.add(
            "enc.image_position",
            normal(rng, &[cfg.patches(), e], INIT_STD),
        );
        let type_embedding = store.add("enc.type_embedding", normal(rng, &[2, e], INIT_STD));
        let vmask = store.add("enc.vmask", normal(rng, &[e], INIT_STD));
        let patch_proj = Linear::new(store, rng, "enc.patch_proj", cfg.patch_dim(), e, INIT_STD);
        let blocks = (0..cfg.layers)
            .map(|i| {
                let n = format!("enc.layer{i}");
                Block {
                    ln1: LayerNorm::new(store, &format!("{n}.ln1"), e),
                    qkv: Linear::new(store, rng, &format!("{n}.qkv"), e, 3 * e, INIT_STD),
                    proj: Linear::new(store, rng, &format!("{n}.proj"), e, e, INIT_STD),
                    ln2: LayerNorm::new(store, &format!("{n}.ln2"), e),
                    fc1: Linear::new(store, rng, &format!("{n}.fc1"), e, cfg.ffn, INIT_STD),
                    fc2: Linear::new(store, rng, &format!("{n}.fc2"), cfg.ffn, e, INIT_STD),
                }
            })
            .collect();
        let final_ln = (cfg.layers > 0).then(|| LayerNorm::new(store, "enc.final_ln", e));
        Ok(Encoder {
            cfg,
            token_embedding,
            text_position,
            image_position,
            type_embedding,
            vmask,
            patch_proj,
            blocks,
            final_ln,
        })
    }

    fn modality<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, which: usize) -> Result<Var> {
        tape.slice(p[self.type_embedding], 0, which, which + 1)
    }

    /// `T̄`: token lookup plus position and text-type embeddings.
    pub fn embed_text<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        ids: &[usize],
    ) -> Result<Var> {
        if ids.len() != self.cfg.text_len {
            return Err(Error::shape(format!(
                "expected {} token ids, got {}",
                self.cfg.text_len,
                ids.len()
            )));
        }
        let x = tape.embedding(p[self.token_embedding], ids)?;
        let x = tape.add(x, p[self.text_position])?;
        let t = self.modality(tape, p, 0)?;
        tape.add(x, t)
    }

    /// `V̄`: patch projection, masked rows swapped for the `[Vmask]` vector,
    /// then position and image-type embeddings.
    pub fn embed_patches<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        patches: Var,
        patch_mask: &[bool],
    ) -> Result<Var> {
        let n = self.cfg.patches();
        if tape.shape(patches) != [n, self.cfg.patch_dim()] || patch_mask.len() != n {
            return Err(Error::shape(format!(
                "patch matrix {:?} with {} mask flags does not match {n}×{}",
                tape.shape(patches),
                patch_mask.len(),
                self.cfg.patch_dim()
            )));
        }
        let mut x = self.patch_proj.forward(tape, p, patches)?;
        if patch_mask.iter().any(|&m| m) {
            let flag = |on: bool| if on { T::one() } else { T::zero() };
            let keep = tape.constant(Tensor::from_fn(&[n, 1], |i| flag(!patch_mask[i])))?;
            let hole = tape.constant(Tensor::from_fn(&[n, 1], |i| flag(patch_mask[i])))?;
            let kept = tape.mul(x, keep)?;
            let filled = tape.mul(hole, p[self.vmask])?;
            x = tape.add(kept, filled)?;
        }
        let x = tape.add(x, p[self.image_position])?;
        let t = self.modality(tape, p, 1)?;
        tape.add(x, t)
    }

    /// Runs the transformer over `[T̄; V̄]`. `key_pad[i]` hides text key `i`
    /// from attention.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        text: Var,
        visual: Var,
        key_pad: &[bool],
    ) -> Result<EncoderOutput> {
        Ok(self.encode_traced(tape, p, text, visual, key_pad)?.0)
    }

    /// [`Self::encode`] that also returns every attention matrix.
    pub fn encode_traced<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        text: Var,
        visual: Var,
        key_pad: &[bool],
    ) -> Result<(EncoderOutput, Vec<Var>)> {
        let l = tape.shape(text)[0];
        let n = tape.shape(visual)[0];
        let s = l + n;
        if key_pad.len() != l {
            return Err(Error::shape(format!(
                "{} padding flags for {l} text rows",
                key_pad.len()
            )));
        }
        let mut x = tape.concat(&[text, visual], 0)?;
        let bias = key_pad
            .iter()
            .any(|&m| m)
            .then(|| {
                tape.constant(Tensor::from_fn(&[1, s], |j| {
                    if j < l && key_pad[j] {
                        T::lit(MASK_BIAS)
                    } else {
                        T::zero()
                    }
                }))
            })
            .transpose()?;
        let mut maps = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            x = self
                .block(tape, p, block, x, bias, &mut maps)
                .map_err(tag_layer(i))?;
        }
        if let Some(ln) = &self.final_ln {
            x = ln
                .forward(tape, p, x)
                .map_err(tag_layer(self.blocks.len()))?;
        }
        let out = EncoderOutput {
            text: tape.slice(x, 0, 0, l)?,
            visual: tape.slice(x, 0, l, s)?,
        };
        Ok((out, maps))
    }

    fn block<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        b: &Block,
        x: Var,
        bias: Option<Var>,
        maps: &mut Vec<Var>,
    ) -> Result<Var> {
        let e = self.cfg.hidden;
        let hd = e / self.cfg.heads;
        let scale = T::lit(1.0 / (hd as f64).sqrt());
        let h = b.ln1.forward(tape, p, x)?;
        let qkv = b.qkv.forward(tape, p, h)?;
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for k in 0..self.cfg.heads {
            let q = tape.slice(qkv, 1, k * hd, (k + 1) * hd)?;
            let kk = tape.slice(qkv, 1, e + k * hd, e + (k + 1) * hd)?;
            let v = tape.slice(qkv, 1, 2 * e + k * hd, 2 * e + (k + 1) * hd)?;
            let kt = tape.transpose(kk)?;
            let scores = tape.matmul(q, kt)?;
            let mut scores = tape.scale(scores, scale)?;
            if let Some(bias) = bias {
                scores = tape.add(scores, bias)?;
            }
            let att = tape.softmax(scores, 1)?;
            maps.push(att);
            heads.push(tape.matmul(att, v)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat(&heads, 1)?
        };
        let a = b.proj.forward(tape, p, merged)?;
        let x = tape.add(x, a)?;
        let h = b.ln2.forward(tape, p, x)?;
        let h = b.fc1.forward(tape, p, h)?;
        let h = tape.gelu(h)?;
        let h = b.fc2.forward(tape, p, h)?;
        tape.add(x, h)
    }

    /// Places the patch matrix of a `C×H×W` image variable on the tape.
    pub fn patchify_var<T: Scalar>(&self, tape: &mut Tape<T>, image: Var) -> Result<Var> {
        let c = &self.cfg;
        let expect = [c.channels, c.image_size, c.image_size];
        if tape.shape(image) != expect {
            return Err(Error::shape(format!(
                "image {:?} does not match encoder input {expect:?}",
                tape.shape(image)
            )));
        }
        let index = patch_index(c.channels, c.image_size, c.image_size, c.patch)?;
        tape.gather(image, &index, &[c.patches(), c.patch_dim()])
    }

    /// Image + tokens → `T̂`, `V̂`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        tokens: &[usize],
        image: Var,
        patch_mask: &[bool],
    ) -> Result<EncoderOutput> {
        let text = self.embed_text(tape, p, tokens)?;
        let patches = self.patchify_var(tape, image)?;
        let visual = self.embed_patches(tape, p, patches, patch_mask)?;
        let pad: Vec<bool> = tokens.iter().map(|&t| t == crate::data::PAD).collect();
        self.encode(tape, p, text, visual, &pad)
    }
}
