//! Siamese transformer-lite encoder over cubic ROIs.
//!
//! The ROI is cut into non-overlapping cubic patches, each patch is linearly
//! embedded and given a learned positional embedding, and a learnable global
//! token is prepended. After `depth` pre-norm transformer blocks the global
//! token's output is the global embedding and the mean of the patch-token
//! outputs is the local embedding. The T0 and T1 ROIs go through the same
//! parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{NodeId, ParamId, ParamStore, Real, Tape, Tensor, LAYER_NORM_EPS};
use crate::error::{Error, Result};
pub use crate::volume::Volume3D;

/// Std of the Gaussian used for embeddings and projections.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub roi_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// MLP hidden width as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    /// Intensities in `[lo, hi]` map linearly onto `[-1, 1]`.
    pub intensity_window: (f64, f64),
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            roi_size: 32,
            patch_size: 8,
            embed_dim: 64,
            depth: 2,
            heads: 1,
            mlp_ratio: 4,
            intensity_window: (0.0, 1.0),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.roi_size == 0 || self.patch_size == 0 || !self.roi_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "roi_size {} must be a positive multiple of patch_size {}",
                self.roi_size, self.patch_size
            ));
        }
        if self.embed_dim < 2 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed_dim {} must be >= 2 and divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        let (lo, hi) = self.intensity_window;
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return bad(format!("intensity window ({lo}, {hi}) is empty"));
        }
        Ok(())
    }

    pub fn patches_per_axis(&self) -> usize {
        self.roi_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_axis().pow(3)
    }

    pub fn patch_voxels(&self) -> usize {
        self.patch_size.pow(3)
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

/// Cuts `v` into non-overlapping `patch³` cubes.
///
/// Patches are ordered row-major over `(pz, py, px)`; voxels inside a patch
/// are row-major over `(z, y, x)`.
pub fn patchify<T: Real>(v: &Volume3D, patch: usize) -> Result<Tensor<T>> {
    let [dz, dy, dx] = v.dims();
    if patch == 0 || dz % patch != 0 || dy % patch != 0 || dx % patch != 0 {
        return Err(Error::InvalidArgument(format!(
            "volume dims {:?} are not divisible by patch size {patch}",
            v.dims()
        )));
    }
    let (nz, ny, nx) = (dz / patch, dy / patch, dx / patch);
    let per = patch * patch * patch;
    let mut out = Vec::with_capacity(v.len());
    for pz in 0..nz {
        for py in 0..ny {
            for px in 0..nx {
                for z in pz * patch..(pz + 1) * patch {
                    for y in py * patch..(py + 1) * patch {
                        let start = v.index(z, y, px * patch);
                        out.extend(v.voxels()[start..start + patch].iter().map(|&s| T::lit(s as f64)));
                    }
                }
            }
        }
    }
    Tensor::new(vec![nz * ny * nx, per], out)
}

/// Inverse of [`patchify`] for a volume of the given dims.
pub fn unpatchify<T: Real>(patches: &Tensor<T>, dims: [usize; 3], patch: usize, spacing: [f64; 3]) -> Result<Volume3D> {
    let mut v = Volume3D::zeros(dims, spacing)?;
    let (ny, nx) = (dims[1] / patch, dims[2] / patch);
    for (p, row) in (0..patches.rows()).map(|p| (p, patches.row(p))) {
        let (pz, py, px) = (p / (ny * nx), (p / nx) % ny, p % nx);
        for (i, &val) in row.iter().enumerate() {
            let (z, y, x) = (i / (patch * patch), (i / patch) % patch, i % patch);
            v.set(pz * patch + z, py * patch + y, px * patch + x, val.to_f32().unwrap_or(f32::NAN));
        }
    }
    Ok(v)
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub pos_embed: ParamId,
    pub global_token: ParamId,
    /// Learnable stand-in for the T0 local embedding when T0 is missing.
    pub missing_t0: ParamId,
    pub blocks: Vec<BlockParams>,
}

/// Tape nodes of the three siamese embeddings.
#[derive(Debug, Clone, Copy)]
pub struct TripleNodes {
    pub global_t1: NodeId,
    pub local_t1: NodeId,
    pub local_t0: NodeId,
    pub t0_present: bool,
}

/// `F_G1`, `F_L1` and `F_L0` for one case.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTriple<T: Real = f32> {
    pub global_t1: Tensor<T>,
    pub local_t1: Tensor<T>,
    pub local_t0: Tensor<T>,
    pub t0_present: bool,
}

impl Encoder {
    /// Registers the encoder parameters in `store` under `encoder.*`.
    pub fn init<T: Real, R: Rng + ?Sized>(config: EncoderConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let h = config.hidden_dim();
        let n = config.num_patches();
        let patch_w = store.add_normal("encoder.patch.w", &[config.patch_voxels(), d], INIT_STD, rng);
        let patch_b = store.add("encoder.patch.b", Tensor::zeros(&[d]));
        let pos_embed = store.add_normal("encoder.pos_embed", &[n, d], INIT_STD, rng);
        let global_token = store.add_normal("encoder.global_token", &[d], INIT_STD, rng);
        let missing_t0 = store.add_normal("encoder.missing_t0", &[d], INIT_STD, rng);
        let blocks = (0..config.depth)
            .map(|i| {
                let mut p = |suffix: &str, shape: &[usize], std: f64| {
                    store.add_normal(format!("encoder.block{i}.{suffix}"), shape, std, rng)
                };
                let ln1_beta = p("ln1.beta", &[d], 0.0);
                let wq = p("attn.wq", &[d, d], INIT_STD);
                let bq = p("attn.bq", &[d], 0.0);
                let wk = p("attn.wk", &[d, d], INIT_STD);
                let bk = p("attn.bk", &[d], 0.0);
                let wv = p("attn.wv", &[d, d], INIT_STD);
                let bv = p("attn.bv", &[d], 0.0);
                let wo = p("attn.wo", &[d, d], INIT_STD);
                let bo = p("attn.bo", &[d], 0.0);
                let ln2_beta = p("ln2.beta", &[d], 0.0);
                let w1 = p("mlp.w1", &[d, h], INIT_STD);
                let b1 = p("mlp.b1", &[h], 0.0);
                let w2 = p("mlp.w2", &[h, d], INIT_STD);
                let b2 = p("mlp.b2", &[d], 0.0);
                let ln1_gamma = store.add(format!("encoder.block{i}.ln1.gamma"), Tensor::ones(&[d]));
                let ln2_gamma = store.add(format!("encoder.block{i}.ln2.gamma"), Tensor::ones(&[d]));
                BlockParams {
                    ln1_gamma,
                    ln1_beta,
                    wq,
                    bq,
                    wk,
                    bk,
                    wv,
                    bv,
                    wo,
                    bo,
                    ln2_gamma,
                    ln2_beta,
                    w1,
                    b1,
                    w2,
                    b2,
                }
            })
            .collect();
        Ok(Self {
            config,
            patch_w,
            patch_b,
            pos_embed,
            global_token,
            missing_t0,
            blocks,
        })
    }

    /// Patch tokens with intensities mapped from the window onto `[-1, 1]`.
    pub fn tokens<T: Real>(&self, v: &Volume3D) -> Result<Tensor<T>> {
        let r = self.config.roi_size;
        if v.dims() != [r, r, r] {
            return Err(Error::InvalidArgument(format!(
                "ROI dims {:?} do not match configured roi_size {r}",
                v.dims()
            )));
        }
        let (lo, hi) = self.config.intensity_window;
        let (scale, shift) = (T::lit(2.0 / (hi - lo)), T::lit(lo));
        let patches = patchify::<T>(v, self.config.patch_size)?;
        Ok(patches.map(|x| (x - shift) * scale - T::one()))
    }

    /// Runs the token stack and returns the final `[n + 1, D]` node.
    fn forward<T: Real>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, v: &Volume3D) -> Result<NodeId> {
        let n = self.config.num_patches();
        let d = self.config.embed_dim;
        let patches = tape.leaf(self.tokens(v)?);
        let (pw, pb) = (tape.param(store, self.patch_w), tape.param(store, self.patch_b));
        let emb = tape.linear(patches, pw, Some(pb))?;
        let pos = tape.param(store, self.pos_embed);
        let emb = tape.add(emb, pos)?;
        let global = tape.param(store, self.global_token);
        let mut x = tape.concat(&[global, emb], &[n + 1, d])?;
        for block in &self.blocks {
            x = self.block(store, tape, block, x)?;
        }
        Ok(x)
    }

    fn block<T: Real>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, p: &BlockParams, x: NodeId) -> Result<NodeId> {
        let eps = T::lit(LAYER_NORM_EPS);
        let mut param = |id| tape.param(store, id);
        let ids = [
            p.ln1_gamma, p.ln1_beta, p.wq, p.bq, p.wk, p.bk, p.wv, p.bv, p.wo, p.bo, p.ln2_gamma, p.ln2_beta, p.w1, p.b1,
            p.w2, p.b2,
        ];
        let [g1, be1, wq, bq, wk, bk, wv, bv, wo, bo, g2, be2, w1, b1, w2, b2] = ids.map(&mut param);

        let h = tape.layer_norm(x, g1, be1, eps)?;
        let q = tape.linear(h, wq, Some(bq))?;
        let k = tape.linear(h, wk, Some(bk))?;
        let v = tape.linear(h, wv, Some(bv))?;
        let a = tape.attention(q, k, v, self.config.heads)?;
        let a = tape.linear(a, wo, Some(bo))?;
        let x = tape.add(x, a)?;

        let h = tape.layer_norm(x, g2, be2, eps)?;
        let h = tape.linear(h, w1, Some(b1))?;
        let h = tape.gelu(h);
        let h = tape.linear(h, w2, Some(b2))?;
        tape.add(x, h)
    }

    /// `(global, local)` embedding nodes of one ROI.
    pub fn encode_tape<T: Real>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, v: &Volume3D) -> Result<(NodeId, NodeId)> {
        let x = self.forward(store, tape, v)?;
        let n = self.config.num_patches();
        Ok((tape.select_row(x, 0)?, tape.mean_rows(x, 1, n + 1)?))
    }

    /// Local embedding only. Runs exactly the token stack of
    /// [`Encoder::encode_tape`] and drops the global output.
    pub fn encode_local_tape<T: Real>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, v: &Volume3D) -> Result<NodeId> {
        let x = self.forward(store, tape, v)?;
        tape.mean_rows(x, 1, self.config.num_patches() + 1)
    }

    pub fn encode_pair_tape<T: Real>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        roi_t1: &Volume3D,
        roi_t0: Option<&Volume3D>,
    ) -> Result<TripleNodes> {
        let (global_t1, local_t1) = self.encode_tape(store, tape, roi_t1)?;
        let local_t0 = match roi_t0 {
            Some(v) => self.encode_local_tape(store, tape, v)?,
            None => tape.param(store, self.missing_t0),
        };
        Ok(TripleNodes {
            global_t1,
            local_t1,
            local_t0,
            t0_present: roi_t0.is_some(),
        })
    }

    /// `(global, local)` embeddings of one ROI.
    pub fn encode<T: Real>(&self, store: &ParamStore<T>, v: &Volume3D) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let (g, l) = self.encode_tape(store, &mut tape, v)?;
        Ok((tape.value(g).clone(), tape.value(l).clone()))
    }

    pub fn encode_pair<T: Real>(
        &self,
        store: &ParamStore<T>,
        roi_t1: &Volume3D,
        roi_t0: Option<&Volume3D>,
    ) -> Result<EmbeddingTriple<T>> {
        let mut tape = Tape::new();
        let n = self.encode_pair_tape(store, &mut tape, roi_t1, roi_t0)?;
        Ok(EmbeddingTriple {
            global_t1: tape.value(n.global_t1).clone(),
            local_t1: tape.value(n.local_t1).clone(),
            local_t0: tape.value(n.local_t0).clone(),
            t0_present: n.t0_present,
        })
    }
}
