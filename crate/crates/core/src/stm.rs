//! Spatial-temporal mixer and the concatenation baseline.
//!
//! With `F'` the pre-block output of each raw embedding:
//!
//! ```text
//! Q   = F'_L1 · W_Q
//! K_G = F'_G1 · W_K,   K_L = F'_L0 · W_K
//! out = F'_L1 + LP( cos(Q, K_G) · F'_G1 + cos(Q, K_L) · F'_L0 )
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{NodeId, ParamId, ParamStore, Real, Tape, Tensor, LAYER_NORM_EPS};
use crate::encoder::{TripleNodes, INIT_STD};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixerKind {
    Stm,
    Concat,
}

impl std::str::FromStr for MixerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "stm" => Ok(MixerKind::Stm),
            "concat" => Ok(MixerKind::Concat),
            other => Err(format!("unknown mixer {other:?} (expected stm or concat)")),
        }
    }
}

impl std::fmt::Display for MixerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MixerKind::Stm => "stm",
            MixerKind::Concat => "concat",
        })
    }
}

/// Layer norm → MLP → residual.
#[derive(Debug, Clone)]
pub struct PreBlockParams {
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl PreBlockParams {
    fn init<T: Real, R: Rng + ?Sized>(prefix: &str, d: usize, hidden: usize, store: &mut ParamStore<T>, rng: &mut R) -> Self {
        Self {
            ln_gamma: store.add(format!("{prefix}.ln.gamma"), Tensor::ones(&[d])),
            ln_beta: store.add(format!("{prefix}.ln.beta"), Tensor::zeros(&[d])),
            w1: store.add_normal(format!("{prefix}.mlp.w1"), &[d, hidden], INIT_STD, rng),
            b1: store.add(format!("{prefix}.mlp.b1"), Tensor::zeros(&[hidden])),
            w2: store.add_normal(format!("{prefix}.mlp.w2"), &[hidden, d], INIT_STD, rng),
            b2: store.add(format!("{prefix}.mlp.b2"), Tensor::zeros(&[d])),
        }
    }

    /// `F + mlp(layer_norm(F))`
    pub fn apply<T: Real>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, f: NodeId) -> Result<NodeId> {
        let g = tape.param(store, self.ln_gamma);
        let b = tape.param(store, self.ln_beta);
        let h = tape.layer_norm(f, g, b, T::lit(LAYER_NORM_EPS))?;
        let (w1, b1) = (tape.param(store, self.w1), tape.param(store, self.b1));
        let h = tape.linear(h, w1, Some(b1))?;
        let h = tape.gelu(h);
        let (w2, b2) = (tape.param(store, self.w2), tape.param(store, self.b2));
        let h = tape.linear(h, w2, Some(b2))?;
        tape.add(f, h)
    }

    pub fn apply_eager<T: Real>(&self, store: &ParamStore<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.leaf(f.clone());
        let y = self.apply(store, &mut tape, x)?;
        Ok(tape.value(y).clone())
    }
}

#[derive(Debug, Clone)]
pub struct StmParams {
    /// One shared block, or one per embedding in `(L1, G1, L0)` order.
    pub pre: Vec<PreBlockParams>,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub lp_w: ParamId,
    pub lp_b: ParamId,
}

/// Tape nodes of one mixer evaluation.
#[derive(Debug, Clone, Copy)]
pub struct MixNodes {
    pub out: NodeId,
    pub sim_global: NodeId,
    pub sim_temporal: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixOutput<T: Real = f32> {
    pub out: Tensor<T>,
    pub sim_global: T,
    pub sim_temporal: T,
}

impl StmParams {
    pub fn init<T: Real, R: Rng + ?Sized>(d: usize, hidden: usize, shared_pre_block: bool, store: &mut ParamStore<T>, rng: &mut R) -> Self {
        let pre = if shared_pre_block {
            vec![PreBlockParams::init("stm.pre", d, hidden, store, rng)]
        } else {
            ["l1", "g1", "l0"]
                .iter()
                .map(|tag| PreBlockParams::init(&format!("stm.pre_{tag}"), d, hidden, store, rng))
                .collect()
        };
        Self {
            pre,
            w_q: store.add_normal("stm.w_q", &[d, d], INIT_STD, rng),
            w_k: store.add_normal("stm.w_k", &[d, d], INIT_STD, rng),
            lp_w: store.add_normal("stm.lp.w", &[d, d], INIT_STD, rng),
            lp_b: store.add("stm.lp.b", Tensor::zeros(&[d])),
        }
    }

    fn pre_for(&self, slot: usize) -> &PreBlockParams {
        &self.pre[slot.min(self.pre.len() - 1)]
    }

    /// Applies the pre-block to the raw embeddings, then fuses them.
    pub fn mix<T: Real>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        local_t1: NodeId,
        global_t1: NodeId,
        local_t0: NodeId,
    ) -> Result<MixNodes> {
        let l1 = self.pre_for(0).apply(store, tape, local_t1)?;
        let g1 = self.pre_for(1).apply(store, tape, global_t1)?;
        let l0 = self.pre_for(2).apply(store, tape, local_t0)?;

        let wq = tape.param(store, self.w_q);
        let wk = tape.param(store, self.w_k);
        let q = tape.linear(l1, wq, None)?;
        let k_global = tape.linear(g1, wk, None)?;
        let k_temporal = tape.linear(l0, wk, None)?;
        let sim_global = tape.cosine(q, k_global)?;
        let sim_temporal = tape.cosine(q, k_temporal)?;

        let spatial = tape.scale(g1, sim_global)?;
        let temporal = tape.scale(l0, sim_temporal)?;
        let fused = tape.add(spatial, temporal)?;
        let (lw, lb) = (tape.param(store, self.lp_w), tape.param(store, self.lp_b));
        let projected = tape.linear(fused, lw, Some(lb))?;
        let out = tape.add(l1, projected)?;
        Ok(MixNodes {
            out,
            sim_global,
            sim_temporal,
        })
    }

    pub fn mix_eager<T: Real>(
        &self,
        store: &ParamStore<T>,
        local_t1: &Tensor<T>,
        global_t1: &Tensor<T>,
        local_t0: &Tensor<T>,
    ) -> Result<MixOutput<T>> {
        let mut tape = Tape::new();
        let l1 = tape.leaf(local_t1.clone());
        let g1 = tape.leaf(global_t1.clone());
        let l0 = tape.leaf(local_t0.clone());
        let n = self.mix(store, &mut tape, l1, g1, l0)?;
        Ok(MixOutput {
            out: tape.value(n.out).clone(),
            sim_global: tape.value(n.sim_global).item()?,
            sim_temporal: tape.value(n.sim_temporal).item()?,
        })
    }
}

/// Linear projection of `[F_L1; F_G1; F_L0]` back to `D`.
#[derive(Debug, Clone)]
pub struct ConcatParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl ConcatParams {
    pub fn init<T: Real, R: Rng + ?Sized>(d: usize, store: &mut ParamStore<T>, rng: &mut R) -> Self {
        Self {
            w: store.add_normal("concat.w", &[3 * d, d], INIT_STD, rng),
            b: store.add("concat.b", Tensor::zeros(&[d])),
        }
    }

    pub fn mix<T: Real>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        local_t1: NodeId,
        global_t1: NodeId,
        local_t0: NodeId,
    ) -> Result<NodeId> {
        let d = tape.value(local_t1).numel();
        let cat = tape.concat(&[local_t1, global_t1, local_t0], &[3 * d])?;
        let (w, b) = (tape.param(store, self.w), tape.param(store, self.b));
        tape.linear(cat, w, Some(b))
    }

    pub fn mix_eager<T: Real>(
        &self,
        store: &ParamStore<T>,
        local_t1: &Tensor<T>,
        global_t1: &Tensor<T>,
        local_t0: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let l1 = tape.leaf(local_t1.clone());
        let g1 = tape.leaf(global_t1.clone());
        let l0 = tape.leaf(local_t0.clone());
        let out = self.mix(store, &mut tape, l1, g1, l0)?;
        Ok(tape.value(out).clone())
    }
}

#[derive(Debug, Clone)]
pub enum Mixer {
    Stm(StmParams),
    Concat(ConcatParams),
}

impl Mixer {
    pub fn init<T: Real, R: Rng + ?Sized>(
        kind: MixerKind,
        d: usize,
        hidden: usize,
        shared_pre_block: bool,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        match kind {
            MixerKind::Stm => Mixer::Stm(StmParams::init(d, hidden, shared_pre_block, store, rng)),
            MixerKind::Concat => Mixer::Concat(ConcatParams::init(d, store, rng)),
        }
    }

    pub fn kind(&self) -> MixerKind {
        match self {
            Mixer::Stm(_) => MixerKind::Stm,
            Mixer::Concat(_) => MixerKind::Concat,
        }
    }

    /// Fused embedding node for one case.
    pub fn apply<T: Real>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, e: &TripleNodes) -> Result<NodeId> {
        match self {
            Mixer::Stm(p) => Ok(p.mix(store, tape, e.local_t1, e.global_t1, e.local_t0)?.out),
            Mixer::Concat(p) => p.mix(store, tape, e.local_t1, e.global_t1, e.local_t0),
        }
    }
}
