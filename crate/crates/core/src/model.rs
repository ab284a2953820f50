//! Full growth-trend model: siamese encoder → mixer → H1/H2 heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{NodeId, ParamId, ParamStore, Real, Tape, Tensor};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::Result;
use crate::hloss::{hloss_tape, EvolutionLabel, HLossConfig, HeadOutputs};
use crate::stm::{Mixer, MixerKind};
use crate::volume::Volume3D;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub mixer: MixerKind,
    /// One pre-block shared by all three embeddings.
    pub shared_pre_block: bool,
    /// Std of the head weights at init; 0 makes both heads start uniform.
    pub head_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            mixer: MixerKind::Stm,
            shared_pre_block: true,
            head_init_std: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Heads {
    pub h1_w: ParamId,
    pub h1_b: ParamId,
    pub h2_w: ParamId,
    pub h2_b: ParamId,
}

/// Parameter layout of the model. Values live in a separate [`ParamStore`]
/// so the same layout serves f32 training and f64 checks.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub mixer: Mixer,
    pub heads: Heads,
}

impl Model {
    pub fn init<T: Real>(config: ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::init(config.encoder.clone(), store, &mut rng)?;
        let d = config.encoder.embed_dim;
        let mixer = Mixer::init(config.mixer, d, config.encoder.hidden_dim(), config.shared_pre_block, store, &mut rng);
        let std = config.head_init_std;
        let heads = Heads {
            h1_w: store.add_normal("head.h1.w", &[d, 2], std, &mut rng),
            h1_b: store.add("head.h1.b", Tensor::zeros(&[2])),
            h2_w: store.add_normal("head.h2.w", &[d, 3], std, &mut rng),
            h2_b: store.add("head.h2.b", Tensor::zeros(&[3])),
        };
        Ok(Self {
            config,
            encoder,
            mixer,
            heads,
        })
    }

    /// `(logits_h1, logits_h2)` nodes for one case.
    pub fn logits_tape<T: Real>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        roi_t1: &Volume3D,
        roi_t0: Option<&Volume3D>,
    ) -> Result<(NodeId, NodeId)> {
        let triple = self.encoder.encode_pair_tape(store, tape, roi_t1, roi_t0)?;
        let fused = self.mixer.apply(store, tape, &triple)?;
        let h = &self.heads;
        let (w1, b1) = (tape.param(store, h.h1_w), tape.param(store, h.h1_b));
        let h1 = tape.linear(fused, w1, Some(b1))?;
        let (w2, b2) = (tape.param(store, h.h2_w), tape.param(store, h.h2_b));
        let h2 = tape.linear(fused, w2, Some(b2))?;
        Ok((h1, h2))
    }

    pub fn loss_tape<T: Real>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        roi_t1: &Volume3D,
        roi_t0: Option<&Volume3D>,
        y: EvolutionLabel,
        cfg: &HLossConfig,
    ) -> Result<NodeId> {
        let (h1, h2) = self.logits_tape(store, tape, roi_t1, roi_t0)?;
        hloss_tape(tape, h1, h2, y, cfg)
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, roi_t1: &Volume3D, roi_t0: Option<&Volume3D>) -> Result<HeadOutputs> {
        let mut tape = Tape::new();
        let (h1, h2) = self.logits_tape(store, &mut tape, roi_t1, roi_t0)?;
        let v1 = tape.value(h1).to_f64_vec();
        let v2 = tape.value(h2).to_f64_vec();
        Ok(HeadOutputs {
            logits_h1: [v1[0], v1[1]],
            logits_h2: [v2[0], v2[1], v2[2]],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, EntrySelection};
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                roi_size: 8,
                patch_size: 4,
                embed_dim: 8,
                depth: 1,
                heads: 2,
                ..Default::default()
            },
            head_init_std: 0.3,
            ..Default::default()
        }
    }

    fn volume(seed: u64, size: usize) -> Volume3D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume3D::cube(size, (0..size.pow(3)).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn zero_heads_give_uniform_logits() {
        let mut store = ParamStore::<f32>::new();
        let model = Model::init(ModelConfig { head_init_std: 0.0, ..tiny() }, &mut store, 1).unwrap();
        let out = model.forward(&store, &volume(2, 8), Some(&volume(3, 8))).unwrap();
        assert_eq!(out.logits_h1, [0.0; 2]);
        assert_eq!(out.logits_h2, [0.0; 3]);
    }

    #[test]
    fn init_is_seeded() {
        let (mut a, mut b, mut c) = (ParamStore::<f32>::new(), ParamStore::new(), ParamStore::new());
        Model::init(tiny(), &mut a, 5).unwrap();
        Model::init(tiny(), &mut b, 5).unwrap();
        Model::init(tiny(), &mut c, 6).unwrap();
        let vals = |s: &ParamStore<f32>| s.iter().map(|(_, p)| p.value.clone()).collect::<Vec<_>>();
        assert_eq!(vals(&a), vals(&b));
        assert_ne!(vals(&a), vals(&c));
    }

    #[test]
    fn full_model_grad_check_both_mixers() {
        for mixer in [MixerKind::Stm, MixerKind::Concat] {
            let mut store = ParamStore::<f64>::new();
            let model = Model::init(ModelConfig { mixer, ..tiny() }, &mut store, 7).unwrap();
            let cases = [
                (volume(10, 8), Some(volume(11, 8)), EvolutionLabel::Dilatation),
                (volume(12, 8), None, EvolutionLabel::Stability),
            ];
            let cfg = HLossConfig::default();
            let report = grad_check(&mut store, 1e-5, EntrySelection::Sample { max: 4, seed: 1 }, |s, t| {
                let mut terms = Vec::new();
                for (t1, t0, y) in &cases {
                    terms.push((model.loss_tape(s, t, t1, t0.as_ref(), *y, &cfg)?, 0.5));
                }
                t.weighted_sum(&terms)
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-3, "{mixer}: {:?}", report.worst);
        }
    }
}
