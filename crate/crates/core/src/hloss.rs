//! Two-layer hierarchical weighted cross-entropy.
//!
//! `L = alpha * WCE(H1, y) + WCE(H2, y)` where H1 separates dilatation from
//! everything else and H2 is the three-class head.

use serde::{Deserialize, Serialize};

use crate::diffcore::{NodeId, Real, Tape};
use crate::error::{Error, Result};

/// Evolution class of a nodule. Codes: 0 stability, 1 dilatation, 2 shrinkage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvolutionLabel {
    Stability,
    Dilatation,
    Shrinkage,
}

impl EvolutionLabel {
    pub const ALL: [EvolutionLabel; 3] = [Self::Stability, Self::Dilatation, Self::Shrinkage];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Result<Self> {
        Self::ALL
            .get(code)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("label code {code} out of range 0..3")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Stability => "stability",
            Self::Dilatation => "dilatation",
            Self::Shrinkage => "shrinkage",
        }
    }
}

impl std::fmt::Display for EvolutionLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EvolutionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown evolution label {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadOutputs {
    /// Index 1 is dilatation.
    pub logits_h1: [f64; 2],
    /// Indexed by label code.
    pub logits_h2: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HLossConfig {
    pub alpha: f64,
    /// `[not dilatation, dilatation]`
    pub h1_weights: [f64; 2],
    /// Indexed by label code.
    pub h2_weights: [f64; 3],
}

impl Default for HLossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            h1_weights: [1.0, 1.0],
            h2_weights: [0.1, 1.0, 1.0],
        }
    }
}

impl HLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if self.h1_weights.iter().chain(&self.h2_weights).any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::Config("class weights must be positive".into()));
        }
        Ok(())
    }

    /// Without an H1 term the H1 head is never trained, so decisions and the
    /// dilatation score come from H2 alone.
    pub fn decision_rule(&self) -> DecisionRule {
        if self.alpha == 0.0 {
            DecisionRule::H2Only
        } else {
            DecisionRule::Hierarchical
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionRule {
    /// H1 gates dilatation; H2 picks between stability and shrinkage.
    Hierarchical,
    /// Plain argmax over H2.
    H2Only,
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|v| (v - lse).exp()).collect()
}

/// `-weights[y] * log softmax(logits)[y]`
pub fn wce(logits: &[f64], y: usize, weights: &[f64]) -> Result<f64> {
    if weights.len() != logits.len() {
        return Err(Error::shape("wce", &[logits.len()], &[weights.len()]));
    }
    if y >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "class index {y} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(weights[y] * (log_sum_exp(logits) - logits[y]))
}

pub fn h1_target(y: EvolutionLabel) -> usize {
    usize::from(y == EvolutionLabel::Dilatation)
}

pub fn hloss(out: &HeadOutputs, y: EvolutionLabel, cfg: &HLossConfig) -> Result<f64> {
    let h2 = wce(&out.logits_h2, y.code(), &cfg.h2_weights)?;
    if cfg.alpha == 0.0 {
        return Ok(h2);
    }
    let h1 = wce(&out.logits_h1, h1_target(y), &cfg.h1_weights)?;
    Ok(cfg.alpha * h1 + h2)
}

/// Mean of [`hloss`] over a batch.
pub fn hloss_batch(outs: &[HeadOutputs], ys: &[EvolutionLabel], cfg: &HLossConfig) -> Result<f64> {
    if outs.len() != ys.len() || outs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "batch of {} outputs and {} labels",
            outs.len(),
            ys.len()
        )));
    }
    let mut total = 0.0;
    for (o, &y) in outs.iter().zip(ys) {
        total += hloss(o, y, cfg)?;
    }
    Ok(total / outs.len() as f64)
}

/// Tape version of [`hloss`] on H1 and H2 logit nodes.
pub fn hloss_tape<T: Real>(
    tape: &mut Tape<T>,
    logits_h1: NodeId,
    logits_h2: NodeId,
    y: EvolutionLabel,
    cfg: &HLossConfig,
) -> Result<NodeId> {
    let h2 = tape.wce(logits_h2, y.code(), &cfg.h2_weights.map(T::lit))?;
    if cfg.alpha == 0.0 {
        return Ok(h2);
    }
    let h1 = tape.wce(logits_h1, h1_target(y), &cfg.h1_weights.map(T::lit))?;
    tape.weighted_sum(&[(h1, T::lit(cfg.alpha)), (h2, T::one())])
}

// First maximum wins, so exact ties go to the lower code.
fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

pub fn predict(out: &HeadOutputs) -> EvolutionLabel {
    predict_with(out, DecisionRule::Hierarchical)
}

pub fn predict_with(out: &HeadOutputs, rule: DecisionRule) -> EvolutionLabel {
    let code = match rule {
        DecisionRule::H2Only => argmax(&out.logits_h2),
        DecisionRule::Hierarchical => {
            if argmax(&out.logits_h1) == 1 {
                EvolutionLabel::Dilatation.code()
            } else {
                let z = out.logits_h2;
                let (s, k) = (EvolutionLabel::Stability.code(), EvolutionLabel::Shrinkage.code());
                if z[k] > z[s] {
                    k
                } else {
                    s
                }
            }
        }
    };
    EvolutionLabel::ALL[code]
}

/// `softmax(logits_h1)[1]`
pub fn h1_score(out: &HeadOutputs) -> f64 {
    softmax(&out.logits_h1)[1]
}

pub fn h2_probs(out: &HeadOutputs) -> [f64; 3] {
    let p = softmax(&out.logits_h2);
    [p[0], p[1], p[2]]
}

/// Dilatation score used for AUC@H1: H1 probability, or the H2 dilatation
/// probability under [`DecisionRule::H2Only`].
pub fn dilatation_score(out: &HeadOutputs, rule: DecisionRule) -> f64 {
    match rule {
        DecisionRule::Hierarchical => h1_score(out),
        DecisionRule::H2Only => h2_probs(out)[EvolutionLabel::Dilatation.code()],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, EntrySelection, ParamStore, Tensor};
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn ln3() -> f64 {
        3f64.ln()
    }

    fn heads(h1: [f64; 2], h2: [f64; 3]) -> HeadOutputs {
        HeadOutputs {
            logits_h1: h1,
            logits_h2: h2,
        }
    }

    #[test]
    fn wce_fixtures() {
        assert!((wce(&[0.0; 3], 0, &[1.0; 3]).unwrap() - ln3()).abs() < 1e-12);
        assert!((wce(&[0.0; 3], 0, &[0.1, 1.0, 1.0]).unwrap() - 0.1 * ln3()).abs() < 1e-12);
        let confident = wce(&[10.0, -10.0], 0, &[1.0, 1.0]).unwrap();
        assert!(confident > 0.0 && (confident - 2.061e-9).abs() < 1e-11);
        assert!(wce(&[0.0; 3], 3, &[1.0; 3]).is_err());
        assert!(wce(&[0.0; 3], 0, &[1.0; 2]).is_err());
    }

    #[test]
    fn wce_is_stable_for_large_logits() {
        let v = wce(&[1000.0, 0.0], 1, &[1.0, 1.0]).unwrap();
        assert!((v - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn h1_targets() {
        assert_eq!(h1_target(EvolutionLabel::Dilatation), 1);
        assert_eq!(h1_target(EvolutionLabel::Stability), 0);
        assert_eq!(h1_target(EvolutionLabel::Shrinkage), 0);
    }

    #[test]
    fn label_codes_round_trip() {
        for l in EvolutionLabel::ALL {
            assert_eq!(EvolutionLabel::from_code(l.code()).unwrap(), l);
            assert_eq!(l.name().parse::<EvolutionLabel>().unwrap(), l);
        }
        assert_eq!(EvolutionLabel::Stability.code(), 0);
        assert_eq!(EvolutionLabel::Dilatation.code(), 1);
        assert_eq!(EvolutionLabel::Shrinkage.code(), 2);
        assert!(EvolutionLabel::from_code(3).is_err());
    }

    #[test]
    fn hloss_fixtures() {
        let u = heads([0.0; 2], [0.0; 3]);
        let cfg = HLossConfig::default();
        let v = hloss(&u, EvolutionLabel::Dilatation, &cfg).unwrap();
        assert!((v - (LN2 + ln3())).abs() < 1e-12);
        assert!((v - 1.7918).abs() < 1e-4);

        let o = heads([0.3, -1.2], [2.0, -0.5, 0.7]);
        let zero = HLossConfig { alpha: 0.0, ..cfg };
        for y in EvolutionLabel::ALL {
            assert_eq!(hloss(&o, y, &zero).unwrap(), wce(&o.logits_h2, y.code(), &cfg.h2_weights).unwrap());
        }

        let half = HLossConfig { alpha: 0.5, ..cfg };
        let y = EvolutionLabel::Shrinkage;
        let composed = 0.5 * wce(&o.logits_h1, 0, &[1.0, 1.0]).unwrap() + wce(&o.logits_h2, 2, &cfg.h2_weights).unwrap();
        assert!((hloss(&o, y, &half).unwrap() - composed).abs() < 1e-7);
    }

    #[test]
    fn batch_loss_is_mean() {
        let cfg = HLossConfig::default();
        let outs = [heads([0.0; 2], [0.0; 3]), heads([1.0, 2.0], [0.5, -0.5, 0.0])];
        let ys = [EvolutionLabel::Stability, EvolutionLabel::Dilatation];
        let expect = (hloss(&outs[0], ys[0], &cfg).unwrap() + hloss(&outs[1], ys[1], &cfg).unwrap()) / 2.0;
        assert!((hloss_batch(&outs, &ys, &cfg).unwrap() - expect).abs() < 1e-15);
        assert!(hloss_batch(&outs, &ys[..1], &cfg).is_err());
    }

    #[test]
    fn predict_fixtures() {
        assert_eq!(predict(&heads([0.0, 5.0], [9.0, -9.0, 9.0])), EvolutionLabel::Dilatation);
        assert_eq!(predict(&heads([5.0, 0.0], [2.0, 9.0, 1.0])), EvolutionLabel::Stability);
        assert_eq!(predict(&heads([5.0, 0.0], [1.0, 0.0, 4.0])), EvolutionLabel::Shrinkage);
        // ties toward the lower code
        assert_eq!(predict(&heads([1.0, 1.0], [3.0, 0.0, 3.0])), EvolutionLabel::Stability);
        assert_eq!(predict_with(&heads([0.0, 9.0], [1.0, 1.0, 0.0]), DecisionRule::H2Only), EvolutionLabel::Stability);
        assert_eq!(predict_with(&heads([0.0, 9.0], [1.0, 2.0, 0.0]), DecisionRule::H2Only), EvolutionLabel::Dilatation);
    }

    #[test]
    fn h1_score_fixtures() {
        assert_eq!(h1_score(&heads([0.0, 0.0], [0.0; 3])), 0.5);
        assert!(h1_score(&heads([-20.0, 20.0], [0.0; 3])) > 1.0 - 1e-15);
        let e = std::f64::consts::E;
        let expect = e * e / (e + e * e);
        assert!((h1_score(&heads([1.0, 2.0], [0.0; 3])) - expect).abs() < 1e-12);
        assert!((expect - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn decision_rule_follows_alpha() {
        assert_eq!(HLossConfig::default().decision_rule(), DecisionRule::Hierarchical);
        let cfg = HLossConfig { alpha: 0.0, ..Default::default() };
        assert_eq!(cfg.decision_rule(), DecisionRule::H2Only);
        let o = heads([3.0, -3.0], [0.0, 2.0, 0.0]);
        assert!((dilatation_score(&o, DecisionRule::H2Only) - h2_probs(&o)[1]).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(HLossConfig::default().validate().is_ok());
        assert!(HLossConfig { alpha: -1.0, ..Default::default() }.validate().is_err());
        assert!(HLossConfig { h2_weights: [0.0, 1.0, 1.0], ..Default::default() }.validate().is_err());
    }

    #[test]
    fn tape_loss_matches_eager_and_passes_grad_check() {
        for alpha in [0.0, 0.5, 1.0] {
            let cfg = HLossConfig { alpha, ..Default::default() };
            for y in EvolutionLabel::ALL {
                let mut store = ParamStore::<f64>::new();
                let h1 = store.add("h1", Tensor::vector(vec![0.4, -0.9]));
                let h2 = store.add("h2", Tensor::vector(vec![1.1, -0.2, 0.3]));
                let mut tape = Tape::new();
                let (a, b) = (tape.param(&store, h1), tape.param(&store, h2));
                let l = hloss_tape(&mut tape, a, b, y, &cfg).unwrap();
                let eager = hloss(&heads([0.4, -0.9], [1.1, -0.2, 0.3]), y, &cfg).unwrap();
                assert!((tape.value(l).item().unwrap() - eager).abs() < 1e-12);

                let report = grad_check(&mut store, 1e-4, EntrySelection::All, |s, t| {
                    let (a, b) = (t.param(s, h1), t.param(s, h2));
                    hloss_tape(t, a, b, y, &cfg)
                })
                .unwrap();
                assert!(report.max_rel_error < 1e-6, "{:?}", report.worst);
            }
        }
    }

    fn label() -> impl Strategy<Value = EvolutionLabel> {
        (0usize..3).prop_map(|c| EvolutionLabel::ALL[c])
    }

    fn logits<const N: usize>() -> impl Strategy<Value = [f64; N]> {
        prop::array::uniform(-10.0f64..10.0)
    }

    proptest! {
        #[test]
        fn alpha_zero_is_plain_h2_wce(h1 in logits::<2>(), h2 in logits::<3>(), y in label()) {
            let cfg = HLossConfig { alpha: 0.0, ..Default::default() };
            let o = heads(h1, h2);
            let direct = wce(&h2, y.code(), &cfg.h2_weights).unwrap();
            prop_assert!((hloss(&o, y, &cfg).unwrap() - direct).abs() < 1e-7);
        }

        #[test]
        fn loss_is_non_negative(h1 in logits::<2>(), h2 in logits::<3>(), y in label(), alpha in 0.0f64..3.0) {
            let cfg = HLossConfig { alpha, ..Default::default() };
            prop_assert!(hloss(&heads(h1, h2), y, &cfg).unwrap() >= 0.0);
        }

        #[test]
        fn raising_true_h2_logit_lowers_loss(h1 in logits::<2>(), h2 in logits::<3>(), y in label(), bump in 0.1f64..5.0) {
            let cfg = HLossConfig::default();
            let before = hloss(&heads(h1, h2), y, &cfg).unwrap();
            let mut raised = h2;
            raised[y.code()] += bump;
            let after = hloss(&heads(h1, raised), y, &cfg).unwrap();
            prop_assert!(after < before);
        }

        #[test]
        fn predict_ignores_logit_shifts(h1 in logits::<2>(), h2 in logits::<3>(), c1 in -5.0f64..5.0, c2 in -5.0f64..5.0) {
            // dyadic shifts keep the additions exact
            let (c1, c2) = ((c1 * 8.0).round() / 8.0, (c2 * 8.0).round() / 8.0);
            let (h1, h2) = (h1.map(|v| (v * 64.0).round() / 64.0), h2.map(|v| (v * 64.0).round() / 64.0));
            let base = heads(h1, h2);
            let shifted = heads(h1.map(|v| v + c1), h2.map(|v| v + c2));
            prop_assert_eq!(predict(&base), predict(&shifted));
        }
    }
}
