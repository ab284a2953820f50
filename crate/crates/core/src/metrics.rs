//! AUC, accuracy and Cohen's kappa.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::dataprep::Texture;
use crate::error::{Error, Result};
use crate::hloss::EvolutionLabel;

/// Mann–Whitney AUC: `(concordant + 0.5 * tied) / (pos * neg)`.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument(format!(
            "AUC needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    // Rank-sum over tie groups.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut credit = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group_pos = order[i..j].iter().filter(|&&k| labels[k]).count();
        let group_neg = (j - i) - group_pos;
        credit += group_pos as f64 * (neg_below as f64 + 0.5 * group_neg as f64);
        neg_below += group_neg;
        i = j;
    }
    Ok(credit / (pos as f64 * neg as f64))
}

/// Unweighted mean of the three one-vs-rest AUCs.
pub fn macro_ovr_auc(probs: &[[f64; 3]], labels: &[EvolutionLabel]) -> Result<f64> {
    let absent: Vec<&str> = EvolutionLabel::ALL
        .iter()
        .filter(|c| !labels.contains(c))
        .map(|c| c.name())
        .collect();
    if !absent.is_empty() {
        return Err(Error::InvalidArgument(format!("classes absent: {}", absent.join(", "))));
    }
    let mut total = 0.0;
    for class in EvolutionLabel::ALL {
        total += ovr_auc(probs, labels, class)?;
    }
    Ok(total / 3.0)
}

pub fn ovr_auc(probs: &[[f64; 3]], labels: &[EvolutionLabel], class: EvolutionLabel) -> Result<f64> {
    let scores: Vec<f64> = probs.iter().map(|p| p[class.code()]).collect();
    let hits: Vec<bool> = labels.iter().map(|&l| l == class).collect();
    roc_auc(&scores, &hits)
}

pub fn accuracy<L: PartialEq>(preds: &[L], labels: &[L]) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "accuracy needs equal non-empty lists, got {} and {}",
            preds.len(),
            labels.len()
        )));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// `(p_o - p_e) / (1 - p_e)`; 0 when `p_e == 1`.
pub fn cohen_kappa<L: Ord + Clone>(preds: &[L], labels: &[L]) -> Result<f64> {
    if preds.len() != labels.len() || preds.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "kappa needs equal lists of at least 2, got {} and {}",
            preds.len(),
            labels.len()
        )));
    }
    let n = preds.len() as f64;
    let p_o = preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / n;
    let mut marg: BTreeMap<L, (usize, usize)> = BTreeMap::new();
    for p in preds {
        marg.entry(p.clone()).or_default().0 += 1;
    }
    for l in labels {
        marg.entry(l.clone()).or_default().1 += 1;
    }
    let p_e: f64 = marg.values().map(|&(a, b)| (a as f64 / n) * (b as f64 / n)).sum();
    if p_e >= 1.0 {
        return Ok(0.0);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AgreementStats {
    pub n: usize,
    pub accuracy: f64,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub n: usize,
    pub auc_h1: f64,
    pub auc_h2: f64,
    pub auc_h2_d: f64,
    pub accuracy: f64,
    pub kappa: f64,
    pub per_texture: BTreeMap<Texture, AgreementStats>,
}

pub const REPORT_CSV_HEADER: &str = "auc_h1,auc_h2,auc_h2_d,acc,kappa";

/// Inputs for one case of an evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredCase {
    pub label: EvolutionLabel,
    pub texture: Texture,
    /// Dilatation score used for AUC@H1.
    pub score_h1: f64,
    pub probs_h2: [f64; 3],
    pub pred: EvolutionLabel,
}

impl EvalReport {
    /// Builds the report. AUC terms whose classes are missing from `cases`
    /// are NaN; kappa on a single case is 0.
    pub fn from_scored(cases: &[ScoredCase]) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::InvalidArgument("no cases to evaluate".into()));
        }
        let labels: Vec<EvolutionLabel> = cases.iter().map(|c| c.label).collect();
        let preds: Vec<EvolutionLabel> = cases.iter().map(|c| c.pred).collect();
        let probs: Vec<[f64; 3]> = cases.iter().map(|c| c.probs_h2).collect();
        let h1: Vec<f64> = cases.iter().map(|c| c.score_h1).collect();
        let is_dil: Vec<bool> = labels.iter().map(|&l| l == EvolutionLabel::Dilatation).collect();
        let agreement = |p: &[EvolutionLabel], l: &[EvolutionLabel]| -> Result<AgreementStats> {
            Ok(AgreementStats {
                n: p.len(),
                accuracy: accuracy(p, l)?,
                kappa: if p.len() >= 2 { cohen_kappa(p, l)? } else { 0.0 },
            })
        };
        let overall = agreement(&preds, &labels)?;
        let mut per_texture = BTreeMap::new();
        for t in Texture::ALL {
            let (p, l): (Vec<_>, Vec<_>) = cases.iter().filter(|c| c.texture == t).map(|c| (c.pred, c.label)).unzip();
            if !p.is_empty() {
                per_texture.insert(t, agreement(&p, &l)?);
            }
        }
        Ok(Self {
            n: cases.len(),
            auc_h1: roc_auc(&h1, &is_dil).unwrap_or(f64::NAN),
            auc_h2: macro_ovr_auc(&probs, &labels).unwrap_or(f64::NAN),
            auc_h2_d: ovr_auc(&probs, &labels, EvolutionLabel::Dilatation).unwrap_or(f64::NAN),
            accuracy: overall.accuracy,
            kappa: overall.kappa,
            per_texture,
        })
    }

    /// Values in [`REPORT_CSV_HEADER`] order.
    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.auc_h1, self.auc_h2, self.auc_h2_d, self.accuracy, self.kappa
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "cases     {}", self.n)?;
        writeln!(f, "AUC@H1    {:.4}", self.auc_h1)?;
        writeln!(f, "AUC@H2    {:.4}", self.auc_h2)?;
        writeln!(f, "AUC@H2-D  {:.4}", self.auc_h2_d)?;
        writeln!(f, "accuracy  {:.4}", self.accuracy)?;
        write!(f, "kappa     {:.4}", self.kappa)?;
        for (t, s) in &self.per_texture {
            write!(f, "\n  {:<10} n={:<5} acc={:.4} kappa={:.4}", t.name(), s.n, s.accuracy, s.kappa)?;
        }
        Ok(())
    }
}
