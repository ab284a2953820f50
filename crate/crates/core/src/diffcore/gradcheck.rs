use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{NodeId, Tape};
use super::tensor::Real;
use crate::error::Result;

/// Which parameter entries [`grad_check`] perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntrySelection {
    All,
    /// Per tensor: the entry with the largest analytic gradient plus up to
    /// `max - 1` random others.
    Sample { max: usize, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct WorstEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<WorstEntry>,
}

/// `|a - n| / max(1e-6, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

/// Compares tape gradients of `f` against central differences
/// `(f(p + eps) - f(p - eps)) / (2 eps)` for every trainable parameter entry
/// picked by `selection`. Parameter values are restored afterwards and grad
/// slots are left untouched.
pub fn grad_check<T, F>(
    params: &mut ParamStore<T>,
    eps: f64,
    selection: EntrySelection,
    f: F,
) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&ParamStore<T>, &mut Tape<T>) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let loss = f(params, &mut tape)?;
    let mut analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, s)| vec![0.0; s.value.numel()])
        .collect();
    for (pid, g) in tape.gradients(loss)?.param_grads() {
        for (a, v) in analytic[pid.index()].iter_mut().zip(g.data()) {
            *a += v.to_f64().unwrap_or(f64::NAN);
        }
    }
    drop(tape);

    let eval = |params: &ParamStore<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(params, &mut tape)?;
        Ok(tape.value(loss).item()?.to_f64().unwrap_or(f64::NAN))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    let ids: Vec<ParamId> = params.ids().collect();
    for pid in ids {
        if !params.slot(pid).trainable {
            continue;
        }
        let grads = &analytic[pid.index()];
        for idx in pick_entries(grads, selection, pid.index() as u64) {
            let original = params.value(pid).data()[idx];
            params.value_mut(pid).data_mut()[idx] = original + T::lit(eps);
            let plus = eval(params);
            params.value_mut(pid).data_mut()[idx] = original - T::lit(eps);
            let minus = eval(params);
            params.value_mut(pid).data_mut()[idx] = original;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let err = relative_error(grads[idx], numeric);
            report.checked += 1;
            if !(err <= report.max_rel_error) {
                report.max_rel_error = err;
                report.worst = Some(WorstEntry {
                    param: params.slot(pid).name.clone(),
                    index: idx,
                    analytic: grads[idx],
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

fn pick_entries(grads: &[f64], selection: EntrySelection, salt: u64) -> Vec<usize> {
    match selection {
        EntrySelection::All => (0..grads.len()).collect(),
        EntrySelection::Sample { max, .. } if max >= grads.len() => (0..grads.len()).collect(),
        EntrySelection::Sample { max, seed } => {
            let largest = grads
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .map(|(i, _)| i)
                .unwrap_or(0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut picked = vec![largest];
            for i in index::sample(&mut rng, grads.len(), max) {
                if picked.len() == max {
                    break;
                }
                if i != largest {
                    picked.push(i);
                }
            }
            picked
        }
    }
}
