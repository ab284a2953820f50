//! Dataset construction: pairing detections across registered scans,
//! measuring diameters and labeling the evolution between time points.

mod geometry;

pub use geometry::{
    convex_hull, max_area_slice, measure_diameter, min_area_rect, min_rect_longest_side, slice_areas, slice_voxels,
    voxel_corners, DiameterMeasurement, RectSide, MASK_LEVEL,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hloss::EvolutionLabel;
use crate::volume::Volume3D;

/// Centers closer than this (mm) are the same nodule.
pub const PAIRING_THRESHOLD_MM: f64 = 1.5;
/// Diameter changes up to this (mm, inclusive) count as stability.
pub const STABILITY_BAND_MM: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Timepoint {
    T0,
    T1,
    T2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Texture {
    Ggn,
    Solid,
    PartSolid,
}

impl Texture {
    pub const ALL: [Texture; 3] = [Texture::Ggn, Texture::Solid, Texture::PartSolid];

    pub fn name(self) -> &'static str {
        match self {
            Texture::Ggn => "ggn",
            Texture::Solid => "solid",
            Texture::PartSolid => "part-solid",
        }
    }
}

impl std::fmt::Display for Texture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Texture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Texture::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown texture {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoduleDetection {
    pub id: String,
    pub timepoint: Timepoint,
    /// `(x, y, z)` in mm, registered space.
    pub center: [f64; 3],
    pub mask: Volume3D,
    pub texture: Texture,
}

impl NoduleDetection {
    pub fn new(id: impl Into<String>, timepoint: Timepoint, center: [f64; 3], mask: Volume3D, texture: Texture) -> Result<Self> {
        let id = id.into();
        if center.iter().any(|c| !c.is_finite()) {
            return Err(Error::Data(format!("detection {id}: non-finite center {center:?}")));
        }
        if !mask.voxels().iter().any(|&v| v > MASK_LEVEL) {
            return Err(Error::Data(format!("detection {id}: empty mask")));
        }
        Ok(Self {
            id,
            timepoint,
            center,
            mask,
            texture,
        })
    }

    pub fn distance_mm(&self, other: &NoduleDetection) -> f64 {
        let d: f64 = self.center.iter().zip(&other.center).map(|(a, b)| (a - b).powi(2)).sum();
        d.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodulePair {
    pub earlier: NoduleDetection,
    pub later: NoduleDetection,
    pub distance_mm: f64,
}

/// Matched pairs plus the detections left over on each side.
#[derive(Debug, Clone, PartialEq)]
pub struct Pairing {
    pub pairs: Vec<NodulePair>,
    pub unmatched_a: Vec<NoduleDetection>,
    pub unmatched_b: Vec<NoduleDetection>,
}

fn single_timepoint(list: &[NoduleDetection], which: &str) -> Result<Option<Timepoint>> {
    let Some(first) = list.first() else {
        return Ok(None);
    };
    if let Some(bad) = list.iter().find(|d| d.timepoint != first.timepoint) {
        return Err(Error::Data(format!(
            "list {which} mixes time points {:?} and {:?} (detection {})",
            first.timepoint, bad.timepoint, bad.id
        )));
    }
    Ok(Some(first.timepoint))
}

// Index of the nearest candidate; ties go to the lowest index.
fn nearest(from: &NoduleDetection, to: &[NoduleDetection]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, d) in to.iter().enumerate() {
        let dist = from.distance_mm(d);
        if best.is_none_or(|(_, b)| dist < b) {
            best = Some((j, dist));
        }
    }
    best
}

/// Mutual-nearest-neighbour matching between two scans. A pair forms when
/// each detection is the other's nearest and their centers are closer than
/// `threshold_mm`. Pairs are ordered by their index in `a` and oriented from
/// the earlier to the later time point.
pub fn pair_nodules(a: &[NoduleDetection], b: &[NoduleDetection], threshold_mm: f64) -> Result<Pairing> {
    let ta = single_timepoint(a, "a")?;
    let tb = single_timepoint(b, "b")?;
    if let (Some(ta), Some(tb)) = (ta, tb) {
        if ta == tb {
            return Err(Error::Data(format!("both lists are at time point {ta:?}")));
        }
    }
    let mut matched_a = vec![false; a.len()];
    let mut matched_b = vec![false; b.len()];
    let mut pairs = Vec::new();
    for (i, da) in a.iter().enumerate() {
        let Some((j, dist)) = nearest(da, b) else { continue };
        if dist >= threshold_mm {
            continue;
        }
        if nearest(&b[j], a).map(|(k, _)| k) != Some(i) {
            continue;
        }
        matched_a[i] = true;
        matched_b[j] = true;
        let (earlier, later) = if da.timepoint < b[j].timepoint {
            (da.clone(), b[j].clone())
        } else {
            (b[j].clone(), da.clone())
        };
        pairs.push(NodulePair {
            earlier,
            later,
            distance_mm: dist,
        });
    }
    let left = |list: &[NoduleDetection], used: &[bool]| {
        list.iter().zip(used).filter(|(_, &u)| !u).map(|(d, _)| d.clone()).collect()
    };
    Ok(Pairing {
        pairs,
        unmatched_a: left(a, &matched_a),
        unmatched_b: left(b, &matched_b),
    })
}

/// `|Δ| <= 1.5` stability, `Δ > 1.5` dilatation, `Δ < -1.5` shrinkage, with
/// `Δ = d_curr - d_prev`.
pub fn label_evolution(d_prev_mm: f64, d_curr_mm: f64) -> Result<EvolutionLabel> {
    if !(d_prev_mm > 0.0 && d_curr_mm > 0.0 && d_prev_mm.is_finite() && d_curr_mm.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "diameters must be positive, got {d_prev_mm} and {d_curr_mm}"
        )));
    }
    let delta = d_curr_mm - d_prev_mm;
    Ok(if delta > STABILITY_BAND_MM {
        EvolutionLabel::Dilatation
    } else if delta < -STABILITY_BAND_MM {
        EvolutionLabel::Shrinkage
    } else {
        EvolutionLabel::Stability
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub earlier_id: String,
    pub later_id: String,
    pub texture: Texture,
    pub d_prev_mm: f64,
    pub d_curr_mm: f64,
    pub label: EvolutionLabel,
}

/// Measures both masks of a pair and labels the change. The texture is taken
/// from the later detection.
pub fn label_pair(pair: &NodulePair) -> Result<LabeledPair> {
    let d_prev = measure_diameter(&pair.earlier.mask)?.value_mm;
    let d_curr = measure_diameter(&pair.later.mask)?.value_mm;
    Ok(LabeledPair {
        earlier_id: pair.earlier.id.clone(),
        later_id: pair.later.id.clone(),
        texture: pair.later.texture,
        d_prev_mm: d_prev,
        d_curr_mm: d_curr,
        label: label_evolution(d_prev, d_curr)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dot_mask() -> Volume3D {
        let mut m = Volume3D::zeros([1, 1, 1], [1.0; 3]).unwrap();
        m.set(0, 0, 0, 1.0);
        m
    }

    fn det(id: &str, t: Timepoint, c: [f64; 3]) -> NoduleDetection {
        NoduleDetection::new(id, t, c, dot_mask(), Texture::Solid).unwrap()
    }

    fn ids(p: &Pairing) -> Vec<(String, String)> {
        let mut v: Vec<_> = p.pairs.iter().map(|q| (q.earlier.id.clone(), q.later.id.clone())).collect();
        v.sort();
        v
    }

    #[test]
    fn pairing_fixtures() {
        let a = [det("a", Timepoint::T0, [0.0; 3])];
        let near = [det("b", Timepoint::T1, [1.0, 0.0, 0.0])];
        let far = [det("b", Timepoint::T1, [2.0, 0.0, 0.0])];
        let p = pair_nodules(&a, &near, 1.5).unwrap();
        assert_eq!(p.pairs.len(), 1);
        assert_eq!(p.pairs[0].distance_mm, 1.0);
        let q = pair_nodules(&a, &far, 1.5).unwrap();
        assert!(q.pairs.is_empty());
        assert_eq!(q.unmatched_a.len(), 1);
        assert_eq!(q.unmatched_b.len(), 1);
    }

    #[test]
    fn nearest_candidate_wins() {
        let target = [det("t", Timepoint::T1, [0.0; 3])];
        let cands = [det("far", Timepoint::T0, [1.2, 0.0, 0.0]), det("near", Timepoint::T0, [0.0, 0.5, 0.0])];
        let p = pair_nodules(&cands, &target, 1.5).unwrap();
        assert_eq!(ids(&p), vec![("near".to_string(), "t".to_string())]);
        assert_eq!(p.unmatched_a[0].id, "far");
    }

    #[test]
    fn pairs_are_oriented_in_time() {
        let later = [det("l", Timepoint::T2, [0.0; 3])];
        let earlier = [det("e", Timepoint::T1, [0.3, 0.0, 0.0])];
        let p = pair_nodules(&later, &earlier, 1.5).unwrap();
        assert_eq!(p.pairs[0].earlier.id, "e");
        assert_eq!(p.pairs[0].later.id, "l");
    }

    #[test]
    fn mixed_or_equal_timepoints_fail() {
        let mixed = [det("x", Timepoint::T0, [0.0; 3]), det("y", Timepoint::T1, [5.0; 3])];
        let b = [det("b", Timepoint::T2, [0.0; 3])];
        assert!(matches!(pair_nodules(&mixed, &b, 1.5), Err(Error::Data(_))));
        let same = [det("c", Timepoint::T2, [9.0; 3])];
        assert!(pair_nodules(&b, &same, 1.5).is_err());
        assert!(pair_nodules(&[], &b, 1.5).unwrap().pairs.is_empty());
    }

    #[test]
    fn invalid_detections_rejected() {
        let empty = Volume3D::zeros([2, 2, 2], [1.0; 3]).unwrap();
        assert!(NoduleDetection::new("e", Timepoint::T0, [0.0; 3], empty, Texture::Ggn).is_err());
        assert!(NoduleDetection::new("n", Timepoint::T0, [f64::NAN, 0.0, 0.0], dot_mask(), Texture::Ggn).is_err());
    }

    /// Minimum total distance over all matchings of below-threshold pairs
    /// that maximise the number of pairs.
    fn brute_force(a: &[NoduleDetection], b: &[NoduleDetection], threshold: f64) -> Vec<(usize, usize)> {
        fn go(i: usize, a: &[NoduleDetection], b: &[NoduleDetection], used: &mut Vec<bool>, t: f64, cur: &mut Vec<(usize, usize)>, best: &mut (usize, f64, Vec<(usize, usize)>)) {
            if i == a.len() {
                let total: f64 = cur.iter().map(|&(x, y)| a[x].distance_mm(&b[y])).sum();
                if cur.len() > best.0 || (cur.len() == best.0 && total < best.1) {
                    *best = (cur.len(), total, cur.clone());
                }
                return;
            }
            go(i + 1, a, b, used, t, cur, best);
            for j in 0..b.len() {
                if !used[j] && a[i].distance_mm(&b[j]) < t {
                    used[j] = true;
                    cur.push((i, j));
                    go(i + 1, a, b, used, t, cur, best);
                    cur.pop();
                    used[j] = false;
                }
            }
        }
        let mut best = (0, f64::INFINITY, Vec::new());
        go(0, a, b, &mut vec![false; b.len()], threshold, &mut Vec::new(), &mut best);
        best.2
    }

    #[test]
    fn well_separated_scenes_match_brute_force() {
        // Nodules at least 6 mm apart, each jittered by under 0.7 mm: mutual
        // nearest and minimum-cost matching must agree.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let n = rng.random_range(1..6);
            let mut a = Vec::new();
            let mut b = Vec::new();
            for k in 0..n {
                let c = [k as f64 * 6.0, rng.random_range(0.0..1.0), 0.0];
                if rng.random_bool(0.8) {
                    a.push(det(&format!("a{k}"), Timepoint::T0, c));
                }
                if rng.random_bool(0.8) {
                    let j = [c[0] + rng.random_range(-0.4..0.4), c[1] + rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)];
                    b.push(det(&format!("b{k}"), Timepoint::T1, j));
                }
            }
            let p = pair_nodules(&a, &b, 1.5).unwrap();
            let mut got: Vec<(String, String)> = p.pairs.iter().map(|q| (q.earlier.id.clone(), q.later.id.clone())).collect();
            got.sort();
            let mut expect: Vec<(String, String)> = brute_force(&a, &b, 1.5).into_iter().map(|(i, j)| (a[i].id.clone(), b[j].id.clone())).collect();
            expect.sort();
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn label_fixtures() {
        assert_eq!(label_evolution(5.0, 7.0).unwrap(), EvolutionLabel::Dilatation);
        assert_eq!(label_evolution(7.0, 5.0).unwrap(), EvolutionLabel::Shrinkage);
        assert_eq!(label_evolution(5.0, 6.0).unwrap(), EvolutionLabel::Stability);
        assert_eq!(label_evolution(5.0, 6.5).unwrap(), EvolutionLabel::Stability);
        assert_eq!(label_evolution(6.5, 5.0).unwrap(), EvolutionLabel::Stability);
        assert!(label_evolution(0.0, 1.0).is_err());
        assert!(label_evolution(1.0, -1.0).is_err());
    }

    #[test]
    fn label_pair_measures_both_masks() {
        let mut small = Volume3D::zeros([1, 8, 8], [1.0; 3]).unwrap();
        let mut big = small.clone();
        small.set(0, 0, 0, 1.0);
        for x in 0..4 {
            big.set(0, 2, x, 1.0);
        }
        let e = NoduleDetection::new("e", Timepoint::T0, [0.0; 3], small, Texture::Ggn).unwrap();
        let l = NoduleDetection::new("l", Timepoint::T1, [0.0; 3], big, Texture::PartSolid).unwrap();
        let p = pair_nodules(&[e], &[l], 1.5).unwrap();
        let lp = label_pair(&p.pairs[0]).unwrap();
        assert_eq!((lp.d_prev_mm, lp.d_curr_mm), (1.0, 4.0));
        assert_eq!(lp.label, EvolutionLabel::Dilatation);
        assert_eq!(lp.texture, Texture::PartSolid);
    }

    #[test]
    fn texture_names_round_trip() {
        for t in Texture::ALL {
            assert_eq!(t.name().parse::<Texture>().unwrap(), t);
            assert_eq!(serde_json::to_string(&t).unwrap(), format!("\"{}\"", t.name()));
        }
    }

    fn scene(seed: u64) -> (Vec<NoduleDetection>, Vec<NoduleDetection>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = |t: Timepoint, tag: &str| {
            (0..rng.random_range(0..7))
                .map(|k| {
                    // coarse grid makes exact distance ties common
                    let c = [0, 1, 2].map(|_| rng.random_range(0..5) as f64 * 0.5);
                    det(&format!("{tag}{k}"), t, c)
                })
                .collect::<Vec<_>>()
        };
        (gen(Timepoint::T0, "a"), gen(Timepoint::T1, "b"))
    }

    proptest! {
        #[test]
        fn pairing_is_symmetric(seed in any::<u64>()) {
            let (a, b) = scene(seed);
            let ab = pair_nodules(&a, &b, 1.5).unwrap();
            let ba = pair_nodules(&b, &a, 1.5).unwrap();
            prop_assert_eq!(ids(&ab), ids(&ba));
        }

        #[test]
        fn pairs_are_disjoint_and_below_threshold(seed in any::<u64>()) {
            let (a, b) = scene(seed);
            let p = pair_nodules(&a, &b, 1.5).unwrap();
            let mut seen = std::collections::HashSet::new();
            for q in &p.pairs {
                prop_assert!(q.distance_mm < 1.5);
                prop_assert!(q.earlier.timepoint < q.later.timepoint);
                prop_assert!(seen.insert(q.earlier.id.clone()));
                prop_assert!(seen.insert(q.later.id.clone()));
            }
            prop_assert_eq!(p.pairs.len() + p.unmatched_a.len(), a.len());
            prop_assert_eq!(p.pairs.len() + p.unmatched_b.len(), b.len());
        }

        #[test]
        fn equal_diameters_are_stable(d in 1e-3f64..100.0) {
            prop_assert_eq!(label_evolution(d, d).unwrap(), EvolutionLabel::Stability);
        }

        #[test]
        fn labels_swap_under_argument_swap(a in 0.1f64..50.0, b in 0.1f64..50.0) {
            let (ab, ba) = (label_evolution(a, b).unwrap(), label_evolution(b, a).unwrap());
            if (b - a).abs() > 1.5 {
                let expect = match ab {
                    EvolutionLabel::Dilatation => EvolutionLabel::Shrinkage,
                    EvolutionLabel::Shrinkage => EvolutionLabel::Dilatation,
                    EvolutionLabel::Stability => unreachable!(),
                };
                prop_assert_eq!(ba, expect);
            } else {
                prop_assert_eq!(ab, EvolutionLabel::Stability);
                prop_assert_eq!(ba, EvolutionLabel::Stability);
            }
        }
    }
}
