//! Nodule diameter: longest side of the minimum-area enclosing rectangle of
//! the largest axial mask slice.

use crate::error::{Error, Result};
use crate::volume::Volume3D;

/// Voxels above this value count as part of the mask.
pub const MASK_LEVEL: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiameterMeasurement {
    pub value_mm: f64,
    pub slice_index: usize,
    /// Direction of the longer rectangle side in `[0, pi)`, measured from +x
    /// towards +y.
    pub rect_angle: f64,
}

/// Longer side and orientation of a rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RectSide {
    pub value_mm: f64,
    pub angle: f64,
}

/// Count of set voxels in each axial slice.
pub fn slice_areas(mask: &Volume3D) -> Vec<usize> {
    let [nz, _, _] = mask.dims();
    (0..nz)
        .map(|z| mask.slice(z).iter().filter(|&&v| v > MASK_LEVEL).count())
        .collect()
}

/// Axial slice with the most set voxels; ties go to the lowest index.
pub fn max_area_slice(mask: &Volume3D) -> Result<usize> {
    let areas = slice_areas(mask);
    let mut best = 0;
    for (z, &a) in areas.iter().enumerate() {
        if a > areas[best] {
            best = z;
        }
    }
    if areas[best] == 0 {
        return Err(Error::Data("mask has no set voxels".into()));
    }
    Ok(best)
}

/// `(y, x)` indices of the set voxels of slice `z`.
pub fn slice_voxels(mask: &Volume3D, z: usize) -> Vec<(usize, usize)> {
    let nx = mask.dims()[2];
    mask.slice(z)
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > MASK_LEVEL)
        .map(|(i, _)| (i / nx, i % nx))
        .collect()
}

/// Corner points of every voxel, in mm, as `[x, y]`.
pub fn voxel_corners(voxels: &[(usize, usize)], spacing: [f64; 2]) -> Vec<[f64; 2]> {
    let [sy, sx] = spacing;
    let mut pts = Vec::with_capacity(voxels.len() * 4);
    for &(y, x) in voxels {
        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            pts.push([(x + dx) as f64 * sx, (y + dy) as f64 * sy]);
        }
    }
    pts
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Counter-clockwise convex hull without collinear points (monotone chain).
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn side_from(width: f64, height: f64, u: [f64; 2]) -> RectSide {
    let along = if width >= height { u } else { [-u[1], u[0]] };
    let mut angle = along[1].atan2(along[0]);
    if angle < 0.0 {
        angle += std::f64::consts::PI;
    }
    if angle >= std::f64::consts::PI {
        angle -= std::f64::consts::PI;
    }
    RectSide {
        value_mm: width.max(height),
        angle,
    }
}

// Relative area difference below which two rectangles tie.
const AREA_TIE: f64 = 1e-9;

/// Minimum-area enclosing rectangle of a CCW convex polygon by rotating
/// calipers. Among rectangles of equal area the one with the shorter long
/// side wins. One side of the optimum is collinear with a hull edge, so each
/// edge is tried while three support pointers advance monotonically.
pub fn min_area_rect(hull: &[[f64; 2]]) -> Result<RectSide> {
    let n = hull.len();
    if n == 0 {
        return Err(Error::InvalidArgument("no points".into()));
    }
    if n < 3 {
        let d = if n == 2 { sub(hull[1], hull[0]) } else { [0.0, 0.0] };
        let len = dot(d, d).sqrt();
        let u = if len > 0.0 { [d[0] / len, d[1] / len] } else { [1.0, 0.0] };
        return Ok(side_from(len, 0.0, u));
    }
    let next = |i: usize| (i + 1) % n;
    // Advance `k` while `better(next, k)` holds, at most one lap.
    let climb = |mut k: usize, better: &dyn Fn(usize, usize) -> bool| {
        for _ in 0..n {
            if better(next(k), k) {
                k = next(k);
            } else {
                break;
            }
        }
        k
    };
    let (mut right, mut top, mut left) = (0usize, 0usize, 0usize);
    let mut best: Option<(f64, RectSide)> = None;
    for i in 0..n {
        let e = sub(hull[next(i)], hull[i]);
        let len = dot(e, e).sqrt();
        let u = [e[0] / len, e[1] / len];
        // inward normal of a CCW edge
        let v = [-u[1], u[0]];
        let base = hull[i];
        let pu = |k: usize| dot(sub(hull[k], base), u);
        let pv = |k: usize| dot(sub(hull[k], base), v);
        if i == 0 {
            right = next(0);
        }
        right = climb(right, &|a, b| pu(a) >= pu(b));
        if i == 0 {
            top = right;
        }
        top = climb(top, &|a, b| pv(a) >= pv(b));
        if i == 0 {
            left = top;
        }
        left = climb(left, &|a, b| pu(a) <= pu(b));
        let width = pu(right) - pu(left);
        let height = pv(top);
        let area = width * height;
        let side = side_from(width, height, u);
        let better = match best {
            None => true,
            Some((a, s)) => area < a * (1.0 - AREA_TIE) || (area <= a * (1.0 + AREA_TIE) && side.value_mm < s.value_mm),
        };
        if better {
            best = Some((area.min(best.map_or(area, |b| b.0)), side));
        }
    }
    Ok(best.expect("hull has edges").1)
}

/// Longest side of the minimum-area rectangle around whole voxels (each voxel
/// contributes its four corners). `voxels` are `(y, x)` indices and
/// `spacing` is `(y, x)` in mm.
pub fn min_rect_longest_side(voxels: &[(usize, usize)], spacing: [f64; 2]) -> Result<RectSide> {
    if voxels.is_empty() {
        return Err(Error::InvalidArgument("empty voxel set".into()));
    }
    let hull = convex_hull(&voxel_corners(voxels, spacing));
    min_area_rect(&hull)
}

pub fn measure_diameter(mask: &Volume3D) -> Result<DiameterMeasurement> {
    let z = max_area_slice(mask)?;
    let [_, sy, sx] = mask.spacing();
    let side = min_rect_longest_side(&slice_voxels(mask, z), [sy, sx])?;
    Ok(DiameterMeasurement {
        value_mm: side.value_mm,
        slice_index: z,
        rect_angle: side.angle,
    })
}
