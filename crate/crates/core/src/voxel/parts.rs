//! Canonical (centered, uniformly scaled) part volumes and the affine maps that
//! place them back into the shape.

use super::grid::{coords, LabeledGrid, PartSchema};
use super::sampler::{resample, AffineParams};

/// Fraction of the grid the largest bounding-box axis of a canonical part spans.
pub const CANONICAL_EXTENT: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct PartSet {
    pub resolution: usize,
    pub schema: PartSchema,
    /// K canonical volumes, values in `[0, 1]`.
    pub parts: Vec<Vec<f64>>,
    pub present: Vec<bool>,
    /// Maps each canonical part onto its location in the shape (sampler convention).
    pub transforms: Vec<AffineParams>,
}

impl PartSet {
    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    /// Place every part with its own transform.
    pub fn placed(&self) -> Vec<Vec<f64>> {
        self.parts
            .iter()
            .zip(&self.transforms)
            .map(|(p, t)| resample(p, self.resolution, t))
            .collect()
    }
}

/// Integer bounding box `[min, max]` (inclusive) of one label, per axis.
pub(crate) fn label_bbox(grid: &LabeledGrid, label: u8) -> Option<([usize; 3], [usize; 3])> {
    let r = grid.resolution();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (idx, &l) in grid.labels().iter().enumerate() {
        if l != label {
            continue;
        }
        any = true;
        let (x, y, z) = coords(r, idx);
        for (d, v) in [x, y, z].into_iter().enumerate() {
            lo[d] = lo[d].min(v);
            hi[d] = hi[d].max(v);
        }
    }
    any.then_some((lo, hi))
}

/// Canonicalization of one bounding box: `(scale, center)` with
/// `canonical = scale · (x - center)`.
///
/// Bounds are computed in integer voxel units first so that boxes already
/// centered on the grid give an exactly zero center.
pub(crate) fn canonical_frame(r: usize, lo: [usize; 3], hi: [usize; 3]) -> (f64, [f64; 3]) {
    let rf = r as f64;
    let mut center = [0.0; 3];
    let mut half = 0.0f64;
    for d in 0..3 {
        // lower face 2·lo/R − 1, upper face 2·(hi+1)/R − 1
        let num = (lo[d] + hi[d] + 1) as i64 - r as i64;
        center[d] = num as f64 / rf;
        half = half.max((hi[d] + 1 - lo[d]) as f64 / rf);
    }
    (CANONICAL_EXTENT / half, center)
}

pub fn extract_parts(lg: &LabeledGrid) -> PartSet {
    let r = lg.resolution();
    let k = lg.schema().len();
    let mut parts = Vec::with_capacity(k);
    let mut present = Vec::with_capacity(k);
    let mut transforms = Vec::with_capacity(k);
    for label in 1..=k as u8 {
        match label_bbox(lg, label) {
            Some((lo, hi)) => {
                let (s, c) = canonical_frame(r, lo, hi);
                // canonical(q) = part(c + q / s)
                let to_canonical = AffineParams::scale_translate(1.0 / s, c);
                parts.push(resample(&lg.part_mask(label), r, &to_canonical));
                present.push(true);
                // part(x) = canonical(s·x − s·c)
                transforms.push(AffineParams::scale_translate(
                    s,
                    [-s * c[0], -s * c[1], -s * c[2]],
                ));
            }
            None => {
                parts.push(vec![0.0; r * r * r]);
                present.push(false);
                transforms.push(AffineParams::identity());
            }
        }
    }
    PartSet {
        resolution: r,
        schema: lg.schema().clone(),
        parts,
        present,
        transforms,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::grid::linear_index;
    use crate::voxel::metrics::iou_masks;

    fn schema2() -> PartSchema {
        PartSchema::new(["a", "b"]).unwrap()
    }

    #[test]
    fn centered_cube_is_a_fixed_point() {
        let r = 20;
        let mut lg = LabeledGrid::empty(r, schema2());
        for x in 1..19 {
            for y in 1..19 {
                for z in 1..19 {
                    lg.set(x, y, z, 1);
                }
            }
        }
        let ps = extract_parts(&lg);
        assert_eq!(ps.transforms[0], AffineParams::identity());
        assert_eq!(ps.parts[0], lg.part_mask(1));
        assert!(!ps.present[1]);
        assert_eq!(ps.transforms[1], AffineParams::identity());
        assert!(ps.parts[1].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centered_bbox_has_zero_translation() {
        let r = 16;
        let mut lg = LabeledGrid::empty(r, schema2());
        for x in 6..10 {
            for y in 4..12 {
                for z in 7..9 {
                    lg.set(x, y, z, 2);
                }
            }
        }
        let ps = extract_parts(&lg);
        assert_eq!(ps.transforms[1].t, [0.0, 0.0, 0.0]);
        // y extent 8 voxels: half-extent 0.5 normalized, scale 0.9 / 0.5
        assert!((ps.transforms[1].a[1][1] - 1.8).abs() < 1e-15);
    }

    #[test]
    fn round_trip_recovers_offcenter_part() {
        let r = 16;
        let mut lg = LabeledGrid::empty(r, schema2());
        for x in 2..7 {
            for y in 8..15 {
                for z in 3..6 {
                    lg.set(x, y, z, 1);
                }
            }
        }
        let ps = extract_parts(&lg);
        let placed = &ps.placed()[0];
        let iou = iou_masks(placed, &lg.part_mask(1), 0.5);
        assert!(iou >= 0.8, "iou {iou}");
        // canonical part is centered: its mass centroid sits near the origin
        let mut m = [0.0; 3];
        let mut tot = 0.0;
        for (idx, &v) in ps.parts[0].iter().enumerate() {
            let (x, y, z) = coords(r, idx);
            for (d, c) in [x, y, z].into_iter().enumerate() {
                m[d] += v * (c as f64 + 0.5 - r as f64 / 2.0);
            }
            tot += v;
        }
        for c in m {
            assert!((c / tot).abs() < 0.6);
        }
        assert!(ps.parts[0][linear_index(r, 8, 8, 8)] > 0.5);
    }
}
