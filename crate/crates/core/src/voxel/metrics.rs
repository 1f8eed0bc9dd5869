//! Geometric metric primitives.

use super::grid::{coords, linear_index, LabeledGrid, OccupancyGrid};
use crate::error::Result;

/// Number of 6-connected components of occupied voxels.
pub fn connected_components(grid: &OccupancyGrid) -> usize {
    let r = grid.resolution();
    let data = grid.data();
    let mut parent: Vec<usize> = (0..data.len()).collect();

    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }

    for idx in 0..data.len() {
        if data[idx] == 0 {
            continue;
        }
        let (x, y, z) = coords(r, idx);
        // forward neighbors only; each edge visited once
        let mut neighbors = [None; 3];
        if x + 1 < r {
            neighbors[0] = Some(linear_index(r, x + 1, y, z));
        }
        if y + 1 < r {
            neighbors[1] = Some(linear_index(r, x, y + 1, z));
        }
        if z + 1 < r {
            neighbors[2] = Some(linear_index(r, x, y, z + 1));
        }
        for n in neighbors.into_iter().flatten() {
            if data[n] != 0 {
                let (a, b) = (find(&mut parent, idx), find(&mut parent, n));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    (0..data.len())
        .filter(|&i| data[i] != 0 && find(&mut parent, i) == i)
        .count()
}

pub fn is_single_component(grid: &OccupancyGrid) -> bool {
    connected_components(grid) == 1
}

/// Fraction of voxels equal to their mirror across the plane `x = center`.
pub fn symmetry_score(grid: &OccupancyGrid) -> f64 {
    let r = grid.resolution();
    let matched = (0..grid.data().len())
        .filter(|&idx| {
            let (x, y, z) = coords(r, idx);
            grid.get(x, y, z) == grid.get(r - 1 - x, y, z)
        })
        .count();
    matched as f64 / grid.data().len() as f64
}

/// IoU per label `1..=K`; `None` where the label is absent from both grids.
pub fn per_label_iou(a: &LabeledGrid, b: &LabeledGrid) -> Result<Vec<Option<f64>>> {
    a.same_layout(b)?;
    let k = a.schema().len();
    let mut inter = vec![0usize; k + 1];
    let mut union = vec![0usize; k + 1];
    for (&la, &lb) in a.labels().iter().zip(b.labels()) {
        if la == lb {
            inter[la as usize] += 1;
            union[la as usize] += 1;
        } else {
            union[la as usize] += 1;
            union[lb as usize] += 1;
        }
    }
    Ok((1..=k)
        .map(|l| (union[l] > 0).then(|| inter[l] as f64 / union[l] as f64))
        .collect())
}

/// Mean IoU over labels present in either grid; two empty grids score 1.
pub fn miou(a: &LabeledGrid, b: &LabeledGrid) -> Result<f64> {
    let ious: Vec<f64> = per_label_iou(a, b)?.into_iter().flatten().collect();
    if ious.is_empty() {
        return Ok(1.0);
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// IoU of two real-valued volumes binarized at `threshold`; two empty masks score 1.
pub fn iou_masks(a: &[f64], b: &[f64], threshold: f64) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x >= threshold, y >= threshold);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::grid::PartSchema;

    #[test]
    fn solid_cube_is_one_component() {
        assert_eq!(connected_components(&OccupancyGrid::full(3)), 1);
        assert_eq!(connected_components(&OccupancyGrid::empty(3)), 0);
    }

    #[test]
    fn corner_contact_is_not_connected() {
        let mut g = OccupancyGrid::empty(3);
        g.set(0, 0, 0, true);
        g.set(1, 1, 1, true);
        assert_eq!(connected_components(&g), 2);
        g.set(1, 0, 0, true);
        g.set(1, 1, 0, true);
        assert_eq!(connected_components(&g), 1);
    }

    #[test]
    fn symmetry_cases() {
        let r = 6;
        assert_eq!(symmetry_score(&OccupancyGrid::empty(r)), 1.0);
        let sym = OccupancyGrid::from_fn(r, |x, y, _| (x == 1 || x == 4) && y < 3);
        assert_eq!(symmetry_score(&sym), 1.0);
        let mut one = OccupancyGrid::empty(r);
        one.set(0, 2, 3, true);
        let n = (r * r * r) as f64;
        assert_eq!(symmetry_score(&one), (n - 2.0) / n);
    }

    #[test]
    fn miou_cases() {
        let s = PartSchema::new(["a", "b"]).unwrap();
        let r = 4;
        let mut a = LabeledGrid::empty(r, s.clone());
        let mut b = LabeledGrid::empty(r, s.clone());
        assert_eq!(miou(&a, &b).unwrap(), 1.0);
        a.set(0, 0, 0, 1);
        b.set(3, 3, 3, 1);
        assert_eq!(miou(&a, &b).unwrap(), 0.0);
        // half-overlap: a = {x=0,1}, b = {x=1,2} on one row → 1 / 3
        let mut a = LabeledGrid::empty(r, s.clone());
        let mut b = LabeledGrid::empty(r, s.clone());
        for x in 0..2 {
            a.set(x, 0, 0, 1);
        }
        for x in 1..3 {
            b.set(x, 0, 0, 1);
        }
        assert!((miou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(miou(&a, &a).unwrap(), 1.0);
        let other = LabeledGrid::empty(r, PartSchema::chairs());
        assert!(miou(&a, &other).is_err());
    }
}
