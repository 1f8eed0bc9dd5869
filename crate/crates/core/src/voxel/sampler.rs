//! Trilinear resampling under a 12-parameter affine map.
//!
//! Normalized coordinates span `[-1, 1]³`; the center of voxel `i` sits at
//! `(2i + 1) / R - 1`. For every output voxel center `o` the sampler reads the
//! source volume at `A·o + t`. Corners outside the grid read as zero.

use super::grid::linear_index;

/// `source = A·output + t`, `A` row-major.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub a: [[f64; 3]; 3],
    pub t: [f64; 3],
}

impl Default for AffineParams {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineParams {
    pub const IDENTITY: [f64; 12] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];

    pub fn identity() -> Self {
        Self::from_slice(&Self::IDENTITY)
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self { t, ..Self::identity() }
    }

    /// Uniform scale `s` followed by translation: `source = s·o + t`.
    pub fn scale_translate(s: f64, t: [f64; 3]) -> Self {
        Self {
            a: [[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, s]],
            t,
        }
    }

    /// `A` row-major followed by `t`.
    pub fn to_array(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for i in 0..3 {
            out[3 * i..3 * i + 3].copy_from_slice(&self.a[i]);
        }
        out[9..].copy_from_slice(&self.t);
        out
    }

    pub fn from_slice(p: &[f64]) -> Self {
        assert_eq!(p.len(), 12);
        let mut a = [[0.0; 3]; 3];
        for i in 0..3 {
            a[i].copy_from_slice(&p[3 * i..3 * i + 3]);
        }
        Self {
            a,
            t: [p[9], p[10], p[11]],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn apply(&self, o: [f64; 3]) -> [f64; 3] {
        let mut s = self.t;
        for (i, si) in s.iter_mut().enumerate() {
            *si += self.a[i][0] * o[0] + self.a[i][1] * o[1] + self.a[i][2] * o[2];
        }
        s
    }
}

#[inline]
pub fn voxel_center(i: usize, r: usize) -> f64 {
    (2 * i + 1) as f64 / r as f64 - 1.0
}

/// Continuous voxel index for a normalized coordinate.
#[inline]
pub(crate) fn continuous_index(s: f64, r: usize) -> f64 {
    ((s + 1.0) * r as f64 - 1.0) * 0.5
}

const SNAP: f64 = 1e-10;

/// One axis of the trilinear kernel: lower corner, weight on the upper corner.
///
/// The lower corner is `ceil(u) - 1`, so a point exactly on a voxel center is
/// attributed to the cell on its left and carries full weight on the upper
/// corner. Values are exact there; derivatives are those of the left cell.
#[inline]
fn axis(u: f64) -> (i64, f64) {
    let nearest = u.round();
    let u = if (u - nearest).abs() < SNAP { nearest } else { u };
    let lo = u.ceil() - 1.0;
    (lo as i64, u - lo)
}

/// Eight-corner trilinear stencil at a continuous index `u`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    /// Linear voxel index of each corner, `None` when outside the grid.
    pub idx: [Option<usize>; 8],
    pub w: [f64; 8],
    /// ∂w/∂u per corner and axis.
    pub dw: [[f64; 3]; 8],
}

pub(crate) fn stencil(u: [f64; 3], r: usize) -> Stencil {
    let ax = [axis(u[0]), axis(u[1]), axis(u[2])];
    let mut st = Stencil {
        idx: [None; 8],
        w: [0.0; 8],
        dw: [[0.0; 3]; 8],
    };
    let ri = r as i64;
    for c in 0..8 {
        let bits = [(c >> 2) & 1, (c >> 1) & 1, c & 1];
        let mut pos = [0usize; 3];
        let mut inside = true;
        let mut f = [0.0; 3];
        let mut df = [0.0; 3];
        for d in 0..3 {
            let (lo, frac) = ax[d];
            let p = lo + bits[d] as i64;
            if p < 0 || p >= ri {
                inside = false;
            } else {
                pos[d] = p as usize;
            }
            if bits[d] == 1 {
                f[d] = frac;
                df[d] = 1.0;
            } else {
                f[d] = 1.0 - frac;
                df[d] = -1.0;
            }
        }
        if !inside {
            continue;
        }
        st.idx[c] = Some(linear_index(r, pos[0], pos[1], pos[2]));
        st.w[c] = f[0] * f[1] * f[2];
        st.dw[c] = [df[0] * f[1] * f[2], f[0] * df[1] * f[2], f[0] * f[1] * df[2]];
    }
    st
}

/// Continuous source index for every output voxel, in storage order.
pub(crate) fn source_indices(r: usize, theta: &AffineParams) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(r * r * r);
    for x in 0..r {
        for z in 0..r {
            for y in 0..r {
                let o = [voxel_center(x, r), voxel_center(y, r), voxel_center(z, r)];
                let s = theta.apply(o);
                out.push([
                    continuous_index(s[0], r),
                    continuous_index(s[1], r),
                    continuous_index(s[2], r),
                ]);
            }
        }
    }
    out
}

/// Resample an `R³` volume: `out(o) = volume(A·o + t)`.
pub fn resample(volume: &[f64], r: usize, theta: &AffineParams) -> Vec<f64> {
    assert_eq!(volume.len(), r * r * r);
    source_indices(r, theta)
        .into_iter()
        .map(|u| {
            let st = stencil(u, r);
            st.idx
                .iter()
                .zip(st.w.iter())
                .filter_map(|(i, w)| i.map(|i| volume[i] * w))
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_volume(r: usize, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..r * r * r).map(|_| rng.gen::<f64>()).collect()
    }

    #[test]
    fn identity_is_exact() {
        for r in [4, 5, 7, 16] {
            let v = random_volume(r, r as u64);
            assert_eq!(resample(&v, r, &AffineParams::identity()), v);
        }
    }

    #[test]
    fn one_voxel_translation_shifts_and_zero_fills() {
        let r = 8;
        let v = random_volume(r, 3);
        let out = resample(&v, r, &AffineParams::translation([2.0 / r as f64, 0.0, 0.0]));
        for x in 0..r {
            for y in 0..r {
                for z in 0..r {
                    let got = out[linear_index(r, x, y, z)];
                    let want = if x + 1 < r { v[linear_index(r, x + 1, y, z)] } else { 0.0 };
                    assert_eq!(got, want);
                }
            }
        }
    }

    #[test]
    fn midpoint_interpolates() {
        let r = 2;
        let mut v = vec![0.0; 8];
        v[linear_index(r, 1, 0, 0)] = 1.0;
        let out = resample(&v, r, &AffineParams::translation([0.5, 0.0, 0.0]));
        assert!((out[linear_index(r, 0, 0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn weights_sum_to_one_inside() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let u = [rng.gen_range(0.0..5.0), rng.gen_range(0.0..5.0), rng.gen_range(0.0..5.0)];
            let st = stencil(u, 6);
            assert!((st.w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let dsum: f64 = st.dw.iter().map(|d| d[0] + d[1] + d[2]).sum();
            assert!(dsum.abs() < 1e-12);
        }
    }
}
