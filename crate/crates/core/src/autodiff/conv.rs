//! Strided 3D convolution kernels over `[C, D, D, D]` sample slices.
//!
//! Both directions share one column layout: `cols[(c, k0, k1, k2), (o0, o1, o2)]`,
//! so `conv3` is `W · im2col(x)` and `conv3_transpose` is `col2im(Wᵀ · x)`.

use super::gemm::gemm;
use crate::error::{Error, Result};
use rayon::prelude::*;

/// Samples per work unit; fixed so reductions never depend on the thread count.
const CHUNK: usize = 4;

/// Geometry of the dense side (`big`, size `d`) and the strided side (size `o`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    /// Spatial extent of the high-resolution volume.
    pub d: usize,
    /// Spatial extent of the strided volume.
    pub o: usize,
}

impl ConvGeom {
    /// Forward convolution reading a `d`-volume.
    pub fn conv(d: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 || k == 0 || d + 2 * pad < k {
            return Err(Error::shape("conv3", format!("kernel {k} does not fit extent {d} with pad {pad}")));
        }
        let span = d + 2 * pad - k;
        if span % stride != 0 {
            return Err(Error::shape(
                "conv3",
                format!("extent {d} with kernel {k}, stride {stride}, pad {pad} leaves a ragged edge"),
            ));
        }
        Ok(Self { k, stride, pad, d, o: span / stride + 1 })
    }

    /// Transposed convolution reading an `o`-volume and writing a `d`-volume.
    pub fn transpose(o: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 || o == 0 || (o - 1) * stride + k < 2 * pad + 1 {
            return Err(Error::shape("conv3_transpose", format!("extent {o} collapses with pad {pad}")));
        }
        Ok(Self { k, stride, pad, d: (o - 1) * stride + k - 2 * pad, o })
    }

    fn taps(&self) -> usize {
        self.k * self.k * self.k
    }

    fn d3(&self) -> usize {
        self.d * self.d * self.d
    }

    fn o3(&self) -> usize {
        self.o * self.o * self.o
    }

    /// Source offset along one axis, or `None` in the padding.
    #[inline]
    fn source(&self, o: usize, k: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < self.d).then_some(i as usize)
    }
}

fn im2col(g: &ConvGeom, c: usize, x: &[f64], cols: &mut [f64]) {
    let (d, o, k) = (g.d, g.o, g.k);
    let o3 = g.o3();
    for ci in 0..c {
        let xc = &x[ci * g.d3()..(ci + 1) * g.d3()];
        for k0 in 0..k {
            for k1 in 0..k {
                for k2 in 0..k {
                    let row = ((ci * k + k0) * k + k1) * k + k2;
                    let out = &mut cols[row * o3..(row + 1) * o3];
                    for o0 in 0..o {
                        let Some(i0) = g.source(o0, k0) else {
                            out[o0 * o * o..(o0 + 1) * o * o].fill(0.0);
                            continue;
                        };
                        for o1 in 0..o {
                            let base = (o0 * o + o1) * o;
                            let Some(i1) = g.source(o1, k1) else {
                                out[base..base + o].fill(0.0);
                                continue;
                            };
                            let src = (i0 * d + i1) * d;
                            for o2 in 0..o {
                                out[base + o2] = match g.source(o2, k2) {
                                    Some(i2) => xc[src + i2],
                                    None => 0.0,
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `x`.
fn col2im(g: &ConvGeom, c: usize, cols: &[f64], x: &mut [f64]) {
    let (d, o, k) = (g.d, g.o, g.k);
    let o3 = g.o3();
    for ci in 0..c {
        let xc = &mut x[ci * g.d3()..(ci + 1) * g.d3()];
        for k0 in 0..k {
            for k1 in 0..k {
                for k2 in 0..k {
                    let row = ((ci * k + k0) * k + k1) * k + k2;
                    let col = &cols[row * o3..(row + 1) * o3];
                    for o0 in 0..o {
                        let Some(i0) = g.source(o0, k0) else { continue };
                        for o1 in 0..o {
                            let Some(i1) = g.source(o1, k1) else { continue };
                            let base = (o0 * o + o1) * o;
                            let dst = (i0 * d + i1) * d;
                            for o2 in 0..o {
                                if let Some(i2) = g.source(o2, k2) {
                                    xc[dst + i2] += col[base + o2];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_bias(out: &mut [f64], bias: Option<&[f64]>, per_channel: usize) {
    if let Some(b) = bias {
        for (ch, &bv) in out.chunks_mut(per_channel).zip(b) {
            ch.iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn bias_grad(dout: &[f64], per_channel: usize, db: &mut [f64]) {
    for (ch, slot) in dout.chunks(per_channel).zip(db.iter_mut()) {
        *slot += ch.iter().sum::<f64>();
    }
}

/// Sums per-chunk partial gradients in chunk order.
fn reduce_partials(partials: Vec<(Vec<f64>, Vec<f64>)>, dw: &mut [f64], db: Option<&mut [f64]>) {
    let mut db = db;
    for (pw, pb) in partials {
        dw.iter_mut().zip(&pw).for_each(|(a, b)| *a += b);
        if let Some(db) = db.as_deref_mut() {
            db.iter_mut().zip(&pb).for_each(|(a, b)| *a += b);
        }
    }
}

/// `y[n] = W · im2col(x[n]) + b`, with `W: [cout, cin·k³]`.
pub(crate) fn conv3_forward(
    g: &ConvGeom,
    cin: usize,
    cout: usize,
    x: &[f64],
    w: &[f64],
    b: Option<&[f64]>,
    y: &mut [f64],
) {
    let (xs, ys) = (cin * g.d3(), cout * g.o3());
    y.par_chunks_mut(ys * CHUNK)
        .zip(x.par_chunks(xs * CHUNK))
        .for_each(|(yc, xc)| {
            let mut cols = vec![0.0; cin * g.taps() * g.o3()];
            for (yn, xn) in yc.chunks_mut(ys).zip(xc.chunks(xs)) {
                im2col(g, cin, xn, &mut cols);
                gemm(cout, cin * g.taps(), g.o3(), w, false, &cols, false, 0.0, yn);
                add_bias(yn, b, g.o3());
            }
        });
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3_backward(
    g: &ConvGeom,
    cin: usize,
    cout: usize,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let (xs, ys) = (cin * g.d3(), cout * g.o3());
    let rows = cin * g.taps();
    if let Some(dx) = dx {
        dx.par_chunks_mut(xs * CHUNK)
            .zip(dy.par_chunks(ys * CHUNK))
            .for_each(|(dxc, dyc)| {
                let mut dcols = vec![0.0; rows * g.o3()];
                for (dxn, dyn_) in dxc.chunks_mut(xs).zip(dyc.chunks(ys)) {
                    gemm(rows, cout, g.o3(), w, true, dyn_, false, 0.0, &mut dcols);
                    col2im(g, cin, &dcols, dxn);
                }
            });
    }
    if let Some(dw) = dw {
        let want_b = db.is_some();
        let partials: Vec<(Vec<f64>, Vec<f64>)> = x
            .par_chunks(xs * CHUNK)
            .zip(dy.par_chunks(ys * CHUNK))
            .map(|(xc, dyc)| {
                let mut pw = vec![0.0; cout * rows];
                let mut pb = vec![0.0; if want_b { cout } else { 0 }];
                let mut cols = vec![0.0; rows * g.o3()];
                for (xn, dyn_) in xc.chunks(xs).zip(dyc.chunks(ys)) {
                    im2col(g, cin, xn, &mut cols);
                    gemm(cout, g.o3(), rows, dyn_, false, &cols, true, 1.0, &mut pw);
                    if want_b {
                        bias_grad(dyn_, g.o3(), &mut pb);
                    }
                }
                (pw, pb)
            })
            .collect();
        reduce_partials(partials, dw, db);
    } else if let Some(db) = db {
        for dyn_ in dy.chunks(ys) {
            bias_grad(dyn_, g.o3(), db);
        }
    }
}

/// `y[n] = col2im(Wᵀ · x[n]) + b`, with `W: [cin, cout·k³]`; `x` lives on the strided side.
pub(crate) fn conv3t_forward(
    g: &ConvGeom,
    cin: usize,
    cout: usize,
    x: &[f64],
    w: &[f64],
    b: Option<&[f64]>,
    y: &mut [f64],
) {
    let (xs, ys) = (cin * g.o3(), cout * g.d3());
    let rows = cout * g.taps();
    y.par_chunks_mut(ys * CHUNK)
        .zip(x.par_chunks(xs * CHUNK))
        .for_each(|(yc, xc)| {
            let mut cols = vec![0.0; rows * g.o3()];
            for (yn, xn) in yc.chunks_mut(ys).zip(xc.chunks(xs)) {
                gemm(rows, cin, g.o3(), w, true, xn, false, 0.0, &mut cols);
                yn.fill(0.0);
                col2im(g, cout, &cols, yn);
                add_bias(yn, b, g.d3());
            }
        });
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3t_backward(
    g: &ConvGeom,
    cin: usize,
    cout: usize,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let (xs, ys) = (cin * g.o3(), cout * g.d3());
    let rows = cout * g.taps();
    if let Some(dx) = dx {
        dx.par_chunks_mut(xs * CHUNK)
            .zip(dy.par_chunks(ys * CHUNK))
            .for_each(|(dxc, dyc)| {
                let mut dcols = vec![0.0; rows * g.o3()];
                for (dxn, dyn_) in dxc.chunks_mut(xs).zip(dyc.chunks(ys)) {
                    im2col(g, cout, dyn_, &mut dcols);
                    gemm(cin, rows, g.o3(), w, false, &dcols, false, 1.0, dxn);
                }
            });
    }
    if let Some(dw) = dw {
        let want_b = db.is_some();
        let partials: Vec<(Vec<f64>, Vec<f64>)> = x
            .par_chunks(xs * CHUNK)
            .zip(dy.par_chunks(ys * CHUNK))
            .map(|(xc, dyc)| {
                let mut pw = vec![0.0; cin * rows];
                let mut pb = vec![0.0; if want_b { cout } else { 0 }];
                let mut dcols = vec![0.0; rows * g.o3()];
                for (xn, dyn_) in xc.chunks(xs).zip(dyc.chunks(ys)) {
                    im2col(g, cout, dyn_, &mut dcols);
                    gemm(cin, g.o3(), rows, xn, false, &dcols, true, 1.0, &mut pw);
                    if want_b {
                        bias_grad(dyn_, g.d3(), &mut pb);
                    }
                }
                (pw, pb)
            })
            .collect();
        reduce_partials(partials, dw, db);
    } else if let Some(db) = db {
        for dyn_ in dy.chunks(ys) {
            bias_grad(dyn_, g.d3(), db);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-summation convolution, independent of the column layout.
    fn naive_conv(g: &ConvGeom, cin: usize, cout: usize, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (d, o, k) = (g.d as isize, g.o, g.k);
        let mut y = vec![0.0; cout * o * o * o];
        for co in 0..cout {
            for o0 in 0..o {
                for o1 in 0..o {
                    for o2 in 0..o {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for k0 in 0..k {
                                for k1 in 0..k {
                                    for k2 in 0..k {
                                        let i = |oo: usize, kk: usize| (oo * g.stride + kk) as isize - g.pad as isize;
                                        let (i0, i1, i2) = (i(o0, k0), i(o1, k1), i(o2, k2));
                                        if [i0, i1, i2].iter().any(|&v| v < 0 || v >= d) {
                                            continue;
                                        }
                                        let xi = ((ci as isize * d + i0) * d + i1) * d + i2;
                                        let wi = (((co * cin + ci) * k + k0) * k + k1) * k + k2;
                                        acc += x[xi as usize] * w[wi];
                                    }
                                }
                            }
                        }
                        y[((co * o + o0) * o + o1) * o + o2] = acc;
                    }
                }
            }
        }
        y
    }

    fn seq(n: usize, f: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * f).sin()).collect()
    }

    #[test]
    fn conv_matches_direct_sum() {
        for (d, k, s, p) in [(8, 4, 2, 1), (5, 3, 1, 1), (6, 2, 2, 0)] {
            let g = ConvGeom::conv(d, k, s, p).unwrap();
            let (cin, cout) = (2, 3);
            let x = seq(cin * d * d * d, 0.37);
            let w = seq(cout * cin * k * k * k, 0.73);
            let mut y = vec![0.0; cout * g.o * g.o * g.o];
            conv3_forward(&g, cin, cout, &x, &w, None, &mut y);
            let want = naive_conv(&g, cin, cout, &x, &w);
            for (a, b) in y.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        // <conv(x), u> = <x, convT(u)> with the weight reinterpreted as [cin, cout·k³].
        let g = ConvGeom::conv(8, 4, 2, 1).unwrap();
        let t = ConvGeom::transpose(g.o, 4, 2, 1).unwrap();
        assert_eq!(t, g);
        let (cin, cout) = (2, 3);
        let x = seq(cin * 512, 0.11);
        let u = seq(cout * 64, 0.29);
        let w = seq(cout * cin * 64, 0.53);
        let mut y = vec![0.0; cout * 64];
        conv3_forward(&g, cin, cout, &x, &w, None, &mut y);
        let mut back = vec![0.0; cin * 512];
        conv3t_forward(&g, cout, cin, &u, &w, None, &mut back);
        let lhs: f64 = y.iter().zip(&u).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn ragged_geometry_rejected() {
        assert!(ConvGeom::conv(7, 4, 2, 1).is_err());
        assert!(ConvGeom::conv(2, 5, 1, 0).is_err());
    }
}
