//! Parameterized layers shared by every network.

use crate::autodiff::{ParamId, ParamStore, Session, Tensor, Var};
use crate::error::Result;
use rand::Rng;

/// He-normal weights: `std = sqrt(2 / fan_in)`.
fn he(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Dense {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.W"), he(vec![output, input], input, rng))?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(vec![output]))?)
        } else {
            None
        };
        Ok(Self { w, b, input, output })
    }

    /// Locates `{name}.W` / `{name}.b`.
    pub fn find(store: &ParamStore, name: &str) -> Option<Self> {
        let w = store.id(&format!("{name}.W"))?;
        let shape = &store.get(w).shape;
        Some(Self {
            w,
            b: store.id(&format!("{name}.b")),
            input: shape[1],
            output: shape[0],
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.p(self.w);
        let b = self.b.map(|b| s.p(b));
        s.graph.dense(x, w, b)
    }
}

/// `k = 4, stride 2, pad 1`: halves (or, transposed, doubles) each extent.
pub(crate) const KERNEL: usize = 4;
pub(crate) const STRIDE: usize = 2;
pub(crate) const PAD: usize = 1;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
    pub transposed: bool,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        transposed: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let k3 = KERNEL.pow(3);
        let (shape, fan_in) = if transposed {
            // each output voxel sees k³/stride³ taps per input channel
            (vec![input, output, KERNEL, KERNEL, KERNEL], input * k3 / STRIDE.pow(3))
        } else {
            (vec![output, input, KERNEL, KERNEL, KERNEL], input * k3)
        };
        let w = store.add(format!("{name}.W"), he(shape, fan_in, rng))?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![output]))?;
        Ok(Self { w, b, input, output, transposed })
    }

    pub fn find(store: &ParamStore, name: &str, transposed: bool) -> Option<Self> {
        let w = store.id(&format!("{name}.W"))?;
        let b = store.id(&format!("{name}.b"))?;
        let shape = &store.get(w).shape;
        let (input, output) = if transposed { (shape[0], shape[1]) } else { (shape[1], shape[0]) };
        Some(Self { w, b, input, output, transposed })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.p(self.w);
        let b = s.p(self.b);
        if self.transposed {
            s.graph.conv3_transpose(x, w, Some(b), STRIDE, PAD)
        } else {
            s.graph.conv3(x, w, Some(b), STRIDE, PAD)
        }
    }
}

/// Consecutive indexed layers `{prefix}{i}` for `i = 1, 2, …`.
pub(crate) fn find_convs(store: &ParamStore, prefix: &str, transposed: bool) -> Vec<Conv> {
    (1..)
        .map_while(|i| Conv::find(store, &format!("{prefix}{i}"), transposed))
        .collect()
}
