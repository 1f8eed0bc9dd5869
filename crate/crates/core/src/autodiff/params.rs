//! Named parameter tensors, PFCK1 checkpoints, and per-graph binding.
//!
//! ```text
//! "PFCK1\n"
//! u32 record count
//! per record: u32 name length, name bytes (UTF-8), u32 ndim, ndim × u64 dims,
//!             prod(dims) × f64
//! ```
//! All integers and doubles little-endian; records in insertion order.

use super::graph::{Graph, Gradients, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

const MAGIC: &[u8] = b"PFCK1\n";
const FORMAT: &str = "PFCK1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Parameters whose name starts with `prefix`, in insertion order.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |&id| self.names[id.0].starts_with(prefix))
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Overwrites every parameter of `self` from the same-named entry of `other`.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let src = other
                .id(name)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks parameter {name:?}")))?;
            let src = other.get(src);
            if src.shape != self.tensors[i].shape {
                return Err(Error::invalid(format!(
                    "parameter {name:?}: checkpoint shape {:?}, model shape {:?}",
                    src.shape, self.tensors[i].shape
                )));
            }
            self.tensors[i].data.copy_from_slice(&src.data);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend((self.len() as u32).to_le_bytes());
        for (name, t) in self.names.iter().zip(&self.tensors) {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend((d as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if !bytes.starts_with(MAGIC) {
            return Err(Error::format(FORMAT, 0, "bad magic"));
        }
        let mut pos = MAGIC.len();
        let mut take = |n: usize| -> Result<(usize, &[u8])> {
            if pos + n > bytes.len() {
                return Err(Error::format(FORMAT, pos, "truncated checkpoint"));
            }
            let at = pos;
            pos += n;
            Ok((at, &bytes[at..at + n]))
        };
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
        let (_, b) = take(4)?;
        let count = u32_at(b);
        let mut store = ParamStore::new();
        for _ in 0..count {
            let (_, b) = take(4)?;
            let name_len = u32_at(b);
            let (off, b) = take(name_len)?;
            let name = std::str::from_utf8(b)
                .map_err(|_| Error::format(FORMAT, off, "parameter name is not UTF-8"))?
                .to_string();
            let (_, b) = take(4)?;
            let ndim = u32_at(b);
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let (_, b) = take(8)?;
                shape.push(u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize);
            }
            let n: usize = shape.iter().product();
            let (_, b) = take(n.checked_mul(8).ok_or_else(|| Error::format(FORMAT, off, "absurd shape"))?)?;
            let data = b
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            store
                .add(name, Tensor::new(shape, data))
                .map_err(|e| Error::format(FORMAT, off, e.to_string()))?;
        }
        if pos != bytes.len() {
            return Err(Error::format(FORMAT, pos, "trailing bytes after last record"));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Gradient of one parameter.
pub type ParamGrad = (ParamId, Vec<f64>);

/// A graph plus the parameters bound into it.
///
/// Each parameter is bound at most once per graph, so shared use accumulates
/// into a single gradient. Frozen parameters enter as constants.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: BTreeMap<ParamId, Var>,
    trainable: Box<dyn Fn(ParamId) -> bool + 'a>,
}

impl<'a> Session<'a> {
    /// Every parameter trainable.
    pub fn new(store: &'a ParamStore) -> Self {
        Self::with_trainable(store, |_| true)
    }

    /// No parameter trainable; for inference.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::with_trainable(store, |_| false)
    }

    pub fn with_trainable(store: &'a ParamStore, trainable: impl Fn(ParamId) -> bool + 'a) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: BTreeMap::new(),
            trainable: Box::new(trainable),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if (self.trainable)(id) {
            self.graph.param(t)
        } else {
            self.graph.input(t)
        };
        self.bound.insert(id, v);
        v
    }

    /// Gradients of `loss` for every bound trainable parameter, in id order
    /// (zero when unreachable).
    pub fn gradients(&self, loss: Var) -> Result<Vec<ParamGrad>> {
        let mut grads: Gradients = self.graph.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .filter(|(_, &v)| self.graph.requires_grad(v))
            .map(|(&id, &v)| {
                let g = grads
                    .take(v)
                    .unwrap_or_else(|| vec![0.0; self.store.get(id).len()]);
                (id, g)
            })
            .collect())
    }
}

/// Adds `src` into `dst` entry-wise; both must list the same ids in the same order.
pub fn accumulate_grads(dst: &mut Vec<ParamGrad>, src: Vec<ParamGrad>) {
    if dst.is_empty() {
        *dst = src;
        return;
    }
    for ((id_d, gd), (id_s, gs)) in dst.iter_mut().zip(src) {
        assert_eq!(*id_d, id_s, "gradient lists disagree");
        gd.iter_mut().zip(&gs).for_each(|(a, b)| *a += b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("encoder.conv1.W", Tensor::new(vec![2, 1, 1, 1, 1], vec![0.5, -1.25]))
            .unwrap();
        s.add("proj.P1", Tensor::new(vec![1], vec![f64::MIN_POSITIVE])).unwrap();
        s
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let s = sample();
        let b = s.to_bytes();
        let back = ParamStore::from_bytes(&b).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes(), b);
    }

    #[test]
    fn checkpoint_layout() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::new(vec![1], vec![1.0])).unwrap();
        let mut want = b"PFCK1\n".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.push(b'a');
        want.extend(1u32.to_le_bytes());
        want.extend(1u64.to_le_bytes());
        want.extend(1.0f64.to_le_bytes());
        assert_eq!(s.to_bytes(), want);
    }

    #[test]
    fn truncated_checkpoint_reports_offset() {
        let b = sample().to_bytes();
        match ParamStore::from_bytes(&b[..b.len() - 3]) {
            Err(Error::Format { offset, .. }) => assert!(offset > 6),
            other => panic!("{other:?}"),
        }
        assert!(ParamStore::from_bytes(b"PFCK2\n").is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = sample();
        assert!(s.add("proj.P1", Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn shared_binding_accumulates() {
        let mut s = ParamStore::new();
        let w = s.add("w", Tensor::new(vec![2], vec![1.0, 2.0])).unwrap();
        let mut sess = Session::new(&s);
        let a = sess.p(w);
        let b = sess.p(w);
        assert_eq!(a, b);
        let y = sess.graph.add(a, b).unwrap();
        let l = sess.graph.sum(y).unwrap();
        let g = sess.gradients(l).unwrap();
        assert_eq!(g, vec![(w, vec![2.0, 2.0])]);
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut s = ParamStore::new();
        let w = s.add("w", Tensor::scalar(3.0)).unwrap();
        let mut sess = Session::frozen(&s);
        let v = sess.p(w);
        let l = sess.graph.frob_sq(v).unwrap();
        assert!(sess.gradients(l).unwrap().is_empty());
    }
}
