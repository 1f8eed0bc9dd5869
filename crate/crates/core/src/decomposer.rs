//! Whole-shape encoder and the learned projections that split its embedding
//! into `K` part embeddings.
//!
//! Projections `P_k` are trained towards a partition of the identity
//! (`P_k² = P_k`, `P_i P_j = 0`, `Σ P_k = I`), so part embeddings occupy
//! complementary subspaces and sum back to the whole embedding.

use crate::autodiff::{Graph, ParamId, ParamStore, Session, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{find_convs, Conv, Dense};
use crate::voxel::OccupancyGrid;
use rand::Rng;

pub const DEFAULT_EMBED_DIM: usize = 128;
pub const ENCODER_CHANNELS: [usize; 4] = [16, 32, 64, 128];
pub const DEFAULT_RANK_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingRole {
    Whole,
    /// Zero-based part index.
    Part(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub role: EmbeddingRole,
    pub values: Vec<f64>,
}

/// 3D conv stack (kernel 4, stride 2, relu) followed by a dense layer to `n`.
#[derive(Clone, Debug)]
pub struct EncoderNet {
    convs: Vec<Conv>,
    fc: Dense,
    resolution: usize,
}

impl EncoderNet {
    pub fn new(
        store: &mut ParamStore,
        resolution: usize,
        channels: &[usize],
        embed_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let down = 1usize << channels.len();
        if channels.is_empty() || resolution % down != 0 {
            return Err(Error::invalid(format!(
                "encoder with {} stride-2 layers needs a resolution divisible by {down}, got {resolution}",
                channels.len()
            )));
        }
        let mut convs = Vec::with_capacity(channels.len());
        let mut input = 1;
        for (i, &c) in channels.iter().enumerate() {
            convs.push(Conv::new(store, &format!("encoder.conv{}", i + 1), input, c, false, rng)?);
            input = c;
        }
        let flat = input * (resolution / down).pow(3);
        let fc = Dense::new(store, "encoder.fc", flat, embed_dim, true, rng)?;
        Ok(Self { convs, fc, resolution })
    }

    pub fn from_params(store: &ParamStore) -> Result<Self> {
        let convs = find_convs(store, "encoder.conv", false);
        let fc = Dense::find(store, "encoder.fc").ok_or_else(|| missing("encoder.fc"))?;
        let last = convs.last().ok_or_else(|| missing("encoder.conv1"))?.output;
        let cells = fc.input / last;
        let side = (cells as f64).cbrt().round() as usize;
        if side.pow(3) * last != fc.input {
            return Err(Error::invalid("encoder.fc input is not a cubic feature volume"));
        }
        Ok(Self {
            resolution: side << convs.len(),
            convs,
            fc,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn embed_dim(&self) -> usize {
        self.fc.output
    }

    /// `x: [B, 1, R, R, R]` → `[B, n]`.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x).to_vec();
        if shape.len() != 5 || shape[2] != self.resolution {
            return Err(Error::shape(
                "encode",
                format!("encoder built for R={}, input {shape:?}", self.resolution),
            ));
        }
        let mut h = x;
        for conv in &self.convs {
            let c = conv.forward(s, h)?;
            h = s.graph.relu(c)?;
        }
        let b = shape[0];
        let flat = s.graph.reshape(h, vec![b, self.fc.input])?;
        self.fc.forward(s, flat)
    }
}

pub(crate) fn missing(name: &str) -> Error {
    Error::invalid(format!("checkpoint lacks {name}"))
}

/// Stacks grids into an encoder input `[B, 1, R, R, R]`.
pub fn grids_tensor(grids: &[&OccupancyGrid]) -> Result<Tensor> {
    let r = grids
        .first()
        .ok_or_else(|| Error::invalid("empty batch"))?
        .resolution();
    let mut data = Vec::with_capacity(grids.len() * r * r * r);
    for g in grids {
        if g.resolution() != r {
            return Err(Error::shape("encode", format!("mixed resolutions {r} and {}", g.resolution())));
        }
        data.extend(g.data().iter().map(|&v| v as f64));
    }
    Ok(Tensor::new(vec![grids.len(), 1, r, r, r], data))
}

pub fn encode(store: &ParamStore, net: &EncoderNet, grid: &OccupancyGrid) -> Result<Embedding> {
    let e = encode_batch(store, net, &[grid])?;
    Ok(Embedding { role: EmbeddingRole::Whole, values: e.data })
}

/// Whole-shape embeddings `[B, n]`.
pub fn encode_batch(store: &ParamStore, net: &EncoderNet, grids: &[&OccupancyGrid]) -> Result<Tensor> {
    let mut s = Session::frozen(store);
    let x = s.graph.input(grids_tensor(grids)?);
    let e = net.forward(&mut s, x)?;
    Ok(s.graph.value(e).clone())
}

/// `K` bias-free `n × n` projection layers.
#[derive(Clone, Debug)]
pub struct ProjectionSet {
    ids: Vec<ParamId>,
    dim: usize,
}

/// Exact partition of `I_n` into `parts` coordinate selectors; the first
/// `n mod parts` blocks are one coordinate wider.
pub fn block_partition(parts: usize, dim: usize) -> Vec<Tensor> {
    let (base, extra) = (dim / parts, dim % parts);
    let mut start = 0;
    (0..parts)
        .map(|k| {
            let width = base + usize::from(k < extra);
            let mut p = Tensor::zeros(vec![dim, dim]);
            for i in start..start + width {
                p.data[i * dim + i] = 1.0;
            }
            start += width;
            p
        })
        .collect()
}

impl ProjectionSet {
    /// Initialized at [`block_partition`].
    pub fn new(store: &mut ParamStore, parts: usize, dim: usize) -> Result<Self> {
        if parts == 0 || parts > dim {
            return Err(Error::invalid(format!("{parts} parts in {dim} dimensions")));
        }
        let ids = block_partition(parts, dim)
            .into_iter()
            .enumerate()
            .map(|(k, p)| store.add(format!("proj.P{}", k + 1), p))
            .collect::<Result<_>>()?;
        Ok(Self { ids, dim })
    }

    pub fn from_params(store: &ParamStore) -> Result<Self> {
        let ids: Vec<ParamId> = (1..).map_while(|k| store.id(&format!("proj.P{k}"))).collect();
        let first = *ids.first().ok_or_else(|| missing("proj.P1"))?;
        Ok(Self { dim: store.get(first).shape[0], ids })
    }

    pub fn parts(&self) -> usize {
        self.ids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn matrices(&self, store: &ParamStore) -> Vec<Tensor> {
        self.ids.iter().map(|&id| store.get(id).clone()).collect()
    }

    /// `e: [B, n]` → part embeddings `[B·K, n]`, row `b·K + k` holding `P_k e_b`.
    pub fn forward(&self, s: &mut Session, e: Var) -> Result<Var> {
        let shape = s.graph.shape(e).to_vec();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::shape("project", format!("embedding {shape:?} for n={}", self.dim)));
        }
        let parts: Vec<Var> = self
            .ids
            .iter()
            .map(|&id| {
                let p = s.p(id);
                s.graph.dense(e, p, None)
            })
            .collect::<Result<_>>()?;
        let cat = s.graph.concat(&parts, 1)?;
        s.graph.reshape(cat, vec![shape[0] * self.parts(), self.dim])
    }
}

pub fn project(store: &ParamStore, proj: &ProjectionSet, e: &Embedding) -> Result<Vec<Embedding>> {
    let mut s = Session::frozen(store);
    let ev = s.graph.input(Tensor::new(vec![1, e.values.len()], e.values.clone()));
    let parts = proj.forward(&mut s, ev)?;
    let v = s.graph.value(parts);
    Ok((0..proj.parts())
        .map(|k| Embedding { role: EmbeddingRole::Part(k), values: v.row(k).to_vec() })
        .collect())
}

/// The three partition-of-identity residuals and their sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PiLoss<T> {
    pub total: T,
    /// `Σ_i ‖P_i² − P_i‖²`
    pub idempotence: T,
    /// `Σ_{i≠j} ‖P_i P_j‖²`
    pub orthogonality: T,
    /// `‖Σ P_i − I‖²`
    pub completeness: T,
}

/// Builds the residuals over already-bound projection variables.
pub fn pi_loss_vars(g: &mut Graph, p: &[Var]) -> Result<PiLoss<Var>> {
    let n = g.shape(p[0])[0];
    let frob_sum = |g: &mut Graph, terms: Vec<Var>| -> Result<Var> {
        let mut acc = g.input(Tensor::scalar(0.0));
        for t in terms {
            let f = g.frob_sq(t)?;
            acc = g.add(acc, f)?;
        }
        Ok(acc)
    };
    let mut idem = Vec::with_capacity(p.len());
    for &pi in p {
        let sq = g.matmul(pi, pi)?;
        let neg = g.scale(pi, -1.0)?;
        idem.push(g.add(sq, neg)?);
    }
    let idempotence = frob_sum(g, idem)?;
    let mut cross = Vec::new();
    for (i, &pi) in p.iter().enumerate() {
        for (j, &pj) in p.iter().enumerate() {
            if i != j {
                cross.push(g.matmul(pi, pj)?);
            }
        }
    }
    let orthogonality = frob_sum(g, cross)?;
    let mut neg_eye = Tensor::identity(n);
    neg_eye.data.iter_mut().for_each(|v| *v = -*v);
    let mut sum = g.input(neg_eye);
    for &pi in p {
        sum = g.add(sum, pi)?;
    }
    let completeness = g.frob_sq(sum)?;
    let t = g.add(idempotence, orthogonality)?;
    let total = g.add(t, completeness)?;
    Ok(PiLoss { total, idempotence, orthogonality, completeness })
}

impl ProjectionSet {
    /// Graph residuals for training.
    pub fn pi_loss(&self, s: &mut Session) -> Result<PiLoss<Var>> {
        let vars: Vec<Var> = self.ids.iter().map(|&id| s.p(id)).collect();
        pi_loss_vars(&mut s.graph, &vars)
    }
}

/// Residual values for plain matrices.
pub fn pi_loss(mats: &[Tensor]) -> Result<PiLoss<f64>> {
    let Some(first) = mats.first() else {
        return Err(Error::invalid("pi_loss of an empty projection set"));
    };
    for m in mats {
        if m.shape.len() != 2 || m.shape[0] != m.shape[1] || m.shape != first.shape {
            return Err(Error::shape("pi_loss", format!("projection {:?}", m.shape)));
        }
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = mats.iter().map(|m| g.input(m.clone())).collect();
    let l = pi_loss_vars(&mut g, &vars)?;
    let v = |x: Var| g.value(x).item();
    Ok(PiLoss {
        total: v(l.total),
        idempotence: v(l.idempotence),
        orthogonality: v(l.orthogonality),
        completeness: v(l.completeness),
    })
}

/// `‖Σ_k P_k e − e‖ / ‖e‖`.
pub fn completeness_residual(mats: &[Tensor], e: &[f64]) -> f64 {
    let n = e.len();
    let mut r: Vec<f64> = e.iter().map(|v| -v).collect();
    for m in mats {
        for i in 0..n {
            r[i] += (0..n).map(|j| m.data[i * n + j] * e[j]).sum::<f64>();
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    norm(&r) / norm(e).max(f64::MIN_POSITIVE)
}

/// Singular values of a row-major `rows × cols` matrix, descending, by
/// one-sided (Hestenes) Jacobi rotations.
pub fn singular_values(m: &Tensor) -> Vec<f64> {
    let (rows, cols) = (m.shape[0], m.shape[1]);
    // work on columns as contiguous vectors
    let mut c: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| m.data[i * cols + j]).collect())
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha = dot(&c[p], &c[p]);
                let beta = dot(&c[q], &c[q]);
                let gamma = dot(&c[p], &c[q]);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                let (lo, hi) = c.split_at_mut(q);
                let (a, b) = (&mut lo[p], &mut hi[0]);
                for i in 0..rows {
                    let (x, y) = (a[i], b[i]);
                    a[i] = cs * x - sn * y;
                    b[i] = sn * x + cs * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut s: Vec<f64> = c.iter().map(|col| dot(col, col).sqrt()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankRecord {
    pub rank: usize,
    pub singular_values: Vec<f64>,
}

/// Effective rank: number of singular values `≥ tol · σ_max`.
pub fn effective_rank(singular_values: &[f64], tol: f64) -> usize {
    let max = singular_values.first().copied().unwrap_or(0.0);
    if max == 0.0 {
        return 0;
    }
    singular_values.iter().filter(|&&s| s >= tol * max).count()
}

pub fn effective_rank_report(mats: &[Tensor], tol: f64) -> Vec<RankRecord> {
    mats.iter()
        .map(|m| {
            let sv = singular_values(m);
            RankRecord { rank: effective_rank(&sv, tol), singular_values: sv }
        })
        .collect()
}
