//! Part embeddings back to a labeled shape.
//!
//! A shared decoder turns each part embedding into a centered, scaled
//! canonical volume; the localization net predicts one affine transform per
//! part from those volumes and the summed part embeddings; the trilinear
//! sampler places each part; [`assemble`] resolves labels voxel by voxel.

use crate::autodiff::{ParamStore, Session, Tensor, Var};
use crate::decomposer::missing;
use crate::error::{Error, Result};
use crate::layers::{find_convs, Conv, Dense};
use crate::voxel::{resample, AffineParams, LabeledGrid, PartSchema};
use rand::Rng;

pub const DECODER_CHANNELS: [usize; 3] = [64, 32, 16];
pub const STN_CHANNELS: [usize; 2] = [8, 16];
pub const STN_FEATURES: usize = 64;
pub const STN_HIDDEN: usize = 256;
pub const MONO_HIDDEN: usize = 256;
/// Occupancy threshold for labels and binarization.
pub const TAU: f64 = 0.5;

/// Dense layer to a `channels[0] × (R/2^L)³` seed volume, then `L`
/// transposed convolutions doubling the extent down to `out` channels.
#[derive(Clone, Debug)]
struct UpStack {
    fc: Dense,
    deconvs: Vec<Conv>,
    side: usize,
}

impl UpStack {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        resolution: usize,
        input: usize,
        channels: &[usize],
        out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let up = 1usize << channels.len();
        if channels.is_empty() || resolution % up != 0 {
            return Err(Error::invalid(format!(
                "{prefix}: resolution {resolution} is not divisible by {up}"
            )));
        }
        let side = resolution / up;
        let fc = Dense::new(store, &format!("{prefix}.fc"), input, channels[0] * side.pow(3), true, rng)?;
        let mut deconvs = Vec::with_capacity(channels.len());
        for (i, &c) in channels.iter().enumerate() {
            let next = channels.get(i + 1).copied().unwrap_or(out);
            deconvs.push(Conv::new(store, &format!("{prefix}.deconv{}", i + 1), c, next, true, rng)?);
        }
        Ok(Self { fc, deconvs, side })
    }

    fn find(store: &ParamStore, prefix: &str) -> Result<Self> {
        let fc = Dense::find(store, &format!("{prefix}.fc")).ok_or_else(|| missing(&format!("{prefix}.fc")))?;
        let deconvs = find_convs(store, &format!("{prefix}.deconv"), true);
        let first = deconvs.first().ok_or_else(|| missing(&format!("{prefix}.deconv1")))?;
        let cells = fc.output / first.input;
        let side = (cells as f64).cbrt().round() as usize;
        if side.pow(3) * first.input != fc.output {
            return Err(Error::invalid(format!("{prefix}.fc output is not a cubic seed volume")));
        }
        Ok(Self { fc, deconvs, side })
    }

    fn resolution(&self) -> usize {
        self.side << self.deconvs.len()
    }

    fn out_channels(&self) -> usize {
        self.deconvs.last().map_or(0, |d| d.output)
    }

    /// `x: [M, input]` → pre-activation `[M, out, R, R, R]`.
    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let m = s.graph.shape(x)[0];
        let h = self.fc.forward(s, x)?;
        let h = s.graph.relu(h)?;
        let c0 = self.deconvs[0].input;
        let mut h = s.graph.reshape(h, vec![m, c0, self.side, self.side, self.side])?;
        for (i, d) in self.deconvs.iter().enumerate() {
            h = d.forward(s, h)?;
            if i + 1 < self.deconvs.len() {
                h = s.graph.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// Shared decoder from a part embedding to a canonical part volume in `(0, 1)`.
#[derive(Clone, Debug)]
pub struct PartDecoderNet {
    stack: UpStack,
}

impl PartDecoderNet {
    pub fn new(
        store: &mut ParamStore,
        resolution: usize,
        embed_dim: usize,
        channels: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self { stack: UpStack::new(store, "partdec", resolution, embed_dim, channels, 1, rng)? })
    }

    pub fn from_params(store: &ParamStore) -> Result<Self> {
        Ok(Self { stack: UpStack::find(store, "partdec")? })
    }

    pub fn resolution(&self) -> usize {
        self.stack.resolution()
    }

    pub fn embed_dim(&self) -> usize {
        self.stack.fc.input
    }

    /// `parts: [M, n]` → `[M, 1, R, R, R]`.
    pub fn forward(&self, s: &mut Session, parts: Var) -> Result<Var> {
        let shape = s.graph.shape(parts);
        if shape.len() != 2 || shape[1] != self.embed_dim() {
            return Err(Error::shape(
                "decode_part",
                format!("part embeddings {shape:?} for n={}", self.embed_dim()),
            ));
        }
        let logits = self.stack.forward(s, parts)?;
        s.graph.sigmoid(logits)
    }
}

/// Per-part conv features (max-pooled over space) fused with the summed
/// part embeddings, regressed to `12·K` affine parameters.
#[derive(Clone, Debug)]
pub struct LocalizationNet {
    convs: Vec<Conv>,
    feat: Dense,
    hidden: Dense,
    out: Dense,
    parts: usize,
}

impl LocalizationNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        parts: usize,
        embed_dim: usize,
        channels: &[usize],
        features: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut convs = Vec::with_capacity(channels.len());
        let mut input = 1;
        for (i, &c) in channels.iter().enumerate() {
            convs.push(Conv::new(store, &format!("stn.conv{}", i + 1), input, c, false, rng)?);
            input = c;
        }
        let feat = Dense::new(store, "stn.feat", input, features, true, rng)?;
        let hidden_layer = Dense::new(store, "stn.fc1", parts * features + embed_dim, hidden, true, rng)?;
        let out = Dense::new(store, "stn.fc2", hidden, 12 * parts, true, rng)?;
        store.get_mut(out.w).data.fill(0.0);
        let bias = store.get_mut(out.b.expect("fc2 has a bias"));
        for k in 0..parts {
            bias.data[12 * k..12 * k + 12].copy_from_slice(&AffineParams::IDENTITY);
        }
        Ok(Self { convs, feat, hidden: hidden_layer, out, parts })
    }

    pub fn from_params(store: &ParamStore) -> Result<Self> {
        let convs = find_convs(store, "stn.conv", false);
        let get = |n: &str| Dense::find(store, n).ok_or_else(|| missing(n));
        let out = get("stn.fc2")?;
        if out.output % 12 != 0 || convs.is_empty() {
            return Err(Error::invalid("stn parameters do not describe a localization net"));
        }
        Ok(Self {
            convs,
            feat: get("stn.feat")?,
            hidden: get("stn.fc1")?,
            parts: out.output / 12,
            out,
        })
    }

    pub fn parts(&self) -> usize {
        self.parts
    }

    /// `canon: [B·K, 1, R, R, R]`, `e_sum: [B, n]` → `θ: [B·K, 12]`.
    pub fn forward(&self, s: &mut Session, canon: Var, e_sum: Var) -> Result<Var> {
        let cs = s.graph.shape(canon).to_vec();
        let b = s.graph.shape(e_sum)[0];
        if cs.len() != 5 || cs[0] != b * self.parts {
            return Err(Error::shape(
                "localize",
                format!("{cs:?} canonical volumes for {b} shapes of {} parts", self.parts),
            ));
        }
        let mut h = canon;
        for c in &self.convs {
            let y = c.forward(s, h)?;
            h = s.graph.relu(y)?;
        }
        let hs = s.graph.shape(h).to_vec();
        let cells: usize = hs[2..].iter().product();
        let h = s.graph.reshape(h, vec![hs[0], hs[1], cells])?;
        let pooled = s.graph.max_axis(h, 2)?;
        let f = self.feat.forward(s, pooled)?;
        let f = s.graph.relu(f)?;
        let f = s.graph.reshape(f, vec![b, self.parts * self.feat.output])?;
        let fused = s.graph.concat(&[f, e_sum], 1)?;
        let h = self.hidden.forward(s, fused)?;
        let h = s.graph.relu(h)?;
        let theta = self.out.forward(s, h)?;
        s.graph.reshape(theta, vec![b * self.parts, 12])
    }
}

/// `[B·K, n]` part rows → per-shape sums `[B, n]`.
pub fn sum_parts(s: &mut Session, parts: Var, k: usize) -> Result<Var> {
    let shape = s.graph.shape(parts).to_vec();
    if shape.len() != 2 || shape[0] % k != 0 {
        return Err(Error::shape("sum_parts", format!("{shape:?} is not [B·{k}, n]")));
    }
    let b = shape[0] / k;
    let mut sel = Tensor::zeros(vec![b, b * k]);
    for i in 0..b {
        sel.data[i * b * k + i * k..i * b * k + (i + 1) * k].fill(1.0);
    }
    let sel = s.graph.input(sel);
    s.graph.matmul(sel, parts)
}

/// Intermediates of one differentiable compose pass.
#[derive(Clone, Copy, Debug)]
pub struct ComposeVars {
    /// `[B·K, 1, R, R, R]` decoded canonical parts.
    pub canon: Var,
    /// `[B·K, 12]` predicted transforms.
    pub theta: Var,
    /// `[B·K, R, R, R]` parts placed in the shape frame.
    pub placed: Var,
}

/// Localize and place already-decoded canonical parts.
pub fn place_decoded(
    s: &mut Session,
    localizer: &LocalizationNet,
    canon: Var,
    parts: Var,
) -> Result<ComposeVars> {
    let e_sum = sum_parts(s, parts, localizer.parts())?;
    let theta = localizer.forward(s, canon, e_sum)?;
    let cs = s.graph.shape(canon).to_vec();
    let vols = s.graph.reshape(canon, vec![cs[0], cs[2], cs[3], cs[4]])?;
    let placed = s.graph.grid_sample3(vols, theta)?;
    Ok(ComposeVars { canon, theta, placed })
}

/// Full differentiable compose of `[B·K, n]` part embeddings.
pub fn compose_vars(
    s: &mut Session,
    decoder: &PartDecoderNet,
    localizer: &LocalizationNet,
    parts: Var,
) -> Result<ComposeVars> {
    let canon = decoder.forward(s, parts)?;
    place_decoded(s, localizer, canon, parts)
}

/// `[B·K, V]` placed parts → per-shape occupancy `[B, V]` (max over parts).
pub fn occupancy_of(s: &mut Session, placed: Var, k: usize) -> Result<Var> {
    let shape = s.graph.shape(placed).to_vec();
    let v: usize = shape[1..].iter().product();
    let b = shape[0] / k;
    let grouped = s.graph.reshape(placed, vec![b, k, v])?;
    s.graph.max_axis(grouped, 1)
}

/// Label of each voxel: `argmax_k` of the part values if the maximum is at
/// least `tau`, otherwise empty. Ties go to the lowest part index.
pub fn assemble(transformed: &[&[f64]], resolution: usize, schema: &PartSchema, tau: f64) -> Result<LabeledGrid> {
    if transformed.len() != schema.len() {
        return Err(Error::Schema(format!(
            "{} part volumes for a {}-part schema",
            transformed.len(),
            schema.len()
        )));
    }
    let n = resolution.pow(3);
    if let Some(bad) = transformed.iter().find(|v| v.len() != n) {
        return Err(Error::shape("assemble", format!("{} values for R={resolution}", bad.len())));
    }
    let mut grid = LabeledGrid::empty(resolution, schema.clone());
    for i in 0..n {
        let mut best = 0;
        for k in 1..transformed.len() {
            if transformed[k][i] > transformed[best][i] {
                best = k;
            }
        }
        if transformed[best][i] >= tau {
            grid.set_index(i, best as u8 + 1);
        }
    }
    Ok(grid)
}

/// Places given canonical volumes with given transforms and assembles them.
pub fn place_and_assemble(
    canonicals: &[Vec<f64>],
    transforms: &[AffineParams],
    resolution: usize,
    schema: &PartSchema,
) -> Result<LabeledGrid> {
    let placed: Vec<Vec<f64>> = canonicals
        .iter()
        .zip(transforms)
        .map(|(c, t)| resample(c, resolution, t))
        .collect();
    let refs: Vec<&[f64]> = placed.iter().map(Vec::as_slice).collect();
    assemble(&refs, resolution, schema, TAU)
}

/// Everything compose produces for one shape.
#[derive(Clone, Debug)]
pub struct ComposedShape {
    pub grid: LabeledGrid,
    pub canonicals: Vec<Vec<f64>>,
    pub transforms: Vec<AffineParams>,
    pub placed: Vec<Vec<f64>>,
}

/// Splits batched compose values into per-shape results.
pub fn unpack_composed(
    s: &Session,
    out: &ComposeVars,
    schema: &PartSchema,
) -> Result<Vec<ComposedShape>> {
    let k = schema.len();
    let (canon, theta, placed) = (s.graph.value(out.canon), s.graph.value(out.theta), s.graph.value(out.placed));
    let r = canon.shape[2];
    let b = canon.rows() / k;
    (0..b)
        .map(|i| {
            let rows = i * k..(i + 1) * k;
            let placed_i: Vec<Vec<f64>> = rows.clone().map(|j| placed.row(j).to_vec()).collect();
            let refs: Vec<&[f64]> = placed_i.iter().map(Vec::as_slice).collect();
            Ok(ComposedShape {
                grid: assemble(&refs, r, schema, TAU)?,
                canonicals: rows.clone().map(|j| canon.row(j).to_vec()).collect(),
                transforms: rows.map(|j| AffineParams::from_slice(theta.row(j))).collect(),
                placed: placed_i,
            })
        })
        .collect()
}

/// The no-STN ablation: one decoder from the summed part embeddings straight
/// to `K + 1` per-voxel class probabilities (channel 0 is empty space).
#[derive(Clone, Debug)]
pub struct MonolithicNet {
    fc: Dense,
    stack: UpStack,
}

impl MonolithicNet {
    pub fn new(
        store: &mut ParamStore,
        resolution: usize,
        parts: usize,
        embed_dim: usize,
        hidden: usize,
        channels: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fc = Dense::new(store, "mono.fc0", embed_dim, hidden, true, rng)?;
        let stack = UpStack::new(store, "mono", resolution, hidden, channels, parts + 1, rng)?;
        Ok(Self { fc, stack })
    }

    pub fn from_params(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            fc: Dense::find(store, "mono.fc0").ok_or_else(|| missing("mono.fc0"))?,
            stack: UpStack::find(store, "mono")?,
        })
    }

    pub fn parts(&self) -> usize {
        self.stack.out_channels() - 1
    }

    pub fn resolution(&self) -> usize {
        self.stack.resolution()
    }

    /// `parts: [B·K, n]` → class probabilities `[B, K+1, R, R, R]`.
    pub fn forward(&self, s: &mut Session, parts: Var) -> Result<Var> {
        let e_sum = sum_parts(s, parts, self.parts())?;
        let h = self.fc.forward(s, e_sum)?;
        let h = s.graph.relu(h)?;
        let logits = self.stack.forward(s, h)?;
        s.graph.softmax(logits)
    }
}

/// Per-voxel argmax of `[K+1, R³]` class probabilities; ties go to the lowest class.
pub fn labels_from_probs(probs: &[f64], resolution: usize, schema: &PartSchema) -> LabeledGrid {
    let n = resolution.pow(3);
    let c = schema.len() + 1;
    debug_assert_eq!(probs.len(), c * n);
    let mut grid = LabeledGrid::empty(resolution, schema.clone());
    for i in 0..n {
        let mut best = 0;
        for ch in 1..c {
            if probs[ch * n + i] > probs[best * n + i] {
                best = ch;
            }
        }
        grid.set_index(i, best as u8);
    }
    grid
}
