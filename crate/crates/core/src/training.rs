//! Composite loss, cycle-consistency mixing and the three-stage schedule.
//!
//! Stage A fits encoder, projections and part decoder to canonical parts
//! under the partition-of-identity penalty. Stage B fits the localization net
//! alone to ground-truth transforms. Stage C trains everything jointly with
//! the cycle term. One optimizer runs through all stages, so later stages
//! resume from the moments earlier stages built; parameters frozen in a
//! stage keep theirs untouched. The learning-rate schedule runs on the
//! global epoch counter.

use crate::autodiff::{Adam, AdamConfig, ParamId, ParamStore, Session, Tensor, Var};
use crate::composer::{compose_vars, occupancy_of, place_decoded, ComposeVars, TAU};
use crate::decomposer::grids_tensor;
use crate::error::{Error, Result};
use crate::model::{Composer, ComposerKind, ModelConfig, ShapeModel};
use crate::synthdata::{shape_seed, Dataset};
use crate::voxel::{extract_parts, miou, LabeledGrid, OccupancyGrid, PartSet};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub pi: f64,
    pub part: f64,
    pub trans: f64,
    pub cycle: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { pi: 0.1, part: 100.0, trans: 0.1, cycle: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.pi, self.part, self.trans, self.cycle];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::invalid(format!("loss weights must be finite and nonnegative: {self:?}")))
        }
    }
}

/// Raw (unweighted) loss values; `None` where a term was not evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub pi: Option<f64>,
    pub part: Option<f64>,
    pub trans: Option<f64>,
    pub cycle: Option<f64>,
}

/// `w_PI·L_PI + w_part·L_part + w_trans·L_trans + w_cycle·L_cycle`; absent terms count as 0.
pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> f64 {
    let t = |x: Option<f64>| x.unwrap_or(0.0);
    w.pi * t(terms.pi) + w.part * t(terms.part) + w.trans * t(terms.trans) + w.cycle * t(terms.cycle)
}

/// BCE summed over parts and voxels, averaged over the batch.
/// `pred` and `target` are `[B·K, …]`; absent parts carry all-zero targets.
pub fn part_loss(s: &mut Session, pred: Var, target: &Tensor, batch: usize) -> Result<Var> {
    let l = s.graph.bce(pred, target)?;
    s.graph.scale(l, 1.0 / batch as f64)
}

/// Squared L2 over the 12 parameters of present parts, averaged over the batch.
pub fn trans_loss(s: &mut Session, theta: Var, target: &Tensor, present: &[bool], batch: usize) -> Result<Var> {
    let mask: Vec<f64> = present
        .iter()
        .flat_map(|&p| [if p { 1.0 } else { 0.0 }; 12])
        .collect();
    let l = s.graph.l2(theta, target, Some(&mask))?;
    s.graph.scale(l, 1.0 / batch as f64)
}

/// One independent permutation of the batch per part index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mixing {
    /// `perms[k][j]`: donor shape of part `k` for mixed shape `j`.
    pub perms: Vec<Vec<usize>>,
}

impl Mixing {
    pub fn identity(batch: usize, parts: usize) -> Self {
        Self { perms: vec![(0..batch).collect(); parts] }
    }

    /// Uniform independent permutations; at least two shapes are required.
    pub fn sample(batch: usize, parts: usize, rng: &mut impl Rng) -> Result<Self> {
        if batch < 2 {
            return Err(Error::invalid(format!("mixing needs at least 2 shapes, got {batch}")));
        }
        let perms = (0..parts)
            .map(|_| {
                let mut p: Vec<usize> = (0..batch).collect();
                p.shuffle(rng);
                p
            })
            .collect();
        Ok(Self { perms })
    }

    pub fn batch(&self) -> usize {
        self.perms.first().map_or(0, Vec::len)
    }

    pub fn parts(&self) -> usize {
        self.perms.len()
    }

    /// Row gather for mixing `[B·K, …]` part rows: `j·K + k ← π_k(j)·K + k`.
    pub fn mix_index(&self) -> Vec<usize> {
        let (b, k) = (self.batch(), self.parts());
        (0..b * k).map(|r| self.perms[r % k][r / k] * k + r % k).collect()
    }

    /// Inverse of [`Mixing::mix_index`]: `i·K + k ← π_k⁻¹(i)·K + k`.
    pub fn demix_index(&self) -> Vec<usize> {
        let (b, k) = (self.batch(), self.parts());
        let mut inv = vec![vec![0; b]; k];
        for (p, ip) in self.perms.iter().zip(&mut inv) {
            for (j, &src) in p.iter().enumerate() {
                ip[src] = j;
            }
        }
        (0..b * k).map(|r| inv[r % k][r / k] * k + r % k).collect()
    }
}

fn gather(rows: &Tensor, idx: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(rows.len());
    for &i in idx {
        data.extend_from_slice(rows.row(i));
    }
    Tensor::new(rows.shape.clone(), data)
}

/// Mixes `[B·K, n]` part embeddings; returns the mixed batch and the draw.
pub fn cycle_mix(parts: &Tensor, k: usize, rng: &mut impl Rng) -> Result<(Tensor, Mixing)> {
    if k == 0 || parts.rows() % k != 0 {
        return Err(Error::shape("cycle_mix", format!("{:?} rows for K={k}", parts.shape)));
    }
    let m = Mixing::sample(parts.rows() / k, k, rng)?;
    Ok((gather(parts, &m.mix_index()), m))
}

/// Restores the original shape association after [`cycle_mix`].
pub fn demix(parts: &Tensor, mixing: &Mixing) -> Tensor {
    gather(parts, &mixing.demix_index())
}

/// Per-shape occupancy `[B, R³]` produced by either composer.
fn composed_occupancy(s: &mut Session, model: &ShapeModel, parts: Var) -> Result<Var> {
    let k = model.parts();
    match &model.composer {
        Composer::Stn { decoder, localizer } => {
            let out = compose_vars(s, decoder, localizer, parts)?;
            occupancy_of(s, out.placed, k)
        }
        Composer::Monolithic(m) => {
            let probs = m.forward(s, parts)?;
            mono_occupancy(s, probs, k)
        }
    }
}

/// `1 − p(empty)` from `[B, K+1, R, R, R]` class probabilities.
fn mono_occupancy(s: &mut Session, probs: Var, k: usize) -> Result<Var> {
    let shape = s.graph.shape(probs).to_vec();
    let b = shape[0];
    let v: usize = shape[2..].iter().product();
    let rows = s.graph.reshape(probs, vec![b * (k + 1), v])?;
    let bg_rows: Vec<usize> = (0..b).map(|i| i * (k + 1)).collect();
    let bg = s.graph.gather_rows(rows, &bg_rows)?;
    let neg = s.graph.scale(bg, -1.0)?;
    let ones = s.graph.input(Tensor::filled(vec![b, v], 1.0));
    s.graph.add(ones, neg)
}

/// Mix → compose → binarize → decompose → demix → compose, scored by BCE
/// of the final occupancy against the input grids, averaged over voxels and
/// the batch.
///
/// `first` carries the already-decoded canonical parts of the unmixed
/// batch; reusing them is exact because the part decoder acts row-wise.
pub fn cycle_loss(
    s: &mut Session,
    model: &ShapeModel,
    parts: Var,
    first: Option<&ComposeVars>,
    grids: &Tensor,
    mixing: &Mixing,
) -> Result<Var> {
    let k = model.parts();
    let b = mixing.batch();
    let r = model.resolution();
    let mix = mixing.mix_index();
    let mixed_parts = s.graph.gather_rows(parts, &mix)?;
    let occ = match (&model.composer, first) {
        (Composer::Stn { localizer, .. }, Some(first)) => {
            let canon = s.graph.gather_rows(first.canon, &mix)?;
            let out = place_decoded(s, localizer, canon, mixed_parts)?;
            occupancy_of(s, out.placed, k)?
        }
        _ => composed_occupancy(s, model, mixed_parts)?,
    };
    let binary = s.graph.binarize_st(occ, TAU)?;
    let x2 = s.graph.reshape(binary, vec![b, 1, r, r, r])?;
    let e2 = model.encoder.forward(s, x2)?;
    let p2 = model.projections.forward(s, e2)?;
    let restored = s.graph.gather_rows(p2, &mixing.demix_index())?;
    let occ2 = composed_occupancy(s, model, restored)?;
    let target = Tensor::new(vec![b, r * r * r], grids.data.clone());
    let l = s.graph.bce(occ2, &target)?;
    s.graph.scale(l, 1.0 / target.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    /// Encoder, projections and part decoder on part reconstruction.
    A,
    /// Localization net alone on transform regression.
    B,
    /// Everything, with the cycle term.
    C,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::A => "A",
            Stage::B => "B",
            Stage::C => "C",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    /// Projections stay at their block-diagonal initialization.
    pub fixed_projection: bool,
    /// Monolithic composer instead of decoder plus spatial transformer.
    pub no_stn: bool,
    /// Stage C without the cycle term.
    pub no_cycle: bool,
}

/// Default step size for the small synthetic set. The optimizer's own default
/// (1e-4) leaves reconstruction far from converged in the desk epoch budget.
pub const DESK_LR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage_epochs: [usize; 3],
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub seed: u64,
    pub ablation: Ablation,
    /// Resolution the data must have; `None` accepts the dataset's.
    pub resolution: Option<usize>,
    pub embed_dim: usize,
    pub encoder_channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    pub stn_channels: Vec<usize>,
    pub stn_features: usize,
    pub stn_hidden: usize,
    pub mono_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::new(0, 0);
        Self {
            stage_epochs: [50, 20, 30],
            batch_size: 16,
            adam: AdamConfig { lr: DESK_LR, ..AdamConfig::default() },
            weights: LossWeights::default(),
            seed: 0,
            ablation: Ablation::default(),
            resolution: None,
            embed_dim: m.embed_dim,
            encoder_channels: m.encoder_channels,
            decoder_channels: m.decoder_channels,
            stn_channels: m.stn_channels,
            stn_features: m.stn_features,
            stn_hidden: m.stn_hidden,
            mono_hidden: m.mono_hidden,
        }
    }
}

/// `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("config line {}: expected `key = value`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::invalid(format!("config line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::invalid(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::invalid(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|x| parse(key, x.trim())).collect()
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "stage_a_epochs" => self.stage_epochs[0] = parse(key, v)?,
            "stage_b_epochs" => self.stage_epochs[1] = parse(key, v)?,
            "stage_c_epochs" => self.stage_epochs[2] = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.adam.lr = parse(key, v)?,
            "beta1" => self.adam.beta1 = parse(key, v)?,
            "beta2" => self.adam.beta2 = parse(key, v)?,
            "eps" => self.adam.eps = parse(key, v)?,
            "lr_decay" => self.adam.decay_rate = parse(key, v)?,
            "lr_decay_epochs" => self.adam.decay_epochs = parse(key, v)?,
            "w_pi" => self.weights.pi = parse(key, v)?,
            "w_part" => self.weights.part = parse(key, v)?,
            "w_trans" => self.weights.trans = parse(key, v)?,
            "w_cycle" => self.weights.cycle = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "fixed_projection" => self.ablation.fixed_projection = parse_bool(key, v)?,
            "no_stn" => self.ablation.no_stn = parse_bool(key, v)?,
            "no_cycle" => self.ablation.no_cycle = parse_bool(key, v)?,
            "resolution" => self.resolution = Some(parse(key, v)?),
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "encoder_channels" => self.encoder_channels = parse_list(key, v)?,
            "decoder_channels" => self.decoder_channels = parse_list(key, v)?,
            "stn_channels" => self.stn_channels = parse_list(key, v)?,
            "stn_features" => self.stn_features = parse(key, v)?,
            "stn_hidden" => self.stn_hidden = parse(key, v)?,
            "mono_hidden" => self.mono_hidden = parse(key, v)?,
            _ => return Err(Error::invalid(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in parse_kv(text)? {
            c.set(&k, &v)?;
        }
        Ok(c)
    }

    /// Every setting as `key = value` lines, readable by [`TrainConfig::from_kv_text`].
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let a = &self.adam;
        let w = &self.weights;
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("stage_a_epochs", self.stage_epochs[0].to_string());
        line("stage_b_epochs", self.stage_epochs[1].to_string());
        line("stage_c_epochs", self.stage_epochs[2].to_string());
        line("batch_size", self.batch_size.to_string());
        line("lr", a.lr.to_string());
        line("beta1", a.beta1.to_string());
        line("beta2", a.beta2.to_string());
        line("eps", a.eps.to_string());
        line("lr_decay", a.decay_rate.to_string());
        line("lr_decay_epochs", a.decay_epochs.to_string());
        line("w_pi", w.pi.to_string());
        line("w_part", w.part.to_string());
        line("w_trans", w.trans.to_string());
        line("w_cycle", w.cycle.to_string());
        line("seed", self.seed.to_string());
        line("fixed_projection", self.ablation.fixed_projection.to_string());
        line("no_stn", self.ablation.no_stn.to_string());
        line("no_cycle", self.ablation.no_cycle.to_string());
        if let Some(r) = self.resolution {
            line("resolution", r.to_string());
        }
        line("embed_dim", self.embed_dim.to_string());
        line("encoder_channels", list(&self.encoder_channels));
        line("decoder_channels", list(&self.decoder_channels));
        line("stn_channels", list(&self.stn_channels));
        line("stn_features", self.stn_features.to_string());
        line("stn_hidden", self.stn_hidden.to_string());
        line("mono_hidden", self.mono_hidden.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_epochs.iter().any(|&e| e == 0) {
            return Err(Error::invalid("stage epochs must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be at least 2 for cycle mixing"));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite() && a.eps > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return Err(Error::invalid(format!("bad optimizer settings {a:?}")));
        }
        self.weights.validate()
    }

    pub fn model_config(&self, resolution: usize, parts: usize) -> ModelConfig {
        ModelConfig {
            resolution,
            parts,
            embed_dim: self.embed_dim,
            encoder_channels: self.encoder_channels.clone(),
            decoder_channels: self.decoder_channels.clone(),
            stn_channels: self.stn_channels.clone(),
            stn_features: self.stn_features,
            stn_hidden: self.stn_hidden,
            mono_hidden: self.mono_hidden,
            composer: if self.ablation.no_stn { ComposerKind::Monolithic } else { ComposerKind::Stn },
        }
    }

    /// Weights of the objective optimized in `stage`.
    pub fn stage_weights(&self, stage: Stage) -> LossWeights {
        let w = self.weights;
        match stage {
            Stage::A => LossWeights { trans: 0.0, cycle: 0.0, ..w },
            Stage::B => LossWeights { pi: 0.0, part: 0.0, cycle: 0.0, ..w },
            Stage::C if self.ablation.no_cycle => LossWeights { cycle: 0.0, ..w },
            Stage::C => w,
        }
    }
}

/// Ground truth the losses need for one shape.
#[derive(Clone, Debug)]
pub struct Targets {
    pub grid: LabeledGrid,
    pub occupancy: OccupancyGrid,
    pub parts: PartSet,
}

impl Targets {
    pub fn new(grid: &LabeledGrid) -> Self {
        Self { grid: grid.clone(), occupancy: grid.occupancy(), parts: extract_parts(grid) }
    }
}

/// Batched tensors for a list of shapes.
struct Batch {
    size: usize,
    grids: Tensor,
    canon: Tensor,
    theta: Tensor,
    present: Vec<bool>,
    /// One-hot labels `[B, K+1, R, R, R]`; only for the monolithic composer.
    one_hot: Option<Tensor>,
}

impl Batch {
    fn new(items: &[&Targets], one_hot: bool) -> Result<Self> {
        let occ: Vec<&OccupancyGrid> = items.iter().map(|t| &t.occupancy).collect();
        let grids = grids_tensor(&occ)?;
        let r = grids.shape[2];
        let k = items[0].parts.len();
        let v = r * r * r;
        let mut canon = Vec::with_capacity(items.len() * k * v);
        let mut theta = Vec::with_capacity(items.len() * k * 12);
        let mut present = Vec::with_capacity(items.len() * k);
        for t in items {
            for j in 0..k {
                canon.extend_from_slice(&t.parts.parts[j]);
                theta.extend_from_slice(&t.parts.transforms[j].to_array());
                present.push(t.parts.present[j]);
            }
        }
        let one_hot = one_hot.then(|| {
            let mut d = vec![0.0; items.len() * (k + 1) * v];
            for (b, t) in items.iter().enumerate() {
                for (i, &l) in t.grid.labels().iter().enumerate() {
                    d[(b * (k + 1) + l as usize) * v + i] = 1.0;
                }
            }
            Tensor::new(vec![items.len(), k + 1, r, r, r], d)
        });
        Ok(Self {
            size: items.len(),
            grids,
            canon: Tensor::new(vec![items.len() * k, 1, r, r, r], canon),
            theta: Tensor::new(vec![items.len() * k, 12], theta),
            present,
            one_hot,
        })
    }
}

/// Loss variables of one forward pass.
struct Forward {
    terms: [Option<Var>; 4],
}

impl Forward {
    fn values(&self, s: &Session) -> LossTerms {
        let v = |x: Option<Var>| x.map(|x| s.graph.value(x).item());
        LossTerms { pi: v(self.terms[0]), part: v(self.terms[1]), trans: v(self.terms[2]), cycle: v(self.terms[3]) }
    }

    fn objective(&self, s: &mut Session, w: &LossWeights) -> Result<Option<Var>> {
        let ws = [w.pi, w.part, w.trans, w.cycle];
        let mut acc: Option<Var> = None;
        for (t, &wt) in self.terms.iter().zip(&ws) {
            if let Some(t) = *t {
                if wt == 0.0 {
                    continue;
                }
                let x = s.graph.scale(t, wt)?;
                acc = Some(match acc {
                    Some(a) => s.graph.add(a, x)?,
                    None => x,
                });
            }
        }
        Ok(acc)
    }
}

/// Which terms a pass evaluates.
#[derive(Clone, Copy, Debug)]
struct Wanted {
    pi: bool,
    part: bool,
    trans: bool,
    cycle: bool,
}

fn forward(
    s: &mut Session,
    model: &ShapeModel,
    batch: &Batch,
    want: Wanted,
    mixing: Option<&Mixing>,
) -> Result<Forward> {
    let mut terms = [None; 4];
    if want.pi {
        terms[0] = Some(model.projections.pi_loss(s)?.total);
    }
    if !(want.part || want.trans || want.cycle) {
        return Ok(Forward { terms });
    }
    let x = s.graph.input(batch.grids.clone());
    let e = model.encoder.forward(s, x)?;
    let p = model.projections.forward(s, e)?;
    let first = match &model.composer {
        Composer::Stn { decoder, localizer } => {
            let canon = decoder.forward(s, p)?;
            if want.part {
                terms[1] = Some(part_loss(s, canon, &batch.canon, batch.size)?);
            }
            if want.trans || want.cycle {
                let out = place_decoded(s, localizer, canon, p)?;
                if want.trans {
                    terms[2] = Some(trans_loss(s, out.theta, &batch.theta, &batch.present, batch.size)?);
                }
                Some(out)
            } else {
                None
            }
        }
        Composer::Monolithic(m) => {
            if want.part {
                let probs = m.forward(s, p)?;
                let target = batch.one_hot.as_ref().expect("one-hot targets for the monolithic composer");
                let ce = s.graph.cross_entropy(probs, target)?;
                terms[1] = Some(s.graph.scale(ce, 1.0 / batch.size as f64)?);
            }
            None
        }
    };
    if want.cycle {
        let mixing = mixing.expect("cycle term needs a mixing draw");
        terms[3] = Some(cycle_loss(s, model, p, first.as_ref(), &batch.grids, mixing)?);
    }
    Ok(Forward { terms })
}

/// One row of the training and validation logs.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based, counted across stages.
    pub epoch: usize,
    pub stage: Stage,
    pub train: LossTerms,
    pub train_total: f64,
    pub val: LossTerms,
    pub val_total: f64,
    pub val_miou: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "epoch,stage,L_PI,L_part,L_trans,L_cycle,total,val_mIoU";

fn log_line(epoch: usize, stage: Stage, t: &LossTerms, total: f64, val_miou: f64) -> String {
    let f = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
    format!(
        "{epoch},{},{},{},{},{},{total},{val_miou}",
        stage.name(),
        f(t.pi),
        f(t.part),
        f(t.trans),
        f(t.cycle)
    )
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_miou: f64,
    pub out_dir: PathBuf,
}

impl TrainReport {
    pub fn final_checkpoint(&self) -> PathBuf {
        self.out_dir.join(FINAL_CKPT)
    }
}

pub const STAGE_A_CKPT: &str = "stage_a.ckpt";
pub const STAGE_B_CKPT: &str = "stage_b.ckpt";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const VAL_LOG: &str = "val_log.csv";
pub const CONFIG_FILE: &str = "config.txt";

fn trainable(stage: Stage, ablation: &Ablation, name: &str) -> bool {
    let proj = name.starts_with("proj.") && !ablation.fixed_projection;
    match stage {
        Stage::A => name.starts_with("encoder.") || proj || name.starts_with("partdec.") || name.starts_with("mono."),
        Stage::B => name.starts_with("stn."),
        Stage::C => !name.starts_with("proj.") || proj,
    }
}

/// Batches of `size` in a seeded shuffled order; a trailing singleton joins
/// the previous batch so every batch can be mixed.
fn epoch_batches(n: usize, size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shape_seed(seed, 0x5348_5546 ^ epoch as u64));
    order.shuffle(&mut rng);
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").extend(last);
    }
    out
}

/// Stage-B inputs: everything upstream of the localizer is frozen, so its
/// inputs are computed once.
struct FrozenInputs {
    canon: Tensor,
    parts: Tensor,
}

fn frozen_inputs(model: &ShapeModel, items: &[&Targets]) -> Result<FrozenInputs> {
    let Composer::Stn { decoder, .. } = &model.composer else {
        return Err(Error::invalid("stage B needs the spatial-transformer composer"));
    };
    let mut canon = Vec::new();
    let mut parts = Vec::new();
    for chunk in items.chunks(crate::model::INFER_CHUNK) {
        let occ: Vec<&OccupancyGrid> = chunk.iter().map(|t| &t.occupancy).collect();
        let mut s = Session::frozen(&model.params);
        let x = s.graph.input(grids_tensor(&occ)?);
        let e = model.encoder.forward(&mut s, x)?;
        let p = model.projections.forward(&mut s, e)?;
        let c = decoder.forward(&mut s, p)?;
        canon.extend_from_slice(&s.graph.value(c).data);
        parts.extend_from_slice(&s.graph.value(p).data);
    }
    let (r, k, n) = (model.resolution(), model.parts(), model.embed_dim());
    let rows = items.len() * k;
    Ok(FrozenInputs {
        canon: Tensor::new(vec![rows, 1, r, r, r], canon),
        parts: Tensor::new(vec![rows, n], parts),
    })
}

fn stage_b_step(
    s: &mut Session,
    model: &ShapeModel,
    frozen: &FrozenInputs,
    ids: &[usize],
    targets: &[&Targets],
) -> Result<Var> {
    let Composer::Stn { localizer, .. } = &model.composer else {
        unreachable!("checked by frozen_inputs")
    };
    let k = model.parts();
    let rows: Vec<usize> = ids.iter().flat_map(|&i| (0..k).map(move |j| i * k + j)).collect();
    let canon = s.graph.input(gather_rows_of(&frozen.canon, &rows));
    let parts = s.graph.input(gather_rows_of(&frozen.parts, &rows));
    let out = place_decoded(s, localizer, canon, parts)?;
    let items: Vec<&Targets> = ids.iter().map(|&i| targets[i]).collect();
    let b = Batch::new(&items, false)?;
    trans_loss(s, out.theta, &b.theta, &b.present, b.size)
}

fn gather_rows_of(t: &Tensor, rows: &[usize]) -> Tensor {
    let mut shape = t.shape.clone();
    shape[0] = rows.len();
    let mut data = Vec::with_capacity(rows.len() * t.row_len());
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::new(shape, data)
}

/// Mean mIoU of reconstructions against ground truth.
pub fn mean_reconstruction_miou(model: &ShapeModel, targets: &[&Targets]) -> Result<f64> {
    let occ: Vec<&OccupancyGrid> = targets.iter().map(|t| &t.occupancy).collect();
    let schema = targets[0].grid.schema();
    let out = model.reconstruct(&occ, schema)?;
    let mut sum = 0.0;
    for (o, t) in out.iter().zip(targets) {
        sum += miou(&o.grid, &t.grid)?;
    }
    Ok(sum / targets.len() as f64)
}

/// Every loss term on a held-out set, batch-averaged over fixed batches.
fn evaluate_terms(model: &ShapeModel, targets: &[&Targets], batch_size: usize, seed: u64) -> Result<LossTerms> {
    let mono = model.kind() == ComposerKind::Monolithic;
    let want = Wanted { pi: true, part: true, trans: !mono, cycle: targets.len() >= 2 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = [0.0; 4];
    let mut seen = [false; 4];
    let batches = epoch_batches(targets.len(), batch_size, seed, usize::MAX);
    let mut weight = 0.0;
    for ids in &batches {
        let items: Vec<&Targets> = ids.iter().map(|&i| targets[i]).collect();
        let b = Batch::new(&items, mono)?;
        let mixing = if want.cycle && b.size >= 2 { Some(Mixing::sample(b.size, model.parts(), &mut rng)?) } else { None };
        let w = Wanted { cycle: mixing.is_some(), ..want };
        let mut s = Session::frozen(&model.params);
        let f = forward(&mut s, model, &b, w, mixing.as_ref())?;
        let v = f.values(&s);
        for (j, t) in [v.pi, v.part, v.trans, v.cycle].into_iter().enumerate() {
            if let Some(t) = t {
                acc[j] += t * b.size as f64;
                seen[j] = true;
            }
        }
        weight += b.size as f64;
    }
    let get = |j: usize| seen[j].then(|| acc[j] / weight);
    Ok(LossTerms { pi: get(0), part: get(1), trans: get(2), cycle: get(3) })
}

fn finite_or_diverged(v: f64, epoch: usize, last: &Path) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { epoch, checkpoint: last.to_path_buf() })
    }
}

/// Runs all stages on `dataset.train`, validating on `dataset.val`, and
/// writes checkpoints, logs and the resolved config into `out`.
///
/// `progress` sees every epoch record as soon as it is complete.
pub fn train(
    dataset: &Dataset,
    config: &TrainConfig,
    out: &Path,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    config.validate()?;
    let schema = dataset.schema();
    let r = dataset.config.resolution;
    if let Some(want) = config.resolution {
        if want != r {
            return Err(Error::Schema(format!("config resolution {want}, dataset resolution {r}")));
        }
    }
    if let Some(g) = dataset.shapes.iter().find(|g| g.schema() != schema || g.resolution() != r) {
        return Err(Error::Schema(format!(
            "dataset mixes layouts: {:?} at R={} vs {:?} at R={r}",
            g.schema().names(),
            g.resolution(),
            schema.names()
        )));
    }
    let all: Vec<Targets> = dataset.shapes.iter().map(Targets::new).collect();
    let train_set: Vec<&Targets> = dataset.train.iter().map(|&i| &all[i]).collect();
    let val_set: Vec<&Targets> = dataset.val.iter().map(|&i| &all[i]).collect();
    if train_set.len() < 2 || val_set.is_empty() {
        return Err(Error::invalid("training needs at least 2 training and 1 validation shape"));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let write = |name: &str, text: &str| -> Result<()> {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write(CONFIG_FILE, &config.to_kv())?;

    let mut model = ShapeModel::new(&config.model_config(r, schema.len()), config.seed)?;
    let last = out.join(LAST_CKPT);
    model.save(&last)?;
    let mono = model.kind() == ComposerKind::Monolithic;
    let ablation = config.ablation;

    let mut train_log = format!("{LOG_HEADER}\n");
    let mut val_log = format!("{LOG_HEADER}\n");
    let mut records = Vec::new();
    let mut best = (0usize, f64::NEG_INFINITY);
    let mut epoch = 0usize;
    let mut mix_rng = ChaCha8Rng::seed_from_u64(shape_seed(config.seed, 0x4359_434C));
    let mut adam = Adam::new(config.adam);

    for stage in [Stage::A, Stage::B, Stage::C] {
        if mono && stage == Stage::B {
            model.save(&out.join(STAGE_B_CKPT))?;
            continue;
        }
        let weights = config.stage_weights(stage);
        let ids: Vec<ParamId> = model
            .params
            .ids()
            .filter(|&id| trainable(stage, &ablation, model.params.name(id)))
            .collect();
        let frozen = if stage == Stage::B { Some(frozen_inputs(&model, &train_set)?) } else { None };
        let want = Wanted {
            pi: weights.pi > 0.0,
            part: weights.part > 0.0,
            trans: weights.trans > 0.0 && !mono,
            cycle: weights.cycle > 0.0,
        };
        for _ in 0..config.stage_epochs[stage as usize] {
            let lr = config.adam.lr_at_epoch(epoch);
            epoch += 1;
            let mut acc = [0.0; 4];
            let mut seen = [false; 4];
            let mut n = 0.0;
            for batch_ids in epoch_batches(train_set.len(), config.batch_size, config.seed, epoch) {
                let selected = |id: ParamId| ids.binary_search(&id).is_ok();
                let (grads, terms, size) = {
                    let mut s = Session::with_trainable(&model.params, selected);
                    let (loss, terms, size) = if let Some(frozen) = &frozen {
                        let l = stage_b_step(&mut s, &model, frozen, &batch_ids, &train_set)?;
                        let terms = LossTerms { trans: Some(s.graph.value(l).item()), ..Default::default() };
                        let obj = s.graph.scale(l, weights.trans)?;
                        (obj, terms, batch_ids.len())
                    } else {
                        let items: Vec<&Targets> = batch_ids.iter().map(|&i| train_set[i]).collect();
                        let b = Batch::new(&items, mono)?;
                        let mixing = if want.cycle { Some(Mixing::sample(b.size, model.parts(), &mut mix_rng)?) } else { None };
                        let f = forward(&mut s, &model, &b, want, mixing.as_ref())?;
                        let terms = f.values(&s);
                        let obj = f.objective(&mut s, &weights)?.ok_or_else(|| Error::invalid("stage objective has no terms"))?;
                        (obj, terms, b.size)
                    };
                    finite_or_diverged(s.graph.value(loss).item(), epoch, &last)?;
                    let grads = s.gradients(loss).map_err(|e| match e {
                        Error::NonFinite { .. } => Error::Diverged { epoch, checkpoint: last.clone() },
                        other => other,
                    })?;
                    (grads, terms, size)
                };
                if grads.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
                    return Err(Error::Diverged { epoch, checkpoint: last.clone() });
                }
                adam.step(&mut model.params, &grads, lr)?;
                for (j, t) in [terms.pi, terms.part, terms.trans, terms.cycle].into_iter().enumerate() {
                    if let Some(t) = t {
                        acc[j] += t * size as f64;
                        seen[j] = true;
                    }
                }
                n += size as f64;
            }
            let get = |j: usize| seen[j].then(|| acc[j] / n);
            let train_terms = LossTerms { pi: get(0), part: get(1), trans: get(2), cycle: get(3) };
            let train_total = total_loss(&train_terms, &weights);
            let val = evaluate_terms(&model, &val_set, config.batch_size, shape_seed(config.seed, epoch as u64))?;
            let val_total = total_loss(&val, &config.stage_weights(Stage::C));
            let val_miou = mean_reconstruction_miou(&model, &val_set)?;
            finite_or_diverged(train_total, epoch, &last)?;

            model.save(&last)?;
            if val_miou > best.1 {
                best = (epoch, val_miou);
                model.save(&out.join(BEST_CKPT))?;
            }
            let rec = EpochRecord {
                epoch,
                stage,
                train: train_terms,
                train_total,
                val,
                val_total,
                val_miou,
                lr,
            };
            let _ = writeln!(train_log, "{}", log_line(epoch, stage, &rec.train, train_total, val_miou));
            let _ = writeln!(val_log, "{}", log_line(epoch, stage, &rec.val, val_total, val_miou));
            write(TRAIN_LOG, &train_log)?;
            write(VAL_LOG, &val_log)?;
            progress(&rec);
            records.push(rec);
        }
        match stage {
            Stage::A => model.save(&out.join(STAGE_A_CKPT))?,
            Stage::B => model.save(&out.join(STAGE_B_CKPT))?,
            Stage::C => model.save(&out.join(FINAL_CKPT))?,
        }
    }
    Ok(TrainReport { records, best_epoch: best.0, best_val_miou: best.1, out_dir: out.to_path_buf() })
}

/// Parameters selected by name prefix, for checks across stages.
pub fn params_with_prefix(store: &ParamStore, prefix: &str) -> Vec<(String, Vec<f64>)> {
    store
        .ids_with_prefix(prefix)
        .map(|id| (store.name(id).to_string(), store.get(id).data.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_param_gradients;
    use crate::autodiff::BCE_EPS;
    use crate::synthdata::{generate_dataset, DatasetConfig};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn total_loss_weights() {
        let ones = LossTerms { pi: Some(1.0), part: Some(1.0), trans: Some(1.0), cycle: Some(1.0) };
        assert!((total_loss(&ones, &LossWeights::default()) - 100.3).abs() < 1e-12);
        let zero = LossWeights { pi: 0.0, part: 0.0, trans: 0.0, cycle: 0.0 };
        assert_eq!(total_loss(&ones, &zero), 0.0);
        let mut r = rng(1);
        for _ in 0..20 {
            let t: [f64; 4] = [r.gen(), r.gen(), r.gen(), r.gen()];
            let w = LossWeights { pi: r.gen(), part: r.gen(), trans: r.gen(), cycle: r.gen() };
            let terms = LossTerms { pi: Some(t[0]), part: Some(t[1]), trans: Some(t[2]), cycle: Some(t[3]) };
            let want = w.pi * t[0] + w.part * t[1] + w.trans * t[2] + w.cycle * t[3];
            assert!((total_loss(&terms, &w) - want).abs() < 1e-12);
        }
        assert!(LossWeights { pi: -1.0, ..LossWeights::default() }.validate().is_err());
    }

    #[test]
    fn part_loss_cases() {
        let mut r = rng(2);
        let target = Tensor::new(vec![4, 8], (0..32).map(|_| if r.gen::<bool>() { 1.0 } else { 0.0 }).collect());
        // exact prediction: clamp floor
        let store = ParamStore::new();
        let mut s = Session::frozen(&store);
        let p = s.graph.input(target.clone());
        let l = part_loss(&mut s, p, &target, 2).unwrap();
        let floor = -(1.0 - BCE_EPS).ln() * 32.0 / 2.0;
        assert!((s.graph.value(l).item() - floor).abs() < 1e-12);
        // one half everywhere: ln 2 per voxel
        let p = s.graph.input(Tensor::filled(vec![4, 8], 0.5));
        let l = part_loss(&mut s, p, &target, 2).unwrap();
        assert!((s.graph.value(l).item() - 32.0 * 2f64.ln() / 2.0).abs() < 1e-12);
        // scalar-loop oracle
        let pred = Tensor::uniform(vec![4, 8], 0.01, 0.99, &mut r);
        let p = s.graph.input(pred.clone());
        let l = part_loss(&mut s, p, &target, 2).unwrap();
        let mut want = 0.0;
        for i in 0..32 {
            let (q, t) = (pred.data[i], target.data[i]);
            want -= t * q.ln() + (1.0 - t) * (1.0 - q).ln();
        }
        assert!((s.graph.value(l).item() - want / 2.0).abs() < 1e-10);
    }

    #[test]
    fn trans_loss_cases() {
        let one = crate::voxel::AffineParams::IDENTITY;
        let id = Tensor::new(vec![2, 12], [one, one].concat());
        let store = ParamStore::new();
        let mut s = Session::frozen(&store);
        let p = s.graph.input(id.clone());
        let l = trans_loss(&mut s, p, &id, &[true, true], 1).unwrap();
        assert_eq!(s.graph.value(l).item(), 0.0);
        let mut shifted = id.clone();
        shifted.data[9] += 0.1;
        let p = s.graph.input(shifted.clone());
        let l = trans_loss(&mut s, p, &id, &[true, true], 1).unwrap();
        assert!((s.graph.value(l).item() - 0.01).abs() < 1e-15);
        let mut junk = id.clone();
        for v in &mut junk.data[12..] {
            *v = 7.0;
        }
        let p = s.graph.input(junk);
        let l = trans_loss(&mut s, p, &id, &[true, false], 1).unwrap();
        assert_eq!(s.graph.value(l).item(), 0.0);
    }

    #[test]
    fn mixing_rules() {
        let parts = Tensor::new(vec![6, 2], (0..12).map(f64::from).collect());
        let id = Mixing::identity(3, 2);
        assert_eq!(gather(&parts, &id.mix_index()), parts);
        assert!(Mixing::sample(1, 2, &mut rng(0)).is_err());
        let mut r = rng(3);
        for _ in 0..50 {
            let (mixed, m) = cycle_mix(&parts, 2, &mut r).unwrap();
            // every mixed shape takes exactly one row per part index
            for (row, &src) in m.mix_index().iter().enumerate() {
                assert_eq!(src % 2, row % 2);
            }
            assert_eq!(demix(&mixed, &m), parts);
        }
    }

    proptest! {
        #[test]
        fn demix_inverts_mix(seed in 0u64..1000, b in 2usize..7, k in 1usize..5) {
            let m = Mixing::sample(b, k, &mut rng(seed)).unwrap();
            let mix = m.mix_index();
            let de = m.demix_index();
            for i in 0..b * k {
                prop_assert_eq!(mix[de[i]], i);
                prop_assert_eq!(de[mix[i]], i);
            }
            for p in &m.perms {
                let mut q = p.clone();
                q.sort_unstable();
                prop_assert!(q == (0..b).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn donor_frequencies_are_uniform() {
        let (b, k, draws) = (4usize, 3usize, 4000usize);
        let mut counts = vec![vec![0usize; b]; k];
        let mut r = rng(4);
        for _ in 0..draws {
            let m = Mixing::sample(b, k, &mut r).unwrap();
            for (kk, p) in m.perms.iter().enumerate() {
                counts[kk][p[0]] += 1;
            }
        }
        let pr = 1.0 / b as f64;
        let sigma = (draws as f64 * pr * (1.0 - pr)).sqrt();
        for c in counts.iter().flatten() {
            assert!((*c as f64 - draws as f64 * pr).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn config_round_trip_and_errors() {
        let mut c = TrainConfig::default();
        c.set("lr", "0.001").unwrap();
        c.set("no_cycle", "true").unwrap();
        c.set("decoder_channels", "8, 4").unwrap();
        let back = TrainConfig::from_kv_text(&c.to_kv()).unwrap();
        assert_eq!(back, c);
        assert!(c.set("bogus", "1").is_err());
        assert!(c.set("lr", "fast").is_err());
        assert!(parse_kv("no equals sign").is_err());
        let kv = parse_kv("# comment\n a = 1 # trailing\n\nb=2").unwrap();
        assert_eq!(kv, vec![("a".into(), "1".into()), ("b".into(), "2".into())]);
        let mut bad = TrainConfig::default();
        bad.stage_epochs[1] = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn stage_weights_and_flags() {
        let mut c = TrainConfig::default();
        let a = c.stage_weights(Stage::A);
        assert_eq!((a.trans, a.cycle), (0.0, 0.0));
        assert_eq!(c.stage_weights(Stage::C), LossWeights::default());
        c.ablation.no_cycle = true;
        assert_eq!(c.stage_weights(Stage::C), LossWeights { cycle: 0.0, ..LossWeights::default() });
        let fixed = Ablation { fixed_projection: true, ..Ablation::default() };
        for st in [Stage::A, Stage::B, Stage::C] {
            assert!(!trainable(st, &fixed, "proj.P1"));
        }
        assert!(trainable(Stage::A, &Ablation::default(), "proj.P1"));
        assert!(!trainable(Stage::B, &Ablation::default(), "encoder.fc.W"));
        assert!(trainable(Stage::C, &fixed, "stn.fc2.W"));
    }

    #[test]
    fn batches_cover_every_shape_once() {
        for n in [2, 5, 17, 33] {
            let b = epoch_batches(n, 16, 0, 3);
            let mut all: Vec<usize> = b.iter().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            assert!(b.iter().all(|x| x.len() >= 2));
        }
        assert_ne!(epoch_batches(20, 4, 0, 1), epoch_batches(20, 4, 0, 2));
    }

    fn micro_model(kind: ComposerKind, r: usize, k: usize) -> ShapeModel {
        let cfg = ModelConfig {
            embed_dim: 8,
            encoder_channels: vec![2, 4],
            decoder_channels: vec![3, 2],
            stn_channels: vec![2],
            stn_features: 3,
            stn_hidden: 6,
            mono_hidden: 6,
            composer: kind,
            ..ModelConfig::new(r, k)
        };
        let mut m = ShapeModel::new(&cfg, 9).unwrap();
        // move the localizer off identity so the sampler sees generic coordinates
        if let Some(id) = m.params.id("stn.fc2.W") {
            *m.params.get_mut(id) = Tensor::randn(m.params.get(id).shape.clone(), 0.05, &mut rng(10));
        }
        m
    }

    fn random_grids(b: usize, r: usize, seed: u64) -> Tensor {
        let mut g = rng(seed);
        Tensor::new(vec![b, 1, r, r, r], (0..b * r * r * r).map(|_| if g.gen::<f64>() < 0.3 { 1.0 } else { 0.0 }).collect())
    }

    #[test]
    fn cycle_gradient_reaches_every_network() {
        for kind in [ComposerKind::Stn, ComposerKind::Monolithic] {
            let m = micro_model(kind, 8, 2);
            let grids = random_grids(3, 8, 11);
            let mixing = Mixing::sample(3, 2, &mut rng(12)).unwrap();
            let mut s = Session::new(&m.params);
            let x = s.graph.input(grids.clone());
            let e = m.encoder.forward(&mut s, x).unwrap();
            let p = m.projections.forward(&mut s, e).unwrap();
            let l = cycle_loss(&mut s, &m, p, None, &grids, &mixing).unwrap();
            let grads = s.gradients(l).unwrap();
            for prefix in ["encoder.", "proj.", "partdec.", "stn.", "mono."] {
                let group: Vec<_> = grads.iter().filter(|(id, _)| m.params.name(*id).starts_with(prefix)).collect();
                if group.is_empty() {
                    continue;
                }
                assert!(group.iter().all(|(_, g)| g.iter().all(|v| v.is_finite())));
                assert!(
                    group.iter().any(|(_, g)| g.iter().any(|v| *v != 0.0)),
                    "{kind:?}: no gradient reaches {prefix}"
                );
            }
        }
    }

    #[test]
    fn reusing_decoded_canonicals_is_exact() {
        let m = micro_model(ComposerKind::Stn, 8, 2);
        let grids = random_grids(3, 8, 13);
        let mixing = Mixing::sample(3, 2, &mut rng(14)).unwrap();
        let run = |reuse: bool| {
            let mut s = Session::frozen(&m.params);
            let x = s.graph.input(grids.clone());
            let e = m.encoder.forward(&mut s, x).unwrap();
            let p = m.projections.forward(&mut s, e).unwrap();
            let first = if reuse {
                let Composer::Stn { decoder, localizer } = &m.composer else { unreachable!() };
                Some(compose_vars(&mut s, decoder, localizer, p).unwrap())
            } else {
                None
            };
            let l = cycle_loss(&mut s, &m, p, first.as_ref(), &grids, &mixing).unwrap();
            s.graph.value(l).item()
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn total_objective_gradient_is_linear_in_terms() {
        let m = micro_model(ComposerKind::Stn, 8, 2);
        let grids = random_grids(2, 8, 15);
        let mixing = Mixing::sample(2, 2, &mut rng(16)).unwrap();
        let batch = Batch {
            size: 2,
            grids: grids.clone(),
            canon: Tensor::uniform(vec![4, 1, 8, 8, 8], 0.0, 1.0, &mut rng(17)).map_binary(),
            theta: Tensor::randn(vec![4, 12], 0.3, &mut rng(18)),
            present: vec![true, false, true, true],
            one_hot: None,
        };
        let all = Wanted { pi: true, part: true, trans: true, cycle: true };
        let w = LossWeights { pi: 0.3, part: 2.0, trans: 0.7, cycle: 1.1 };
        let grads_of = |w: &LossWeights| {
            let mut s = Session::new(&m.params);
            let f = forward(&mut s, &m, &batch, all, Some(&mixing)).unwrap();
            let obj = f.objective(&mut s, w).unwrap().unwrap();
            s.gradients(obj).unwrap()
        };
        let total = grads_of(&w);
        let zero = LossWeights { pi: 0.0, part: 0.0, trans: 0.0, cycle: 0.0 };
        let singles = [
            LossWeights { pi: w.pi, ..zero },
            LossWeights { part: w.part, ..zero },
            LossWeights { trans: w.trans, ..zero },
            LossWeights { cycle: w.cycle, ..zero },
        ];
        let parts: Vec<_> = singles.iter().map(grads_of).collect();
        for (i, (id, g)) in total.iter().enumerate() {
            for j in 0..g.len() {
                let sum: f64 = parts.iter().map(|p| {
                    p.iter().find(|(pid, _)| pid == id).map_or(0.0, |(_, pg)| pg[j])
                }).sum();
                assert!((g[j] - sum).abs() <= 1e-9 * (1.0 + g[j].abs()), "param {i} entry {j}");
            }
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        // no cycle term: binarization is discontinuous in its input
        let mut m = micro_model(ComposerKind::Stn, 8, 2);
        // zero biases put cells with dead inputs exactly on the relu kink
        let mut g = rng(22);
        let biases: Vec<ParamId> = m.params.ids().filter(|&id| m.params.name(id).ends_with(".b")).collect();
        for id in biases {
            for v in &mut m.params.get_mut(id).data {
                *v += g.gen_range(-0.1..0.1);
            }
        }
        let grids = random_grids(2, 8, 19);
        let batch = Batch {
            size: 2,
            grids,
            canon: Tensor::uniform(vec![4, 1, 8, 8, 8], 0.0, 1.0, &mut rng(20)).map_binary(),
            theta: Tensor::randn(vec![4, 12], 0.3, &mut rng(21)),
            present: vec![true; 4],
            one_hot: None,
        };
        let want = Wanted { pi: true, part: true, trans: true, cycle: false };
        let w = LossWeights { pi: 1.0, part: 1.0, trans: 1.0, cycle: 0.0 };
        let ids: Vec<ParamId> = m.params.ids().collect();
        let rep = check_param_gradients(&m.params, &ids, 1e-5, 6, |s| {
            let f = forward(s, &m, &batch, want, None)?;
            Ok(f.objective(s, &w)?.expect("terms"))
        })
        .unwrap();
        assert!(rep.max_rel_err <= 1e-3, "{rep:?}");
    }

    trait Binary {
        fn map_binary(self) -> Self;
    }
    impl Binary for Tensor {
        fn map_binary(mut self) -> Self {
            for v in &mut self.data {
                *v = if *v > 0.5 { 1.0 } else { 0.0 };
            }
            self
        }
    }

    #[test]
    fn short_training_is_deterministic_and_stage_b_freezes() {
        let ds = generate_dataset(&DatasetConfig::new(6, 2, 1, 1, 16)).unwrap();
        let mut c = TrainConfig {
            stage_epochs: [1, 1, 1],
            batch_size: 3,
            embed_dim: 16,
            encoder_channels: vec![4, 8],
            decoder_channels: vec![8, 4],
            stn_channels: vec![4],
            stn_features: 8,
            stn_hidden: 16,
            ..TrainConfig::default()
        };
        c.adam.lr = 1e-3;
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let rep = train(&ds, &c, d1.path(), |_| {}).unwrap();
        train(&ds, &c, d2.path(), |_| {}).unwrap();
        assert_eq!(rep.records.len(), 3);
        for f in [STAGE_A_CKPT, STAGE_B_CKPT, FINAL_CKPT, BEST_CKPT] {
            let a = std::fs::read(d1.path().join(f)).unwrap();
            let b = std::fs::read(d2.path().join(f)).unwrap();
            assert_eq!(a, b, "{f}");
        }
        let a = ParamStore::load(&d1.path().join(STAGE_A_CKPT)).unwrap();
        let b = ParamStore::load(&d1.path().join(STAGE_B_CKPT)).unwrap();
        for id in a.ids() {
            let name = a.name(id);
            let same = a.get(id) == b.get(b.id(name).unwrap());
            assert_eq!(same, !name.starts_with("stn."), "{name}");
        }
        let log = std::fs::read_to_string(d1.path().join(TRAIN_LOG)).unwrap();
        assert_eq!(log.lines().next(), Some(LOG_HEADER));
        assert_eq!(log.lines().count(), 4);
        let cfg = std::fs::read_to_string(d1.path().join(CONFIG_FILE)).unwrap();
        assert_eq!(TrainConfig::from_kv_text(&cfg).unwrap(), c);
    }

    #[test]
    fn schema_mismatch_is_rejected() {
        let ds = generate_dataset(&DatasetConfig::new(4, 1, 1, 1, 16)).unwrap();
        let c = TrainConfig { resolution: Some(32), ..TrainConfig::default() };
        assert!(matches!(train(&ds, &c, tempfile::tempdir().unwrap().path(), |_| {}), Err(Error::Schema(_))));
    }
}
