//! Experiment battery: reconstruction, part swaps, batch mixing and
//! interpolation, plus the metric table they feed.
//!
//! Every experiment produces an [`ExperimentRun`] (the output grids and, for
//! reconstruction, the ground truth). Metrics are computed from a run alone,
//! so a run reloaded from its exported files scores identically.

pub mod classifier;
pub mod oracle;

pub use classifier::{classifier_accuracy, train_classifier, Classifier, ClassifierConfig, TrainedClassifier};
pub use oracle::OraclePipeline;

use crate::autodiff::Tensor;
use crate::composer::ComposedShape;
use crate::error::{Error, Result};
use crate::model::ShapeModel;
use crate::training::Mixing;
use crate::voxel::{
    export_obj, extract_parts, iou_masks, is_single_component, load_pflg, miou, save_pflg, symmetry_score,
    LabeledGrid, OccupancyGrid, PartSchema,
};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Decompose and compose, abstracted so that experiments can run on a
/// trained model or on the ground-truth oracle.
pub trait Pipeline: Sync {
    fn resolution(&self) -> usize;
    fn parts(&self) -> usize;
    /// Whole-shape embeddings `[B, n]`.
    fn embed(&self, grids: &[&OccupancyGrid]) -> Result<Tensor>;
    /// Part embeddings `[B·K, n]`, row `b·K + k`.
    fn project(&self, e: &Tensor) -> Result<Tensor>;
    fn compose(&self, parts: &Tensor, schema: &PartSchema) -> Result<Vec<ComposedShape>>;
}

impl Pipeline for ShapeModel {
    fn resolution(&self) -> usize {
        ShapeModel::resolution(self)
    }

    fn parts(&self) -> usize {
        ShapeModel::parts(self)
    }

    fn embed(&self, grids: &[&OccupancyGrid]) -> Result<Tensor> {
        ShapeModel::embed(self, grids)
    }

    fn project(&self, e: &Tensor) -> Result<Tensor> {
        ShapeModel::project(self, e)
    }

    fn compose(&self, parts: &Tensor, schema: &PartSchema) -> Result<Vec<ComposedShape>> {
        ShapeModel::compose(self, parts, schema)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Experiment {
    Rec,
    Swap,
    Mix,
    /// Mixed donors placed at their original locations, no learning.
    NaiveMix,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Rec => "rec",
            Experiment::Swap => "swap",
            Experiment::Mix => "mix",
            Experiment::NaiveMix => "naive_mix",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rec" => Ok(Experiment::Rec),
            "swap" => Ok(Experiment::Swap),
            "mix" => Ok(Experiment::Mix),
            "naive_mix" => Ok(Experiment::NaiveMix),
            _ => Err(Error::invalid(format!("unknown experiment {s:?} (rec, swap, mix, naive_mix)"))),
        }
    }
}

/// One table row. Every value lies in `[0, 1]`; `None` prints as a dash.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub experiment: Experiment,
    /// Labeled-grid mIoU against ground truth (reconstruction only).
    pub miou: Option<f64>,
    /// IoU at 0.5 of decoded against ground-truth canonical parts, averaged
    /// over present parts (reconstruction with the part decoder only).
    pub miou_parts: Option<f64>,
    /// Fraction of outputs forming one 6-connected component.
    pub connectivity: f64,
    pub classifier: Option<f64>,
    pub symmetry: f64,
    pub count: usize,
}

/// Output grids of one experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentRun {
    pub experiment: Experiment,
    pub outputs: Vec<LabeledGrid>,
    /// Ground truth aligned with `outputs`; reconstruction only.
    pub targets: Option<Vec<LabeledGrid>>,
    /// Per-output canonical-part IoU, when decoded canonicals exist.
    pub part_ious: Option<Vec<f64>>,
}

fn check_inputs(p: &dyn Pipeline, shapes: &[&LabeledGrid], min: usize) -> Result<()> {
    if shapes.len() < min {
        return Err(Error::invalid(format!("experiment needs at least {min} shapes, got {}", shapes.len())));
    }
    for s in shapes {
        if s.resolution() != p.resolution() {
            return Err(Error::shape(
                "experiment",
                format!("pipeline resolution {}, shape resolution {}", p.resolution(), s.resolution()),
            ));
        }
        if s.schema().len() != p.parts() {
            return Err(Error::Schema(format!("pipeline has {} parts, shape has {}", p.parts(), s.schema().len())));
        }
    }
    Ok(())
}

fn occupancies(shapes: &[&LabeledGrid]) -> Vec<OccupancyGrid> {
    shapes.iter().map(|s| s.occupancy()).collect()
}

fn part_embeddings(p: &dyn Pipeline, shapes: &[&LabeledGrid]) -> Result<Tensor> {
    let occ = occupancies(shapes);
    let refs: Vec<&OccupancyGrid> = occ.iter().collect();
    p.project(&p.embed(&refs)?)
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let data: Vec<f64> = idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
    Tensor::new(vec![idx.len(), t.row_len()], data)
}

/// Mean canonical-part IoU of one composed shape against its ground truth.
fn canonical_iou(out: &ComposedShape, gt: &LabeledGrid) -> f64 {
    let parts = extract_parts(gt);
    let ious: Vec<f64> = parts
        .parts
        .iter()
        .zip(&out.canonicals)
        .zip(&parts.present)
        .filter(|(_, &present)| present)
        .map(|((g, d), _)| iou_masks(d, g, 0.5))
        .collect();
    if ious.is_empty() {
        1.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

/// Decompose then compose every shape.
pub fn run_reconstruction(p: &dyn Pipeline, shapes: &[&LabeledGrid]) -> Result<ExperimentRun> {
    check_inputs(p, shapes, 1)?;
    let schema = shapes[0].schema();
    let composed = p.compose(&part_embeddings(p, shapes)?, schema)?;
    let part_ious = composed
        .iter()
        .all(|c| c.canonicals.len() == p.parts())
        .then(|| composed.par_iter().zip(shapes).map(|(c, g)| canonical_iou(c, g)).collect());
    Ok(ExperimentRun {
        experiment: Experiment::Rec,
        outputs: composed.into_iter().map(|c| c.grid).collect(),
        targets: Some(shapes.iter().map(|s| (*s).clone()).collect()),
        part_ious,
    })
}

/// Exchanges part `k` between `a` and `b`: returns `(a with b's part, b with a's part)`.
pub fn swap_outputs(p: &dyn Pipeline, a: &LabeledGrid, b: &LabeledGrid, k: usize) -> Result<(LabeledGrid, LabeledGrid)> {
    check_inputs(p, &[a, b], 2)?;
    let kk = p.parts();
    if k >= kk {
        return Err(Error::invalid(format!("part index {k} out of range for {kk} parts")));
    }
    let parts = part_embeddings(p, &[a, b])?;
    let mut idx: Vec<usize> = (0..2 * kk).collect();
    idx.swap(k, kk + k);
    let mut out = p.compose(&gather_rows(&parts, &idx), a.schema())?.into_iter().map(|c| c.grid);
    match (out.next(), out.next()) {
        (Some(x), Some(y)) => Ok((x, y)),
        _ => Err(Error::invalid("composer returned too few shapes")),
    }
}

/// Random disjoint pairs, one random part exchanged per pair, both outputs kept.
pub fn run_swap(p: &dyn Pipeline, shapes: &[&LabeledGrid], rng: &mut impl Rng) -> Result<ExperimentRun> {
    check_inputs(p, shapes, 2)?;
    let mut order: Vec<usize> = (0..shapes.len()).collect();
    order.shuffle(rng);
    let pairs: Vec<(usize, usize, usize)> =
        order.chunks_exact(2).map(|c| (c[0], c[1], rng.gen_range(0..p.parts()))).collect();
    let outputs: Vec<(LabeledGrid, LabeledGrid)> = pairs
        .par_iter()
        .map(|&(i, j, k)| swap_outputs(p, shapes[i], shapes[j], k))
        .collect::<Result<_>>()?;
    Ok(ExperimentRun {
        experiment: Experiment::Swap,
        outputs: outputs.into_iter().flat_map(|(x, y)| [x, y]).collect(),
        targets: None,
        part_ious: None,
    })
}

/// Composes the batch after applying `mixing` to its part embeddings.
pub fn mix_outputs(p: &dyn Pipeline, batch: &[&LabeledGrid], mixing: &Mixing) -> Result<Vec<LabeledGrid>> {
    check_inputs(p, batch, 1)?;
    if mixing.batch() != batch.len() || mixing.parts() != p.parts() {
        return Err(Error::invalid(format!(
            "mixing for {}x{} does not fit a batch of {} with {} parts",
            mixing.batch(),
            mixing.parts(),
            batch.len(),
            p.parts()
        )));
    }
    let parts = part_embeddings(p, batch)?;
    Ok(p.compose(&gather_rows(&parts, &mixing.mix_index()), batch[0].schema())?
        .into_iter()
        .map(|c| c.grid)
        .collect())
}

/// Batches of at most `batch_size` shapes (a trailing singleton joins the
/// previous batch), one random mixing each. Returns the learned mix and the
/// naive placement of the same donors.
pub fn run_mix(
    p: &dyn Pipeline,
    shapes: &[&LabeledGrid],
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<(ExperimentRun, ExperimentRun)> {
    check_inputs(p, shapes, 2)?;
    if batch_size < 2 {
        return Err(Error::invalid("mix batch size must be at least 2"));
    }
    let mut order: Vec<usize> = (0..shapes.len()).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap_or_default();
        if let Some(prev) = batches.last_mut() {
            prev.extend(last);
        }
    }
    let mut mixed = Vec::with_capacity(shapes.len());
    let mut naive = Vec::with_capacity(shapes.len());
    for idx in &batches {
        let batch: Vec<&LabeledGrid> = idx.iter().map(|&i| shapes[i]).collect();
        let mixing = Mixing::sample(batch.len(), p.parts(), rng)?;
        mixed.extend(mix_outputs(p, &batch, &mixing)?);
        for j in 0..batch.len() {
            let donors: Vec<&LabeledGrid> = mixing.perms.iter().map(|perm| batch[perm[j]]).collect();
            naive.push(naive_placement(&donors)?);
        }
    }
    let run = |experiment, outputs| ExperimentRun { experiment, outputs, targets: None, part_ious: None };
    Ok((run(Experiment::Mix, mixed), run(Experiment::NaiveMix, naive)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    Whole,
    /// Only this part's embedding moves; the others stay at the first shape's.
    Part(usize),
}

/// `α = i / (steps − 1)` for `i = 0..steps`.
pub fn interpolation_alphas(steps: usize) -> Result<Vec<f64>> {
    if steps < 2 {
        return Err(Error::invalid(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    Ok((0..steps).map(|i| i as f64 / (steps - 1) as f64).collect())
}

/// Part embeddings along the path from `a` to `b`, `[steps·K, n]`.
pub fn interpolation_embeddings(
    p: &dyn Pipeline,
    a: &LabeledGrid,
    b: &LabeledGrid,
    mode: Interpolation,
    steps: usize,
) -> Result<Tensor> {
    check_inputs(p, &[a, b], 2)?;
    let k = p.parts();
    if let Interpolation::Part(j) = mode {
        if j >= k {
            return Err(Error::invalid(format!("part index {j} out of range for {k} parts")));
        }
    }
    let alphas = interpolation_alphas(steps)?;
    let lerp = |x: &[f64], y: &[f64], t: f64| x.iter().zip(y).map(|(u, v)| (1.0 - t) * u + t * v).collect::<Vec<_>>();
    match mode {
        Interpolation::Whole => {
            let occ = occupancies(&[a, b]);
            let e = p.embed(&[&occ[0], &occ[1]])?;
            let data: Vec<f64> = alphas.iter().flat_map(|&t| lerp(e.row(0), e.row(1), t)).collect();
            p.project(&Tensor::new(vec![steps, e.row_len()], data))
        }
        Interpolation::Part(j) => {
            let parts = part_embeddings(p, &[a, b])?;
            let n = parts.row_len();
            let mut data = Vec::with_capacity(steps * k * n);
            for &t in &alphas {
                for r in 0..k {
                    if r == j {
                        data.extend(lerp(parts.row(r), parts.row(k + r), t));
                    } else {
                        data.extend_from_slice(parts.row(r));
                    }
                }
            }
            Ok(Tensor::new(vec![steps * k, n], data))
        }
    }
}

/// Shapes along the interpolation path; the endpoints reconstruct `a` and `b`.
pub fn run_interpolation(
    p: &dyn Pipeline,
    a: &LabeledGrid,
    b: &LabeledGrid,
    mode: Interpolation,
    steps: usize,
) -> Result<Vec<LabeledGrid>> {
    let parts = interpolation_embeddings(p, a, b, mode, steps)?;
    Ok(p.compose(&parts, a.schema())?.into_iter().map(|c| c.grid).collect())
}

/// Copies part `k` of `donors[k]` in place. Parts are written in ascending
/// order and never overwrite, so overlaps go to the lowest part index.
pub fn naive_placement(donors: &[&LabeledGrid]) -> Result<LabeledGrid> {
    let first = donors.first().ok_or_else(|| Error::invalid("naive placement without donors"))?;
    let k = first.schema().len();
    if donors.len() != k {
        return Err(Error::Schema(format!("{} donors for {k} parts", donors.len())));
    }
    for d in donors {
        first.same_layout(d)?;
    }
    let mut out = LabeledGrid::empty(first.resolution(), first.schema().clone());
    for (part, donor) in donors.iter().enumerate() {
        let label = part as u8 + 1;
        for (idx, &l) in donor.labels().iter().enumerate() {
            if l == label && out.labels()[idx] == 0 {
                out.set_index(idx, label);
            }
        }
    }
    Ok(out)
}

fn mean(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    v.sum::<f64>() / n as f64
}

/// Scores a run. Per-shape work is parallel; sums run in output order.
pub fn metrics(run: &ExperimentRun, classifier: Option<&Classifier>) -> Result<MetricsRow> {
    let n = run.outputs.len();
    if n == 0 {
        return Err(Error::invalid(format!("{} produced no shapes", run.experiment.name())));
    }
    let per_shape: Vec<(bool, f64)> = run
        .outputs
        .par_iter()
        .map(|g| {
            let occ = g.occupancy();
            (is_single_component(&occ), symmetry_score(&occ))
        })
        .collect();
    let miou = match &run.targets {
        Some(t) => {
            if t.len() != n {
                return Err(Error::invalid("targets and outputs differ in length"));
            }
            let v: Vec<f64> = run.outputs.par_iter().zip(t).map(|(o, g)| miou(o, g)).collect::<Result<_>>()?;
            Some(mean(v.into_iter(), n))
        }
        None => None,
    };
    let refs: Vec<&LabeledGrid> = run.outputs.iter().collect();
    Ok(MetricsRow {
        experiment: run.experiment,
        miou,
        miou_parts: run.part_ious.as_ref().map(|v| mean(v.iter().copied(), v.len().max(1))),
        connectivity: per_shape.iter().filter(|(c, _)| *c).count() as f64 / n as f64,
        classifier: classifier.map(|c| classifier_accuracy(c, &refs)).transpose()?,
        symmetry: mean(per_shape.iter().map(|(_, s)| *s), n),
        count: n,
    })
}

pub const TABLE_HEADER: &str = "experiment,mIoU,mIoU_parts,connectivity,classifier_accuracy,symmetry,shapes";

/// Metric table; undefined cells are `-`.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
    let mut out = String::from(TABLE_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{},{:.6},{}",
            r.experiment.name(),
            cell(r.miou),
            cell(r.miou_parts),
            r.connectivity,
            cell(r.classifier),
            r.symmetry,
            r.count
        );
    }
    out
}

fn sample_path(dir: &Path, i: usize, ext: &str) -> PathBuf {
    dir.join(format!("{i:04}.{ext}"))
}

/// Writes `<root>/<experiment>/NNNN.pflg` and `.obj` for every output, and
/// `NNNN.gt.pflg` for reconstruction targets. Returns the directory.
pub fn export_run(run: &ExperimentRun, root: &Path) -> Result<PathBuf> {
    let dir = root.join(run.experiment.name());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (i, g) in run.outputs.iter().enumerate() {
        save_pflg(g, &sample_path(&dir, i, "pflg"))?;
        export_obj(g, &sample_path(&dir, i, "obj"))?;
    }
    if let Some(t) = &run.targets {
        for (i, g) in t.iter().enumerate() {
            save_pflg(g, &sample_path(&dir, i, "gt.pflg"))?;
        }
    }
    Ok(dir)
}

/// Reloads a run written by [`export_run`]. Canonical-part IoUs are not
/// exported and are carried over from `part_ious`.
pub fn load_run(root: &Path, experiment: Experiment, part_ious: Option<Vec<f64>>) -> Result<ExperimentRun> {
    let dir = root.join(experiment.name());
    let mut outputs = Vec::new();
    while let Some(g) = load_or_missing(&sample_path(&dir, outputs.len(), "pflg"))? {
        outputs.push(g);
    }
    let mut targets = Vec::new();
    while let Some(g) = load_or_missing(&sample_path(&dir, targets.len(), "gt.pflg"))? {
        targets.push(g);
    }
    if outputs.is_empty() {
        return Err(Error::invalid(format!("no exported shapes under {}", dir.display())));
    }
    Ok(ExperimentRun { experiment, outputs, targets: (!targets.is_empty()).then_some(targets), part_ious })
}

fn load_or_missing(path: &Path) -> Result<Option<LabeledGrid>> {
    if path.exists() {
        load_pflg(path).map(Some)
    } else {
        Ok(None)
    }
}
