//! Acceptance suite: criteria 1 to 9, each run at its stated tolerance.
//!
//! Prints one `PASS` or `FAIL` line per criterion with the measured values.
//! A failing criterion does not abort the suite; set `ACCEPTANCE_STRICT=1`
//! to turn any failure into a nonzero exit, or `ACCEPTANCE_SKIP_DESK=1` to
//! run only the criteria that need no training (the rest print `SKIP`).
//!
//! The desk runs (criteria 2, 4, 5, 8, 9) train at R=16 on 200/20/20 shapes
//! with stages 50/20/30; expect roughly an hour on one core.

mod common;

use common::{ok, path};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shapefactor::autodiff::gradcheck::op_suite;
use shapefactor::autodiff::{Graph, Session, Tensor};
use shapefactor::decomposer::{block_partition, completeness_residual, grids_tensor, pi_loss};
use shapefactor::eval::classifier::sample_negatives;
use shapefactor::eval::{
    classifier_accuracy, metrics, naive_placement, run_mix, run_reconstruction, train_classifier, ClassifierConfig,
};
use shapefactor::model::{ModelConfig, ShapeModel};
use shapefactor::synthdata::{generate_dataset, save_dataset, Dataset, DatasetConfig};
use shapefactor::training::{cycle_loss, train, Mixing, TrainConfig, FINAL_CKPT, STAGE_A_CKPT};
use shapefactor::voxel::{
    coords, is_single_component, linear_index, miou, resample, symmetry_score, AffineParams, LabeledGrid,
    OccupancyGrid, PartSchema,
};
use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::time::Instant;

type Check = std::result::Result<(bool, String), Box<dyn std::error::Error>>;

struct Desk {
    dir: PathBuf,
    data: Dataset,
    data_dir: PathBuf,
    /// Seed-0 run with the default configuration.
    run: PathBuf,
    train_secs: f64,
}

fn desk_dataset() -> DatasetConfig {
    DatasetConfig::new(200, 20, 20, 0, 16)
}

fn desk_config(seed: u64) -> TrainConfig {
    TrainConfig { seed, stage_epochs: [50, 20, 30], batch_size: 16, ..TrainConfig::default() }
}

fn occupancies(shapes: &[&LabeledGrid]) -> Vec<OccupancyGrid> {
    shapes.iter().map(|g| g.occupancy()).collect()
}

// ---------------------------------------------------------------- criterion 1

fn gradient_suite() -> Check {
    let start = Instant::now();
    let report = op_suite(0, 20)?;
    let secs = start.elapsed().as_secs_f64();
    let worst = report
        .iter()
        .map(|c| format!("{} {:.1e}/{:.0e}", c.op, c.max_rel_err, c.tolerance))
        .collect::<Vec<_>>()
        .join(", ");
    let all = report.iter().all(|c| c.passed() && c.instances >= 20);
    let has_sampler = ["grid_sample3:volume", "grid_sample3:theta"]
        .iter()
        .all(|op| report.iter().any(|c| c.op == *op));
    Ok((all && has_sampler && secs < 60.0, format!("{} ops, {secs:.1}s; {worst}", report.len())))
}

// ---------------------------------------------------------------- criterion 2

fn partition_algebra(desk: &Desk) -> Check {
    let exact = pi_loss(&block_partition(4, 128))?;
    let model = ShapeModel::load(&desk.run.join(STAGE_A_CKPT))?;
    let mats = model.projections.matrices(&model.params);
    let pi = pi_loss(&mats)?;
    let occ = occupancies(&desk.data.val_shapes());
    let refs: Vec<&OccupancyGrid> = occ.iter().collect();
    let e = model.embed(&refs)?;
    let res: Vec<f64> = (0..e.rows()).map(|i| completeness_residual(&mats, e.row(i))).collect();
    let max = res.iter().copied().fold(0.0, f64::max);
    let mean = res.iter().sum::<f64>() / res.len() as f64;
    let pass = exact.total == 0.0 && pi.total <= 1e-2 && max <= 0.1;
    Ok((
        pass,
        format!(
            "block pi_loss {:e}; after stage A pi_loss {:.4e} (idem {:.3e}, orth {:.3e}, compl {:.3e}), \
             val residual mean {mean:.4} max {max:.4} (limits 1e-2, 0.1)",
            exact.total, pi.total, pi.idempotence, pi.orthogonality, pi.completeness
        ),
    ))
}

// ---------------------------------------------------------------- criterion 3

fn shifted(vol: &[f64], r: usize, d: [i64; 3]) -> Vec<f64> {
    let mut out = vec![0.0; vol.len()];
    for (idx, o) in out.iter_mut().enumerate() {
        let (x, y, z) = coords(r, idx);
        let src = [x as i64 + d[0], y as i64 + d[1], z as i64 + d[2]];
        if src.iter().all(|&s| (0..r as i64).contains(&s)) {
            *o = vol[linear_index(r, src[0] as usize, src[1] as usize, src[2] as usize)];
        }
    }
    out
}

fn graph_sample(vol: &[f64], r: usize, theta: &AffineParams) -> Vec<f64> {
    let mut g = Graph::new();
    let v = g.input(Tensor::new(vec![1, r * r * r], vol.to_vec()));
    let t = g.input(Tensor::new(vec![1, 12], theta.to_array().to_vec()));
    let out = g.grid_sample3(v, t).expect("grid_sample3");
    g.value(out).data.clone()
}

fn sampler_exactness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut translations = 0;
    let mut worst_linear = 0.0f64;
    for r in [4usize, 8, 16] {
        for _ in 0..10 {
            let vol: Vec<f64> = (0..r * r * r).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let id = AffineParams::identity();
            if resample(&vol, r, &id) != vol || graph_sample(&vol, r, &id) != vol {
                return Ok((false, format!("identity changed a {r}^3 volume")));
            }
            for _ in 0..5 {
                let d = [rng.gen_range(-3..=3), rng.gen_range(-3..=3), rng.gen_range(-3..=3)];
                let t = d.map(|v| 2.0 * v as f64 / r as f64);
                let theta = AffineParams::translation(t);
                let want = shifted(&vol, r, d);
                if resample(&vol, r, &theta) != want || graph_sample(&vol, r, &theta) != want {
                    return Ok((false, format!("translation by {d:?} voxels at R={r} is inexact")));
                }
                translations += 1;
            }
            let other: Vec<f64> = (0..r * r * r).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let mut p = [0.0; 12];
            p.iter_mut().for_each(|v| *v = rng.gen_range(-1.2..1.2));
            let theta = AffineParams::from_slice(&p);
            let combo: Vec<f64> = vol.iter().zip(&other).map(|(x, y)| a * x + b * y).collect();
            let lhs = resample(&combo, r, &theta);
            let (sx, sy) = (resample(&vol, r, &theta), resample(&other, r, &theta));
            for ((l, x), y) in lhs.iter().zip(&sx).zip(&sy) {
                worst_linear = worst_linear.max((l - (a * x + b * y)).abs());
            }
        }
    }
    Ok((
        worst_linear <= 1e-12,
        format!("identity exact, {translations} integer translations exact, linearity error {worst_linear:.2e}"),
    ))
}

// ---------------------------------------------------------------- criterion 4

fn end_to_end(desk: &Desk) -> Check {
    let model = ShapeModel::load(&desk.run.join(FINAL_CKPT))?;
    let test = desk.data.test_shapes();
    let trained = metrics(&run_reconstruction(&model, &test)?, None)?.miou.unwrap_or(0.0);
    // the floor: the same architecture and seed before any training
    let fresh = ShapeModel::new(&desk_config(0).model_config(16, desk.data.schema().len()), 0)?;
    let floor = metrics(&run_reconstruction(&fresh, &test)?, None)?.miou.unwrap_or(0.0);
    let pass = desk.train_secs < 30.0 * 60.0 && trained >= 0.55 && trained >= floor;
    Ok((
        pass,
        format!(
            "train {:.1} min (limit 30), test mIoU {trained:.4} (limit 0.55), untrained floor {floor:.4}",
            desk.train_secs / 60.0
        ),
    ))
}

// ---------------------------------------------------------------- criterion 5

fn ablation_orderings(desk: &Desk) -> Check {
    let test = desk.data.test_shapes();
    let mut lines = Vec::new();
    let mut pass = true;
    for seed in 0..3u64 {
        let train_variant = |name: &str, f: &dyn Fn(&mut TrainConfig)| -> shapefactor::Result<ShapeModel> {
            if seed == 0 && name == "full" {
                return ShapeModel::load(&desk.run.join(FINAL_CKPT));
            }
            let mut c = desk_config(seed);
            f(&mut c);
            let dir = desk.dir.join(format!("{name}_{seed}"));
            let rep = train(&desk.data, &c, &dir, |_| {})?;
            ShapeModel::load(&rep.final_checkpoint())
        };
        let full = train_variant("full", &|_| {})?;
        let no_stn = train_variant("no_stn", &|c| c.ablation.no_stn = true)?;
        let no_cycle = train_variant("no_cycle", &|c| c.ablation.no_cycle = true)?;
        let mix_conn = |m: &ShapeModel| -> shapefactor::Result<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(metrics(&run_mix(m, &test, 16, &mut rng)?.0, None)?.connectivity)
        };
        let rec_conn =
            |m: &ShapeModel| -> shapefactor::Result<f64> { Ok(metrics(&run_reconstruction(m, &test)?, None)?.connectivity) };
        let (fm, sm) = (mix_conn(&full)?, mix_conn(&no_stn)?);
        let (fr, cr) = (rec_conn(&full)?, rec_conn(&no_cycle)?);
        pass &= fm > sm && fr > cr;
        lines.push(format!("seed {seed}: mix {fm:.2} vs no-STN {sm:.2}, rec {fr:.2} vs no-cycle {cr:.2}"));
    }
    Ok((pass, lines.join("; ")))
}

// ---------------------------------------------------------------- criterion 6

fn brute_miou(a: &LabeledGrid, b: &LabeledGrid) -> f64 {
    let mut ious = Vec::new();
    for l in 1..=a.schema().len() as u8 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for i in 0..a.labels().len() {
            let (x, y) = (a.labels()[i] == l, b.labels()[i] == l);
            if x && y {
                inter += 1;
            }
            if x || y {
                union += 1;
            }
        }
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    if ious.is_empty() {
        1.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

fn brute_components(g: &OccupancyGrid) -> usize {
    let r = g.resolution() as i64;
    let mut seen = vec![false; g.data().len()];
    let mut count = 0;
    for start in 0..seen.len() {
        if g.data()[start] == 0 || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let (x, y, z) = coords(r as usize, i);
            for (dx, dy, dz) in [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)] {
                let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                if [nx, ny, nz].iter().any(|&c| c < 0 || c >= r) {
                    continue;
                }
                let j = linear_index(r as usize, nx as usize, ny as usize, nz as usize);
                if g.data()[j] != 0 && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    count
}

fn brute_symmetry(g: &OccupancyGrid) -> f64 {
    let r = g.resolution();
    let mut same = 0usize;
    for x in 0..r {
        for y in 0..r {
            for z in 0..r {
                same += (g.get(x, y, z) == g.get(r - 1 - x, y, z)) as usize;
            }
        }
    }
    same as f64 / (r * r * r) as f64
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let schema = PartSchema::chairs();
    let random_grid = |rng: &mut ChaCha8Rng| {
        let density = rng.gen_range(0.05..0.6);
        let labels = (0..512).map(|_| if rng.gen_bool(density) { rng.gen_range(1..=4) } else { 0 }).collect();
        LabeledGrid::from_labels(8, labels, schema.clone()).expect("labels in range")
    };
    // a face-connected random walk, so single-component grids are covered
    let blob = |rng: &mut ChaCha8Rng| {
        let mut labels = vec![0u8; 512];
        let mut p = [4i64, 4, 4];
        for _ in 0..rng.gen_range(5..120) {
            labels[linear_index(8, p[0] as usize, p[1] as usize, p[2] as usize)] = rng.gen_range(1..=4);
            let axis = rng.gen_range(0..3);
            p[axis] = (p[axis] + if rng.gen_bool(0.5) { 1 } else { -1 }).clamp(0, 7);
        }
        LabeledGrid::from_labels(8, labels, schema.clone()).expect("labels in range")
    };
    let mut singles = 0;
    for i in 0..50 {
        let a = if i % 2 == 0 { blob(&mut rng) } else { random_grid(&mut rng) };
        let b = random_grid(&mut rng);
        let occ = a.occupancy();
        if miou(&a, &b)? != brute_miou(&a, &b) {
            return Ok((false, format!("mIoU differs on instance {i}")));
        }
        let single = brute_components(&occ) == 1;
        if shapefactor::voxel::connected_components(&occ) != brute_components(&occ) || is_single_component(&occ) != single {
            return Ok((false, format!("connectivity differs on instance {i}")));
        }
        if symmetry_score(&occ) != brute_symmetry(&occ) {
            return Ok((false, format!("symmetry differs on instance {i}")));
        }
        singles += single as usize;
    }
    Ok((true, format!("50 instances exact ({singles} single-component)")))
}

// ---------------------------------------------------------------- criterion 7

fn each_permutation(m: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, m: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == m {
            out.push(prefix.clone());
            return;
        }
        for v in 0..m {
            if !prefix.contains(&v) {
                prefix.push(v);
                go(prefix, m, out);
                prefix.pop();
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), m, &mut out);
    out
}

fn all_mixings(m: usize, k: usize) -> Vec<Mixing> {
    let perms = each_permutation(m);
    let mut out = vec![Mixing { perms: Vec::new() }];
    for _ in 0..k {
        out = out
            .into_iter()
            .flat_map(|mx| {
                perms.iter().map(move |p| {
                    let mut n = mx.clone();
                    n.perms.push(p.clone());
                    n
                })
            })
            .collect();
    }
    out
}

fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    Tensor::new(t.shape.clone(), idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect())
}

fn cycle_machinery() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut draws = 0;
    for (m, k) in [(2, 1), (2, 2), (2, 4), (3, 2), (3, 3), (4, 2), (5, 1)] {
        let x = Tensor::uniform(vec![m * k, 5], -1.0, 1.0, &mut rng);
        for mixing in all_mixings(m, k) {
            if gather(&gather(&x, &mixing.mix_index()), &mixing.demix_index()) != x {
                return Ok((false, format!("demix(mix) differs for {:?}", mixing.perms)));
            }
            draws += 1;
        }
    }
    for _ in 0..500 {
        let mixing = Mixing::sample(16, 4, &mut rng)?;
        let x = Tensor::uniform(vec![64, 3], -1.0, 1.0, &mut rng);
        if gather(&gather(&x, &mixing.mix_index()), &mixing.demix_index()) != x {
            return Ok((false, "demix(mix) differs on a sampled draw".into()));
        }
        draws += 1;
    }

    // M=2, K=2: cycle loss of every permutation combination
    let ds = generate_dataset(&DatasetConfig::new(2, 1, 1, 5, 16))?;
    let config = ModelConfig {
        embed_dim: 16,
        encoder_channels: vec![4, 8],
        decoder_channels: vec![8, 4],
        stn_channels: vec![4],
        stn_features: 8,
        stn_hidden: 16,
        ..ModelConfig::new(16, 2)
    };
    let model = ShapeModel::new(&config, 11)?;
    let occ = occupancies(&ds.train_shapes());
    let refs: Vec<&OccupancyGrid> = occ.iter().collect();
    let grids = grids_tensor(&refs)?;
    let loss_of = |mixing: &Mixing| -> shapefactor::Result<f64> {
        let mut s = Session::frozen(&model.params);
        let x = s.graph.input(grids.clone());
        let e = model.encoder.forward(&mut s, x)?;
        let p = model.projections.forward(&mut s, e)?;
        let l = cycle_loss(&mut s, &model, p, None, &grids, mixing)?;
        Ok(s.graph.value(l).item())
    };
    let table: Vec<(Mixing, f64)> =
        all_mixings(2, 2).into_iter().map(|mx| loss_of(&mx).map(|l| (mx, l))).collect::<shapefactor::Result<_>>()?;
    let uniform = table.iter().map(|(_, l)| l).sum::<f64>() / 4.0;

    let n = 400;
    let mut counts = [0usize; 4];
    let mut sampled = 0.0;
    for _ in 0..n {
        let mixing = Mixing::sample(2, 2, &mut rng)?;
        let c = table.iter().position(|(mx, _)| *mx == mixing).ok_or("draw outside the enumeration")?;
        counts[c] += 1;
        sampled += loss_of(&mixing)?;
    }
    sampled /= n as f64;
    let weighted: f64 = table.iter().zip(&counts).map(|((_, l), &c)| l * c as f64).sum::<f64>() / n as f64;
    let sigma = (n as f64 * 0.25 * 0.75).sqrt();
    let uniform_counts = counts.iter().all(|&c| (c as f64 - n as f64 / 4.0).abs() <= 3.0 * sigma);
    let spread = {
        let var = table.iter().map(|(_, l)| (l - uniform).powi(2)).sum::<f64>() / 4.0;
        3.0 * (var / n as f64).sqrt()
    };
    let matches = (sampled - weighted).abs() <= 1e-12;
    let near_uniform = (sampled - uniform).abs() <= spread.max(1e-15);
    Ok((
        matches && uniform_counts && near_uniform,
        format!(
            "{draws} demix(mix) draws exact; M=2,K=2 sampled mean {sampled:.12} vs enumeration at drawn \
             frequencies {weighted:.12} (diff {:.1e}, limit 1e-12); counts {counts:?}; \
             uniform expectation {uniform:.12} (diff {:.2e}, 3 s.e. {spread:.2e})",
            (sampled - weighted).abs(),
            (sampled - uniform).abs()
        ),
    ))
}

// ---------------------------------------------------------------- criterion 8

fn determinism(desk: &Desk) -> Check {
    let cfg = desk.dir.join("determinism.txt");
    std::fs::write(&cfg, "stage_a_epochs = 2\nstage_b_epochs = 1\nstage_c_epochs = 1\n")?;
    let mut runs = Vec::new();
    for name in ["det_a", "det_b"] {
        let out = desk.dir.join(name);
        ok(&["train", "--config", path(&cfg), "--data", path(&desk.data_dir), "--out", path(&out), "--seed", "0"]);
        runs.push(out);
    }
    let files = ["stage_a.ckpt", "stage_b.ckpt", "final.ckpt", "best.ckpt", "last.ckpt", "train_log.csv", "val_log.csv"];
    for f in files {
        if std::fs::read(runs[0].join(f))? != std::fs::read(runs[1].join(f))? {
            return Ok((false, format!("{f} differs between identical runs")));
        }
    }
    let model = desk.run.join(FINAL_CKPT);
    let mut outputs = Vec::new();
    for threads in ["1", "4"] {
        let out = desk.dir.join(format!("eval_threads_{threads}"));
        ok(&[
            "evaluate",
            "--model",
            path(&model),
            "--data",
            path(&desk.data_dir),
            "--out",
            path(&out),
            "--threads",
            threads,
            "--train-classifier",
        ]);
        outputs.push(out);
    }
    let mut compared = 0;
    for f in ["metrics.csv", "classifier.ckpt"] {
        if std::fs::read(outputs[0].join(f))? != std::fs::read(outputs[1].join(f))? {
            return Ok((false, format!("{f} differs between 1 and 4 threads")));
        }
        compared += 1;
    }
    for exp in ["rec", "swap", "mix", "naive_mix"] {
        for entry in std::fs::read_dir(outputs[0].join(exp))? {
            let name = entry?.file_name();
            if std::fs::read(outputs[0].join(exp).join(&name))? != std::fs::read(outputs[1].join(exp).join(&name))? {
                return Ok((false, format!("{exp}/{} differs between 1 and 4 threads", name.to_string_lossy())));
            }
            compared += 1;
        }
    }
    Ok((true, format!("{} checkpoint and log files identical; {compared} evaluation files identical", files.len())))
}

// ---------------------------------------------------------------- criterion 9

fn classifier_pipeline(desk: &Desk) -> Check {
    let trained = train_classifier(&desk.data, &ClassifierConfig::default(), 0)?;
    let test = desk.data.test_shapes();
    let gt = classifier_accuracy(&trained.classifier, &test)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let k = desk.data.schema().len();
    let random: Vec<LabeledGrid> = (0..test.len())
        .map(|_| {
            let donors: Vec<&LabeledGrid> = (0..k).map(|_| test[rng.gen_range(0..test.len())]).collect();
            naive_placement(&donors)
        })
        .collect::<shapefactor::Result<_>>()?;
    let refs: Vec<&LabeledGrid> = random.iter().collect();
    let naive = classifier_accuracy(&trained.classifier, &refs)?;
    // the filtered negatives the classifier was validated on, for reference
    let filtered = sample_negatives(&test, test.len(), &mut rng)?;
    let frefs: Vec<&LabeledGrid> = filtered.iter().collect();
    let filtered_score = classifier_accuracy(&trained.classifier, &frefs)?;
    Ok((
        trained.held_out_accuracy >= 0.8 && gt > naive,
        format!(
            "held-out accuracy {:.3} (limit 0.8); mean score GT {gt:.3} vs random naive {naive:.3} \
             (similarity-filtered naive {filtered_score:.3})",
            trained.held_out_accuracy
        ),
    ))
}

// ---------------------------------------------------------------- driver

fn prepare(dir: &Path) -> Result<Desk, Box<dyn std::error::Error>> {
    let data = generate_dataset(&desk_dataset())?;
    let data_dir = dir.join("data");
    save_dataset(&data, &data_dir)?;
    let run = dir.join("full_0");
    let start = Instant::now();
    let report = train(&data, &desk_config(0), &run, |r| {
        if r.epoch % 10 == 0 {
            println!("  desk run epoch {:3} [{}] val mIoU {:.3}", r.epoch, r.stage.name(), r.val_miou);
        }
    })?;
    let train_secs = start.elapsed().as_secs_f64();
    println!("  desk run best val mIoU {:.3} at epoch {}", report.best_val_miou, report.best_epoch);
    Ok(Desk { dir: dir.to_path_buf(), data, data_dir, run, train_secs })
}

fn run_desk(dir: &Path, record: &mut impl FnMut(usize, &'static str, Check), criteria: [(usize, &'static str); 5]) {
    match prepare(dir) {
        Ok(desk) => {
            record(2, "partition of identity", partition_algebra(&desk));
            record(4, "end-to-end desk training", end_to_end(&desk));
            record(9, "classifier pipeline", classifier_pipeline(&desk));
            record(8, "determinism", determinism(&desk));
            record(5, "ablation orderings", ablation_orderings(&desk));
        }
        Err(e) => {
            for (id, name) in criteria {
                record(id, name, Err(format!("desk training failed: {e}").into()));
            }
        }
    }
}

fn main() {
    let work = tempfile::tempdir().expect("scratch directory");
    let mut results: Vec<(usize, &str, bool, String)> = Vec::new();
    let mut record = |id: usize, name: &'static str, check: Check| {
        let (pass, detail) = check.unwrap_or_else(|e| (false, format!("error: {e}")));
        println!("{} criterion {id} ({name}): {detail}", if pass { "PASS" } else { "FAIL" });
        results.push((id, name, pass, detail));
    };

    record(1, "gradient suite", gradient_suite());
    record(3, "sampler exactness", sampler_exactness());
    record(6, "metric oracles", metric_oracles());
    record(7, "cycle machinery", cycle_machinery());

    let desk_criteria = [(2, "partition of identity"), (4, "end-to-end desk training"), (5, "ablation orderings"), (8, "determinism"), (9, "classifier pipeline")];
    if std::env::var("ACCEPTANCE_SKIP_DESK").is_ok_and(|v| v == "1") {
        for (id, name) in desk_criteria {
            println!("SKIP criterion {id} ({name})");
        }
    } else {
        println!("  training the desk model (R=16, 200/20/20 shapes, stages 50/20/30, seed 0)");
        run_desk(work.path(), &mut record, desk_criteria);
    }
    drop(record);

    results.sort_by_key(|r| r.0);
    println!("\nacceptance summary");
    for (id, name, pass, _) in &results {
        println!("{} {id}. {name}", if *pass { "PASS" } else { "FAIL" });
    }
    let passed = results.iter().filter(|r| r.2).count();
    println!("{passed}/{} criteria pass", results.len());
    if std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") && passed < results.len() {
        std::process::exit(1);
    }
}
