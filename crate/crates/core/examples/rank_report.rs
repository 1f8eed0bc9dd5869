//! Partition-of-identity diagnostics for a checkpoint: the three residuals,
//! the completeness residual on validation embeddings, and per-part ranks.
//!
//! `cargo run --release --example rank_report -- <ckpt> [n_train n_val n_test seed]`

use shapefactor::decomposer::{completeness_residual, effective_rank_report, pi_loss, DEFAULT_RANK_TOL};
use shapefactor::model::ShapeModel;
use shapefactor::synthdata::{generate_dataset, DatasetConfig};
use shapefactor::voxel::OccupancyGrid;

fn main() -> shapefactor::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(ckpt) = args.first() else {
        eprintln!("usage: rank_report <ckpt> [n_train n_val n_test seed]");
        std::process::exit(1);
    };
    let num = |i: usize, d: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let model = ShapeModel::load(ckpt.as_ref())?;
    let data = generate_dataset(&DatasetConfig::new(
        num(1, 200),
        num(2, 20),
        num(3, 20),
        num(4, 0) as u64,
        model.resolution(),
    ))?;

    let mats = model.projections.matrices(&model.params);
    let pi = pi_loss(&mats)?;
    println!(
        "pi_loss {:.6e} (idempotence {:.3e}, orthogonality {:.3e}, completeness {:.3e})",
        pi.total, pi.idempotence, pi.orthogonality, pi.completeness
    );

    let occ: Vec<OccupancyGrid> = data.val_shapes().iter().map(|g| g.occupancy()).collect();
    let refs: Vec<&OccupancyGrid> = occ.iter().collect();
    let e = model.embed(&refs)?;
    let res: Vec<f64> = (0..e.rows()).map(|i| completeness_residual(&mats, e.row(i))).collect();
    let mean = res.iter().sum::<f64>() / res.len() as f64;
    let max = res.iter().cloned().fold(0.0, f64::max);
    println!("completeness residual on {} validation shapes: mean {mean:.4e}, max {max:.4e}", res.len());

    for (k, rec) in effective_rank_report(&mats, DEFAULT_RANK_TOL).iter().enumerate() {
        let top: Vec<String> = rec.singular_values.iter().take(4).map(|s| format!("{s:.3}")).collect();
        println!("P{}: effective rank {:3}, leading singular values {}", k + 1, rec.rank, top.join(" "));
    }
    Ok(())
}
