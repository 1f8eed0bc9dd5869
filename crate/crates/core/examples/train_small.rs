//! Three-stage training on a procedurally generated chair set.
//!
//! `cargo run --release --example train_small -- [out_dir] [n_train] [a,b,c epochs] [lr]`

use shapefactor::synthdata::{generate_dataset, DatasetConfig};
use shapefactor::training::{train, TrainConfig};
use std::time::Instant;

fn main() -> shapefactor::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = args.first().map_or("runs/small", String::as_str);
    let n_train: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    let epochs: Vec<usize> = args
        .get(2)
        .map(|s| s.split(',').filter_map(|x| x.parse().ok()).collect())
        .unwrap_or_else(|| vec![5, 2, 3]);
    let mut config = TrainConfig::default();
    config.stage_epochs = [epochs[0], epochs[1], epochs[2]];
    if let Some(lr) = args.get(3).and_then(|s| s.parse().ok()) {
        config.adam.lr = lr;
    }

    let data = generate_dataset(&DatasetConfig::new(n_train, 20, 20, 0, 16))?;
    print!("{}", config.to_kv());
    let start = Instant::now();
    let report = train(&data, &config, out.as_ref(), |r| {
        println!(
            "epoch {:3} stage {} lr {:.2e} L_part {:>10.3} L_trans {:>8.4} L_cycle {:>10.3} val_mIoU {:.3}  [{:.0}s]",
            r.epoch,
            r.stage.name(),
            r.lr,
            r.train.part.unwrap_or(f64::NAN),
            r.train.trans.unwrap_or(f64::NAN),
            r.train.cycle.unwrap_or(f64::NAN),
            r.val_miou,
            start.elapsed().as_secs_f64()
        );
    })?;
    println!(
        "best val mIoU {:.3} at epoch {}; checkpoints in {}",
        report.best_val_miou,
        report.best_epoch,
        report.out_dir.display()
    );
    Ok(())
}
