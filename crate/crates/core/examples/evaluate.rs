//! Full metric table for a checkpoint, including the plausibility classifier
//! column, written the same way the command line does.
//!
//! cargo run --release --example evaluate -- <ckpt> <dataset_dir> [seed]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shapefactor::eval::{
    metrics, metrics_csv, run_mix, run_reconstruction, run_swap, train_classifier, ClassifierConfig,
};
use shapefactor::model::ShapeModel;
use shapefactor::synthdata::load_dataset;

fn main() -> shapefactor::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() < 2 {
        eprintln!("usage: evaluate <ckpt> <dataset_dir> [seed]");
        std::process::exit(1);
    }
    let model = ShapeModel::load(args[0].as_ref())?;
    let ds = load_dataset(args[1].as_ref())?;
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let trained = train_classifier(&ds, &ClassifierConfig::default(), seed)?;
    println!("classifier held-out accuracy {:.3}", trained.held_out_accuracy);
    let clf = Some(&trained.classifier);

    let test = ds.test_shapes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = vec![metrics(&run_reconstruction(&model, &test)?, clf)?];
    rows.push(metrics(&run_swap(&model, &test, &mut rng)?, clf)?);
    let (mix, naive) = run_mix(&model, &test, 16, &mut rng)?;
    rows.push(metrics(&mix, clf)?);
    rows.push(metrics(&naive, clf)?);
    print!("{}", metrics_csv(&rows));
    Ok(())
}
