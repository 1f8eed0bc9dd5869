//! The experiment battery on the ground-truth oracle: composing true
//! canonical parts with true transforms. Gives the metric ceiling of the
//! assembly step on a dataset without training anything.
//!
//! cargo run --release --example oracle -- [n_test] [seed]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shapefactor::eval::{metrics, metrics_csv, run_mix, run_reconstruction, run_swap, OraclePipeline};
use shapefactor::synthdata::{generate_dataset, DatasetConfig};

fn main() -> shapefactor::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let n_test = args.first().copied().unwrap_or(20) as usize;
    let seed = args.get(1).copied().unwrap_or(0);
    let ds = generate_dataset(&DatasetConfig::new(1, 1, n_test, seed, 16))?;
    let test = ds.test_shapes();
    let oracle = OraclePipeline::new(&test)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut rows = vec![metrics(&run_reconstruction(&oracle, &test)?, None)?];
    rows.push(metrics(&run_swap(&oracle, &test, &mut rng)?, None)?);
    let (mix, naive) = run_mix(&oracle, &test, 16, &mut rng)?;
    rows.push(metrics(&mix, None)?);
    rows.push(metrics(&naive, None)?);
    print!("{}", metrics_csv(&rows));
    Ok(())
}
