//! Train the plausibility classifier and compare ground truth against naive
//! part assemblies.
//!
//! cargo run --release --example classifier -- [n_train] [n_test] [seed]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shapefactor::eval::classifier::sample_negatives;
use shapefactor::eval::{classifier_accuracy, train_classifier, ClassifierConfig};
use shapefactor::synthdata::{generate_dataset, DatasetConfig};

fn main() -> shapefactor::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("numeric argument")).collect();
    let n_train = args.first().copied().unwrap_or(200);
    let n_test = args.get(1).copied().unwrap_or(20);
    let seed = args.get(2).copied().unwrap_or(0) as u64;
    let ds = generate_dataset(&DatasetConfig::new(n_train, 20, n_test, seed, 16))?;
    let t = std::time::Instant::now();
    let trained = train_classifier(&ds, &ClassifierConfig::default(), seed)?;
    println!("trained in {:.1}s", t.elapsed().as_secs_f64());
    println!("train accuracy    {:.3}", trained.train_accuracy);
    println!("held-out accuracy {:.3}", trained.held_out_accuracy);

    let test = ds.test_shapes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5);
    let naive = sample_negatives(&test, test.len(), &mut rng)?;
    let naive_refs: Vec<_> = naive.iter().collect();
    println!("mean score, ground truth     {:.3}", classifier_accuracy(&trained.classifier, &test)?);
    println!("mean score, naive assemblies {:.3}", classifier_accuracy(&trained.classifier, &naive_refs)?);
    Ok(())
}
