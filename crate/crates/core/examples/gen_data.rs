//! Generate a procedural dataset, save it, and summarize part statistics.
//!
//! cargo run --release --example gen_data -- <out_dir> [n_train] [family] [seed]

use shapefactor::synthdata::{generate_dataset, load_dataset, save_dataset, DatasetConfig, Family};

fn main() -> shapefactor::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = args.first().map_or("dataset", String::as_str);
    let n_train = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let family = Family::parse(args.get(2).map_or("chair", String::as_str))?;
    let seed = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);

    let config = DatasetConfig { family, ..DatasetConfig::new(n_train, 20, 20, seed, 16) };
    let ds = generate_dataset(&config)?;
    save_dataset(&ds, out.as_ref())?;
    assert_eq!(load_dataset(out.as_ref())?, ds, "reload must be exact");

    let schema = ds.schema();
    println!("{} {} shapes at {}^3 in {out}", ds.shapes.len(), family.name(), config.resolution);
    for (k, name) in schema.names().iter().enumerate() {
        let label = k as u8 + 1;
        let with = ds.shapes.iter().filter(|g| g.has_label(label)).count();
        let voxels: usize = ds.shapes.iter().map(|g| g.label_count(label)).sum();
        println!("  {name:<6} present in {with:>3} shapes, {:.1} voxels on average", voxels as f64 / with.max(1) as f64);
    }
    Ok(())
}
