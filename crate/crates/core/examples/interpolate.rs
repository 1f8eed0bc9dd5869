//! Whole-shape and single-part interpolation between two test shapes.
//!
//! cargo run --release --example interpolate -- <ckpt> <dataset_dir> [out_dir] [part_name]

use shapefactor::eval::{interpolation_alphas, run_interpolation, Interpolation};
use shapefactor::model::ShapeModel;
use shapefactor::synthdata::load_dataset;
use shapefactor::voxel::{export_obj, is_single_component, miou, save_pflg};

fn main() -> shapefactor::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() < 2 {
        eprintln!("usage: interpolate <ckpt> <dataset_dir> [out_dir] [part_name]");
        std::process::exit(1);
    }
    let model = ShapeModel::load(args[0].as_ref())?;
    let ds = load_dataset(args[1].as_ref())?;
    let out = args.get(2).map_or("interp_out", String::as_str);
    let part_name = args.get(3).map_or("back", String::as_str);
    let label = ds
        .schema()
        .label_of(part_name)
        .ok_or_else(|| shapefactor::Error::Invalid(format!("no part named {part_name}")))?;
    let test = ds.test_shapes();
    let (a, b) = (test[0], test[1]);
    let alphas = interpolation_alphas(10)?;

    for (tag, mode) in [("whole", Interpolation::Whole), (part_name, Interpolation::Part(label as usize - 1))] {
        let dir = std::path::Path::new(out).join(tag);
        std::fs::create_dir_all(&dir).map_err(|e| shapefactor::Error::Invalid(e.to_string()))?;
        println!("{tag}:");
        for (i, (g, alpha)) in run_interpolation(&model, a, b, mode, 10)?.iter().zip(&alphas).enumerate() {
            save_pflg(g, &dir.join(format!("{i:02}.pflg")))?;
            export_obj(g, &dir.join(format!("{i:02}.obj")))?;
            println!(
                "  alpha {alpha:.3}: mIoU to A {:.3}, to B {:.3}, connected {}",
                miou(g, a)?,
                miou(g, b)?,
                is_single_component(&g.occupancy())
            );
        }
    }
    Ok(())
}
