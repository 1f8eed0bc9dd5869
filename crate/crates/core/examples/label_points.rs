//! Recover voxel labels from a sparse labeled point sample with the Potts
//! graph cut, and compare against the generator's ground truth.
//!
//! cargo run --release --example label_points -- [points_per_part] [lambda]

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shapefactor::synthdata::{generate_dataset, DatasetConfig};
use shapefactor::voxel::{coords, label_from_points_traced, miou, voxel_center, LabeledPoint};

fn main() -> shapefactor::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let per_part: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(6);
    let lambda: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let ds = generate_dataset(&DatasetConfig::new(5, 1, 1, 3, 16))?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    for (i, gt) in ds.shapes.iter().enumerate() {
        let r = gt.resolution();
        let mut points = Vec::new();
        for label in 1..=gt.schema().len() as u8 {
            let mut voxels: Vec<usize> = (0..gt.labels().len()).filter(|&v| gt.labels()[v] == label).collect();
            voxels.shuffle(&mut rng);
            for &v in voxels.iter().take(per_part) {
                let (x, y, z) = coords(r, v);
                let pos = [voxel_center(x, r), voxel_center(y, r), voxel_center(z, r)];
                points.push(LabeledPoint { pos, label });
            }
        }
        let result = label_from_points_traced(&gt.occupancy(), &points, gt.schema(), lambda)?;
        println!(
            "shape {i}: {:>3} points, energy {:.2} -> {:.2} in {} moves, mIoU vs truth {:.3}",
            points.len(),
            result.energies[0],
            result.energies.last().copied().unwrap_or(0.0),
            result.energies.len() - 1,
            miou(&result.grid, gt)?
        );
    }
    Ok(())
}
