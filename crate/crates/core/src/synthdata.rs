//! Procedural part-labeled chairs and tables.
//!
//! Shapes are built from integer-aligned boxes (or round leg columns) laid out
//! on a 16-voxel design grid and scaled to the requested resolution. Every
//! shape is mirror-symmetric across the plane `x = center`, parts touch their
//! structural neighbors, and labels never overlap.
//!
//! Axes: `y` is up, `x` is left-right (the mirror axis), `z` runs from the
//! front of a chair (`z` small) to its back.

use crate::error::{Error, Result};
use crate::voxel::{load_pflg, save_pflg, LabeledGrid, PartSchema};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Chair,
    Table,
}

impl Family {
    pub fn schema(self) -> PartSchema {
        match self {
            Family::Chair => PartSchema::chairs(),
            Family::Table => PartSchema::tables(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Chair => "chair",
            Family::Table => "table",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "chair" => Ok(Family::Chair),
            "table" => Ok(Family::Table),
            other => Err(Error::invalid(format!("unknown family {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LegStyle {
    Straight,
    /// Lower half of each leg steps one unit outward.
    Splayed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LegProfile {
    Square,
    /// Column of voxels whose centers lie within half a leg width of the leg axis.
    Round,
}

/// Shape parameters in design units (a 16-voxel grid).
///
/// Chairs use every field; tables read the seat fields as the table top,
/// the back fields are ignored and `has_arms` selects the shelf.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeTemplate {
    pub family: Family,
    /// Half the seat (top) width along x, sampled from 4..=6 (chairs) or 5..=7 (tables).
    pub seat_half_width: u32,
    /// Seat depth along z, sampled from 7..=11 (chairs) or 8..=13 (tables).
    pub seat_depth: u32,
    /// Seat thickness, sampled from 1..=2 (chairs) or fixed at 2 (tables).
    pub seat_thickness: u32,
    /// Height of the seat underside above the floor, 4..=7 (chairs) or 6..=10 (tables).
    pub seat_height: u32,
    /// 3 or 4. Three-legged chairs have one leg at the back center, tables at the front center.
    pub leg_count: u32,
    pub leg_style: LegStyle,
    pub leg_profile: LegProfile,
    /// Leg width, always 2.
    pub leg_width: u32,
    /// Back height above the seat, 3..=(free space above the seat).
    pub back_height: u32,
    /// Back thickness along z, always 2.
    pub back_thickness: u32,
    /// Back half width, 2..=seat_half_width (equal to it when arms are present).
    pub back_half_width: u32,
    /// Arms (chairs) or lower shelf (tables), present with the configured probability.
    pub has_arms: bool,
    /// Arm height above the seat, 2..=4; must stay below the back top.
    pub arm_height: u32,
}

const DESIGN: u32 = 16;

impl ShapeTemplate {
    /// Draw a template; `extra_part_prob` is the arm (or shelf) probability.
    pub fn sample(family: Family, extra_part_prob: f64, rng: &mut impl Rng) -> Self {
        let leg_style = if rng.gen_bool(0.5) {
            LegStyle::Straight
        } else {
            LegStyle::Splayed
        };
        let leg_profile = if rng.gen_bool(0.75) {
            LegProfile::Square
        } else {
            LegProfile::Round
        };
        let leg_count = if rng.gen_bool(0.75) { 4 } else { 3 };
        let has_arms = rng.gen_bool(extra_part_prob);
        match family {
            Family::Chair => {
                let seat_half_width = rng.gen_range(4..=6);
                let seat_thickness = rng.gen_range(1..=2);
                let seat_height = rng.gen_range(4..=7);
                let free = DESIGN - 1 - seat_height - seat_thickness;
                let back_height = rng.gen_range(3..=free.max(3));
                let back_half_width = if has_arms {
                    seat_half_width
                } else {
                    rng.gen_range(2..=seat_half_width)
                };
                let arm_height = rng.gen_range(2..=4.min(back_height - 1));
                Self {
                    family,
                    seat_half_width,
                    seat_depth: rng.gen_range(7..=11),
                    seat_thickness,
                    seat_height,
                    leg_count,
                    leg_style,
                    leg_profile,
                    leg_width: 2,
                    back_height,
                    back_thickness: 2,
                    back_half_width,
                    has_arms,
                    arm_height,
                }
            }
            Family::Table => Self {
                family,
                seat_half_width: rng.gen_range(5..=7),
                seat_depth: rng.gen_range(8..=13),
                seat_thickness: 2,
                seat_height: rng.gen_range(6..=10),
                leg_count,
                leg_style,
                leg_profile,
                leg_width: 2,
                back_height: 0,
                back_thickness: 0,
                back_half_width: 0,
                has_arms,
                arm_height: 0,
            },
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::invalid(format!("degenerate template: {what}")));
        if self.seat_half_width == 0 || self.seat_depth == 0 || self.seat_thickness == 0 {
            return bad("zero-size seat");
        }
        if self.seat_height == 0 || self.leg_width == 0 {
            return bad("zero-size legs");
        }
        if !(3..=4).contains(&self.leg_count) {
            return bad("leg count must be 3 or 4");
        }
        if 2 * self.seat_half_width + 2 > DESIGN || self.seat_depth + 2 > DESIGN {
            return bad("seat exceeds the grid");
        }
        if self.seat_half_width < self.leg_width + 1 || self.seat_depth < 2 * self.leg_width + 1 {
            return bad("seat too small for its legs");
        }
        match self.family {
            Family::Chair => {
                if self.back_height == 0 || self.back_thickness == 0 || self.back_half_width == 0 {
                    return bad("zero-size back");
                }
                if self.seat_height + self.seat_thickness + self.back_height > DESIGN {
                    return bad("back exceeds the grid");
                }
                if self.back_half_width > self.seat_half_width {
                    return bad("back wider than seat");
                }
                if self.has_arms {
                    if self.arm_height == 0 {
                        return bad("zero-size arms");
                    }
                    if self.arm_height >= self.back_height {
                        return bad("arms above the back");
                    }
                    if self.back_half_width != self.seat_half_width {
                        return bad("arms need a full-width back");
                    }
                }
            }
            Family::Table => {
                if self.seat_height + self.seat_thickness > DESIGN {
                    return bad("table exceeds the grid");
                }
                if self.has_arms && self.seat_height < 4 {
                    return bad("no room for a shelf");
                }
            }
        }
        Ok(())
    }
}

/// Box in design units, half-open on every axis, `[x0, x1) × [y0, y1) × [z0, z1)`.
#[derive(Clone, Copy, Debug)]
struct DesignBox {
    lo: [i64; 3],
    hi: [i64; 3],
    round: bool,
}

impl DesignBox {
    fn new(lo: [i64; 3], hi: [i64; 3]) -> Self {
        Self { lo, hi, round: false }
    }

    /// Mirror across `x = DESIGN / 2`.
    fn mirrored(self) -> Self {
        let d = DESIGN as i64;
        Self {
            lo: [d - self.hi[0], self.lo[1], self.lo[2]],
            hi: [d - self.lo[0], self.hi[1], self.hi[2]],
            round: self.round,
        }
    }
}

struct Painter {
    grid: LabeledGrid,
    scale: i64,
}

impl Painter {
    fn paint(&mut self, b: DesignBox, label: u8) {
        let s = self.scale;
        let r = self.grid.resolution() as i64;
        let lo = b.lo.map(|v| (v * s).clamp(0, r));
        let hi = b.hi.map(|v| (v * s).clamp(0, r));
        let (cx, cz) = (
            (lo[0] + hi[0]) as f64 / 2.0,
            (lo[2] + hi[2]) as f64 / 2.0,
        );
        let radius = ((hi[0] - lo[0]).min(hi[2] - lo[2])) as f64 / 2.0;
        for x in lo[0]..hi[0] {
            for z in lo[2]..hi[2] {
                if b.round {
                    let (dx, dz) = (x as f64 + 0.5 - cx, z as f64 + 0.5 - cz);
                    // small radii keep the full square so legs never vanish
                    if radius > 1.0 && dx * dx + dz * dz > radius * radius {
                        continue;
                    }
                }
                for y in lo[1]..hi[1] {
                    let (x, y, z) = (x as usize, y as usize, z as usize);
                    debug_assert_eq!(self.grid.get(x, y, z), 0, "parts overlap");
                    self.grid.set(x, y, z, label);
                }
            }
        }
    }
}

/// Leg footprints `(x0, z0)` of the legs on the left half (x < center) plus
/// any leg centered on the mirror plane, in design units.
fn leg_boxes(t: &ShapeTemplate, z_front: i64, z_back: i64) -> Vec<DesignBox> {
    let c = (DESIGN / 2) as i64;
    let w = t.leg_width as i64;
    let x_left = c - t.seat_half_width as i64;
    let top = t.seat_height as i64;
    let split = top / 2;
    let splay = t.leg_style == LegStyle::Splayed;
    let round = t.leg_profile == LegProfile::Round;

    let column = |x0: i64, z0: i64, dx: i64, dz: i64| -> Vec<DesignBox> {
        if splay {
            let mut upper = DesignBox::new([x0, split, z0], [x0 + w, top, z0 + w]);
            let mut lower =
                DesignBox::new([x0 + dx, 0, z0 + dz], [x0 + dx + w, split, z0 + dz + w]);
            upper.round = round;
            lower.round = round;
            vec![upper, lower]
        } else {
            let mut b = DesignBox::new([x0, 0, z0], [x0 + w, top, z0 + w]);
            b.round = round;
            vec![b]
        }
    };

    let mut out = Vec::new();
    let (single_z, pair_z, single_dz, pair_dz) = match t.family {
        // three-legged chairs drop one back corner for a back-center leg
        Family::Chair => (z_back - w, z_front, 1, -1),
        Family::Table => (z_front, z_back - w, -1, 1),
    };
    let pairs: Vec<(i64, i64)> = if t.leg_count == 4 {
        vec![(z_front, -1), (z_back - w, 1)]
    } else {
        vec![(pair_z, pair_dz)]
    };
    for (z0, dz) in pairs {
        for b in column(x_left, z0, -1, dz) {
            out.push(b);
            out.push(b.mirrored());
        }
    }
    if t.leg_count == 3 {
        out.extend(column(c - w / 2, single_z, 0, single_dz));
    }
    out
}

/// Rasterize a template at resolution `r` (even, a multiple of 16).
pub fn generate_shape(template: &ShapeTemplate, r: usize) -> Result<LabeledGrid> {
    template.validate()?;
    if r == 0 || r % DESIGN as usize != 0 {
        return Err(Error::invalid(format!(
            "resolution {r} must be a positive multiple of {DESIGN}"
        )));
    }
    let schema = template.family.schema();
    let mut p = Painter {
        grid: LabeledGrid::empty(r, schema),
        scale: (r / DESIGN as usize) as i64,
    };
    let t = template;
    let c = (DESIGN / 2) as i64;
    let hw = t.seat_half_width as i64;
    let depth = t.seat_depth as i64;
    let z_front = c - depth / 2;
    let z_back = z_front + depth;
    let seat_lo = t.seat_height as i64;
    let seat_hi = seat_lo + t.seat_thickness as i64;

    match t.family {
        Family::Chair => {
            let (back, seat, leg, arm) = (1, 2, 3, 4);
            p.paint(DesignBox::new([c - hw, seat_lo, z_front], [c + hw, seat_hi, z_back]), seat);
            let bt = t.back_thickness as i64;
            let bhw = t.back_half_width as i64;
            let back_top = seat_hi + t.back_height as i64;
            p.paint(
                DesignBox::new([c - bhw, seat_hi, z_back - bt], [c + bhw, back_top, z_back]),
                back,
            );
            for b in leg_boxes(t, z_front, z_back) {
                p.paint(b, leg);
            }
            if t.has_arms {
                let aw = 2;
                let arm_top = seat_hi + t.arm_height as i64;
                // front post, then a rail running back until it meets the back
                let post = DesignBox::new([c - hw, seat_hi, z_front], [c - hw + aw, arm_top, z_front + 2]);
                let rail = DesignBox::new(
                    [c - hw, arm_top - 1, z_front + 2],
                    [c - hw + aw, arm_top, z_back - bt],
                );
                for b in [post, rail] {
                    p.paint(b, arm);
                    p.paint(b.mirrored(), arm);
                }
            }
        }
        Family::Table => {
            let (top, leg, shelf) = (1, 2, 3);
            p.paint(DesignBox::new([c - hw, seat_lo, z_front], [c + hw, seat_hi, z_back]), top);
            let legs = leg_boxes(t, z_front, z_back);
            for b in &legs {
                p.paint(*b, leg);
            }
            if t.has_arms {
                let w = t.leg_width as i64;
                let y = (seat_lo / 2).max(1);
                // a board between the left and right legs, touching their inner faces
                let (x0, x1) = (c - hw + w, c + hw - w);
                let shelf_box = DesignBox::new([x0, y, z_front + 1], [x1, y + 1, z_back - 1]);
                let shelf_box = clip_against(shelf_box, &legs);
                p.paint(shelf_box, shelf);
            }
        }
    }
    Ok(p.grid)
}

/// Shrink a shelf so it never overlaps the (possibly splayed or centered) legs.
fn clip_against(mut b: DesignBox, legs: &[DesignBox]) -> DesignBox {
    for l in legs {
        let overlap = (0..3).all(|d| b.lo[d] < l.hi[d] && l.lo[d] < b.hi[d]);
        if overlap {
            // only center legs can reach the shelf's z range: trim in z toward the middle
            if l.lo[2] <= b.lo[2] {
                b.lo[2] = l.hi[2];
            } else {
                b.hi[2] = l.lo[2];
            }
        }
    }
    b
}

/// Per-shape seed derived from the dataset seed and the shape index.
pub fn shape_seed(seed: u64, index: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(seed ^ splitmix(index))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    pub resolution: usize,
    pub family: Family,
    /// Probability of arms (chairs) or a shelf (tables).
    pub extra_part_prob: f64,
}

impl DatasetConfig {
    pub fn new(n_train: usize, n_val: usize, n_test: usize, seed: u64, resolution: usize) -> Self {
        Self {
            n_train,
            n_val,
            n_test,
            seed,
            resolution,
            family: Family::Chair,
            extra_part_prob: 0.5,
        }
    }

    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub shapes: Vec<LabeledGrid>,
    pub shape_seeds: Vec<u64>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn schema(&self) -> &PartSchema {
        self.shapes[0].schema()
    }

    pub fn train_shapes(&self) -> Vec<&LabeledGrid> {
        self.train.iter().map(|&i| &self.shapes[i]).collect()
    }

    pub fn val_shapes(&self) -> Vec<&LabeledGrid> {
        self.val.iter().map(|&i| &self.shapes[i]).collect()
    }

    pub fn test_shapes(&self) -> Vec<&LabeledGrid> {
        self.test.iter().map(|&i| &self.shapes[i]).collect()
    }
}

pub fn sample_template(config: &DatasetConfig, index: usize) -> (u64, ShapeTemplate) {
    let s = shape_seed(config.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    (s, ShapeTemplate::sample(config.family, config.extra_part_prob, &mut rng))
}

pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset> {
    if config.n_train == 0 || config.n_val == 0 || config.n_test == 0 {
        return Err(Error::invalid("dataset split sizes must be positive"));
    }
    let generated: Vec<(u64, LabeledGrid)> = (0..config.total())
        .into_par_iter()
        .map(|i| {
            let (s, t) = sample_template(config, i);
            generate_shape(&t, config.resolution).map(|g| (s, g))
        })
        .collect::<Result<_>>()?;
    let (shape_seeds, shapes) = generated.into_iter().unzip();
    let n1 = config.n_train;
    let n2 = n1 + config.n_val;
    Ok(Dataset {
        config: config.clone(),
        shapes,
        shape_seeds,
        train: (0..n1).collect(),
        val: (n1..n2).collect(),
        test: (n2..config.total()).collect(),
    })
}

fn shape_file(dir: &Path, id: usize) -> std::path::PathBuf {
    dir.join("shapes").join(format!("{id:05}.pflg"))
}

fn join(ids: &[usize]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
}

/// Write `manifest.txt` and `shapes/<id>.pflg`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let shapes_dir = dir.join("shapes");
    std::fs::create_dir_all(&shapes_dir).map_err(|e| Error::io(&shapes_dir, e))?;
    let c = &ds.config;
    let mut m = String::new();
    let _ = writeln!(m, "seed = {}", c.seed);
    let _ = writeln!(m, "resolution = {}", c.resolution);
    let _ = writeln!(m, "family = {}", c.family.name());
    let _ = writeln!(m, "extra_part_prob = {}", c.extra_part_prob);
    let _ = writeln!(m, "sizes = {} {} {}", c.n_train, c.n_val, c.n_test);
    let _ = writeln!(m, "train = {}", join(&ds.train));
    let _ = writeln!(m, "val = {}", join(&ds.val));
    let _ = writeln!(m, "test = {}", join(&ds.test));
    for (i, s) in ds.shape_seeds.iter().enumerate() {
        let _ = writeln!(m, "shape {i:05} {s}");
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, m).map_err(|e| Error::io(&path, e))?;
    for (i, g) in ds.shapes.iter().enumerate() {
        save_pflg(g, &shape_file(dir, i))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let bad = |what: &str| Error::invalid(format!("{}: bad {what}", path.display()));
    let mut fields = std::collections::HashMap::new();
    let mut shape_seeds = Vec::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("shape ") {
            let mut it = rest.split_whitespace();
            let (_, s) = (it.next(), it.next().ok_or_else(|| bad("shape line"))?);
            shape_seeds.push(s.parse::<u64>().map_err(|_| bad("shape seed"))?);
        } else if let Some((k, v)) = line.split_once('=') {
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let get = |k: &str| fields.get(k).ok_or_else(|| bad(k));
    let ids = |k: &str| -> Result<Vec<usize>> {
        get(k)?
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| bad(k)))
            .collect()
    };
    let sizes = ids("sizes")?;
    if sizes.len() != 3 {
        return Err(bad("sizes"));
    }
    let config = DatasetConfig {
        n_train: sizes[0],
        n_val: sizes[1],
        n_test: sizes[2],
        seed: get("seed")?.parse().map_err(|_| bad("seed"))?,
        resolution: get("resolution")?.parse().map_err(|_| bad("resolution"))?,
        family: Family::parse(get("family")?)?,
        extra_part_prob: get("extra_part_prob")?.parse().map_err(|_| bad("extra_part_prob"))?,
    };
    let (train, val, test) = (ids("train")?, ids("val")?, ids("test")?);
    let shapes = (0..shape_seeds.len())
        .map(|i| load_pflg(&shape_file(dir, i)))
        .collect::<Result<Vec<_>>>()?;
    if shapes.len() != config.total() {
        return Err(bad("shape count"));
    }
    Ok(Dataset {
        config,
        shapes,
        shape_seeds,
        train,
        val,
        test,
    })
}
