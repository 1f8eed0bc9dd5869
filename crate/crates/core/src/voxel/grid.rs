use crate::error::{Error, Result};

/// Linear index of voxel `(x, y, z)` in a grid of side `r`.
///
/// Storage is x-major: `y` varies fastest, then `z`, then `x` (the binvox order).
#[inline]
pub fn linear_index(r: usize, x: usize, y: usize, z: usize) -> usize {
    x * r * r + z * r + y
}

/// Inverse of [`linear_index`].
#[inline]
pub fn coords(r: usize, idx: usize) -> (usize, usize, usize) {
    let x = idx / (r * r);
    let rem = idx % (r * r);
    (x, rem % r, rem / r)
}

/// Binary `R³` voxel volume.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct OccupancyGrid {
    resolution: usize,
    data: Vec<u8>,
}

impl OccupancyGrid {
    pub fn empty(resolution: usize) -> Self {
        Self {
            resolution,
            data: vec![0; resolution.pow(3)],
        }
    }

    pub fn full(resolution: usize) -> Self {
        Self {
            resolution,
            data: vec![1; resolution.pow(3)],
        }
    }

    pub fn from_data(resolution: usize, data: Vec<u8>) -> Result<Self> {
        if resolution == 0 {
            return Err(Error::invalid("grid resolution must be positive"));
        }
        if data.len() != resolution.pow(3) {
            return Err(Error::invalid(format!(
                "grid of resolution {resolution} needs {} voxels, got {}",
                resolution.pow(3),
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::invalid("occupancy values must be 0 or 1"));
        }
        Ok(Self { resolution, data })
    }

    pub fn from_fn(resolution: usize, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut g = Self::empty(resolution);
        for idx in 0..g.data.len() {
            let (x, y, z) = coords(resolution, idx);
            g.data[idx] = f(x, y, z) as u8;
        }
        g
    }

    /// Threshold a real-valued volume (`v >= threshold` is occupied).
    pub fn from_volume(resolution: usize, volume: &[f64], threshold: f64) -> Self {
        debug_assert_eq!(volume.len(), resolution.pow(3));
        Self {
            resolution,
            data: volume.iter().map(|&v| (v >= threshold) as u8).collect(),
        }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[linear_index(self.resolution, x, y, z)] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: bool) {
        let r = self.resolution;
        self.data[linear_index(r, x, y, z)] = value as u8;
    }

    pub fn occupied_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Occupancy as a `0.0 / 1.0` volume, the network input layout.
    pub fn to_volume(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Mirror across the plane `x = center`.
    pub fn reflect_x(&self) -> Self {
        let r = self.resolution;
        Self::from_fn(r, |x, y, z| self.get(r - 1 - x, y, z))
    }
}

/// Named semantic parts of a shape category.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PartSchema {
    names: Vec<String>,
}

impl PartSchema {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 2 {
            return Err(Error::Schema(format!(
                "a schema needs at least two parts, got {}",
                names.len()
            )));
        }
        if names.len() > 254 {
            return Err(Error::Schema("at most 254 parts fit a label byte".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.chars().any(char::is_whitespace) {
                return Err(Error::Schema(format!("invalid part name {n:?}")));
            }
            if names[..i].contains(n) {
                return Err(Error::Schema(format!("duplicate part name {n:?}")));
            }
        }
        Ok(Self { names })
    }

    /// back, seat, leg, arm.
    pub fn chairs() -> Self {
        Self::new(["back", "seat", "leg", "arm"]).expect("static schema")
    }

    /// top, leg, shelf.
    pub fn tables() -> Self {
        Self::new(["top", "leg", "shelf"]).expect("static schema")
    }

    /// Number of parts `K`.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Name of label `k` in `1..=K`.
    pub fn name(&self, label: u8) -> &str {
        &self.names[label as usize - 1]
    }

    pub fn label_of(&self, name: &str) -> Option<u8> {
        self.names.iter().position(|n| n == name).map(|i| i as u8 + 1)
    }
}

/// Per-voxel semantic labels: `0` is empty, `1..=K` are parts.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabeledGrid {
    resolution: usize,
    labels: Vec<u8>,
    schema: PartSchema,
}

impl LabeledGrid {
    pub fn empty(resolution: usize, schema: PartSchema) -> Self {
        Self {
            resolution,
            labels: vec![0; resolution.pow(3)],
            schema,
        }
    }

    pub fn from_labels(resolution: usize, labels: Vec<u8>, schema: PartSchema) -> Result<Self> {
        if resolution == 0 || labels.len() != resolution.pow(3) {
            return Err(Error::invalid(format!(
                "labeled grid of resolution {resolution} needs {} voxels, got {}",
                resolution.pow(3),
                labels.len()
            )));
        }
        let k = schema.len() as u8;
        if let Some(bad) = labels.iter().find(|&&l| l > k) {
            return Err(Error::Schema(format!("label {bad} exceeds part count {k}")));
        }
        Ok(Self {
            resolution,
            labels,
            schema,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn schema(&self) -> &PartSchema {
        &self.schema
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[linear_index(self.resolution, x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, label: u8) {
        debug_assert!(label as usize <= self.schema.len());
        let r = self.resolution;
        self.labels[linear_index(r, x, y, z)] = label;
    }

    pub fn set_index(&mut self, idx: usize, label: u8) {
        self.labels[idx] = label;
    }

    pub fn occupancy(&self) -> OccupancyGrid {
        OccupancyGrid {
            resolution: self.resolution,
            data: self.labels.iter().map(|&l| (l > 0) as u8).collect(),
        }
    }

    /// Indicator volume (`0.0 / 1.0`) of one part label.
    pub fn part_mask(&self, label: u8) -> Vec<f64> {
        self.labels
            .iter()
            .map(|&l| if l == label { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn has_label(&self, label: u8) -> bool {
        self.labels.contains(&label)
    }

    pub fn label_count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn same_layout(&self, other: &LabeledGrid) -> Result<()> {
        if self.resolution != other.resolution {
            return Err(Error::Schema(format!(
                "resolution {} vs {}",
                self.resolution, other.resolution
            )));
        }
        if self.schema != other.schema {
            return Err(Error::Schema(format!(
                "parts {:?} vs {:?}",
                self.schema.names(),
                other.schema.names()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_order_is_y_fastest_then_z_then_x() {
        assert_eq!(linear_index(4, 0, 1, 0), 1);
        assert_eq!(linear_index(4, 0, 0, 1), 4);
        assert_eq!(linear_index(4, 1, 0, 0), 16);
        for idx in 0..64 {
            let (x, y, z) = coords(4, idx);
            assert_eq!(linear_index(4, x, y, z), idx);
        }
    }

    #[test]
    fn schema_rejects_duplicates_and_singletons() {
        assert!(PartSchema::new(["a", "a"]).is_err());
        assert!(PartSchema::new(["a"]).is_err());
        assert_eq!(PartSchema::chairs().len(), 4);
        assert_eq!(PartSchema::chairs().label_of("leg"), Some(3));
    }

    #[test]
    fn labels_above_k_rejected() {
        let s = PartSchema::chairs();
        assert!(LabeledGrid::from_labels(2, vec![5; 8], s.clone()).is_err());
        let g = LabeledGrid::from_labels(2, vec![0, 1, 2, 3, 4, 0, 0, 0], s).unwrap();
        assert_eq!(g.occupancy().occupied_count(), 4);
    }

    #[test]
    fn occupancy_values_validated() {
        assert!(OccupancyGrid::from_data(2, vec![2; 8]).is_err());
        assert!(OccupancyGrid::from_data(2, vec![1; 7]).is_err());
    }
}
