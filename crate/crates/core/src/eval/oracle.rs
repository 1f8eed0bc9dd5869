use super::Pipeline;
use crate::autodiff::Tensor;
use crate::composer::{assemble, ComposedShape, TAU};
use crate::error::{Error, Result};
use crate::voxel::{extract_parts, resample, LabeledGrid, OccupancyGrid, PartSchema, PartSet};

/// A pipeline that bypasses learning: it knows a fixed set of shapes and
/// composes their ground-truth canonical parts with ground-truth transforms.
///
/// Shape `i` embeds to ones at coordinates `k·N + i` for every part `k`;
/// block selectors recover one coordinate per part, which the decoder maps
/// back to the ground truth of `(i, k)`. Mixing and swapping therefore act
/// on real ground-truth parts.
#[derive(Clone, Debug)]
pub struct OraclePipeline {
    shapes: Vec<LabeledGrid>,
    parts: Vec<PartSet>,
    occupancy: Vec<OccupancyGrid>,
}

impl OraclePipeline {
    pub fn new(shapes: &[&LabeledGrid]) -> Result<Self> {
        let first = shapes.first().ok_or_else(|| Error::invalid("oracle over no shapes"))?;
        for s in shapes {
            first.same_layout(s)?;
        }
        Ok(Self {
            shapes: shapes.iter().map(|s| (*s).clone()).collect(),
            parts: shapes.iter().map(|s| extract_parts(s)).collect(),
            occupancy: shapes.iter().map(|s| s.occupancy()).collect(),
        })
    }

    fn n(&self) -> usize {
        self.shapes.len()
    }

    /// Nearest known shape of a part block; interpolated blocks round to
    /// their dominant coordinate.
    fn donor(&self, block: &[f64]) -> usize {
        let mut best = 0;
        for (i, &v) in block.iter().enumerate() {
            if v > block[best] {
                best = i;
            }
        }
        best
    }
}

impl Pipeline for OraclePipeline {
    fn resolution(&self) -> usize {
        self.shapes[0].resolution()
    }

    fn parts(&self) -> usize {
        self.shapes[0].schema().len()
    }

    fn embed(&self, grids: &[&OccupancyGrid]) -> Result<Tensor> {
        let (n, k) = (self.n(), self.parts());
        let mut data = vec![0.0; grids.len() * n * k];
        for (b, g) in grids.iter().enumerate() {
            let i = self
                .occupancy
                .iter()
                .position(|o| o == *g)
                .ok_or_else(|| Error::invalid("oracle asked to embed an unknown shape"))?;
            for j in 0..k {
                data[b * n * k + j * n + i] = 1.0;
            }
        }
        Ok(Tensor::new(vec![grids.len(), n * k], data))
    }

    fn project(&self, e: &Tensor) -> Result<Tensor> {
        let (n, k) = (self.n(), self.parts());
        let dim = n * k;
        let mut data = vec![0.0; e.rows() * k * dim];
        for b in 0..e.rows() {
            for j in 0..k {
                let row = (b * k + j) * dim;
                data[row + j * n..row + (j + 1) * n].copy_from_slice(&e.row(b)[j * n..(j + 1) * n]);
            }
        }
        Ok(Tensor::new(vec![e.rows() * k, dim], data))
    }

    fn compose(&self, parts: &Tensor, schema: &PartSchema) -> Result<Vec<ComposedShape>> {
        let (n, k, r) = (self.n(), self.parts(), self.resolution());
        if schema.len() != k || parts.rows() % k != 0 {
            return Err(Error::Schema("oracle part layout mismatch".into()));
        }
        (0..parts.rows() / k)
            .map(|b| {
                let mut canonicals = Vec::with_capacity(k);
                let mut transforms = Vec::with_capacity(k);
                for j in 0..k {
                    let row = parts.row(b * k + j);
                    let src = self.donor(&row[j * n..(j + 1) * n]);
                    canonicals.push(self.parts[src].parts[j].clone());
                    transforms.push(self.parts[src].transforms[j]);
                }
                let placed: Vec<Vec<f64>> =
                    canonicals.iter().zip(&transforms).map(|(c, t)| resample(c, r, t)).collect();
                let refs: Vec<&[f64]> = placed.iter().map(Vec::as_slice).collect();
                Ok(ComposedShape { grid: assemble(&refs, r, schema, TAU)?, canonicals, transforms, placed })
            })
            .collect()
    }
}
