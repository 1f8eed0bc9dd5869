//! The full network: encoder, projections, and one of two composers.

use crate::autodiff::{ParamStore, Session, Tensor, Var};
use crate::composer::{
    compose_vars, labels_from_probs, unpack_composed, ComposedShape, LocalizationNet, MonolithicNet,
    PartDecoderNet, DECODER_CHANNELS, MONO_HIDDEN, STN_CHANNELS, STN_FEATURES, STN_HIDDEN,
};
use crate::decomposer::{grids_tensor, EncoderNet, ProjectionSet, DEFAULT_EMBED_DIM, ENCODER_CHANNELS};
use crate::error::{Error, Result};
use crate::voxel::{OccupancyGrid, PartSchema};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::Path;

/// Shapes per independent inference graph. Fixed so results never depend on
/// the thread count.
pub const INFER_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ComposerKind {
    /// Shared part decoder plus spatial transformer.
    Stn,
    /// Single decoder straight to a labeled volume (ablation).
    Monolithic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub resolution: usize,
    pub parts: usize,
    pub embed_dim: usize,
    pub encoder_channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    pub stn_channels: Vec<usize>,
    pub stn_features: usize,
    pub stn_hidden: usize,
    pub mono_hidden: usize,
    pub composer: ComposerKind,
}

impl ModelConfig {
    pub fn new(resolution: usize, parts: usize) -> Self {
        Self {
            resolution,
            parts,
            embed_dim: DEFAULT_EMBED_DIM,
            encoder_channels: ENCODER_CHANNELS.to_vec(),
            decoder_channels: DECODER_CHANNELS.to_vec(),
            stn_channels: STN_CHANNELS.to_vec(),
            stn_features: STN_FEATURES,
            stn_hidden: STN_HIDDEN,
            mono_hidden: MONO_HIDDEN,
            composer: ComposerKind::Stn,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Composer {
    Stn { decoder: PartDecoderNet, localizer: LocalizationNet },
    Monolithic(MonolithicNet),
}

/// Network layout plus the parameters it reads.
#[derive(Clone, Debug)]
pub struct ShapeModel {
    pub params: ParamStore,
    pub encoder: EncoderNet,
    pub projections: ProjectionSet,
    pub composer: Composer,
}

impl ShapeModel {
    /// Fresh parameters; all randomness from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (r, k, n) = (config.resolution, config.parts, config.embed_dim);
        let encoder = EncoderNet::new(&mut store, r, &config.encoder_channels, n, &mut rng)?;
        let projections = ProjectionSet::new(&mut store, k, n)?;
        let composer = match config.composer {
            ComposerKind::Stn => Composer::Stn {
                decoder: PartDecoderNet::new(&mut store, r, n, &config.decoder_channels, &mut rng)?,
                localizer: LocalizationNet::new(
                    &mut store,
                    k,
                    n,
                    &config.stn_channels,
                    config.stn_features,
                    config.stn_hidden,
                    &mut rng,
                )?,
            },
            ComposerKind::Monolithic => Composer::Monolithic(MonolithicNet::new(
                &mut store,
                r,
                k,
                n,
                config.mono_hidden,
                &config.decoder_channels,
                &mut rng,
            )?),
        };
        Ok(Self { params: store, encoder, projections, composer })
    }

    /// Rebuilds the layout from parameter names and shapes.
    pub fn from_params(params: ParamStore) -> Result<Self> {
        let encoder = EncoderNet::from_params(&params)?;
        let projections = ProjectionSet::from_params(&params)?;
        let composer = if params.id("mono.fc0.W").is_some() {
            Composer::Monolithic(MonolithicNet::from_params(&params)?)
        } else {
            Composer::Stn {
                decoder: PartDecoderNet::from_params(&params)?,
                localizer: LocalizationNet::from_params(&params)?,
            }
        };
        let model = Self { params, encoder, projections, composer };
        model.check_consistent()?;
        Ok(model)
    }

    fn check_consistent(&self) -> Result<()> {
        let (r, k, n) = (self.resolution(), self.parts(), self.embed_dim());
        let ok = match &self.composer {
            Composer::Stn { decoder, localizer } => {
                decoder.resolution() == r && decoder.embed_dim() == n && localizer.parts() == k
            }
            Composer::Monolithic(m) => m.resolution() == r && m.parts() == k,
        };
        if ok && self.projections.dim() == n {
            Ok(())
        } else {
            Err(Error::invalid("checkpoint networks disagree on resolution, parts or embedding size"))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_params(ParamStore::load(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)
    }

    pub fn resolution(&self) -> usize {
        self.encoder.resolution()
    }

    pub fn parts(&self) -> usize {
        self.projections.parts()
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder.embed_dim()
    }

    pub fn kind(&self) -> ComposerKind {
        match self.composer {
            Composer::Stn { .. } => ComposerKind::Stn,
            Composer::Monolithic(_) => ComposerKind::Monolithic,
        }
    }

    pub fn check_schema(&self, schema: &PartSchema) -> Result<()> {
        if schema.len() == self.parts() {
            Ok(())
        } else {
            Err(Error::Schema(format!(
                "model has {} parts, data schema has {}",
                self.parts(),
                schema.len()
            )))
        }
    }

    /// Whole-shape embeddings `[B, n]`.
    pub fn embed(&self, grids: &[&OccupancyGrid]) -> Result<Tensor> {
        if let Some(g) = grids.iter().find(|g| g.resolution() != self.resolution()) {
            return Err(Error::shape(
                "encode",
                format!("model resolution {}, grid resolution {}", self.resolution(), g.resolution()),
            ));
        }
        chunked(grids, |chunk| {
            let mut s = Session::frozen(&self.params);
            let x = s.graph.input(grids_tensor(chunk)?);
            let e = self.encoder.forward(&mut s, x)?;
            Ok(s.graph.value(e).data.clone())
        })
        .map(|data| Tensor::new(vec![grids.len(), self.embed_dim()], data))
    }

    /// `[B, n]` → part embeddings `[B·K, n]`, row `b·K + k`.
    pub fn project(&self, e: &Tensor) -> Result<Tensor> {
        let mut s = Session::frozen(&self.params);
        let x = s.graph.input(e.clone());
        let p = self.projections.forward(&mut s, x)?;
        Ok(s.graph.value(p).clone())
    }

    /// Composes `[B·K, n]` part embeddings. Monolithic models return only
    /// the grid; their canonical, transform and placed lists are empty.
    pub fn compose(&self, parts: &Tensor, schema: &PartSchema) -> Result<Vec<ComposedShape>> {
        self.check_schema(schema)?;
        let k = self.parts();
        let n = self.embed_dim();
        if parts.shape.len() != 2 || parts.shape[1] != n || parts.shape[0] % k != 0 {
            return Err(Error::shape("compose", format!("part embeddings {:?} for K={k}, n={n}", parts.shape)));
        }
        let rows: Vec<&[f64]> = (0..parts.rows() / k).map(|b| &parts.data[b * k * n..(b + 1) * k * n]).collect();
        chunked(&rows, |chunk| {
            let data: Vec<f64> = chunk.concat();
            let mut s = Session::frozen(&self.params);
            let x = s.graph.input(Tensor::new(vec![chunk.len() * k, n], data));
            self.compose_session(&mut s, x, schema)
        })
    }

    fn compose_session(&self, s: &mut Session, parts: Var, schema: &PartSchema) -> Result<Vec<ComposedShape>> {
        match &self.composer {
            Composer::Stn { decoder, localizer } => {
                let out = compose_vars(s, decoder, localizer, parts)?;
                unpack_composed(s, &out, schema)
            }
            Composer::Monolithic(m) => {
                let probs = m.forward(s, parts)?;
                let v = s.graph.value(probs);
                Ok((0..v.rows())
                    .map(|b| ComposedShape {
                        grid: labels_from_probs(v.row(b), self.resolution(), schema),
                        canonicals: Vec::new(),
                        transforms: Vec::new(),
                        placed: Vec::new(),
                    })
                    .collect())
            }
        }
    }

    /// Decompose then compose.
    pub fn reconstruct(&self, grids: &[&OccupancyGrid], schema: &PartSchema) -> Result<Vec<ComposedShape>> {
        let e = self.embed(grids)?;
        let p = self.project(&e)?;
        self.compose(&p, schema)
    }
}

/// Runs `f` on fixed-size chunks in parallel and concatenates in order.
fn chunked<T: Sync, R: Send>(
    items: &[T],
    f: impl Fn(&[T]) -> Result<Vec<R>> + Sync,
) -> Result<Vec<R>> {
    if items.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let parts: Vec<Vec<R>> = items.par_chunks(INFER_CHUNK).map(&f).collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_dataset, DatasetConfig};

    fn small(kind: ComposerKind) -> ModelConfig {
        ModelConfig {
            embed_dim: 16,
            encoder_channels: vec![4, 8],
            decoder_channels: vec![8, 4],
            stn_channels: vec![4],
            stn_features: 8,
            stn_hidden: 16,
            mono_hidden: 16,
            composer: kind,
            ..ModelConfig::new(16, 4)
        }
    }

    #[test]
    fn round_trips_through_params() {
        for kind in [ComposerKind::Stn, ComposerKind::Monolithic] {
            let m = ShapeModel::new(&small(kind), 3).unwrap();
            let back = ShapeModel::from_params(ParamStore::from_bytes(&m.params.to_bytes()).unwrap()).unwrap();
            assert_eq!(back.kind(), kind);
            assert_eq!((back.resolution(), back.parts(), back.embed_dim()), (16, 4, 16));
        }
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = ShapeModel::new(&small(ComposerKind::Stn), 5).unwrap();
        let b = ShapeModel::new(&small(ComposerKind::Stn), 5).unwrap();
        let c = ShapeModel::new(&small(ComposerKind::Stn), 6).unwrap();
        assert_eq!(a.params.to_bytes(), b.params.to_bytes());
        assert_ne!(a.params.to_bytes(), c.params.to_bytes());
    }

    #[test]
    fn chunked_inference_matches_single_batch() {
        let ds = generate_dataset(&DatasetConfig::new(11, 1, 1, 0, 16)).unwrap();
        let occ: Vec<OccupancyGrid> = ds.shapes.iter().map(|g| g.occupancy()).collect();
        let refs: Vec<&OccupancyGrid> = occ.iter().collect();
        let m = ShapeModel::new(&small(ComposerKind::Stn), 1).unwrap();
        let all = m.embed(&refs).unwrap();
        for (i, g) in refs.iter().enumerate() {
            let one = m.embed(&[*g]).unwrap();
            assert_eq!(one.data, all.row(i));
        }
        let out = m.reconstruct(&refs, ds.schema()).unwrap();
        assert_eq!(out.len(), refs.len());
        assert!(m.reconstruct(&refs, &PartSchema::tables()).is_err());
        assert!(m.embed(&[]).is_err());
    }
}
