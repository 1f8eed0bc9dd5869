//! Plausibility classifier: ground-truth shapes against naive part assemblies.

use super::naive_placement;
use crate::autodiff::{Adam, AdamConfig, ParamStore, Session, Tensor};
use crate::decomposer::grids_tensor;
use crate::error::{Error, Result};
use crate::layers::{find_convs, Conv, Dense};
use crate::synthdata::Dataset;
use crate::voxel::{miou, LabeledGrid, OccupancyGrid};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::Path;

/// Donor tuples with any pair at least this similar are not negatives.
pub const SIMILARITY_MIOU: f64 = 0.7;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub channels: [usize; 2],
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { channels: [8, 16], hidden: 32, epochs: 30, batch_size: 16, lr: 1e-3 }
    }
}

/// Two stride-2 convolutions, two dense layers, sigmoid score.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub params: ParamStore,
    convs: Vec<Conv>,
    fc1: Dense,
    fc2: Dense,
}

impl Classifier {
    pub fn new(resolution: usize, config: &ClassifierConfig, rng: &mut impl Rng) -> Result<Self> {
        if resolution % 4 != 0 {
            return Err(Error::invalid(format!("classifier needs a resolution divisible by 4, got {resolution}")));
        }
        let mut store = ParamStore::new();
        let [c1, c2] = config.channels;
        let convs = vec![
            Conv::new(&mut store, "clf.conv1", 1, c1, false, rng)?,
            Conv::new(&mut store, "clf.conv2", c1, c2, false, rng)?,
        ];
        let flat = c2 * (resolution / 4).pow(3);
        let fc1 = Dense::new(&mut store, "clf.fc1", flat, config.hidden, true, rng)?;
        let fc2 = Dense::new(&mut store, "clf.fc2", config.hidden, 1, true, rng)?;
        Ok(Self { params: store, convs, fc1, fc2 })
    }

    pub fn from_params(params: ParamStore) -> Result<Self> {
        let convs = find_convs(&params, "clf.conv", false);
        let get = |n: &str| Dense::find(&params, n).ok_or_else(|| Error::invalid(format!("classifier lacks {n}")));
        let (fc1, fc2) = (get("clf.fc1")?, get("clf.fc2")?);
        if convs.len() != 2 || fc2.output != 1 {
            return Err(Error::invalid("not a classifier checkpoint"));
        }
        Ok(Self { params, convs, fc1, fc2 })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_params(ParamStore::load(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)
    }

    fn logits(&self, s: &mut Session, grids: &[&OccupancyGrid]) -> Result<crate::autodiff::Var> {
        let x = s.graph.input(grids_tensor(grids)?);
        let mut h = x;
        for c in &self.convs {
            let y = c.forward(s, h)?;
            h = s.graph.relu(y)?;
        }
        let h = s.graph.reshape(h, vec![grids.len(), self.fc1.input])?;
        let h = self.fc1.forward(s, h)?;
        let h = s.graph.relu(h)?;
        self.fc2.forward(s, h)
    }

    /// Plausibility score in `[0, 1]` per grid.
    pub fn scores(&self, grids: &[&OccupancyGrid]) -> Result<Vec<f64>> {
        if grids.is_empty() {
            return Ok(Vec::new());
        }
        let chunks: Vec<Vec<f64>> = grids
            .par_chunks(crate::model::INFER_CHUNK)
            .map(|chunk| {
                let mut s = Session::frozen(&self.params);
                let l = self.logits(&mut s, chunk)?;
                let p = s.graph.sigmoid(l)?;
                Ok(s.graph.value(p).data.clone())
            })
            .collect::<Result<_>>()?;
        Ok(chunks.concat())
    }
}

/// Mean plausibility score of binarized shapes.
pub fn classifier_accuracy(classifier: &Classifier, shapes: &[&LabeledGrid]) -> Result<f64> {
    if shapes.is_empty() {
        return Err(Error::invalid("classifier score of an empty set"));
    }
    let occ: Vec<OccupancyGrid> = shapes.iter().map(|s| s.occupancy()).collect();
    let refs: Vec<&OccupancyGrid> = occ.iter().collect();
    let s = classifier.scores(&refs)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Fraction of grids on the right side of 0.5.
pub fn binary_accuracy(classifier: &Classifier, positives: &[&OccupancyGrid], negatives: &[&OccupancyGrid]) -> Result<f64> {
    let p = classifier.scores(positives)?;
    let n = classifier.scores(negatives)?;
    let right = p.iter().filter(|&&v| v >= 0.5).count() + n.iter().filter(|&&v| v < 0.5).count();
    Ok(right as f64 / (p.len() + n.len()) as f64)
}

/// `count` naive assemblies from random donor tuples drawn from `pool`,
/// skipping tuples whose donors are too similar (or repeated).
pub fn sample_negatives(pool: &[&LabeledGrid], count: usize, rng: &mut impl Rng) -> Result<Vec<LabeledGrid>> {
    let k = pool.first().ok_or_else(|| Error::invalid("no donor shapes"))?.schema().len();
    let mut out = Vec::with_capacity(count);
    let max_tries = 50 * count.max(1);
    let mut tries = 0;
    while out.len() < count {
        if tries == max_tries {
            return Err(Error::invalid(format!(
                "only {} of {count} negatives survive the similarity exclusion",
                out.len()
            )));
        }
        tries += 1;
        let donors: Vec<&LabeledGrid> = (0..k).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
        if too_similar(&donors)? {
            continue;
        }
        out.push(naive_placement(&donors)?);
    }
    Ok(out)
}

fn too_similar(donors: &[&LabeledGrid]) -> Result<bool> {
    for i in 0..donors.len() {
        for j in i + 1..donors.len() {
            if miou(donors[i], donors[j])? >= SIMILARITY_MIOU {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

#[derive(Clone, Debug)]
pub struct TrainedClassifier {
    pub classifier: Classifier,
    /// Accuracy on `test` positives and negatives built from `test` donors.
    pub held_out_accuracy: f64,
    pub train_accuracy: f64,
}

/// Positives are ground-truth shapes; negatives are naive assemblies of
/// donors from the same split. Trains on `train`, reports on `test`.
pub fn train_classifier(dataset: &Dataset, config: &ClassifierConfig, seed: u64) -> Result<TrainedClassifier> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = dataset.train_shapes();
    let test = dataset.test_shapes();
    if train.len() < 2 || test.len() < 2 {
        return Err(Error::invalid("classifier needs at least 2 train and 2 test shapes"));
    }
    let neg_train = sample_negatives(&train, train.len(), &mut rng)?;
    let neg_test = sample_negatives(&test, test.len(), &mut rng)?;
    let occ = |gs: &[&LabeledGrid]| gs.iter().map(|g| g.occupancy()).collect::<Vec<_>>();
    let pos_train = occ(&train);
    let neg_train: Vec<OccupancyGrid> = neg_train.iter().map(LabeledGrid::occupancy).collect();
    let pos_test = occ(&test);
    let neg_test: Vec<OccupancyGrid> = neg_test.iter().map(LabeledGrid::occupancy).collect();

    let mut items: Vec<(&OccupancyGrid, f64)> = pos_train
        .iter()
        .map(|g| (g, 1.0))
        .chain(neg_train.iter().map(|g| (g, 0.0)))
        .collect();
    let mut clf = Classifier::new(dataset.config.resolution, config, &mut rng)?;
    let mut adam = Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() });
    for _ in 0..config.epochs {
        items.shuffle(&mut rng);
        for batch in items.chunks(config.batch_size.max(1)) {
            let grids: Vec<&OccupancyGrid> = batch.iter().map(|(g, _)| *g).collect();
            let target = Tensor::new(vec![batch.len(), 1], batch.iter().map(|(_, y)| *y).collect());
            let grads = {
                let mut s = Session::new(&clf.params);
                let l = clf.logits(&mut s, &grids)?;
                let p = s.graph.sigmoid(l)?;
                let bce = s.graph.bce(p, &target)?;
                let loss = s.graph.scale(bce, 1.0 / batch.len() as f64)?;
                s.gradients(loss)?
            };
            adam.step(&mut clf.params, &grads, config.lr)?;
        }
    }
    fn r(v: &[OccupancyGrid]) -> Vec<&OccupancyGrid> {
        v.iter().collect()
    }
    Ok(TrainedClassifier {
        held_out_accuracy: binary_accuracy(&clf, &r(&pos_test), &r(&neg_test))?,
        train_accuracy: binary_accuracy(&clf, &r(&pos_train), &r(&neg_train))?,
        classifier: clf,
    })
}
