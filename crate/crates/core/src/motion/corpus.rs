use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::format::{load_motion, save_motion};
use super::metrics::{distance, flatten};
use super::synth::{gen_synthetic, MotionSequence, Vocab};
use super::{DEFAULT_FPS, DEFAULT_FRAMES, NUM_JOINTS};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

const MIN_STD: f64 = 1e-6;
/// Stream offset separating held-out seeds from training seeds.
const HELDOUT_STREAM: u64 = 1 << 40;

/// Per-coordinate mean and standard deviation, `[joints, 3]` each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<[f64; 3]>,
    pub std: Vec<[f64; 3]>,
}

impl NormStats {
    pub fn compute(motions: &[MotionSequence]) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = [[0.0f64; 3]; NUM_JOINTS];
        let mut sq = [[0.0f64; 3]; NUM_JOINTS];
        for m in motions {
            for p in m.frames.data().chunks(NUM_JOINTS * 3) {
                for j in 0..NUM_JOINTS {
                    for c in 0..3 {
                        sum[j][c] += p[j * 3 + c] as f64;
                    }
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::contract(
                "cannot compute statistics of an empty corpus",
            ));
        }
        let mean = sum.map(|r| r.map(|s| s / n as f64));
        for m in motions {
            for p in m.frames.data().chunks(NUM_JOINTS * 3) {
                for j in 0..NUM_JOINTS {
                    for c in 0..3 {
                        sq[j][c] += (p[j * 3 + c] as f64 - mean[j][c]).powi(2);
                    }
                }
            }
        }
        Ok(Self {
            mean: mean.to_vec(),
            std: sq
                .iter()
                .map(|r| r.map(|s| (s / n as f64).sqrt().max(MIN_STD)))
                .collect(),
        })
    }

    fn check(&self) -> Result<()> {
        if self.mean.len() != NUM_JOINTS || self.std.len() != NUM_JOINTS {
            return Err(Error::contract(format!(
                "norm stats cover {} / {} joints, expected {NUM_JOINTS}",
                self.mean.len(),
                self.std.len()
            )));
        }
        let finite = self
            .mean
            .iter()
            .chain(&self.std)
            .flatten()
            .all(|v| v.is_finite());
        if !finite || self.std.iter().flatten().any(|&s| s < MIN_STD) {
            return Err(Error::contract(
                "norm stats must be finite with std >= 1e-6",
            ));
        }
        Ok(())
    }

    fn coord(&self, i: usize) -> (f64, f64) {
        let (j, c) = ((i / 3) % NUM_JOINTS, i % 3);
        (self.mean[j][c], self.std[j][c])
    }

    /// `(x - mean) / std` per coordinate of `[T, J, 3]` frames.
    pub fn normalize(&self, frames: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check()?;
        self.map(frames, |x, m, s| (x - m) / s)
    }

    pub fn denormalize(&self, frames: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check()?;
        self.map(frames, |x, m, s| x * s + m)
    }

    fn map(&self, frames: &Tensor<f32>, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor<f32>> {
        let sh = frames.shape();
        if sh.len() != 3 || sh[1] != NUM_JOINTS || sh[2] != 3 {
            return Err(Error::contract(format!(
                "frames {sh:?} do not match the [T, {NUM_JOINTS}, 3] statistics"
            )));
        }
        let data = frames
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let (m, s) = self.coord(i);
                f(x as f64, m, s) as f32
            })
            .collect();
        Tensor::new(sh.to_vec(), data)
    }

    /// Flat `[J * 3]` tensors.
    pub fn to_tensors(&self) -> (Tensor<f32>, Tensor<f32>) {
        let flat = |v: &[[f64; 3]]| {
            let d = v.iter().flatten().map(|&x| x as f32).collect();
            Tensor::new(vec![NUM_JOINTS * 3], d).expect("shape")
        };
        (flat(&self.mean), flat(&self.std))
    }
}

/// Per-class mean of flattened training motions, in meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Centroids(pub BTreeMap<String, Vec<f64>>);

impl Centroids {
    pub fn compute(motions: &[MotionSequence]) -> Result<Self> {
        let mut acc: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
        for m in motions {
            Vocab::class_index(&m.label)?;
            let x = flatten(m);
            let e = acc
                .entry(m.label.clone())
                .or_insert_with(|| (vec![0.0; x.len()], 0));
            if e.0.len() != x.len() {
                return Err(Error::contract("corpus motions differ in length"));
            }
            e.0.iter_mut().zip(&x).for_each(|(a, b)| *a += b);
            e.1 += 1;
        }
        Ok(Self(
            acc.into_iter()
                .map(|(k, (s, n))| (k, s.into_iter().map(|v| v / n as f64).collect()))
                .collect(),
        ))
    }

    /// Class index of the nearest centroid.
    pub fn nearest(&self, x: &[f64]) -> Result<usize> {
        let mut best: Option<(f64, usize)> = None;
        for (label, c) in &self.0 {
            if c.len() != x.len() {
                return Err(Error::contract(format!(
                    "sample has {} coordinates, centroid `{label}` has {}",
                    x.len(),
                    c.len()
                )));
            }
            let d = distance(x, c);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, Vocab::class_index(label)?));
            }
        }
        best.map(|(_, i)| i)
            .ok_or_else(|| Error::Missing("class centroids".into()))
    }

    pub fn get(&self, label: &str) -> Option<&[f64]> {
        self.0.get(label).map(|v| v.as_slice())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    pub train: usize,
    pub heldout: usize,
    pub frames: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            train: 512,
            heldout: 64,
            frames: DEFAULT_FRAMES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub file: String,
    pub label: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub fps: u32,
    pub frames: usize,
    pub train: Vec<CorpusEntry>,
    pub heldout: Vec<CorpusEntry>,
    pub stats: NormStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centroids: Option<Centroids>,
}

impl CorpusManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub train: Vec<MotionSequence>,
    pub heldout: Vec<MotionSequence>,
    pub train_seeds: Vec<u64>,
    pub heldout_seeds: Vec<u64>,
    pub stats: NormStats,
    pub centroids: Centroids,
}

fn item_seed(seed: u64, stream: u64) -> u64 {
    Rng::derive(seed, stream).next_u64()
}

impl Corpus {
    /// Labels cycle through the classes; every item has its own seed.
    pub fn generate(spec: CorpusSpec) -> Result<Self> {
        if spec.train == 0 {
            return Err(Error::contract("refusing to build an empty corpus"));
        }
        let classes = Vocab::classes();
        let build = |n: usize, offset: u64| -> Result<(Vec<MotionSequence>, Vec<u64>)> {
            let seeds: Vec<u64> = (0..n)
                .map(|i| item_seed(spec.seed, offset + i as u64))
                .collect();
            let motions = seeds
                .iter()
                .enumerate()
                .map(|(i, &s)| gen_synthetic(classes[i % classes.len()], s, spec.frames))
                .collect::<Result<_>>()?;
            Ok((motions, seeds))
        };
        let (train, train_seeds) = build(spec.train, 0)?;
        let (heldout, heldout_seeds) = build(spec.heldout, HELDOUT_STREAM)?;
        let stats = NormStats::compute(&train)?;
        let centroids = Centroids::compute(&train)?;
        Ok(Self {
            spec,
            train,
            heldout,
            train_seeds,
            heldout_seeds,
            stats,
            centroids,
        })
    }

    pub fn manifest(&self) -> CorpusManifest {
        let entries = |prefix: &str, ms: &[MotionSequence], seeds: &[u64]| {
            ms.iter()
                .zip(seeds)
                .enumerate()
                .map(|(i, (m, &seed))| CorpusEntry {
                    file: format!("{prefix}_{i:04}.json"),
                    label: m.label.clone(),
                    seed,
                })
                .collect()
        };
        CorpusManifest {
            seed: self.spec.seed,
            fps: DEFAULT_FPS,
            frames: self.spec.frames,
            train: entries("train", &self.train, &self.train_seeds),
            heldout: entries("heldout", &self.heldout, &self.heldout_seeds),
            stats: self.stats.clone(),
            centroids: Some(self.centroids.clone()),
        }
    }

    /// Writes every motion file plus `manifest.json`; returns the manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let man = self.manifest();
        for (e, m) in man.train.iter().zip(&self.train) {
            save_motion(&dir.join(&e.file), m)?;
        }
        for (e, m) in man.heldout.iter().zip(&self.heldout) {
            save_motion(&dir.join(&e.file), m)?;
        }
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&man)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Reads the motions listed in a manifest; missing files are prerequisite errors.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        if !manifest_path.exists() {
            return Err(Error::Missing(format!(
                "corpus manifest {}",
                manifest_path.display()
            )));
        }
        let man = CorpusManifest::load(manifest_path)?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let read = |entries: &[CorpusEntry]| -> Result<Vec<MotionSequence>> {
            entries
                .iter()
                .map(|e| {
                    let p = dir.join(&e.file);
                    if !p.exists() {
                        return Err(Error::Missing(format!("corpus file {}", p.display())));
                    }
                    let m = load_motion(&p)?;
                    if m.label != e.label || m.num_frames() != man.frames {
                        return Err(Error::Corrupt(format!(
                            "{} disagrees with the manifest",
                            p.display()
                        )));
                    }
                    Ok(m)
                })
                .collect()
        };
        let train = read(&man.train)?;
        if train.is_empty() {
            return Err(Error::contract("corpus has no training motions"));
        }
        let heldout = read(&man.heldout)?;
        let centroids = match man.centroids {
            Some(c) => c,
            None => Centroids::compute(&train)?,
        };
        Ok(Self {
            spec: CorpusSpec {
                seed: man.seed,
                train: train.len(),
                heldout: heldout.len(),
                frames: man.frames,
            },
            train,
            heldout,
            train_seeds: man.train.iter().map(|e| e.seed).collect(),
            heldout_seeds: man.heldout.iter().map(|e| e.seed).collect(),
            stats: man.stats,
            centroids,
        })
    }
}
