//! Manifest CSV (`path,identity,degradation`), samplers and batch loading.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::augment::{augment, AugmentSpec};
use super::ppm::read_ppm;
use super::{normalize, ImageRecord};
use crate::error::{Error, Result};
use crate::heads::Sample;
use crate::model::derive_seed;
use crate::tensor::Scalar;

const HEADER: [&str; 3] = ["path", "identity", "degradation"];
const AUGMENT_STREAM: u64 = 3;
const SHUFFLE_STREAM: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: String,
    pub identity: usize,
    pub degradation: Option<f64>,
}

/// Ordered sample list. Relative paths resolve against `base_dir`.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
    pub split: Split,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>, split: Split, base_dir: PathBuf) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.path.as_str()) {
                return Err(Error::format(format!("duplicate manifest path {}", e.path)));
            }
            if let Some(d) = e.degradation {
                if !(0.0..=1.0).contains(&d) {
                    return Err(Error::format(format!(
                        "{}: degradation {d} outside [0, 1]",
                        e.path
                    )));
                }
            }
        }
        Ok(Self {
            entries,
            split,
            base_dir,
        })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of distinct identities.
    pub fn num_identities(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.identity)
            .collect::<HashSet<_>>()
            .len()
    }

    /// Relabels identities onto 0…K−1 in ascending order of the original ids
    /// and returns the original id of each new label.
    pub fn remap_identities(&mut self) -> Vec<usize> {
        let ids: BTreeMap<usize, usize> = self
            .entries
            .iter()
            .map(|e| (e.identity, 0))
            .collect::<BTreeMap<_, _>>()
            .into_keys()
            .enumerate()
            .map(|(new, old)| (old, new))
            .collect();
        for e in &mut self.entries {
            e.identity = ids[&e.identity];
        }
        let mut original = vec![0; ids.len()];
        for (old, new) in ids {
            original[new] = old;
        }
        original
    }

    /// Splits every identity's entries in manifest order: the last
    /// `ceil(fraction · n)` go to the eval manifest.
    pub fn holdout(&self, fraction: f64) -> Result<(Manifest, Manifest)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::config(format!(
                "holdout fraction {fraction} outside [0, 1)"
            )));
        }
        let mut per_id: BTreeMap<usize, Vec<&ManifestEntry>> = BTreeMap::new();
        for e in &self.entries {
            per_id.entry(e.identity).or_default().push(e);
        }
        let mut cut: BTreeMap<usize, usize> = BTreeMap::new();
        for (id, list) in &per_id {
            let held = (fraction * list.len() as f64).ceil() as usize;
            cut.insert(*id, list.len() - held.min(list.len()));
        }
        let (mut train, mut eval) = (Vec::new(), Vec::new());
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for e in &self.entries {
            let n = counts.entry(e.identity).or_default();
            if *n < cut[&e.identity] {
                train.push(e.clone());
            } else {
                eval.push(e.clone());
            }
            *n += 1;
        }
        Ok((
            Manifest::new(train, Split::Train, self.base_dir.clone())?,
            Manifest::new(eval, Split::Eval, self.base_dir.clone())?,
        ))
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn read(path: &Path, split: Split) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        if header.iter().collect::<Vec<_>>() != HEADER {
            return Err(Error::format(format!(
                "{}: expected header {}, got {}",
                path.display(),
                HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut entries = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let bad =
                |msg: String| Error::format(format!("{} row {}: {msg}", path.display(), line + 2));
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let identity = rec[1]
                .trim()
                .parse()
                .map_err(|_| bad(format!("bad identity {:?}", &rec[1])))?;
            let degradation = match rec[2].trim() {
                "" => None,
                s => Some(
                    s.parse()
                        .map_err(|_| bad(format!("bad degradation {s:?}")))?,
                ),
            };
            entries.push(ManifestEntry {
                path: rec[0].to_string(),
                identity,
                degradation,
            });
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Manifest::new(entries, split, base)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fail = |e: csv::Error| Error::format(e.to_string());
        w.write_record(HEADER).map_err(fail)?;
        for e in &self.entries {
            let d = e.degradation.map(|d| d.to_string()).unwrap_or_default();
            w.write_record([e.path.as_str(), &e.identity.to_string(), &d])
                .map_err(fail)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::format(e.to_string()))?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// Order in which a manifest is visited each epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampler {
    Sequential,
    Shuffled { seed: u64 },
}

impl Sampler {
    pub fn order(&self, len: usize, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..len).collect();
        if let Sampler::Shuffled { seed } = *self {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SHUFFLE_STREAM, epoch));
            idx.shuffle(&mut rng);
        }
        idx
    }

    /// Endless stream of batches, reshuffling at each epoch boundary.
    pub fn batches(&self, len: usize, batch: usize) -> Batches {
        Batches {
            sampler: *self,
            len,
            batch,
            epoch: 0,
            order: self.order(len, 0),
            pos: 0,
        }
    }
}

/// One batch's manifest indices together with the epoch each came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub epochs: Vec<u64>,
}

pub struct Batches {
    sampler: Sampler,
    len: usize,
    batch: usize,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl Iterator for Batches {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.len == 0 || self.batch == 0 {
            return None;
        }
        let mut out = Batch {
            indices: Vec::with_capacity(self.batch),
            epochs: Vec::with_capacity(self.batch),
        };
        while out.indices.len() < self.batch {
            if self.pos == self.len {
                self.epoch += 1;
                self.order = self.sampler.order(self.len, self.epoch);
                self.pos = 0;
            }
            out.indices.push(self.order[self.pos]);
            out.epochs.push(self.epoch);
            self.pos += 1;
        }
        Some(out)
    }
}

/// Reads and decodes entry `index`.
pub fn load_record(manifest: &Manifest, index: usize) -> Result<ImageRecord> {
    let entry = &manifest.entries[index];
    let path = manifest.resolve(entry);
    Ok(ImageRecord {
        pixels: read_ppm(&path)?,
        identity: entry.identity,
        degradation: entry.degradation,
        source_path: entry.path.clone(),
    })
}

/// Parse → augment (train split only) → normalize, for each index of
/// `batch`. Gray images are replicated to `channels == 3`. Augmentation is
/// seeded per (epoch, index, seed), so parallel loading matches serial.
pub fn load_batch<T: Scalar>(
    manifest: &Manifest,
    batch: &Batch,
    spec: &AugmentSpec,
    seed: u64,
    channels: usize,
) -> Result<Vec<Sample<T>>> {
    batch
        .indices
        .par_iter()
        .zip(batch.epochs.par_iter())
        .map(|(&i, &epoch)| {
            let rec = load_record(manifest, i)?;
            let mut img = rec.pixels;
            if channels == 3 {
                img = img.to_rgb();
            } else if img.channels() != channels {
                return Err(Error::contract(format!(
                    "{}: {} channels, model expects {channels}",
                    rec.source_path,
                    img.channels()
                )));
            }
            if manifest.split == Split::Train {
                let key = epoch
                    .wrapping_mul(manifest.len() as u64)
                    .wrapping_add(i as u64);
                img = augment(&img, spec, derive_seed(seed, AUGMENT_STREAM, key));
            }
            Ok(Sample {
                image: normalize(&img),
                label: rec.identity,
            })
        })
        .collect()
}
