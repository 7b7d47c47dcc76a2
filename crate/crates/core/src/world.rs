//! Synthetic unaligned multimodal worlds.
//!
//! Items share a latent vector drawn from a Gaussian cluster mixture; each
//! modality observes `A_k z + b_k + noise` through its own random projection.
//! Every modality's records are stored in an independently shuffled visible
//! order, so a record id in one modality says nothing about the matching
//! record in another. The true correspondence lives only inside
//! [`AnnotationOracle`], which reveals one aligned tuple per unit of cost.

use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::RecordId;
use crate::error::{Error, Result};

/// Twins are placed within this fraction of `cluster_std` of each other.
pub const TWIN_RADIUS: f64 = 0.1;

/// One tenth of the items are held out as aligned test pairs.
pub const TEST_FRACTION_DENOM: usize = 10;

const WORLD_FILE: &str = "world.json";
const ORACLE_FILE: &str = "oracle.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub raw_dim: usize,
    #[serde(default)]
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub n: usize,
    pub latent_dim: usize,
    pub modalities: Vec<ModalitySpec>,
    pub num_clusters: usize,
    /// Standard deviation of the cluster centres.
    #[serde(default = "default_spread")]
    pub cluster_spread: f64,
    /// Within-cluster standard deviation of the latents.
    #[serde(default = "default_cluster_std")]
    pub cluster_std: f64,
    /// Zipf exponent on cluster sizes; 0 gives equally likely clusters.
    #[serde(default)]
    pub cluster_skew: f64,
    pub hard_pair_fraction: f64,
    /// Use `A_k = I` (requires `raw_dim == latent_dim`).
    #[serde(default)]
    pub identity_projection: bool,
    pub seed: u64,
}

fn default_spread() -> f64 {
    1.0
}

fn default_cluster_std() -> f64 {
    0.3
}

impl WorldSpec {
    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn raw_dims(&self) -> Vec<usize> {
        self.modalities.iter().map(|m| m.raw_dim).collect()
    }

    pub fn test_size(&self) -> usize {
        self.n / TEST_FRACTION_DENOM
    }

    pub fn pool_size(&self) -> usize {
        self.n - self.test_size()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.n < TEST_FRACTION_DENOM {
            return bad(format!("n = {} leaves an empty test split (need n >= 10)", self.n));
        }
        if self.modalities.len() < 2 {
            return bad("need at least 2 modalities".into());
        }
        if self.latent_dim == 0 || self.num_clusters == 0 {
            return bad("latent_dim and num_clusters must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.hard_pair_fraction) {
            return bad(format!(
                "hard_pair_fraction {} outside [0, 1]",
                self.hard_pair_fraction
            ));
        }
        for (k, m) in self.modalities.iter().enumerate() {
            if m.raw_dim == 0 {
                return bad(format!("modality {k}: raw_dim must be positive"));
            }
            if !(m.noise_sigma >= 0.0 && m.noise_sigma.is_finite()) {
                return bad(format!("modality {k}: noise_sigma must be finite and >= 0"));
            }
            if self.identity_projection && m.raw_dim != self.latent_dim {
                return bad(format!(
                    "modality {k}: identity projection needs raw_dim == latent_dim"
                ));
            }
        }
        for (name, v) in [
            ("cluster_spread", self.cluster_spread),
            ("cluster_std", self.cluster_std),
            ("cluster_skew", self.cluster_skew),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// Raw features of one modality, rows in visible (shuffled) order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityFeatures {
    raw_dim: usize,
    data: Vec<f64>,
}

impl ModalityFeatures {
    pub fn new(raw_dim: usize, data: Vec<f64>) -> Result<Self> {
        if raw_dim == 0 || data.len() % raw_dim != 0 {
            return Err(Error::DimensionMismatch {
                expected: raw_dim,
                found: data.len(),
            });
        }
        Ok(Self { raw_dim, data })
    }

    pub fn raw_dim(&self) -> usize {
        self.raw_dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.raw_dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: RecordId) -> &[f64] {
        &self.data[r * self.raw_dim..(r + 1) * self.raw_dim]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }
}

/// Per-modality records in independently shuffled order. Record `r` of
/// modality `k` is simply row `r` of that modality's features.
#[derive(Debug, Clone, PartialEq)]
pub struct UnalignedPool {
    modalities: Vec<ModalityFeatures>,
}

impl UnalignedPool {
    pub fn new(modalities: Vec<ModalityFeatures>) -> Result<Self> {
        let n = modalities.first().map_or(0, ModalityFeatures::len);
        if modalities.iter().any(|m| m.len() != n) {
            return Err(Error::InvalidSpec(
                "all modalities must hold the same number of records".into(),
            ));
        }
        Ok(Self { modalities })
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    /// Records per modality.
    pub fn len(&self) -> usize {
        self.modalities.first().map_or(0, ModalityFeatures::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn modality(&self, k: usize) -> &ModalityFeatures {
        &self.modalities[k]
    }

    pub fn raw_dims(&self) -> Vec<usize> {
        self.modalities.iter().map(|m| m.raw_dim).collect()
    }
}

/// Held-out aligned pairs; row `i` of every modality belongs to test item `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSplit {
    pub items: Vec<usize>,
    pub modalities: Vec<ModalityFeatures>,
}

impl TestSplit {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// The record ids revealed by one annotation, indexed by modality.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedTuple {
    pub records: Vec<RecordId>,
}

/// The growing set of revealed tuples, with per-modality membership flags.
#[derive(Debug, Clone, Default)]
pub struct AnnotationSet {
    tuples: Vec<AlignedTuple>,
    marked: Vec<Vec<bool>>,
}

impl AnnotationSet {
    pub fn new(num_modalities: usize, records_per_modality: usize) -> Self {
        Self {
            tuples: Vec::new(),
            marked: vec![vec![false; records_per_modality]; num_modalities],
        }
    }

    pub fn insert(&mut self, tuple: AlignedTuple) -> Result<()> {
        if tuple.records.len() != self.marked.len() {
            return Err(Error::DimensionMismatch {
                expected: self.marked.len(),
                found: tuple.records.len(),
            });
        }
        for (k, &r) in tuple.records.iter().enumerate() {
            match self.marked[k].get(r) {
                None => return Err(Error::UnknownRecord { modality: k, id: r }),
                Some(true) => return Err(Error::AlreadyAnnotated { modality: k, id: r }),
                Some(false) => {}
            }
        }
        for (k, &r) in tuple.records.iter().enumerate() {
            self.marked[k][r] = true;
        }
        self.tuples.push(tuple);
        Ok(())
    }

    pub fn contains(&self, modality: usize, record: RecordId) -> bool {
        self.marked
            .get(modality)
            .and_then(|m| m.get(record))
            .copied()
            .unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn tuples(&self) -> &[AlignedTuple] {
        &self.tuples
    }

    /// Annotated record ids of one modality, in annotation order.
    pub fn records(&self, modality: usize) -> Vec<RecordId> {
        self.tuples.iter().map(|t| t.records[modality]).collect()
    }
}

/// Holds the hidden correspondence and charges one unit per reveal.
#[derive(Debug, Clone)]
pub struct AnnotationOracle {
    record_to_slot: Vec<Vec<usize>>,
    slot_to_record: Vec<Vec<RecordId>>,
    revealed: Vec<bool>,
    cost_spent: usize,
}

impl AnnotationOracle {
    /// `record_to_slot[k][r]` is the hidden pool slot behind record `r` of modality `k`.
    pub fn from_orders(record_to_slot: Vec<Vec<usize>>) -> Result<Self> {
        let n = record_to_slot.first().map_or(0, Vec::len);
        let mut slot_to_record = Vec::with_capacity(record_to_slot.len());
        for order in &record_to_slot {
            if order.len() != n {
                return Err(Error::InvalidSpec("oracle orders differ in length".into()));
            }
            let mut inverse = vec![usize::MAX; n];
            for (r, &s) in order.iter().enumerate() {
                if s >= n || inverse[s] != usize::MAX {
                    return Err(Error::InvalidSpec("oracle order is not a bijection".into()));
                }
                inverse[s] = r;
            }
            slot_to_record.push(inverse);
        }
        Ok(Self {
            record_to_slot,
            slot_to_record,
            revealed: vec![false; n],
            cost_spent: 0,
        })
    }

    pub fn num_modalities(&self) -> usize {
        self.record_to_slot.len()
    }

    pub fn len(&self) -> usize {
        self.revealed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.revealed.is_empty()
    }

    pub fn cost_spent(&self) -> usize {
        self.cost_spent
    }

    /// Reveals the aligned tuple behind `record` of `modality` for one unit of cost.
    ///
    /// Revealing any record of an already revealed tuple is an error rather
    /// than a free repeat.
    pub fn annotate(&mut self, modality: usize, record: RecordId) -> Result<AlignedTuple> {
        let slot = *self
            .record_to_slot
            .get(modality)
            .and_then(|o| o.get(record))
            .ok_or(Error::UnknownRecord {
                modality,
                id: record,
            })?;
        if self.revealed[slot] {
            return Err(Error::AlreadyAnnotated {
                modality,
                id: record,
            });
        }
        self.revealed[slot] = true;
        self.cost_spent += 1;
        Ok(AlignedTuple {
            records: self.slot_to_record.iter().map(|inv| inv[slot]).collect(),
        })
    }

    /// Read-only copy of the ground truth for evaluation code.
    pub fn view(&self) -> AlignmentView {
        AlignmentView {
            record_to_slot: self.record_to_slot.clone(),
            slot_to_record: self.slot_to_record.clone(),
        }
    }

    /// Splits the pool into `batches` near-equal stream batches that keep
    /// every aligned tuple together.
    pub fn partition_stream(&self, batches: usize, seed: u64) -> Result<StreamPartition> {
        let n = self.len();
        if batches == 0 || batches > n {
            return Err(Error::InvalidArgument(format!(
                "cannot split {n} items into {batches} stream batches"
            )));
        }
        let base = n / batches;
        let extra = n % batches;
        let sizes: Vec<usize> = (0..batches).map(|t| base + usize::from(t < extra)).collect();
        self.partition_stream_sizes(&sizes, seed)
    }

    /// Like [`partition_stream`](Self::partition_stream) with explicit batch sizes.
    pub fn partition_stream_sizes(&self, sizes: &[usize], seed: u64) -> Result<StreamPartition> {
        let n = self.len();
        if sizes.is_empty() || sizes.iter().sum::<usize>() != n || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "stream batch sizes {sizes:?} must be positive and sum to {n}"
            )));
        }
        let mut slots: Vec<usize> = (0..n).collect();
        slots.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut batches = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &size in sizes {
            let chunk = &slots[start..start + size];
            start += size;
            let per_modality = self
                .slot_to_record
                .iter()
                .map(|inv| {
                    let mut ids: Vec<RecordId> = chunk.iter().map(|&s| inv[s]).collect();
                    ids.sort_unstable();
                    ids
                })
                .collect();
            batches.push(per_modality);
        }
        Ok(StreamPartition { batches })
    }
}

/// Ground-truth correspondence, for evaluation only.
#[derive(Debug, Clone)]
pub struct AlignmentView {
    record_to_slot: Vec<Vec<usize>>,
    slot_to_record: Vec<Vec<RecordId>>,
}

impl AlignmentView {
    /// The record of modality `to` aligned with `record` of modality `from`.
    pub fn partner(&self, from: usize, record: RecordId, to: usize) -> RecordId {
        self.slot_to_record[to][self.record_to_slot[from][record]]
    }
}

/// Disjoint stream batches; `batches[t][k]` lists modality-`k` record ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamPartition {
    pub batches: Vec<Vec<Vec<RecordId>>>,
}

impl StreamPartition {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn batch(&self, t: usize) -> &[Vec<RecordId>] {
        &self.batches[t]
    }
}

/// What the generator did, for tests and diagnostics. Never handed to
/// selection code.
#[derive(Debug, Clone)]
pub struct GenerationTrace {
    pub latents: Vec<Vec<f64>>,
    pub clusters: Vec<usize>,
    pub twins: Vec<(usize, usize)>,
    pub test_items: Vec<usize>,
    pub pool_items: Vec<usize>,
    pub projections: Vec<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone)]
pub struct GeneratedWorld {
    pub spec: WorldSpec,
    pub pool: UnalignedPool,
    pub oracle: AnnotationOracle,
    pub test: TestSplit,
    pub trace: Option<GenerationTrace>,
}

fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Generates a world; fully determined by `spec.seed`.
pub fn generate_world(spec: &WorldSpec) -> Result<GeneratedWorld> {
    generate_with_item_seed(spec, spec.seed)
}

/// A world sharing `spec`'s modality projections but with freshly drawn
/// items (latents, clusters, noise, shuffles) from `item_seed`.
pub fn generate_sibling(spec: &WorldSpec, item_seed: u64) -> Result<GeneratedWorld> {
    generate_with_item_seed(spec, item_seed)
}

fn generate_with_item_seed(spec: &WorldSpec, item_seed: u64) -> Result<GeneratedWorld> {
    spec.validate()?;
    let n = spec.n;
    let ld = spec.latent_dim;

    let mut proj_rng = sub_rng(spec.seed, 1);
    let projections: Vec<(Vec<f64>, Vec<f64>)> = spec
        .modalities
        .iter()
        .map(|m| {
            let a = if spec.identity_projection {
                let mut a = vec![0.0; m.raw_dim * ld];
                for i in 0..ld {
                    a[i * ld + i] = 1.0;
                }
                a
            } else {
                let scale = 1.0 / (ld as f64).sqrt();
                (0..m.raw_dim * ld)
                    .map(|_| normal(&mut proj_rng) * scale)
                    .collect()
            };
            let b = (0..m.raw_dim).map(|_| normal(&mut proj_rng)).collect();
            (a, b)
        })
        .collect();

    let mut item_rng = sub_rng(item_seed, 2);
    let centres: Vec<Vec<f64>> = (0..spec.num_clusters)
        .map(|_| {
            (0..ld)
                .map(|_| normal(&mut item_rng) * spec.cluster_spread)
                .collect()
        })
        .collect();
    let weights: Vec<f64> = (0..spec.num_clusters)
        .map(|j| ((j + 1) as f64).powf(-spec.cluster_skew))
        .collect();
    let pick_cluster = WeightedIndex::new(&weights)
        .map_err(|e| Error::InvalidSpec(format!("cluster weights: {e}")))?;
    let mut clusters: Vec<usize> = (0..n).map(|_| pick_cluster.sample(&mut item_rng)).collect();
    let mut latents: Vec<Vec<f64>> = clusters
        .iter()
        .map(|&c| {
            centres[c]
                .iter()
                .map(|&mu| mu + normal(&mut item_rng) * spec.cluster_std)
                .collect()
        })
        .collect();

    let hard = 2 * ((spec.hard_pair_fraction * n as f64).floor() as usize / 2);
    let chosen = index::sample(&mut item_rng, n, hard).into_vec();
    let mut twins = Vec::with_capacity(hard / 2);
    for pair in chosen.chunks_exact(2) {
        let (anchor, twin) = (pair[0], pair[1]);
        let dir: Vec<f64> = (0..ld).map(|_| normal(&mut item_rng)).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let radius = TWIN_RADIUS * spec.cluster_std * item_rng.random_range(0.3..0.9);
        latents[twin] = latents[anchor]
            .iter()
            .zip(&dir)
            .map(|(z, d)| z + radius * d / norm)
            .collect();
        clusters[twin] = clusters[anchor];
        twins.push((anchor, twin));
    }

    // features in item order, per modality
    let features: Vec<Vec<Vec<f64>>> = spec
        .modalities
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let (a, b) = &projections[k];
            let mut noise_rng = sub_rng(item_seed, 100 + k as u64);
            latents
                .iter()
                .map(|z| {
                    (0..m.raw_dim)
                        .map(|r| {
                            let row = &a[r * ld..(r + 1) * ld];
                            let proj: f64 = row.iter().zip(z).map(|(x, y)| x * y).sum();
                            proj + b[r] + m.noise_sigma * normal(&mut noise_rng)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut split_rng = sub_rng(item_seed, 3);
    let mut test_items = index::sample(&mut split_rng, n, spec.test_size()).into_vec();
    test_items.sort_unstable();
    let mut is_test = vec![false; n];
    for &i in &test_items {
        is_test[i] = true;
    }
    let pool_items: Vec<usize> = (0..n).filter(|&i| !is_test[i]).collect();

    let mut record_to_slot = Vec::with_capacity(spec.num_modalities());
    let mut pool_features = Vec::with_capacity(spec.num_modalities());
    let mut test_features = Vec::with_capacity(spec.num_modalities());
    for (k, m) in spec.modalities.iter().enumerate() {
        let mut order: Vec<usize> = (0..pool_items.len()).collect();
        order.shuffle(&mut sub_rng(item_seed, 200 + k as u64));
        let data = order
            .iter()
            .flat_map(|&slot| features[k][pool_items[slot]].iter().copied())
            .collect();
        pool_features.push(ModalityFeatures::new(m.raw_dim, data)?);
        let test_data = test_items
            .iter()
            .flat_map(|&i| features[k][i].iter().copied())
            .collect();
        test_features.push(ModalityFeatures::new(m.raw_dim, test_data)?);
        record_to_slot.push(order);
    }

    Ok(GeneratedWorld {
        spec: spec.clone(),
        pool: UnalignedPool::new(pool_features)?,
        oracle: AnnotationOracle::from_orders(record_to_slot)?,
        test: TestSplit {
            items: test_items.clone(),
            modalities: test_features,
        },
        trace: Some(GenerationTrace {
            latents,
            clusters,
            twins,
            test_items,
            pool_items,
            projections,
        }),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct WorldFile {
    format_version: u32,
    spec: WorldSpec,
    pool_size: usize,
    test_items: Vec<usize>,
    modalities: Vec<ModalityFileEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModalityFileEntry {
    raw_dim: usize,
    record_ids: Vec<RecordId>,
    features_file: String,
    test_features_file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct OracleFile {
    format_version: u32,
    pool_items: Vec<usize>,
    /// Shuffle order per modality: `record_to_slot[k][r]` indexes `pool_items`.
    record_to_slot: Vec<Vec<usize>>,
}

pub fn write_f64_file(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f64_file(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::InvalidSpec(format!(
            "{} is not a whole number of f64 values",
            path.display()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `world.json`, the feature blobs and `oracle.json` into `dir`.
pub fn write_world(dir: &Path, world: &GeneratedWorld) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for k in 0..world.pool.num_modalities() {
        let features_file = format!("features_{k}.f64");
        let test_features_file = format!("test_features_{k}.f64");
        write_f64_file(&dir.join(&features_file), world.pool.modality(k).as_flat())?;
        write_f64_file(&dir.join(&test_features_file), world.test.modalities[k].as_flat())?;
        entries.push(ModalityFileEntry {
            raw_dim: world.pool.modality(k).raw_dim(),
            record_ids: (0..world.pool.len()).collect(),
            features_file,
            test_features_file,
        });
    }
    write_json(
        &dir.join(WORLD_FILE),
        &WorldFile {
            format_version: 1,
            spec: world.spec.clone(),
            pool_size: world.pool.len(),
            test_items: world.test.items.clone(),
            modalities: entries,
        },
    )?;
    let pool_items = match &world.trace {
        Some(t) => t.pool_items.clone(),
        None => (0..world.pool.len()).collect(),
    };
    write_json(
        &dir.join(ORACLE_FILE),
        &OracleFile {
            format_version: 1,
            pool_items,
            record_to_slot: world.oracle.record_to_slot.clone(),
        },
    )
}

/// The acquisition-visible part of a world dump.
#[derive(Debug, Clone)]
pub struct LoadedPool {
    pub spec: WorldSpec,
    pub pool: UnalignedPool,
    pub test: TestSplit,
}

/// Reads `world.json` and the feature blobs. Never touches `oracle.json`.
pub fn load_pool(dir: &Path) -> Result<LoadedPool> {
    let path = dir.join(WORLD_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: WorldFile = serde_json::from_str(&text)?;
    let mut pool = Vec::new();
    let mut test = Vec::new();
    for entry in &file.modalities {
        for name in [&entry.features_file, &entry.test_features_file] {
            if Path::new(name).file_name().is_some_and(|f| f == ORACLE_FILE) {
                return Err(Error::OracleAccess(dir.join(name)));
            }
        }
        let feats = ModalityFeatures::new(
            entry.raw_dim,
            read_f64_file(&dir.join(&entry.features_file))?,
        )?;
        if feats.len() != file.pool_size || entry.record_ids.len() != file.pool_size {
            return Err(Error::InvalidSpec(format!(
                "{}: expected {} records",
                entry.features_file, file.pool_size
            )));
        }
        pool.push(feats);
        test.push(ModalityFeatures::new(
            entry.raw_dim,
            read_f64_file(&dir.join(&entry.test_features_file))?,
        )?);
    }
    Ok(LoadedPool {
        spec: file.spec,
        pool: UnalignedPool::new(pool)?,
        test: TestSplit {
            items: file.test_items,
            modalities: test,
        },
    })
}

/// Reads the annotation oracle. Only the simulation engine and evaluation use this.
pub fn load_oracle(dir: &Path) -> Result<AnnotationOracle> {
    let path: PathBuf = dir.join(ORACLE_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: OracleFile = serde_json::from_str(&text)?;
    AnnotationOracle::from_orders(file.record_to_slot)
}

/// Loads a full world dump (pool, test split and oracle).
pub fn load_world(dir: &Path) -> Result<GeneratedWorld> {
    let loaded = load_pool(dir)?;
    let oracle = load_oracle(dir)?;
    if oracle.len() != loaded.pool.len() {
        return Err(Error::InvalidSpec("oracle and pool sizes differ".into()));
    }
    Ok(GeneratedWorld {
        spec: loaded.spec,
        pool: loaded.pool,
        oracle,
        test: loaded.test,
        trace: None,
    })
}
