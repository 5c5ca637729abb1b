//! Dataset ingestion and federated partitioning.
//!
//! Inputs are either MNIST-style IDX containers (optionally gzipped) or
//! synthetic Gaussian blobs. Partitioning produces disjoint per-client
//! labeled/unlabeled index shards; ground-truth labels of unlabeled samples
//! are kept only behind [`FederatedSplit::unlabeled_truth`] for test-side
//! verification and never flow into training.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::seeds;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// An in-memory classification dataset; features are scaled to [0, 1].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    /// Copy the feature rows at `indices` into a dense batch.
    pub fn gather_features(&self, indices: &[usize]) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(indices.len(), self.input_dim());
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.features.row(i));
        }
        out
    }

    /// One-hot target rows for the labels at `indices`.
    pub fn one_hot_targets(&self, indices: &[usize]) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(indices.len(), self.class_count);
        for (r, &i) in indices.iter().enumerate() {
            out.set(r, self.labels[i], 1.0);
        }
        out
    }
}

fn read_file_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct IdxReader<'a> {
    path: &'a Path,
    bytes: Vec<u8>,
    at: usize,
}

impl<'a> IdxReader<'a> {
    fn open(path: &'a Path) -> Result<Self> {
        Ok(IdxReader {
            path,
            bytes: read_file_maybe_gz(path)?,
            at: 0,
        })
    }

    fn read_u32(&mut self) -> Result<u32> {
        if self.at + 4 > self.bytes.len() {
            return Err(Error::IdxTruncated {
                path: self.path.display().to_string(),
                detail: format!("needed 4 header bytes at offset {}", self.at),
            });
        }
        let v = u32::from_be_bytes(self.bytes[self.at..self.at + 4].try_into().unwrap());
        self.at += 4;
        Ok(v)
    }

    fn payload(&self, expected: usize) -> Result<&[u8]> {
        let avail = self.bytes.len() - self.at;
        if avail < expected {
            return Err(Error::IdxTruncated {
                path: self.path.display().to_string(),
                detail: format!("payload has {avail} bytes, header declares {expected}"),
            });
        }
        Ok(&self.bytes[self.at..self.at + expected])
    }
}

/// Load an IDX image/label pair (raw or gzipped): big-endian magic
/// 0x00000803 / 0x00000801, big-endian dimension sizes, then raw bytes.
/// Pixels are divided by 255; the two files must agree on the sample count.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut images = IdxReader::open(images_path)?;
    let magic = images.read_u32()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxBadMagic {
            path: images_path.display().to_string(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = images.read_u32()? as usize;
    let rows = images.read_u32()? as usize;
    let cols = images.read_u32()? as usize;
    let dim = rows * cols;
    let pixels = images.payload(n * dim)?;
    let mut features = DenseMatrix::zeros(n, dim);
    for (x, &b) in features.as_mut_slice().iter_mut().zip(pixels) {
        *x = b as f64 / 255.0;
    }

    let mut labels_file = IdxReader::open(labels_path)?;
    let magic = labels_file.read_u32()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxBadMagic {
            path: labels_path.display().to_string(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n_labels = labels_file.read_u32()? as usize;
    if n_labels != n {
        return Err(Error::IdxCountMismatch {
            images: n,
            labels: n_labels,
        });
    }
    let raw = labels_file.payload(n_labels)?;
    let labels: Vec<usize> = raw.iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().copied().max().map_or(0, |m| m + 1);

    Ok(Dataset {
        features,
        labels,
        class_count,
    })
}

/// Synthetic Gaussian blobs: one cluster per class around a random center in
/// [0.25, 0.75]^d, noise scaled by `spread`, clamped back into [0, 1].
/// Samples are class-major: `per_class` rows of class 0, then class 1, ...
pub fn synth_blobs(
    classes: usize,
    per_class: usize,
    input_dim: usize,
    spread: f64,
    seed: u64,
) -> Dataset {
    let mut rng = seeds::rng(seed, "synth-blobs", 0);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..input_dim).map(|_| rng.random_range(0.25..0.75)).collect())
        .collect();
    let mut features = DenseMatrix::zeros(classes * per_class, input_dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (c, center) in centers.iter().enumerate() {
        for s in 0..per_class {
            let row = features.row_mut(c * per_class + s);
            for (x, &mu) in row.iter_mut().zip(center) {
                let noise: f64 = StandardNormal.sample(&mut rng);
                *x = (mu + spread * noise).clamp(0.0, 1.0);
            }
            labels.push(c);
        }
    }
    Dataset {
        features,
        labels,
        class_count: classes,
    }
}

/// Disjoint per-client index shards. The labeled/unlabeled divide and the
/// client boundaries never overlap.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FederatedSplit {
    pub labeled: Vec<Vec<usize>>,
    pub unlabeled: Vec<Vec<usize>>,
    /// Classes each client's labeled shard was restricted to, when the
    /// partition constrains them.
    pub seen_classes: Option<Vec<Vec<usize>>>,
}

impl FederatedSplit {
    pub fn clients(&self) -> usize {
        self.labeled.len()
    }

    /// Ground-truth labels of each client's unlabeled shard. Verification
    /// and diagnostics only; the training path never calls this.
    pub fn unlabeled_truth(&self, ds: &Dataset) -> Vec<Vec<usize>> {
        self.unlabeled
            .iter()
            .map(|shard| shard.iter().map(|&i| ds.labels[i]).collect())
            .collect()
    }

    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        let mut seen = vec![false; ds.len()];
        for shard in self.labeled.iter().chain(&self.unlabeled) {
            for &i in shard {
                if i >= ds.len() {
                    return Err(Error::Split(format!("index {i} out of range")));
                }
                if seen[i] {
                    return Err(Error::Split(format!("index {i} assigned twice")));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }
}

/// IID partition: uniform shuffle, then contiguous per-client blocks whose
/// first `labeled_per_client` indices become the labeled shard.
pub fn split_iid(
    ds: &Dataset,
    clients: usize,
    labeled_per_client: usize,
    unlabeled_per_client: usize,
    seed: u64,
) -> Result<FederatedSplit> {
    let per_client = labeled_per_client + unlabeled_per_client;
    if clients * per_client > ds.len() {
        return Err(Error::Split(format!(
            "{clients} clients x {per_client} samples exceed dataset size {}",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut seeds::rng(seed, "split-iid", 0));
    let mut labeled = Vec::with_capacity(clients);
    let mut unlabeled = Vec::with_capacity(clients);
    for k in 0..clients {
        let block = &order[k * per_client..(k + 1) * per_client];
        labeled.push(block[..labeled_per_client].to_vec());
        unlabeled.push(block[labeled_per_client..].to_vec());
    }
    Ok(FederatedSplit {
        labeled,
        unlabeled,
        seen_classes: None,
    })
}

/// Pool of not-yet-assigned sample indices, grouped by class.
struct ClassPools {
    by_class: Vec<Vec<usize>>,
}

impl ClassPools {
    fn new(ds: &Dataset, exclude: &[bool], rng: &mut ChaCha8Rng) -> Self {
        let mut by_class = vec![Vec::new(); ds.class_count];
        for (i, &label) in ds.labels.iter().enumerate() {
            if !exclude[i] {
                by_class[label].push(i);
            }
        }
        for pool in &mut by_class {
            pool.shuffle(rng);
        }
        ClassPools { by_class }
    }

    fn take(&mut self, class: usize, n: usize) -> Result<Vec<usize>> {
        let pool = &mut self.by_class[class];
        if pool.len() < n {
            return Err(Error::Split(format!(
                "class {class} pool exhausted: need {n}, have {}",
                pool.len()
            )));
        }
        Ok(pool.split_off(pool.len() - n))
    }

    /// Draw `n` samples from the union of `classes`, shuffled.
    fn take_from_set(&mut self, classes: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        let mut avail: Vec<(usize, usize)> = Vec::new();
        for &c in classes {
            for pos in 0..self.by_class[c].len() {
                avail.push((c, pos));
            }
        }
        if avail.len() < n {
            return Err(Error::Split(format!(
                "pool over classes {classes:?} exhausted: need {n}, have {}",
                avail.len()
            )));
        }
        avail.shuffle(rng);
        let mut chosen: Vec<(usize, usize)> = avail[..n].to_vec();
        // Remove by descending position so earlier positions stay valid.
        chosen.sort_by(|a, b| b.cmp(a));
        let mut out = Vec::with_capacity(n);
        for (c, pos) in chosen {
            out.push(self.by_class[c].swap_remove(pos));
        }
        out.shuffle(rng);
        Ok(out)
    }

    fn class_len(&self, class: usize) -> usize {
        self.by_class[class].len()
    }
}

/// Assign each client a set of distinct classes for its labeled shard.
fn assign_seen_classes(
    clients: usize,
    class_count: usize,
    per_client: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    if per_client > class_count {
        return Err(Error::config(
            "partition.classes_per_client",
            format!("{per_client} exceeds class count {class_count}"),
        ));
    }
    let mut out = Vec::with_capacity(clients);
    for _ in 0..clients {
        let mut all: Vec<usize> = (0..class_count).collect();
        all.shuffle(rng);
        let mut mine = all[..per_client].to_vec();
        mine.sort_unstable();
        out.push(mine);
    }
    Ok(out)
}

/// Split `labeled_per_client` as evenly as possible over the client's seen
/// classes and draw without replacement from each class pool.
fn draw_labeled_shards(
    pools: &mut ClassPools,
    seen: &[Vec<usize>],
    labeled_per_client: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut labeled = Vec::with_capacity(seen.len());
    for classes in seen {
        let base = labeled_per_client / classes.len();
        let extra = labeled_per_client % classes.len();
        let mut shard = Vec::with_capacity(labeled_per_client);
        for (slot, &c) in classes.iter().enumerate() {
            let want = base + usize::from(slot < extra);
            shard.extend(pools.take(c, want)?);
        }
        labeled.push(shard);
    }
    Ok(labeled)
}

/// Dirichlet proportions over clients via normalized Gamma draws.
fn dirichlet_proportions(clients: usize, concentration: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("concentration must be positive");
    let draws: Vec<f64> = (0..clients).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum <= 0.0 {
        // Gamma underflow at tiny concentration: the distribution limit puts
        // all mass on one client.
        let winner = rng.random_range(0..clients);
        return (0..clients).map(|k| f64::from(k == winner)).collect();
    }
    draws.iter().map(|d| d / sum).collect()
}

/// Round fractional allocations to integers summing to `total`, assigning
/// the residue greedily by largest fractional part.
fn largest_remainder_counts(proportions: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = proportions
        .iter()
        .map(|w| (w * total as f64).floor() as usize)
        .collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = proportions[a] * total as f64 - counts[a] as f64;
        let fb = proportions[b] * total as f64 - counts[b] as f64;
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &k in order.iter().take(total - assigned) {
        counts[k] += 1;
    }
    counts
}

/// Non-IID partition: each client's labeled shard is drawn from
/// `classes_per_client` randomly assigned classes; the unlabeled pool is
/// allocated per class by Dirichlet-distributed proportions across clients.
/// `unlabeled_total` caps the pool (subsampled uniformly) when set.
pub fn split_dirichlet_unlabeled(
    ds: &Dataset,
    clients: usize,
    concentration: f64,
    classes_per_client: usize,
    labeled_per_client: usize,
    unlabeled_total: Option<usize>,
    seed: u64,
) -> Result<FederatedSplit> {
    if concentration <= 0.0 {
        return Err(Error::config(
            "partition.concentration",
            "must be > 0".to_string(),
        ));
    }
    let mut rng = seeds::rng(seed, "split-dirichlet", 0);
    let seen = assign_seen_classes(clients, ds.class_count, classes_per_client, &mut rng)?;
    let mut pools = ClassPools::new(ds, &vec![false; ds.len()], &mut rng);
    let labeled = draw_labeled_shards(&mut pools, &seen, labeled_per_client)?;

    // Optionally shrink the remaining pool before the Dirichlet allocation.
    if let Some(total) = unlabeled_total {
        let mut remaining: Vec<usize> = (0..ds.class_count)
            .flat_map(|c| pools.by_class[c].iter().copied().collect::<Vec<_>>())
            .collect();
        if remaining.len() < total {
            return Err(Error::Split(format!(
                "unlabeled_total {total} exceeds remaining pool {}",
                remaining.len()
            )));
        }
        remaining.shuffle(&mut rng);
        remaining.truncate(total);
        let mut keep = vec![true; ds.len()];
        for shard in &labeled {
            for &i in shard {
                keep[i] = false;
            }
        }
        let kept: std::collections::HashSet<usize> = remaining.into_iter().collect();
        for (i, k) in keep.iter_mut().enumerate() {
            if *k && !kept.contains(&i) {
                *k = false;
            }
        }
        let exclude: Vec<bool> = keep.iter().map(|&k| !k).collect();
        pools = ClassPools::new(ds, &exclude, &mut rng);
    }

    let mut unlabeled: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for c in 0..ds.class_count {
        let n = pools.class_len(c);
        if n == 0 {
            continue;
        }
        let proportions = dirichlet_proportions(clients, concentration, &mut rng);
        let counts = largest_remainder_counts(&proportions, n);
        for (k, &want) in counts.iter().enumerate() {
            unlabeled[k].extend(pools.take(c, want)?);
        }
    }

    Ok(FederatedSplit {
        labeled,
        unlabeled,
        seen_classes: Some(seen),
    })
}

/// Mismatch-ratio partition: labeled shards use only each client's seen
/// classes; a fraction `ratio` of the unlabeled shard is drawn from unseen
/// classes, the remainder from seen classes.
pub fn split_mismatch_ratio(
    ds: &Dataset,
    clients: usize,
    seen_classes_per_client: usize,
    labeled_per_client: usize,
    unlabeled_per_client: usize,
    ratio: f64,
    seed: u64,
) -> Result<FederatedSplit> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::config(
            "partition.mismatch_ratio",
            format!("must be in [0,1], got {ratio}"),
        ));
    }
    let mut rng = seeds::rng(seed, "split-mismatch", 0);
    let seen = assign_seen_classes(clients, ds.class_count, seen_classes_per_client, &mut rng)?;
    let mut pools = ClassPools::new(ds, &vec![false; ds.len()], &mut rng);
    let labeled = draw_labeled_shards(&mut pools, &seen, labeled_per_client)?;

    let unseen_count = (ratio * unlabeled_per_client as f64).round() as usize;
    let seen_count = unlabeled_per_client - unseen_count;
    let mut unlabeled = Vec::with_capacity(clients);
    for classes in &seen {
        let unseen: Vec<usize> = (0..ds.class_count)
            .filter(|c| !classes.contains(c))
            .collect();
        let mut shard = pools.take_from_set(classes, seen_count, &mut rng)?;
        shard.extend(pools.take_from_set(&unseen, unseen_count, &mut rng)?);
        unlabeled.push(shard);
    }

    Ok(FederatedSplit {
        labeled,
        unlabeled,
        seen_classes: Some(seen),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx_fixture(dir: &Path, pixels: &[u8], labels: &[u8], dims: (u32, u32)) -> (std::path::PathBuf, std::path::PathBuf) {
        let images = dir.join("images.idx");
        let labels_path = dir.join("labels.idx");
        let n = labels.len() as u32;
        let mut f = std::fs::File::create(&images).unwrap();
        f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&n.to_be_bytes()).unwrap();
        f.write_all(&dims.0.to_be_bytes()).unwrap();
        f.write_all(&dims.1.to_be_bytes()).unwrap();
        f.write_all(pixels).unwrap();
        let mut f = std::fs::File::create(&labels_path).unwrap();
        f.write_all(&IDX_LABELS_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&n.to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
        (images, labels_path)
    }

    #[test]
    fn idx_fixture_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = vec![0, 51, 102, 153, 204, 255, 10, 20];
        let labels = vec![1u8, 3u8];
        let (images, labels_path) = write_idx_fixture(dir.path(), &pixels, &labels, (2, 2));
        let ds = load_idx(&images, &labels_path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.input_dim(), 4);
        assert_eq!(ds.class_count, 4);
        assert_eq!(ds.labels, vec![1, 3]);
        for (got, want) in ds.features.as_slice().iter().zip(&pixels) {
            assert_eq!(*got, *want as f64 / 255.0);
        }
    }

    #[test]
    fn idx_error_cases() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels_path) = write_idx_fixture(dir.path(), &[0; 8], &[0, 1], (2, 2));

        //

        // Labels file carrying the images magic is rejected as bad magic.
        match load_idx(&labels_path, &labels_path) {
            Err(Error::IdxBadMagic { expected, found, .. }) => {
                assert_eq!(expected, IDX_IMAGES_MAGIC);
                assert_eq!(found, IDX_LABELS_MAGIC);
            }
            other => panic!("expected bad magic, got {other:?}"),
        }

        // Truncated payload.
        let short = dir.path().join("short.idx");
        let mut f = std::fs::File::create(&short).unwrap();
        f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        f.write_all(&[0u8; 3]).unwrap();
        assert!(matches!(
            load_idx(&short, &labels_path),
            Err(Error::IdxTruncated { .. })
        ));

        // Count mismatch between the two files.
        let labels3 = dir.path().join("labels3.idx");
        let mut f = std::fs::File::create(&labels3).unwrap();
        f.write_all(&IDX_LABELS_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&3u32.to_be_bytes()).unwrap();
        f.write_all(&[0u8; 3]).unwrap();
        assert!(matches!(
            load_idx(&images, &labels3),
            Err(Error::IdxCountMismatch {
                images: 2,
                labels: 3
            })
        ));
    }

    #[test]
    fn blobs_are_deterministic_and_balanced() {
        let a = synth_blobs(3, 50, 6, 0.1, 9);
        let b = synth_blobs(3, 50, 6, 0.1, 9);
        assert_eq!(a.features, b.features);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.len(), 150);
        for c in 0..3 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 50);
        }
        let c = synth_blobs(3, 50, 6, 0.1, 10);
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn iid_split_shapes_and_partition() {
        let ds = synth_blobs(5, 200, 4, 0.2, 1);
        let split = split_iid(&ds, 10, 6, 80, 7).unwrap();
        split.validate(&ds).unwrap();
        assert_eq!(split.clients(), 10);
        for k in 0..10 {
            assert_eq!(split.labeled[k].len(), 6);
            assert_eq!(split.unlabeled[k].len(), 80);
        }
        // Union is a permutation of a prefix-sized subset.
        let mut all: Vec<usize> = split
            .labeled
            .iter()
            .chain(&split.unlabeled)
            .flatten()
            .copied()
            .collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 10 * 86);

        let single = split_iid(&ds, 1, 6, 80, 7).unwrap();
        assert_eq!(single.labeled[0].len(), 6);

        assert!(split_iid(&ds, 100, 6, 80, 7).is_err());
    }

    #[test]
    fn dirichlet_split_respects_labeled_spec() {
        let ds = synth_blobs(10, 300, 4, 0.2, 2);
        let split = split_dirichlet_unlabeled(&ds, 10, 0.1, 2, 60, None, 11).unwrap();
        split.validate(&ds).unwrap();
        for (k, shard) in split.labeled.iter().enumerate() {
            assert_eq!(shard.len(), 60);
            let mut classes: Vec<usize> = shard.iter().map(|&i| ds.labels[i]).collect();
            classes.sort_unstable();
            classes.dedup();
            assert_eq!(classes.len(), 2, "client {k} has classes {classes:?}");
            assert_eq!(&classes, &split.seen_classes.as_ref().unwrap()[k]);
        }
        // All unlabeled data assigned somewhere.
        let total_unlabeled: usize = split.unlabeled.iter().map(Vec::len).sum();
        assert_eq!(total_unlabeled, ds.len() - 600);
    }

    #[test]
    fn dirichlet_large_concentration_is_near_uniform() {
        let ds = synth_blobs(4, 500, 3, 0.2, 3);
        let clients = 5;
        // Aggregate proportions over several seeds; each client should hold
        // close to 1/K of each class.
        let mut worst: f64 = 0.0;
        for seed in 0..5u64 {
            let split =
                split_dirichlet_unlabeled(&ds, clients, 1e6, 1, 10, None, seed).unwrap();
            let truth = split.unlabeled_truth(&ds);
            for k in 0..clients {
                for c in 0..4 {
                    let mine = truth[k].iter().filter(|&&l| l == c).count() as f64;
                    let class_total: f64 = (0..clients)
                        .map(|j| truth[j].iter().filter(|&&l| l == c).count() as f64)
                        .sum();
                    let share = mine / class_total;
                    worst = worst.max((share - 1.0 / clients as f64).abs());
                }
            }
        }
        assert!(worst < 0.05, "worst deviation from uniform: {worst}");
    }

    #[test]
    fn mismatch_ratio_counts() {
        let ds = synth_blobs(10, 300, 4, 0.2, 4);
        for &(ratio, want_unseen) in &[(0.0, 0usize), (0.5, 250), (1.0, 500)] {
            let split = split_mismatch_ratio(&ds, 4, 6, 30, 500, ratio, 13).unwrap();
            split.validate(&ds).unwrap();
            let truth = split.unlabeled_truth(&ds);
            for k in 0..4 {
                let seen = &split.seen_classes.as_ref().unwrap()[k];
                let unseen_got = truth[k].iter().filter(|l| !seen.contains(l)).count();
                assert_eq!(unseen_got, want_unseen, "ratio {ratio} client {k}");
                assert_eq!(truth[k].len(), 500);
                // Labeled shard stays within the seen classes.
                for &i in &split.labeled[k] {
                    assert!(seen.contains(&ds.labels[i]));
                }
            }
        }
    }

    #[test]
    fn splits_are_pure_functions_of_seed() {
        let ds = synth_blobs(6, 100, 4, 0.2, 5);
        let a = split_dirichlet_unlabeled(&ds, 4, 0.5, 2, 8, Some(300), 21).unwrap();
        let b = split_dirichlet_unlabeled(&ds, 4, 0.5, 2, 8, Some(300), 21).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = split_dirichlet_unlabeled(&ds, 4, 0.5, 2, 8, Some(300), 22).unwrap();
        assert_ne!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&c).unwrap());
    }

    #[test]
    fn largest_remainder_rounds_exactly() {
        let counts = largest_remainder_counts(&[0.5, 0.3, 0.2], 7);
        assert_eq!(counts.iter().sum::<usize>(), 7);
        assert_eq!(counts, vec![4, 2, 1]);
    }
}
