//! IDX ingestion, normalization, train/validation/test splitting and batching.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;

use crate::evaluator::{build_linear_gaussian_oracle, EvalError, LinearGaussianOracle, OracleDims};
use crate::model::{Batch, ModalityBatch};
use crate::numerics::Tensor;
use crate::rng::{substream, Stream};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad IDX magic {found:#010x}; expected {expected:#010x}")]
    Magic { expected: u32, found: u32 },
    #[error("IDX file holds {found} data but {expected} were requested")]
    KindMismatch {
        expected: &'static str,
        found: &'static str,
    },
    #[error("IDX payload truncated: header promises {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("IDX file has {extra} bytes after the payload")]
    TrailingBytes { extra: usize },
    #[error("IDX dimensions {0:?} overflow the addressable size")]
    DimensionOverflow(Vec<u64>),
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at record {index} is not below {classes}")]
    LabelRange {
        index: usize,
        label: u8,
        classes: usize,
    },
    #[error("dataset is empty")]
    Empty,
    #[error("no file matching {0} in {1}")]
    Missing(String, PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdxKind {
    Images,
    Labels,
}

impl IdxKind {
    pub fn magic(self) -> u32 {
        match self {
            IdxKind::Images => 0x0000_0803,
            IdxKind::Labels => 0x0000_0801,
        }
    }

    fn name(self) -> &'static str {
        match self {
            IdxKind::Images => "images",
            IdxKind::Labels => "labels",
        }
    }

    fn from_magic(m: u32) -> Option<Self> {
        [IdxKind::Images, IdxKind::Labels]
            .into_iter()
            .find(|k| k.magic() == m)
    }
}

/// Unsigned-byte IDX array: `dims` are `[n, rows, cols]` or `[n]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub kind: IdxKind,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn len(&self) -> usize {
        self.dims[0]
    }

    pub fn is_empty(&self) -> bool {
        self.dims[0] == 0
    }

    pub fn record_len(&self) -> usize {
        self.dims[1..].iter().product()
    }

    pub fn record(&self, i: usize) -> &[u8] {
        let w = self.record_len();
        &self.data[i * w..(i + 1) * w]
    }

    /// Concatenates records of two arrays with identical record shape.
    pub fn concat(&self, other: &IdxArray) -> Option<IdxArray> {
        if self.kind != other.kind || self.dims[1..] != other.dims[1..] {
            return None;
        }
        let mut dims = self.dims.clone();
        dims[0] += other.dims[0];
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Some(IdxArray {
            kind: self.kind,
            dims,
            data,
        })
    }
}

/// Parses IDX bytes of the expected kind.
pub fn parse_idx_bytes(bytes: &[u8], expected: IdxKind) -> Result<IdxArray, DataError> {
    if bytes.len() < 4 {
        return Err(DataError::Truncated {
            expected: 4,
            found: bytes.len(),
        });
    }
    let magic = u32::from_be_bytes(bytes[0..4].try_into().expect("4 bytes"));
    match IdxKind::from_magic(magic) {
        Some(k) if k == expected => {}
        Some(k) => {
            return Err(DataError::KindMismatch {
                expected: expected.name(),
                found: k.name(),
            })
        }
        None => {
            return Err(DataError::Magic {
                expected: expected.magic(),
                found: magic,
            })
        }
    }
    let ndims = (magic & 0xff) as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(DataError::Truncated {
            expected: header,
            found: bytes.len(),
        });
    }
    let raw: Vec<u64> = (0..ndims)
        .map(|d| {
            let o = 4 + 4 * d;
            u32::from_be_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as u64
        })
        .collect();
    let total = raw
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .and_then(|t| usize::try_from(t).ok())
        .and_then(|t| t.checked_add(header))
        .ok_or_else(|| DataError::DimensionOverflow(raw.clone()))?;
    if bytes.len() < total {
        return Err(DataError::Truncated {
            expected: total - header,
            found: bytes.len() - header,
        });
    }
    if bytes.len() > total {
        return Err(DataError::TrailingBytes {
            extra: bytes.len() - total,
        });
    }
    Ok(IdxArray {
        kind: expected,
        dims: raw.iter().map(|&d| d as usize).collect(),
        data: bytes[header..].to_vec(),
    })
}

/// Reads an IDX file, transparently inflating gzip content.
pub fn parse_idx(path: &Path, expected: IdxKind) -> Result<IdxArray, DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = fs::read(path).map_err(io)?;
    let bytes = if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(io)?;
        out
    } else {
        raw
    };
    parse_idx_bytes(&bytes, expected)
}

/// Serializes to uncompressed IDX bytes.
pub fn write_idx(a: &IdxArray) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * a.dims.len() + a.data.len());
    out.extend_from_slice(&(a.kind.magic() & !0xff | a.dims.len() as u32).to_be_bytes());
    for &d in &a.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&a.data);
    out
}

fn find_file(dir: &Path, stem: &str) -> Result<PathBuf, DataError> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(&name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(DataError::Missing(stem.to_string(), dir.to_path_buf()))
}

/// Loads the published training and test files of an MNIST-layout directory
/// and pools them: training records first, then test records.
pub fn load_idx_pool(dir: &Path) -> Result<(IdxArray, IdxArray), DataError> {
    if !dir.is_dir() {
        return Err(DataError::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        });
    }
    let mut images: Option<IdxArray> = None;
    let mut labels: Option<IdxArray> = None;
    for prefix in ["train", "t10k"] {
        let im = parse_idx(&find_file(dir, &format!("{prefix}-images-idx3-ubyte"))?, IdxKind::Images)?;
        let lb = parse_idx(&find_file(dir, &format!("{prefix}-labels-idx1-ubyte"))?, IdxKind::Labels)?;
        images = Some(match images {
            None => im,
            Some(a) => a.concat(&im).ok_or(DataError::CountMismatch {
                images: a.len(),
                labels: im.len(),
            })?,
        });
        labels = Some(match labels {
            None => lb,
            Some(a) => a.concat(&lb).expect("label arrays share a record shape"),
        });
    }
    Ok((images.expect("two files read"), labels.expect("two files read")))
}

/// Multimodal records with one column per modality.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub names: Vec<String>,
    pub columns: Vec<ModalityBatch<f32>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, |c| c.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, rows: &[usize]) -> Batch<f32> {
        Batch {
            modalities: self.columns.iter().map(|c| c.select(rows)).collect(),
        }
    }

    pub fn all(&self) -> Batch<f32> {
        Batch {
            modalities: self.columns.clone(),
        }
    }
}

/// Record indices of each split. The three lists partition `0..n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl Split {
    pub fn get(&self, s: SplitName) -> &[usize] {
        match s {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

/// `(train, val, test)` sizes: the pool is `⌊0.85 n⌋`, validation is
/// `⌊0.10 · pool⌋` taken from the pool, the test split is the remainder.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let pool = n * 85 / 100;
    let val = pool / 10;
    (pool - val, val, n - pool)
}

/// Seeded shuffle of `0..n` cut into train/validation/test.
pub fn split_indices(n: usize, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, Stream::Split, &[n as u64]));
    let (tr, va, _) = split_sizes(n);
    let test = idx.split_off(tr + va);
    let val = idx.split_off(tr);
    Split {
        train: idx,
        val,
        test,
    }
}

/// An image/label dataset with its split.
#[derive(Clone, Debug)]
pub struct BimodalDataset {
    pub data: Dataset,
    pub split: Split,
}

/// Seeded choice of `k` record indices (all of them, in order, if `k ≥ n`).
pub fn subsample(n: usize, k: usize, seed: u64) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut rng = substream(seed, Stream::Split, &[n as u64, k as u64]);
    let mut v = rand::seq::index::sample(&mut rng, n, k).into_vec();
    v.sort_unstable();
    v
}

/// Scales pixels by 1/255, one-hot encodes labels and splits the records.
/// `subset` keeps a seeded random subset of the records before splitting.
pub fn normalize_and_split(
    images: &IdxArray,
    labels: &IdxArray,
    classes: usize,
    subset: Option<usize>,
    seed: u64,
) -> Result<BimodalDataset, DataError> {
    if images.kind != IdxKind::Images || labels.kind != IdxKind::Labels {
        return Err(DataError::KindMismatch {
            expected: "images and labels",
            found: "other",
        });
    }
    if images.len() != labels.len() {
        return Err(DataError::CountMismatch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    let keep = subsample(images.len(), subset.unwrap_or(usize::MAX), seed);
    if keep.is_empty() {
        return Err(DataError::Empty);
    }
    let w = images.record_len();
    let mut pixels = Vec::with_capacity(keep.len() * w);
    let mut cls = Vec::with_capacity(keep.len());
    for &i in &keep {
        pixels.extend(images.record(i).iter().map(|&b| b as f32 / 255.0));
        let l = labels.data[i];
        if l as usize >= classes {
            return Err(DataError::LabelRange {
                index: i,
                label: l,
                classes,
            });
        }
        cls.push(l as usize);
    }
    let n = keep.len();
    let image_col = ModalityBatch::dense(Tensor::new(&[n, w], pixels).expect("sized buffer"));
    let data = Dataset {
        names: vec!["image".into(), "label".into()],
        columns: vec![image_col, ModalityBatch::one_hot(cls, classes)],
    };
    Ok(BimodalDataset {
        data,
        split: split_indices(n, seed),
    })
}

/// Batches over `indices`. With a shuffle key `(seed, epoch)` the order is a
/// seeded permutation; without one it is the given order. A final batch
/// shorter than `min_last` is dropped.
pub fn batches(
    indices: &[usize],
    batch_size: usize,
    shuffle: Option<(u64, usize)>,
    min_last: usize,
) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    if let Some((seed, epoch)) = shuffle {
        order.shuffle(&mut substream(seed, Stream::Shuffle, &[epoch as u64]));
    }
    order
        .chunks(batch_size.max(1))
        .filter(|c| c.len() >= min_last.min(batch_size))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Samples from a linear-Gaussian model together with its exact likelihoods.
pub struct SynthDataset {
    pub data: Batch<f64>,
    pub oracle: LinearGaussianOracle,
}

/// `n` draws from the linear-Gaussian oracle built from `seed`.
pub fn synth_linear_gaussian(dims: &OracleDims, n: usize, seed: u64) -> Result<SynthDataset, EvalError> {
    let oracle = build_linear_gaussian_oracle(dims, seed)?;
    let mut rng = substream(seed, Stream::Synth, &[1]);
    let data = oracle.sample(n, &mut rng);
    Ok(SynthDataset { data, oracle })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_built() -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        b.extend_from_slice(&[0, 64, 128, 255, 1, 2, 3, 4]);
        b
    }

    #[test]
    fn parses_a_hand_built_file() {
        let a = parse_idx_bytes(&hand_built(), IdxKind::Images).unwrap();
        assert_eq!(a.dims, vec![2, 2, 2]);
        assert_eq!(a.record(1), &[1, 2, 3, 4]);
        assert_eq!(write_idx(&a), hand_built());
    }

    #[test]
    fn format_errors_are_distinct() {
        assert!(matches!(
            parse_idx_bytes(&hand_built(), IdxKind::Labels),
            Err(DataError::KindMismatch { .. })
        ));
        let mut bad = hand_built();
        bad[2] = 9;
        assert!(matches!(
            parse_idx_bytes(&bad, IdxKind::Images),
            Err(DataError::Magic { .. })
        ));
        let short = &hand_built()[..20];
        match parse_idx_bytes(short, IdxKind::Images) {
            Err(DataError::Truncated { expected, found }) => assert_eq!((expected, found), (8, 4)),
            other => panic!("{other:?}"),
        }
        let mut long = hand_built();
        long.push(0);
        assert!(matches!(
            parse_idx_bytes(&long, IdxKind::Images),
            Err(DataError::TrailingBytes { extra: 1 })
        ));
        let huge = [0, 0, 8, 3, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255];
        assert!(matches!(
            parse_idx_bytes(&huge, IdxKind::Images),
            Err(DataError::DimensionOverflow(_)) | Err(DataError::Truncated { .. })
        ));
    }

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_sizes(70_000), (53_550, 5_950, 10_500));
        assert_eq!(split_sizes(10_000), (7_650, 850, 1_500));
        let s = split_indices(1000, 3);
        assert_eq!(s, split_indices(1000, 3));
        assert_ne!(s, split_indices(1000, 4));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
    }

    #[test]
    fn normalization_and_one_hot() {
        let images = parse_idx_bytes(&hand_built(), IdxKind::Images).unwrap();
        let labels = IdxArray {
            kind: IdxKind::Labels,
            dims: vec![2],
            data: vec![3, 7],
        };
        let ds = normalize_and_split(&images, &labels, 10, None, 0).unwrap();
        let img = &ds.data.columns[0].values;
        assert_eq!(img.row(0), &[0.0, 64.0 / 255.0, 128.0 / 255.0, 1.0]);
        assert_eq!(ds.data.columns[1].classes.as_deref(), Some(&[3, 7][..]));
        assert_eq!(ds.data.columns[1].values.row(1)[7], 1.0);
        assert_eq!(ds.data.columns[1].values.row(1).iter().sum::<f32>(), 1.0);

        let short = IdxArray {
            kind: IdxKind::Labels,
            dims: vec![1],
            data: vec![3],
        };
        assert!(matches!(
            normalize_and_split(&images, &short, 10, None, 0),
            Err(DataError::CountMismatch { .. })
        ));
    }

    #[test]
    fn batching_policy() {
        let idx: Vec<usize> = (0..130).collect();
        let sizes: Vec<usize> = batches(&idx, 64, None, 2).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![64, 64, 2]);
        let sizes: Vec<usize> = batches(&idx[..129], 64, None, 2).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![64, 64]);
        assert_eq!(batches(&idx, 64, None, 2)[0], (0..64).collect::<Vec<_>>());
        let e0 = batches(&idx, 64, Some((1, 0)), 2);
        assert_eq!(e0, batches(&idx, 64, Some((1, 0)), 2));
        assert_ne!(e0, batches(&idx, 64, Some((1, 1)), 2));
    }

    #[test]
    fn synthetic_moments() {
        let dims = OracleDims::small();
        let a = synth_linear_gaussian(&dims, 100_000, 4).unwrap();
        let b = synth_linear_gaussian(&dims, 100_000, 4).unwrap();
        assert_eq!(a.data, b.data);
        let (mean, cov) = a.oracle.observation_moments();
        let n = a.data.rows();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|r| a.data.modalities.iter().flat_map(|m| m.values.row(r).to_vec()).collect())
            .collect();
        let d = mean.len();

        // Mean over the first 1e4 draws.
        let m = 10_000;
        for i in 0..d {
            let avg = rows[..m].iter().map(|v| v[i]).sum::<f64>() / m as f64;
            let se = (cov[(i, i)] / m as f64).sqrt();
            assert!((avg - mean[i]).abs() < 3.0 * se, "coordinate {i}");
        }

        let mut diff = 0.0;
        let mut norm = 0.0;
        for i in 0..d {
            for j in 0..d {
                let c = rows.iter().map(|v| (v[i] - mean[i]) * (v[j] - mean[j])).sum::<f64>() / n as f64;
                diff += (c - cov[(i, j)]).powi(2);
                norm += cov[(i, j)].powi(2);
            }
        }
        assert!((diff / norm).sqrt() < 0.05);
    }

    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn splits_partition_every_record(n in 20usize..5000, seed in any::<u64>()) {
            let s = split_indices(n, seed);
            let (tr, va, te) = split_sizes(n);
            prop_assert_eq!((s.train.len(), s.val.len(), s.test.len()), (tr, va, te));
            prop_assert!(tr + va == n * 85 / 100 && va == (tr + va) / 10);
            prop_assert!(tr > 0 && va > 0 && te > 0);
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn idx_round_trips(records in 0usize..20, rows in 1usize..6, cols in 1usize..6, seed in any::<u8>()) {
            let images = IdxArray {
                kind: IdxKind::Images,
                dims: vec![records, rows, cols],
                data: (0..records * rows * cols).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect(),
            };
            let bytes = write_idx(&images);
            prop_assert_eq!(&parse_idx_bytes(&bytes, IdxKind::Images).unwrap(), &images);
            let labels = IdxArray {
                kind: IdxKind::Labels,
                dims: vec![records],
                data: (0..records).map(|i| (i % 10) as u8).collect(),
            };
            let bytes = write_idx(&labels);
            prop_assert_eq!(write_idx(&parse_idx_bytes(&bytes, IdxKind::Labels).unwrap()), bytes);
        }
    }
}
