//! CIFAR-10 ingestion from the canonical binary distribution, dataset
//! statistics, normalization, augmentation and seeded batch iteration.

use std::fs;
use std::path::{Path, PathBuf};

use rand_core::RngCore;
use yynet_core::rng;
use yynet_core::Tensor;

use crate::error::{AppError, AppResult};

pub const IMAGE_BYTES: usize = 3 * 1024; // 3 channel planes of 32x32
pub const RECORD_BYTES: usize = 1 + IMAGE_BYTES;
pub const TRAIN_RECORDS: usize = 50_000;
pub const TEST_RECORDS: usize = 10_000;
pub const SIDE: usize = 32;

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitRole {
    Train,
    Test,
}

/// One split held fully in memory as raw records.
pub struct DatasetSplit {
    /// Flat pixel bytes, `IMAGE_BYTES` per record (R plane, G plane, B plane).
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    pub role: SplitRole,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]
    }

    /// Reassemble the raw record (label byte + pixels) for round-trip checks.
    pub fn record(&self, i: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(RECORD_BYTES);
        out.push(self.labels[i]);
        out.extend_from_slice(self.image(i));
        out
    }

    /// First `n` records (deterministic subset for smoke runs).
    pub fn take(&self, n: usize) -> DatasetSplit {
        let n = n.min(self.len());
        DatasetSplit {
            images: self.images[..n * IMAGE_BYTES].to_vec(),
            labels: self.labels[..n].to_vec(),
            role: self.role,
        }
    }
}

fn parse_batch_file(path: &Path, images: &mut Vec<u8>, labels: &mut Vec<u8>) -> AppResult<()> {
    let bytes = fs::read(path)
        .map_err(|e| AppError::Io(format!("cannot read {}: {e}", path.display())))?;
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(AppError::Format(format!(
            "{}: length {} is not a multiple of {RECORD_BYTES}",
            path.display(),
            bytes.len()
        )));
    }
    for (ri, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let label = rec[0];
        if label > 9 {
            return Err(AppError::Format(format!(
                "{}: record {ri} has label {label} outside [0,9]",
                path.display()
            )));
        }
        labels.push(label);
        images.extend_from_slice(&rec[1..]);
    }
    Ok(())
}

/// Load the canonical binary distribution from a directory and validate
/// the published record counts.
pub fn load_cifar10(dir: &Path) -> AppResult<(DatasetSplit, DatasetSplit)> {
    let mut train = DatasetSplit { images: Vec::new(), labels: Vec::new(), role: SplitRole::Train };
    for f in TRAIN_FILES {
        parse_batch_file(&dir.join(f), &mut train.images, &mut train.labels)?;
    }
    let mut test = DatasetSplit { images: Vec::new(), labels: Vec::new(), role: SplitRole::Test };
    parse_batch_file(&dir.join(TEST_FILE), &mut test.images, &mut test.labels)?;
    if train.len() != TRAIN_RECORDS {
        return Err(AppError::Format(format!(
            "train split has {} records, expected {TRAIN_RECORDS}",
            train.len()
        )));
    }
    if test.len() != TEST_RECORDS {
        return Err(AppError::Format(format!(
            "test split has {} records, expected {TEST_RECORDS}",
            test.len()
        )));
    }
    Ok((train, test))
}

/// Per-channel mean/std of the train split, on pixels scaled to [0,1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

pub fn compute_stats(train: &DatasetSplit) -> ChannelStats {
    let n = train.len() * 1024;
    let mut sum = [0.0f64; 3];
    let mut sumsq = [0.0f64; 3];
    for i in 0..train.len() {
        let img = train.image(i);
        for c in 0..3 {
            for &b in &img[c * 1024..(c + 1) * 1024] {
                let v = b as f64 / 255.0;
                sum[c] += v;
                sumsq[c] += v * v;
            }
        }
    }
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for c in 0..3 {
        mean[c] = sum[c] / n as f64;
        std[c] = (sumsq[c] / n as f64 - mean[c] * mean[c]).max(1e-12).sqrt();
    }
    ChannelStats { mean, std }
}

/// Cache path for the stats file (six numbers, plain text).
pub fn stats_path(out_dir: &Path) -> PathBuf {
    out_dir.join("stats.txt")
}

pub fn save_stats(path: &Path, s: &ChannelStats) -> AppResult<()> {
    let text = format!(
        "{} {} {}\n{} {} {}\n",
        s.mean[0], s.mean[1], s.mean[2], s.std[0], s.std[1], s.std[2]
    );
    fs::write(path, text).map_err(|e| AppError::Io(format!("cannot write {}: {e}", path.display())))
}

pub fn load_stats(path: &Path) -> AppResult<ChannelStats> {
    let text = fs::read_to_string(path)
        .map_err(|e| AppError::Io(format!("cannot read {}: {e}", path.display())))?;
    let nums: Vec<f64> = text.split_whitespace().map(|t| t.parse().unwrap_or(f64::NAN)).collect();
    if nums.len() != 6 || nums.iter().any(|v| !v.is_finite()) {
        return Err(AppError::Format(format!("{}: expected six numbers", path.display())));
    }
    Ok(ChannelStats {
        mean: [nums[0], nums[1], nums[2]],
        std: [nums[3], nums[4], nums[5]],
    })
}

/// Stats from cache if present, else computed and cached.
pub fn stats_cached(train: &DatasetSplit, out_dir: &Path) -> AppResult<ChannelStats> {
    let path = stats_path(out_dir);
    if path.exists() {
        if let Ok(s) = load_stats(&path) {
            return Ok(s);
        }
    }
    let s = compute_stats(train);
    save_stats(&path, &s)?;
    Ok(s)
}

/// Random horizontal flip (p = 0.5) + 4-pixel reflect-pad random crop,
/// on raw bytes (pre-normalization).
pub fn augment(image: &[u8], r: &mut impl RngCore) -> Vec<u8> {
    const PAD: usize = 4;
    let flip = r.next_u32() & 1 == 1;
    let dy = (r.next_u32() as usize) % (2 * PAD + 1);
    let dx = (r.next_u32() as usize) % (2 * PAD + 1);
    let mut out = vec![0u8; IMAGE_BYTES];
    for c in 0..3 {
        let plane = &image[c * 1024..(c + 1) * 1024];
        for y in 0..SIDE {
            for x in 0..SIDE {
                // Coordinates in the reflect-padded 40x40 frame.
                let (py, px) = (y + dy, x + dx);
                let sy = reflect(py as isize - PAD as isize, SIDE);
                let mut sx = reflect(px as isize - PAD as isize, SIDE);
                if flip {
                    sx = SIDE - 1 - sx;
                }
                out[c * 1024 + y * SIDE + x] = plane[sy * SIDE + sx];
            }
        }
    }
    out
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    i as usize
}

/// Standardize raw bytes into an `(N,3,32,32)` tensor.
pub fn normalize(images: &[&[u8]], stats: &ChannelStats) -> Tensor<f32> {
    let n = images.len();
    let mut data = Vec::with_capacity(n * IMAGE_BYTES);
    for img in images {
        for c in 0..3 {
            let (m, s) = (stats.mean[c] as f32, stats.std[c] as f32);
            for &b in &img[c * 1024..(c + 1) * 1024] {
                data.push((b as f32 / 255.0 - m) / s);
            }
        }
    }
    Tensor::new(&[n, 3, SIDE, SIDE], data).unwrap()
}

/// A ready training batch.
pub struct LabeledBatch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// Epoch permutation derived from (seed, epoch).
pub fn epoch_permutation(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut r = rng::derive(seed, 0x0bad_5eed ^ epoch as u64);
    let mut perm: Vec<usize> = (0..len).collect();
    // Fisher-Yates.
    for i in (1..len).rev() {
        let j = (r.next_u64() % (i as u64 + 1)) as usize;
        perm.swap(i, j);
    }
    perm
}

/// Materialize the batches of one epoch. `augment_rng` is drained
/// per-image in permutation order, so the batch stream is a pure function
/// of (split, seed, epoch, flags).
pub fn batches(
    split: &DatasetSplit,
    batch_size: usize,
    stats: &ChannelStats,
    seed: u64,
    epoch: usize,
    shuffle: bool,
    augment_images: bool,
) -> Vec<LabeledBatch> {
    let order = if shuffle {
        epoch_permutation(split.len(), seed, epoch)
    } else {
        (0..split.len()).collect()
    };
    let mut aug_rng = rng::derive(seed, 0xa06_0000 ^ epoch as u64);
    let mut out = Vec::with_capacity(split.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let mut owned: Vec<Vec<u8>> = Vec::with_capacity(chunk.len());
        for &i in chunk {
            owned.push(if augment_images {
                augment(split.image(i), &mut aug_rng)
            } else {
                split.image(i).to_vec()
            });
        }
        let views: Vec<&[u8]> = owned.iter().map(|v| v.as_slice()).collect();
        out.push(LabeledBatch {
            images: normalize(&views, stats),
            labels: chunk.iter().map(|&i| split.labels[i] as usize).collect(),
        });
    }
    out
}

// ---------------------------------------------------------------------------
// Synthetic dataset (surrogate when the real corpus is unavailable)
// ---------------------------------------------------------------------------

/// Write a procedurally generated dataset in the canonical binary layout:
/// five train batch files and one test batch file. Classes are separable
/// (distinct dominant colors plus a class-positioned bright patch with
/// noise), so a small CNN trains well above chance on it.
pub fn write_synthetic(dir: &Path, train_records: usize, test_records: usize, seed: u64) -> AppResult<()> {
    fs::create_dir_all(dir)
        .map_err(|e| AppError::Io(format!("cannot create {}: {e}", dir.display())))?;
    let mut r = rng::seeded(seed);
    let per_file = train_records.div_ceil(TRAIN_FILES.len());
    let mut remaining = train_records;
    for f in TRAIN_FILES {
        let n = per_file.min(remaining);
        remaining -= n;
        write_synthetic_file(&dir.join(f), n, &mut r)?;
    }
    write_synthetic_file(&dir.join(TEST_FILE), test_records, &mut r)?;
    Ok(())
}

fn write_synthetic_file(path: &Path, records: usize, r: &mut rng::ChaCha8Rng) -> AppResult<()> {
    // Distinct dominant colors per class.
    const BASE: [[u8; 3]; 10] = [
        [200, 40, 40],
        [40, 200, 40],
        [40, 40, 200],
        [200, 200, 40],
        [200, 40, 200],
        [40, 200, 200],
        [230, 230, 230],
        [30, 30, 30],
        [200, 120, 40],
        [120, 40, 200],
    ];
    let mut bytes = Vec::with_capacity(records * RECORD_BYTES);
    for _ in 0..records {
        let label = (r.next_u32() % 10) as u8;
        bytes.push(label);
        let base = BASE[label as usize];
        // Class-positioned bright patch on a 2x5 grid.
        let (gy, gx) = ((label / 5) as usize, (label % 5) as usize);
        let (cy, cx) = (8 + gy * 16, 3 + gx * 6);
        let mut img = [0u8; IMAGE_BYTES];
        for c in 0..3 {
            for y in 0..SIDE {
                for x in 0..SIDE {
                    let in_patch = y.abs_diff(cy) <= 3 && x.abs_diff(cx) <= 3;
                    let v = if in_patch { 255 - base[c] as i32 } else { base[c] as i32 };
                    let noise = (r.next_u32() % 91) as i32 - 45;
                    img[c * 1024 + y * SIDE + x] = (v + noise).clamp(0, 255) as u8;
                }
            }
        }
        bytes.extend_from_slice(&img);
    }
    fs::write(path, bytes).map_err(|e| AppError::Io(format!("cannot write {}: {e}", path.display())))
}

/// Locate a dataset directory: explicit flag, `YYNET_CIFAR10_DIR`, or
/// `./data/cifar-10-batches-bin`.
pub fn resolve_data_dir(explicit: Option<&Path>) -> Option<PathBuf> {
    if let Some(p) = explicit {
        return Some(p.to_path_buf());
    }
    if let Ok(env) = std::env::var("YYNET_CIFAR10_DIR") {
        return Some(PathBuf::from(env));
    }
    let default = PathBuf::from("data/cifar-10-batches-bin");
    default.exists().then_some(default)
}
