//! CIFAR-10 binary ingestion and a generator for CIFAR-format synthetic data.
//!
//! Each record is one label byte followed by 3072 pixel bytes stored
//! channel-planar (1024 red, 1024 green, 1024 blue, each row-major). Examples
//! are kept as raw bytes in HWC order and converted to tensors on demand.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_BYTES: usize = IMAGE_SIDE * IMAGE_SIDE * 3;
pub const RECORD_BYTES: usize = IMAGE_BYTES + 1;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";
pub const CLASS_NAMES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];
pub const RGB_MEANS: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const RGB_STDS: [f64; 3] = [0.2023, 0.1994, 0.2010];

/// One labelled image, pixels in HWC order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub pixels: Box<[u8]>,
    pub label: u8,
}

impl Example {
    /// Pixels scaled to `[0, 1]`, shape 32×32×3.
    pub fn unit(&self) -> Tensor<f32> {
        Tensor::from_fn(&[IMAGE_SIDE, IMAGE_SIDE, 3], |n| {
            f32::from(self.pixels[n]) / 255.0
        })
    }
}

/// Applies `(v − mean_c) / std_c` channelwise to a `[0, 1]` HWC image.
pub fn normalize<T: Scalar>(unit: &Tensor<f32>, means: &[f64; 3], stds: &[f64; 3]) -> Tensor<T> {
    Tensor::from_fn(unit.shape(), |n| {
        let c = n % 3;
        T::of((f64::from(unit.data()[n]) - means[c]) / stds[c])
    })
}

#[derive(Clone, Debug)]
pub struct DatasetConfig {
    pub data_dir: PathBuf,
    /// Fraction of the training files held out for validation (5k of 50k).
    pub val_fraction: f64,
    /// Truncates the training split after shuffling.
    pub train_limit: Option<usize>,
    pub val_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub rgb_means: [f64; 3],
    pub rgb_stds: [f64; 3],
    pub seed: u64,
}

impl DatasetConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        DatasetConfig {
            data_dir: data_dir.into(),
            val_fraction: 0.1,
            train_limit: None,
            val_limit: None,
            test_limit: None,
            rgb_means: RGB_MEANS,
            rgb_stds: RGB_STDS,
            seed: 0,
        }
    }

    pub fn normalize<T: Scalar>(&self, unit: &Tensor<f32>) -> Tensor<T> {
        normalize(unit, &self.rgb_means, &self.rgb_stds)
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

/// Reads every record of one binary batch file.
pub fn read_batch_file(path: &Path) -> Result<Vec<Example>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFile(path.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    parse_records(&bytes, path)
}

pub fn parse_records(bytes: &[u8], path: &Path) -> Result<Vec<Example>> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::MalformedRecord {
            path: path.to_path_buf(),
            reason: format!(
                "length {} is not a multiple of the {RECORD_BYTES}-byte record size",
                bytes.len()
            ),
        });
    }
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    bytes
        .chunks_exact(RECORD_BYTES)
        .enumerate()
        .map(|(record, rec)| {
            let label = rec[0];
            if usize::from(label) >= CLASS_NAMES.len() {
                return Err(Error::MalformedLabel {
                    path: path.to_path_buf(),
                    record,
                    label,
                });
            }
            let planar = &rec[1..];
            let mut pixels = vec![0u8; IMAGE_BYTES];
            for p in 0..plane {
                for c in 0..3 {
                    pixels[p * 3 + c] = planar[c * plane + p];
                }
            }
            Ok(Example {
                pixels: pixels.into_boxed_slice(),
                label,
            })
        })
        .collect()
}

pub fn encode_record(example: &Example) -> [u8; RECORD_BYTES] {
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    let mut rec = [0u8; RECORD_BYTES];
    rec[0] = example.label;
    for p in 0..plane {
        for c in 0..3 {
            rec[1 + c * plane + p] = example.pixels[p * 3 + c];
        }
    }
    rec
}

/// Loads the five training files and the test file, then splits training
/// records into train/val by a seeded shuffle.
pub fn load_cifar10(config: &DatasetConfig) -> Result<Dataset> {
    if !(0.0..1.0).contains(&config.val_fraction) {
        return Err(Error::invalid(format!(
            "val_fraction must lie in [0, 1), got {}",
            config.val_fraction
        )));
    }
    let mut pool = Vec::new();
    for name in TRAIN_FILES {
        pool.extend(read_batch_file(&config.data_dir.join(name))?);
    }
    let mut test = read_batch_file(&config.data_dir.join(TEST_FILE))?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    pool.shuffle(&mut rng);
    let val_count = (pool.len() as f64 * config.val_fraction).round() as usize;
    let mut train = pool.split_off(val_count);
    let mut val = pool;
    if let Some(n) = config.train_limit {
        train.truncate(n);
    }
    if let Some(n) = config.val_limit {
        val.truncate(n);
    }
    if let Some(n) = config.test_limit {
        test.truncate(n);
    }
    Ok(Dataset { train, val, test })
}

/// Draws one synthetic example: a class-specific base colour modulated by a
/// class-specific stripe orientation and frequency, with per-example jitter
/// in colour, phase and pixel noise.
pub fn synthetic_example(label: u8, rng: &mut impl Rng) -> Example {
    let k = f64::from(label);
    let angle = k * std::f64::consts::PI / 10.0;
    let freq = 0.25 + 0.05 * f64::from(label % 4);
    let hue = k / 10.0 * std::f64::consts::TAU;
    let base = [
        0.5 + 0.3 * hue.cos(),
        0.5 + 0.3 * (hue - 2.1).cos(),
        0.5 + 0.3 * (hue + 2.1).cos(),
    ];
    let jitter: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.12..0.12));
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let amplitude = rng.random_range(0.1..0.25);
    let (sa, ca) = angle.sin_cos();
    let mut pixels = vec![0u8; IMAGE_BYTES];
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let t = (x as f64 * ca + y as f64 * sa) * freq + phase;
            let wave = amplitude * t.sin();
            for c in 0..3 {
                let noise = rng.random_range(-0.08..0.08);
                let v = (base[c] + jitter[c] + wave + noise).clamp(0.0, 1.0);
                pixels[(y * IMAGE_SIDE + x) * 3 + c] = (v * 255.0).round() as u8;
            }
        }
    }
    Example {
        pixels: pixels.into_boxed_slice(),
        label,
    }
}

/// Writes a full CIFAR-10 directory layout (five training files plus the
/// test file) of synthetic records, `per_file` records each, labels cycling
/// through the classes.
pub fn write_synthetic_cifar10(dir: &Path, per_file: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = TRAIN_FILES.iter().chain(std::iter::once(&TEST_FILE));
    for name in names {
        let mut file = std::io::BufWriter::new(fs::File::create(dir.join(name))?);
        for n in 0..per_file {
            let ex = synthetic_example((n % CLASS_NAMES.len()) as u8, &mut rng);
            file.write_all(&encode_record(&ex))?;
        }
        file.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize, usize) -> u8) -> Vec<u8> {
        let mut rec = vec![label];
        for c in 0..3 {
            for p in 0..1024 {
                rec.push(fill(c, p));
            }
        }
        rec
    }

    #[test]
    fn planar_to_hwc() {
        let rec = record(3, |c, p| if p == 33 { 10 * (c as u8 + 1) } else { 0 });
        let ex = &parse_records(&rec, Path::new("x")).unwrap()[0];
        assert_eq!(ex.label, 3);
        // pixel 33 is row 1, column 1.
        assert_eq!(&ex.pixels[33 * 3..33 * 3 + 3], &[10, 20, 30]);
        assert_eq!(encode_record(ex).to_vec(), rec);
    }

    #[test]
    fn red_255_normalizes() {
        let rec = record(0, |c, _| if c == 0 { 255 } else { 0 });
        let ex = &parse_records(&rec, Path::new("x")).unwrap()[0];
        let t: Tensor<f64> = normalize(&ex.unit(), &RGB_MEANS, &RGB_STDS);
        let expected = (1.0 - 0.4914) / 0.2023;
        assert!((t.data()[0] - expected).abs() < 1e-6);
        assert!((t.data()[0] - 2.514).abs() < 1e-3);
    }

    #[test]
    fn label_11_is_malformed() {
        let rec = record(11, |_, _| 0);
        assert!(matches!(
            parse_records(&rec, Path::new("x")),
            Err(Error::MalformedLabel { label: 11, record: 0, .. })
        ));
    }

    #[test]
    fn short_record_is_malformed() {
        let mut rec = record(1, |_, _| 0);
        rec.pop();
        assert!(matches!(
            parse_records(&rec, Path::new("x")),
            Err(Error::MalformedRecord { .. })
        ));
    }

    #[test]
    fn missing_directory() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_cifar10(&DatasetConfig::new(dir.path().join("nope"))).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
    }

    #[test]
    fn synthetic_split_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_cifar10(dir.path(), 20, 5).unwrap();
        let mut cfg = DatasetConfig::new(dir.path());
        cfg.seed = 9;
        let a = load_cifar10(&cfg).unwrap();
        let b = load_cifar10(&cfg).unwrap();
        assert_eq!(a.train.len() + a.val.len(), 100);
        assert_eq!(a.val.len(), 10);
        assert_eq!(a.test.len(), 20);
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        cfg.seed = 10;
        let c = load_cifar10(&cfg).unwrap();
        assert_ne!(a.train, c.train);
    }
}
