//! Datasets: synthetic generators, the CIFAR binary reader, and the
//! `RODDFEAT1` feature-file format.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Result, RoddError};
use crate::linalg::{norm, orthonormal_init, Matrix};

/// Channel-major image layout of a flattened input row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl GridShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Option<Vec<usize>>,
    pub class_count: usize,
    pub grid: Option<GridShape>,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Option<Vec<usize>>, class_count: usize) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(RoddError::contract("dataset must hold at least one sample"));
        }
        if let Some(labels) = &labels {
            if labels.len() != inputs.rows() {
                return Err(RoddError::contract(format!(
                    "{} labels for {} samples",
                    labels.len(),
                    inputs.rows()
                )));
            }
            if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
                return Err(RoddError::contract(format!(
                    "label {l} of sample {i} is outside [0, {class_count})"
                )));
            }
        }
        Ok(Dataset {
            inputs,
            labels,
            class_count,
            grid: None,
        })
    }

    pub fn with_grid(mut self, grid: GridShape) -> Result<Self> {
        if grid.len() != self.input_dim() {
            return Err(RoddError::Shape(format!(
                "grid {}x{}x{} does not cover input dimension {}",
                grid.channels,
                grid.height,
                grid.width,
                self.input_dim()
            )));
        }
        self.grid = Some(grid);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| RoddError::contract("dataset has no labels"))
    }

    /// Samples at `indices`, keeping labels and layout.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            class_count: self.class_count,
            grid: self.grid,
        }
    }

    /// Splits each class into a leading training part and a trailing test part.
    /// Every class keeps at least one training sample.
    pub fn stratified_split(&self, test_fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(RoddError::contract("test_fraction must lie in [0, 1)"));
        }
        let labels = self.labels()?;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for class in 0..self.class_count {
            let members: Vec<usize> = (0..self.len()).filter(|&i| labels[i] == class).collect();
            let n_test = ((members.len() as f64) * test_fraction).round() as usize;
            let n_test = n_test.min(members.len().saturating_sub(1));
            let cut = members.len() - n_test;
            train.extend_from_slice(&members[..cut]);
            test.extend_from_slice(&members[cut..]);
        }
        if test.is_empty() {
            return Err(RoddError::contract("split leaves no test samples"));
        }
        Ok((self.subset(&train), self.subset(&test)))
    }
}

/// `class_count` Gaussian clusters whose means sit at `separation` along
/// random orthonormal directions. Samples are stored class by class.
pub fn synth_gaussian_mixture(
    class_count: usize,
    n_per_class: usize,
    input_dim: usize,
    separation: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if class_count < 2 {
        return Err(RoddError::contract("need at least two classes"));
    }
    if separation <= 0.0 || noise_sigma < 0.0 || n_per_class == 0 {
        return Err(RoddError::contract(
            "separation must be positive, noise nonnegative, n_per_class ≥ 1",
        ));
    }
    if class_count > input_dim {
        return Err(RoddError::contract(format!(
            "{class_count} orthonormal class means do not fit in dimension {input_dim}"
        )));
    }
    let directions = orthonormal_init(input_dim, class_count, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut data = Vec::with_capacity(class_count * n_per_class * input_dim);
    let mut labels = Vec::with_capacity(class_count * n_per_class);
    for class in 0..class_count {
        let mean: Vec<f64> = directions
            .column(class)
            .iter()
            .map(|v| v * separation)
            .collect();
        for _ in 0..n_per_class {
            for m in &mean {
                let e: f64 = StandardNormal.sample(&mut rng);
                data.push(m + noise_sigma * e);
            }
            labels.push(class);
        }
    }
    Dataset::new(
        Matrix::new(class_count * n_per_class, input_dim, data)?,
        Some(labels),
        class_count,
    )
}

/// An unlabeled cluster centred at `offset_norm` along a direction drawn from
/// `offset_direction_seed`.
pub fn synth_ood_cluster(
    input_dim: usize,
    n: usize,
    offset_direction_seed: u64,
    offset_norm: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if offset_norm <= 0.0 {
        return Err(RoddError::contract("offset_norm must be positive"));
    }
    if n == 0 || input_dim == 0 {
        return Err(RoddError::contract(
            "OOD cluster needs n ≥ 1 and input_dim ≥ 1",
        ));
    }
    let center = ood_center(input_dim, offset_direction_seed, offset_norm);
    let noise = Normal::new(0.0, noise_sigma)
        .map_err(|e| RoddError::contract(format!("noise_sigma: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * input_dim);
    for _ in 0..n {
        for c in &center {
            data.push(c + noise.sample(&mut rng));
        }
    }
    Dataset::new(Matrix::new(n, input_dim, data)?, None, 0)
}

/// Centre of the cluster produced by [`synth_ood_cluster`].
pub fn ood_center(input_dim: usize, offset_direction_seed: u64, offset_norm: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(offset_direction_seed);
    loop {
        let dir: Vec<f64> = (0..input_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let n = norm(&dir);
        if n > 1e-8 {
            return dir.iter().map(|v| v / n * offset_norm).collect();
        }
    }
}

pub const CIFAR_RECORD_LEN: usize = 3073;
pub const CIFAR_GRID: GridShape = GridShape {
    channels: 3,
    height: 32,
    width: 32,
};

pub fn read_cifar_binary(path: impl AsRef<Path>) -> Result<Dataset> {
    let bytes = fs::read(path.as_ref()).map_err(|e| RoddError::io(path.as_ref(), e))?;
    parse_cifar_binary(&bytes)
}

/// Parses records of one label byte followed by 3072 pixel bytes (R, G, B planes).
pub fn parse_cifar_binary(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD_LEN) {
        let whole = bytes.len() / CIFAR_RECORD_LEN * CIFAR_RECORD_LEN;
        return Err(RoddError::Format {
            offset: whole as u64,
            message: format!(
                "length {} is not a positive multiple of {CIFAR_RECORD_LEN}",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD_LEN - 1));
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
        let label = record[0];
        if label > 9 {
            return Err(RoddError::Format {
                offset: (i * CIFAR_RECORD_LEN) as u64,
                message: format!("record {i} has label {label} > 9"),
            });
        }
        labels.push(label as usize);
        data.extend(record[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Dataset::new(
        Matrix::new(n, CIFAR_RECORD_LEN - 1, data)?,
        Some(labels),
        10,
    )?
    .with_grid(CIFAR_GRID)
}

pub const FEATURE_MAGIC: &[u8; 9] = b"RODDFEAT1";
const FEATURE_HEADER_LEN: usize = 9 + 12;

/// Serializes features as `RODDFEAT1`: magic, u32 N, u32 d, u32 has_labels,
/// N·d little-endian f32, then N u32 labels when present.
pub fn encode_features(features: &Matrix, labels: Option<&[usize]>) -> Result<Vec<u8>> {
    if !features.is_finite() {
        return Err(RoddError::contract("features must be finite"));
    }
    if let Some(l) = labels {
        if l.len() != features.rows() {
            return Err(RoddError::contract("label count differs from feature rows"));
        }
    }
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| RoddError::contract(format!("{what} {v} exceeds u32")))
    };
    let mut out = Vec::with_capacity(
        FEATURE_HEADER_LEN + features.data().len() * 4 + labels.map_or(0, |l| l.len() * 4),
    );
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&to_u32(features.rows(), "row count")?.to_le_bytes());
    out.extend_from_slice(&to_u32(features.cols(), "column count")?.to_le_bytes());
    out.extend_from_slice(&u32::from(labels.is_some()).to_le_bytes());
    for &v in features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(labels) = labels {
        for &l in labels {
            out.extend_from_slice(&to_u32(l, "label")?.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<(Matrix, Option<Vec<usize>>)> {
    let need = |expected: usize| -> Result<()> {
        if bytes.len() < expected {
            Err(RoddError::Format {
                offset: bytes.len() as u64,
                message: format!(
                    "truncated feature file: expected {expected} bytes, found {} ({} missing)",
                    bytes.len(),
                    expected - bytes.len()
                ),
            })
        } else {
            Ok(())
        }
    };
    need(FEATURE_HEADER_LEN)?;
    if &bytes[..9] != FEATURE_MAGIC {
        return Err(RoddError::Format {
            offset: 0,
            message: format!(
                "bad magic: expected {:?}, found {:?}",
                String::from_utf8_lossy(FEATURE_MAGIC),
                String::from_utf8_lossy(&bytes[..9])
            ),
        });
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let rows = word(9) as usize;
    let cols = word(13) as usize;
    let has_labels = match word(17) {
        0 => false,
        1 => true,
        other => {
            return Err(RoddError::Format {
                offset: 17,
                message: format!("has_labels flag must be 0 or 1, found {other}"),
            })
        }
    };
    let body = rows * cols * 4;
    let total = FEATURE_HEADER_LEN + body + if has_labels { rows * 4 } else { 0 };
    need(total)?;
    if bytes.len() > total {
        return Err(RoddError::Format {
            offset: total as u64,
            message: format!(
                "trailing data: expected {total} bytes, found {}",
                bytes.len()
            ),
        });
    }
    let data: Vec<f64> = bytes[FEATURE_HEADER_LEN..FEATURE_HEADER_LEN + body]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    let features = Matrix::new(rows, cols, data).map_err(|_| RoddError::Format {
        offset: FEATURE_HEADER_LEN as u64,
        message: "non-finite feature value".into(),
    })?;
    let labels = has_labels.then(|| {
        bytes[FEATURE_HEADER_LEN + body..total]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect()
    });
    Ok((features, labels))
}

pub fn write_features(
    path: impl AsRef<Path>,
    features: &Matrix,
    labels: Option<&[usize]>,
) -> Result<()> {
    let bytes = encode_features(features, labels)?;
    fs::write(path.as_ref(), bytes).map_err(|e| RoddError::io(path.as_ref(), e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<(Matrix, Option<Vec<usize>>)> {
    let bytes = fs::read(path.as_ref()).map_err(|e| RoddError::io(path.as_ref(), e))?;
    decode_features(&bytes)
}

/// Writes a dataset's inputs as a feature file; the class count is recovered
/// from the labels on reading.
pub fn write_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    write_features(path, &dataset.inputs, dataset.labels.as_deref())
}

pub fn read_dataset(path: impl AsRef<Path>, class_count: usize) -> Result<Dataset> {
    let (inputs, labels) = read_features(path)?;
    Dataset::new(inputs, labels, class_count)
}
