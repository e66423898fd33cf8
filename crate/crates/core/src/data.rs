//! Dataset ingestion: synthetic Gaussian mixtures, IDX grayscale files and
//! image folders.
//!
//! Loading yields a [`Dataset`] (features only) and the matching [`Labels`]
//! as separate values, so training code can be handed the former without
//! ever seeing the latter.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder};
use flate2::read::GzDecoder;
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::InputShape;

fn default_gaussian_seed() -> u64 {
    7
}

fn default_separation() -> f64 {
    10.0
}

fn default_std() -> f64 {
    1.0
}

fn default_channels() -> usize {
    3
}

/// Where samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataSource {
    /// Isotropic Gaussian blobs. Component `k` is centred at
    /// `separation / sqrt(2) * e_k`, so all means are `separation` apart.
    SyntheticGaussians {
        components: usize,
        points: usize,
        dim: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default = "default_std")]
        std: f64,
        #[serde(default = "default_gaussian_seed")]
        seed: u64,
    },
    /// One or more IDX image/label file pairs, concatenated in order
    /// (e.g. train followed by test).
    IdxGrayscale { files: Vec<IdxPair> },
    /// `root/<class>/<image>`; images are resized to `height x width`.
    ImageFolder {
        root: PathBuf,
        height: usize,
        width: usize,
        #[serde(default = "default_channels")]
        channels: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdxPair {
    pub images: PathBuf,
    pub labels: PathBuf,
}

/// Source plus split policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub source: DataSource,
    /// Keep a seeded uniform subset of this many samples (original order kept).
    #[serde(default)]
    pub subset: Option<usize>,
    #[serde(default)]
    pub subset_seed: u64,
}

impl DatasetSpec {
    pub fn new(source: DataSource) -> Self {
        Self {
            source,
            subset: None,
            subset_seed: 0,
        }
    }

    pub fn gaussians(components: usize, points: usize, dim: usize, seed: u64) -> Self {
        Self::new(DataSource::SyntheticGaussians {
            components,
            points,
            dim,
            separation: default_separation(),
            std: default_std(),
            seed,
        })
    }

    /// Checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        match &self.source {
            DataSource::SyntheticGaussians {
                components,
                points,
                dim,
                separation,
                std,
                ..
            } => {
                if *components == 0 {
                    return Err(Error::config("dataset.components", "must be at least 1"));
                }
                if components > dim {
                    return Err(Error::config(
                        "dataset.components",
                        format!("at most `dim` ({dim}) components are supported"),
                    ));
                }
                if *points == 0 {
                    return Err(Error::config("dataset.points", "must be at least 1"));
                }
                if !(separation.is_finite() && *separation >= 0.0) {
                    return Err(Error::config("dataset.separation", "must be finite and non-negative"));
                }
                if !(std.is_finite() && *std >= 0.0) {
                    return Err(Error::config("dataset.std", "must be finite and non-negative"));
                }
            }
            DataSource::IdxGrayscale { files } => {
                if files.is_empty() {
                    return Err(Error::config("dataset.files", "at least one image/label pair is required"));
                }
            }
            DataSource::ImageFolder {
                height,
                width,
                channels,
                ..
            } => {
                if *height == 0 || *width == 0 {
                    return Err(Error::config("dataset.height", "image size must be positive"));
                }
                if *channels != 1 && *channels != 3 {
                    return Err(Error::config("dataset.channels", "must be 1 or 3"));
                }
            }
        }
        if self.subset == Some(0) {
            return Err(Error::config("dataset.subset", "must be at least 1"));
        }
        Ok(())
    }

    /// Rewrite relative paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.source {
            DataSource::IdxGrayscale { files } => {
                for f in files {
                    fix(&mut f.images);
                    fix(&mut f.labels);
                }
            }
            DataSource::ImageFolder { root, .. } => fix(root),
            DataSource::SyntheticGaussians { .. } => {}
        }
    }

    /// Filesystem paths this dataset reads, with their config field names.
    pub fn required_paths(&self) -> Vec<(&'static str, &Path)> {
        match &self.source {
            DataSource::IdxGrayscale { files } => files
                .iter()
                .flat_map(|f| [("dataset.files.images", f.images.as_path()), ("dataset.files.labels", f.labels.as_path())])
                .collect(),
            DataSource::ImageFolder { root, .. } => vec![("dataset.root", root.as_path())],
            DataSource::SyntheticGaussians { .. } => Vec::new(),
        }
    }
}

/// Unlabeled samples, one flattened row per sample (images are CHW).
#[derive(Debug, Clone)]
pub struct Dataset {
    samples: Array2<f64>,
    shape: InputShape,
    feature_std: Vec<f64>,
}

impl Dataset {
    pub fn new(samples: Array2<f64>, shape: InputShape) -> Result<Self> {
        if samples.nrows() == 0 {
            return Err(Error::invalid("dataset is empty"));
        }
        if samples.ncols() != shape.len() {
            return Err(Error::invalid(format!(
                "samples have {} features, shape declares {}",
                samples.ncols(),
                shape.len()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("dataset contains non-finite values".into()));
        }
        let feature_std = samples.std_axis(Axis(0), 0.0).to_vec();
        Ok(Self {
            samples,
            shape,
            feature_std,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> InputShape {
        self.shape
    }

    pub fn samples(&self) -> ArrayView2<'_, f64> {
        self.samples.view()
    }

    pub fn sample(&self, i: usize) -> ArrayView1<'_, f64> {
        self.samples.row(i)
    }

    /// Population standard deviation of every feature.
    pub fn feature_std(&self) -> &[f64] {
        &self.feature_std
    }

    pub fn select(&self, indices: &[usize]) -> Array2<f64> {
        self.samples.select(Axis(0), indices)
    }
}

/// Held-out ground truth: dense class ids plus their display names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels {
    ids: Vec<usize>,
    class_names: Vec<String>,
}

impl Labels {
    pub fn new(ids: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&c| c >= class_names.len()) {
            return Err(Error::invalid(format!(
                "label {bad} has no class name ({} classes)",
                class_names.len()
            )));
        }
        Ok(Self { ids, class_names })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn select(&self, indices: &[usize]) -> Self {
        Self {
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }
}

/// Load samples and labels. Order is deterministic.
pub fn load_dataset(spec: &DatasetSpec) -> Result<(Dataset, Labels)> {
    spec.validate()?;
    let (samples, shape, labels) = match &spec.source {
        DataSource::SyntheticGaussians {
            components,
            points,
            dim,
            separation,
            std,
            seed,
        } => gaussian_mixture(*components, *points, *dim, *separation, *std, *seed)?,
        DataSource::IdxGrayscale { files } => load_idx_pairs(files)?,
        DataSource::ImageFolder {
            root,
            height,
            width,
            channels,
        } => load_image_folder(root, *height, *width, *channels)?,
    };
    if samples.nrows() == 0 {
        return Err(Error::invalid("dataset is empty"));
    }
    let (samples, labels) = match spec.subset {
        Some(n) if n < samples.nrows() => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.subset_seed);
            let mut keep = index::sample(&mut rng, samples.nrows(), n).into_vec();
            keep.sort_unstable();
            (samples.select(Axis(0), &keep), labels.select(&keep))
        }
        _ => (samples, labels),
    };
    Ok((Dataset::new(samples, shape)?, labels))
}

fn gaussian_mixture(
    components: usize,
    points: usize,
    dim: usize,
    separation: f64,
    std: f64,
    seed: u64,
) -> Result<(Array2<f64>, InputShape, Labels)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
    let offset = separation / std::f64::consts::SQRT_2;
    let mut ids: Vec<usize> = (0..points).map(|j| j % components).collect();
    // interleaved labels, then a seeded shuffle so batches are not ordered by class
    for i in (1..points).rev() {
        let j = rand::Rng::random_range(&mut rng, 0..=i);
        ids.swap(i, j);
    }
    let mut x = Array2::zeros((points, dim));
    for (mut row, &k) in x.rows_mut().into_iter().zip(&ids) {
        for v in row.iter_mut() {
            *v = noise.sample(&mut rng);
        }
        row[k] += offset;
    }
    let names = (0..components).map(|k| format!("g{k}")).collect();
    Ok((x, InputShape::Vector { dim }, Labels::new(ids, names)?))
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// A decoded IDX array of unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parse an IDX buffer: two zero bytes, type code, rank, big-endian `u32`
/// dimensions, then the payload. Only the unsigned-byte type (0x08) is
/// accepted. Offsets in errors refer to `bytes`.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let perr = |offset: usize, message: String| Error::Parse {
        offset: offset as u64,
        message,
    };
    if bytes.len() < 4 {
        return Err(perr(bytes.len(), "truncated IDX header".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(perr(0, format!("bad IDX magic {:02x}{:02x}", bytes[0], bytes[1])));
    }
    if bytes[2] != 0x08 {
        return Err(perr(2, format!("unsupported IDX element type 0x{:02x}", bytes[2])));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(perr(3, "IDX rank must be at least 1".into()));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(perr(bytes.len(), format!("truncated IDX header: rank {rank} needs {header} bytes")));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|d| BigEndian::read_u32(&bytes[4 + 4 * d..]) as usize)
        .collect();
    let total = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| perr(4, "IDX dimensions overflow".into()))?;
    let payload = &bytes[header..];
    if payload.len() != total {
        let at = header + payload.len().min(total);
        return Err(perr(
            at,
            format!("IDX payload has {} bytes, dimensions {:?} need {total}", payload.len(), dims),
        ));
    }
    Ok(IdxArray {
        dims,
        data: payload.to_vec(),
    })
}

fn read_idx(path: &Path) -> Result<IdxArray> {
    parse_idx(&read_maybe_gz(path)?).map_err(|e| match e {
        Error::Parse { offset, message } => Error::Parse {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

fn load_idx_pairs(files: &[IdxPair]) -> Result<(Array2<f64>, InputShape, Labels)> {
    let mut pixels = Vec::new();
    let mut raw_labels = Vec::new();
    let mut shape = None;
    for pair in files {
        let images = read_idx(&pair.images)?;
        let labels = read_idx(&pair.labels)?;
        if images.dims.len() != 3 {
            return Err(Error::Format(format!(
                "{}: image file must have rank 3, found {}",
                pair.images.display(),
                images.dims.len()
            )));
        }
        if labels.dims.len() != 1 || labels.dims[0] != images.dims[0] {
            return Err(Error::Format(format!(
                "{}: expected {} labels in a rank-1 file, found dimensions {:?}",
                pair.labels.display(),
                images.dims[0],
                labels.dims
            )));
        }
        let hw = (images.dims[1], images.dims[2]);
        if *shape.get_or_insert(hw) != hw {
            return Err(Error::Format(format!(
                "{}: image size {}x{} differs from earlier files",
                pair.images.display(),
                hw.0,
                hw.1
            )));
        }
        pixels.extend(images.data.iter().map(|&b| b as f64 / 255.0));
        raw_labels.extend(labels.data);
    }
    let (h, w) = shape.unwrap_or((0, 0));
    let n = raw_labels.len();
    let samples = Array2::from_shape_vec((n, h * w), pixels).map_err(|e| Error::Internal(e.to_string()))?;
    let mut values: Vec<u8> = raw_labels.clone();
    values.sort_unstable();
    values.dedup();
    let ids = raw_labels
        .iter()
        .map(|v| values.binary_search(v).unwrap_or_default())
        .collect();
    let names = values.iter().map(|v| v.to_string()).collect();
    let shape = InputShape::Image {
        channels: 1,
        height: h,
        width: w,
    };
    Ok((samples, shape, Labels::new(ids, names)?))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        if name.to_string_lossy().starts_with('.') {
            continue;
        }
        out.push(entry.path());
    }
    out.sort();
    Ok(out)
}

fn load_image_folder(
    root: &Path,
    height: usize,
    width: usize,
    channels: usize,
) -> Result<(Array2<f64>, InputShape, Labels)> {
    let classes: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    let mut pixels = Vec::new();
    let mut ids = Vec::new();
    let mut names = Vec::new();
    for (k, dir) in classes.iter().enumerate() {
        names.push(dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
        for file in sorted_entries(dir)?.into_iter().filter(|p| p.is_file()) {
            let img = image::open(&file).map_err(|e| Error::Format(format!("{}: {e}", file.display())))?;
            let img = img.resize_exact(width as u32, height as u32, image::imageops::FilterType::Triangle);
            if channels == 1 {
                let g = img.to_luma8();
                pixels.extend(g.as_raw().iter().map(|&b| b as f64 / 255.0));
            } else {
                let rgb = img.to_rgb8();
                let raw = rgb.as_raw();
                for c in 0..3 {
                    pixels.extend(raw.iter().skip(c).step_by(3).map(|&b| b as f64 / 255.0));
                }
            }
            ids.push(k);
        }
    }
    let len = channels * height * width;
    let samples = Array2::from_shape_vec((ids.len(), len), pixels).map_err(|e| Error::Internal(e.to_string()))?;
    let shape = InputShape::Image {
        channels,
        height,
        width,
    };
    Ok((samples, shape, Labels::new(ids, names)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_bytes(dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut out = vec![0, 0, 8, dims.len() as u8];
        for d in dims {
            out.extend(d.to_be_bytes());
        }
        out.extend(payload);
        out
    }

    #[test]
    fn gaussians_contract() {
        let (data, labels) = load_dataset(&DatasetSpec::gaussians(4, 1000, 16, 3)).unwrap();
        assert_eq!(data.len(), 1000);
        assert_eq!(data.shape(), InputShape::Vector { dim: 16 });
        let mut counts = [0; 4];
        for &c in labels.ids() {
            counts[c] += 1;
        }
        assert_eq!(counts, [250; 4]);
        let (again, _) = load_dataset(&DatasetSpec::gaussians(4, 1000, 16, 3)).unwrap();
        assert_eq!(data.samples(), again.samples());
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let payload: Vec<u8> = (0..100 * 28 * 28).map(|i| (i % 256) as u8).collect();
        let parsed = parse_idx(&idx_bytes(&[100, 28, 28], &payload)).unwrap();
        assert_eq!(parsed.dims, vec![100, 28, 28]);

        let mut bad = idx_bytes(&[2, 2], &[1, 2, 3, 4]);
        bad[0] = 1;
        assert!(matches!(parse_idx(&bad), Err(Error::Parse { offset: 0, .. })));
        let short = idx_bytes(&[2, 2], &[1, 2, 3]);
        assert!(matches!(parse_idx(&short), Err(Error::Parse { offset: 15, .. })));
        assert!(matches!(parse_idx(&[0, 0, 8]), Err(Error::Parse { offset: 3, .. })));
        let wrong_type = {
            let mut b = idx_bytes(&[1], &[0]);
            b[2] = 0x0d;
            b
        };
        assert!(matches!(parse_idx(&wrong_type), Err(Error::Parse { offset: 2, .. })));
    }

    #[test]
    fn idx_files_load() {
        let dir = tempfile::tempdir().unwrap();
        let payload: Vec<u8> = (0..100 * 28 * 28).map(|i| (i % 251) as u8).collect();
        let labels: Vec<u8> = (0..100).map(|i| (i % 10) as u8).collect();
        let images = dir.path().join("img.idx");
        let lab = dir.path().join("lab.idx");
        fs::write(&images, idx_bytes(&[100, 28, 28], &payload)).unwrap();
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
        std::io::Write::write_all(&mut gz, &idx_bytes(&[100], &labels)).unwrap();
        fs::write(&lab, gz.finish().unwrap()).unwrap();
        let spec = DatasetSpec::new(DataSource::IdxGrayscale {
            files: vec![IdxPair { images, labels: lab }],
        });
        let (data, labels) = load_dataset(&spec).unwrap();
        assert_eq!(data.len(), 100);
        assert_eq!(
            data.shape(),
            InputShape::Image {
                channels: 1,
                height: 28,
                width: 28
            }
        );
        assert_eq!(labels.num_classes(), 10);
        assert_eq!(data.sample(0)[1], 1.0 / 255.0);

        let mut sub = spec.clone();
        sub.subset = Some(30);
        let (small, small_labels) = load_dataset(&sub).unwrap();
        assert_eq!((small.len(), small_labels.len()), (30, 30));
    }

    #[test]
    fn image_folder_infers_labels() {
        let dir = tempfile::tempdir().unwrap();
        for (k, class) in ["cat", "dog", "eel"].iter().enumerate() {
            let sub = dir.path().join(class);
            fs::create_dir(&sub).unwrap();
            for j in 0..2 {
                let img = image::RgbImage::from_pixel(5, 4, image::Rgb([k as u8 * 80, j * 100, 7]));
                img.save(sub.join(format!("{j}.png"))).unwrap();
            }
        }
        let spec = DatasetSpec::new(DataSource::ImageFolder {
            root: dir.path().to_path_buf(),
            height: 4,
            width: 4,
            channels: 3,
        });
        let (data, labels) = load_dataset(&spec).unwrap();
        assert_eq!(data.len(), 6);
        assert_eq!(labels.class_names(), ["cat", "dog", "eel"]);
        assert_eq!(labels.ids(), [0, 0, 1, 1, 2, 2]);
        // red plane first
        assert!((data.sample(2)[0] - 80.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn empty_and_invalid() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec::new(DataSource::ImageFolder {
            root: dir.path().to_path_buf(),
            height: 4,
            width: 4,
            channels: 1,
        });
        assert!(matches!(load_dataset(&spec), Err(Error::InvalidArgument(_))));
        assert!(DatasetSpec::gaussians(20, 10, 16, 0).validate().is_err());
    }
}
