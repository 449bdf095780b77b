//! Dataset plumbing: synthetic Gaussian clusters, controlled label noise,
//! IDX image files, patch sampling, and CSV export.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Matrix;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad IDX magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("image file has {images} entries but label file has {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("file ended before its declared contents")]
    TruncatedFile,
    #[error("noise fraction {0} is outside [0, 1]")]
    BadFraction(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Which side of the experiment a set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

/// A labeled dataset, one example per `inputs` row.
///
/// `labels` are what training sees; when noise has been injected,
/// `clean_labels` keeps the originals. Image data stays flattened
/// row-major channel-last, with the geometry in `image_shape`.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub clean_labels: Option<Vec<usize>>,
    pub split: Split,
    pub num_classes: usize,
    pub image_shape: Option<(usize, usize, usize)>,
}

impl LabeledSet {
    pub fn new(
        inputs: Matrix,
        labels: Vec<usize>,
        split: Split,
        num_classes: usize,
        image_shape: Option<(usize, usize, usize)>,
    ) -> Result<LabeledSet, DataError> {
        if labels.len() != inputs.rows() {
            return Err(DataError::ShapeMismatch(format!(
                "{} labels for {} rows",
                labels.len(),
                inputs.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(DataError::ShapeMismatch(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if let Some((h, w, c)) = image_shape {
            if h * w * c != inputs.cols() {
                return Err(DataError::ShapeMismatch(format!(
                    "image shape {h}x{w}x{c} does not flatten to {} columns",
                    inputs.cols()
                )));
            }
        }
        Ok(LabeledSet { inputs, labels, clean_labels: None, split, num_classes, image_shape })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Indices whose observed label differs from the clean one. Empty when
    /// no noise was ever injected.
    pub fn noisy_indices(&self) -> Vec<usize> {
        match &self.clean_labels {
            None => vec![],
            Some(clean) => self
                .labels
                .iter()
                .zip(clean)
                .enumerate()
                .filter(|(_, (a, b))| a != b)
                .map(|(i, _)| i)
                .collect(),
        }
    }

    /// Writes the set as CSV: index, observed label, clean label (blank if
    /// noise was never injected), then the features.
    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "index,label,clean_label")?;
        for j in 0..self.inputs.cols() {
            write!(w, ",x{j}")?;
        }
        writeln!(w)?;
        for i in 0..self.len() {
            write!(w, "{i},{}", self.labels[i])?;
            match &self.clean_labels {
                Some(clean) => write!(w, ",{}", clean[i])?,
                None => write!(w, ",")?,
            }
            for v in self.inputs.row(i) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Samples a `num_classes`-cluster Gaussian mixture in `dim` dimensions.
///
/// Cluster means are standard normal draws normalized onto the unit
/// sphere, fixed by `means_seed` alone, so train and test sets built with
/// different `sample_seed`s share the same geometry. Examples are laid out
/// class-major; when `count` does not divide evenly the first classes get
/// one extra. Each example is its mean plus `spread` times a standard
/// normal draw.
pub fn make_gaussian_clusters(
    num_classes: usize,
    dim: usize,
    count: usize,
    spread: f64,
    means_seed: u64,
    sample_seed: u64,
    split: Split,
) -> Result<LabeledSet, DataError> {
    if num_classes < 2 || dim == 0 {
        return Err(DataError::ShapeMismatch(format!(
            "need at least 2 classes and 1 dimension, got {num_classes} and {dim}"
        )));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(DataError::ShapeMismatch(format!("bad spread {spread}")));
    }
    let mut mrng = Xoshiro256StarStar::seed_from_u64(means_seed);
    let mut means = Matrix::zeros(num_classes, dim);
    for c in 0..num_classes {
        let row = means.row_mut(c);
        loop {
            let mut norm2 = 0.0;
            for v in row.iter_mut() {
                let g: f64 = mrng.sample(StandardNormal);
                *v = g;
                norm2 += g * g;
            }
            if norm2 > 0.0 {
                let inv = 1.0 / norm2.sqrt();
                for v in row.iter_mut() {
                    *v *= inv;
                }
                break;
            }
        }
    }
    let mut srng = Xoshiro256StarStar::seed_from_u64(sample_seed);
    let base = count / num_classes;
    let extra = count % num_classes;
    let mut inputs = Matrix::zeros(count, dim);
    let mut labels = Vec::with_capacity(count);
    let mut i = 0usize;
    for c in 0..num_classes {
        let n_c = base + usize::from(c < extra);
        for _ in 0..n_c {
            let row = inputs.row_mut(i);
            let mean = means.row(c);
            for (v, &m) in row.iter_mut().zip(mean) {
                let g: f64 = srng.sample(StandardNormal);
                *v = m + spread * g;
            }
            labels.push(c);
            i += 1;
        }
    }
    LabeledSet::new(inputs, labels, split, num_classes, None)
}

/// Flips a uniformly chosen subset of labels to uniformly chosen wrong
/// classes.
///
/// The flip count is `fraction * len` rounded half away from zero. Clean
/// labels are preserved (the original cleans, if noise was injected
/// before). Replacement labels are drawn uniformly over the other
/// `num_classes - 1` classes, so a flipped label never equals the clean
/// one. Returns the flipped indices in draw order.
pub fn inject_label_noise(
    set: &mut LabeledSet,
    fraction: f64,
    seed: u64,
) -> Result<Vec<usize>, DataError> {
    if !(0.0..=1.0).contains(&fraction) || !fraction.is_finite() {
        return Err(DataError::BadFraction(fraction));
    }
    if set.num_classes < 2 {
        return Err(DataError::ShapeMismatch(
            "need at least 2 classes to flip labels".to_string(),
        ));
    }
    let n = set.len();
    let count = (fraction * n as f64).round() as usize;
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let chosen: Vec<usize> = rand::seq::index::sample(&mut rng, n, count).into_vec();
    if set.clean_labels.is_none() {
        set.clean_labels = Some(set.labels.clone());
    }
    for &idx in &chosen {
        let current = set.labels[idx];
        let draw = rng.random_range(0..set.num_classes - 1);
        set.labels[idx] = if draw >= current { draw + 1 } else { draw };
    }
    Ok(chosen)
}

fn read_u32_be(r: &mut impl Read) -> Result<u32, DataError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(map_eof)?;
    Ok(u32::from_be_bytes(b))
}

fn map_eof(e: std::io::Error) -> DataError {
    if e.kind() == ErrorKind::UnexpectedEof {
        DataError::TruncatedFile
    } else {
        DataError::Io(e)
    }
}

/// Loads an IDX image/label file pair (the classic big-endian u8 format).
///
/// Pixels map to [0, 1] by dividing by 255. The class count is one past
/// the largest label present.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<LabeledSet, DataError> {
    let mut ir = BufReader::new(File::open(images_path)?);
    let magic = read_u32_be(&mut ir)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic { expected: IDX_IMAGES_MAGIC, found: magic });
    }
    let n = read_u32_be(&mut ir)? as usize;
    let h = read_u32_be(&mut ir)? as usize;
    let w = read_u32_be(&mut ir)? as usize;
    let mut pixels = vec![0u8; n * h * w];
    ir.read_exact(&mut pixels).map_err(map_eof)?;

    let mut lr = BufReader::new(File::open(labels_path)?);
    let magic = read_u32_be(&mut lr)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic { expected: IDX_LABELS_MAGIC, found: magic });
    }
    let ln = read_u32_be(&mut lr)? as usize;
    if ln != n {
        return Err(DataError::CountMismatch { images: n, labels: ln });
    }
    let mut raw_labels = vec![0u8; ln];
    lr.read_exact(&mut raw_labels).map_err(map_eof)?;

    let data: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let inputs = Matrix::new(n, h * w, data)
        .map_err(|e| DataError::ShapeMismatch(e.to_string()))?;
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    LabeledSet::new(inputs, labels, split, num_classes, Some((h, w, 1)))
}

/// Writes a single-channel image set as an IDX pair, quantizing each pixel
/// to `round(p * 255)` clamped to [0, 255]. Data that started life as u8
/// round-trips exactly.
pub fn write_idx(set: &LabeledSet, images_path: &Path, labels_path: &Path) -> Result<(), DataError> {
    let (h, w, c) = set.image_shape.ok_or_else(|| {
        DataError::ShapeMismatch("set has no image shape".to_string())
    })?;
    if c != 1 {
        return Err(DataError::ShapeMismatch(format!(
            "IDX export needs single-channel images, found {c} channels"
        )));
    }
    let mut iw = BufWriter::new(File::create(images_path)?);
    iw.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    iw.write_all(&(set.len() as u32).to_be_bytes())?;
    iw.write_all(&(h as u32).to_be_bytes())?;
    iw.write_all(&(w as u32).to_be_bytes())?;
    for i in 0..set.len() {
        for &v in set.inputs.row(i) {
            iw.write_all(&[(v * 255.0).round().clamp(0.0, 255.0) as u8])?;
        }
    }
    iw.flush()?;

    let mut lw = BufWriter::new(File::create(labels_path)?);
    lw.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    lw.write_all(&(set.len() as u32).to_be_bytes())?;
    for &l in &set.labels {
        lw.write_all(&[l as u8])?;
    }
    lw.flush()?;
    Ok(())
}

/// Cuts `count` random patches from random images of an image set.
///
/// Each draw picks an image uniformly, then a valid top-left corner
/// uniformly, and flattens the `ph x pw x c` window row-major
/// channel-last. Returns one patch per row.
pub fn sample_patches(
    set: &LabeledSet,
    ph: usize,
    pw: usize,
    count: usize,
    seed: u64,
) -> Result<Matrix, DataError> {
    let (h, w, c) = set.image_shape.ok_or_else(|| {
        DataError::ShapeMismatch("set has no image shape".to_string())
    })?;
    if ph == 0 || pw == 0 || ph > h || pw > w {
        return Err(DataError::ShapeMismatch(format!(
            "patch {ph}x{pw} does not fit in {h}x{w} images"
        )));
    }
    if set.is_empty() {
        return Err(DataError::ShapeMismatch("cannot sample from an empty set".to_string()));
    }
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let mut out = Matrix::zeros(count, ph * pw * c);
    for i in 0..count {
        let img = rng.random_range(0..set.len());
        let oy = rng.random_range(0..=h - ph);
        let ox = rng.random_range(0..=w - pw);
        let src = set.inputs.row(img);
        let dst = out.row_mut(i);
        for py in 0..ph {
            for px in 0..pw {
                for ci in 0..c {
                    dst[(py * pw + px) * c + ci] =
                        src[((oy + py) * w + (ox + px)) * c + ci];
                }
            }
        }
    }
    Ok(out)
}
