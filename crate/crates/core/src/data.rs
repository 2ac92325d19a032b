//! IDX loading, a synthetic Gaussian classification task and shuffled
//! minibatch iteration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::tensor::{Matrix, Rng};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Synthetic,
}

/// Labelled samples; `images` holds one sample per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Matrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Matrix, labels: Vec<usize>, n_classes: usize, split: Split) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::Shape {
                op: "dataset",
                lhs: images.shape(),
                rhs: (labels.len(), 1),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(config_err(format!("label {bad} out of range for {n_classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            n_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.images.cols()
    }

    /// Samples at `indices`, laid out `features × indices.len()`.
    pub fn gather(&self, indices: &[usize]) -> (Matrix, Vec<usize>) {
        let f = self.features();
        let b = indices.len();
        let mut x = Matrix::zeros(f, b);
        let data = x.data_mut();
        for (j, &i) in indices.iter().enumerate() {
            for (r, &v) in self.images.row(i).iter().enumerate() {
                data[r * b + j] = v;
            }
        }
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` samples (at least one).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.clamp(1, self.len());
        let f = self.features();
        let images = Matrix::from_vec(n, f, self.images.data()[..n * f].to_vec()).expect("prefix shape");
        Dataset {
            images,
            labels: self.labels[..n].to_vec(),
            n_classes: self.n_classes,
            split: self.split,
        }
    }
}

fn parse_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        offset,
        msg: msg.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| parse_err(path, bytes.len(), format!("truncated header, needed 4 bytes at offset {offset}")))
}

/// Parses an IDX header; returns the dimensions and the payload offset.
fn idx_header(bytes: &[u8], magic: u32, path: &Path) -> Result<(Vec<usize>, usize)> {
    let got = read_u32(bytes, 0, path)?;
    if got != magic {
        return Err(parse_err(path, 0, format!("bad magic {got:#010x}, expected {magic:#010x}")));
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|d| read_u32(bytes, 4 + 4 * d, path).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndim;
    let payload: usize = dims.iter().product();
    if bytes.len() < header + payload {
        return Err(parse_err(
            path,
            bytes.len(),
            format!("truncated payload, expected {} bytes", header + payload),
        ));
    }
    if bytes.len() > header + payload {
        return Err(parse_err(path, header + payload, "trailing bytes after payload"));
    }
    Ok((dims, header))
}

/// Loads an IDX image/label file pair, scaling pixels to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = fs::read(images_path)?;
    let lab = fs::read(labels_path)?;
    let (idims, ioff) = idx_header(&img, IMAGES_MAGIC, images_path)?;
    let (ldims, loff) = idx_header(&lab, LABELS_MAGIC, labels_path)?;
    let (n, features) = (idims[0], idims[1] * idims[2]);
    if ldims[0] != n {
        return Err(parse_err(
            labels_path,
            4,
            format!("label count {} does not match image count {n}", ldims[0]),
        ));
    }
    if n == 0 || features == 0 {
        return Err(parse_err(images_path, 4, "empty image file"));
    }
    let pixels = img[ioff..].iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = lab[loff..].iter().map(|&l| l as usize).collect();
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    let split = if n == 10_000 { Split::Test } else { Split::Train };
    Dataset::new(Matrix::from_vec(n, features, pixels)?, labels, n_classes, split)
}

/// Paths of the standard MNIST files inside `dir`.
pub fn mnist_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Test => "t10k",
        _ => "train",
    };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Loads the MNIST training and test sets from `dir`.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let (ti, tl) = mnist_paths(dir, Split::Train);
    let (vi, vl) = mnist_paths(dir, Split::Test);
    let mut train = load_idx(&ti, &tl)?;
    let mut test = load_idx(&vi, &vl)?;
    train.split = Split::Train;
    test.split = Split::Test;
    Ok((train, test))
}

/// Class-conditional unit Gaussians whose means sit `separation` apart on
/// random directions; labels are assigned round-robin.
pub fn synthetic_gaussian_task(n: usize, features: usize, classes: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(config_err("synthetic task needs at least 2 classes"));
    }
    if n == 0 || features == 0 {
        return Err(config_err("synthetic task needs n >= 1 and features >= 1"));
    }
    let mut rng = Rng::new(seed);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..features).map(|_| rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm * separation / 2.0).collect()
        })
        .collect();
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let images = Matrix::from_fn(n, features, |i, j| means[labels[i]][j] + rng.normal());
    Dataset::new(images, labels, classes, Split::Synthetic)
}

/// Shuffled minibatches over one epoch; the last batch may be short.
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

/// Starts an epoch over `ds` with an order drawn from `rng`.
pub fn batches<'a>(ds: &'a Dataset, batch_size: usize, rng: &mut Rng) -> Result<Batches<'a>> {
    if batch_size == 0 {
        return Err(config_err("batch size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    rng.shuffle(&mut order);
    Ok(Batches {
        ds,
        order,
        batch_size,
        pos: 0,
    })
}

impl Batches<'_> {
    /// The epoch's sample order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for Batches<'_> {
    type Item = (Matrix, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let out = self.ds.gather(&self.order[self.pos..end]);
        self.pos = end;
        Some(out)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for Batches<'_> {}
