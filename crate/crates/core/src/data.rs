//! IDX image datasets, the 2D toy set and deterministic batching.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{derived_rng, seeded_rng, SeededRng, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled images flattened to rows, pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: String,
    pub images: Tensor<f64>,
    pub labels: Vec<u8>,
    pub rows: usize,
    pub cols: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        split: impl Into<String>,
        images: Tensor<f64>,
        labels: Vec<u8>,
        rows: usize,
        cols: usize,
    ) -> Result<Self> {
        let (n, p) = images.dims2()?;
        if n != labels.len() {
            return Err(Error::contract(format!("{n} images but {} labels", labels.len())));
        }
        if p != rows * cols {
            return Err(Error::contract(format!("row width {p} is not {rows}×{cols}")));
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("pixel {v} outside [0, 1]")));
        }
        Ok(Self { name: name.into(), split: split.into(), images, labels, rows, cols })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)
    }

    /// Copy with every pixel thresholded at 0.5.
    pub fn binarized(&self) -> Self {
        Self { images: binarize(&self.images), ..self.clone() }
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.select_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone()
        })
    }
}

/// `1` where `x ≥ 0.5`, else `0`.
pub fn binarize(x: &Tensor<f64>) -> Tensor<f64> {
    x.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
}

// ---------------------------------------------------------------------------
// IDX.

fn open_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format { offset: offset as u64, msg: format!("truncated before {what}") })
}

/// Parse IDX image bytes into `(n, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format { offset: 0, msg: format!("image magic {magic:#010x}, expected 0x00000803") });
    }
    let n = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "row count")? as usize;
    let cols = be_u32(bytes, 12, "column count")? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("truncated: {n} images of {rows}×{cols} need {need} pixel bytes, found {}", body.len()),
        });
    }
    if body.len() > need {
        return Err(Error::Format { offset: (16 + need) as u64, msg: "trailing bytes after pixel data".into() });
    }
    Ok((n, rows, cols, body))
}

/// Parse IDX label bytes.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format { offset: 0, msg: format!("label magic {magic:#010x}, expected 0x00000801") });
    }
    let n = be_u32(bytes, 4, "label count")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("truncated: {n} labels, found {}", body.len()),
        });
    }
    if body.len() > n {
        return Err(Error::Format { offset: (8 + n) as u64, msg: "trailing bytes after labels".into() });
    }
    Ok(body)
}

/// Load an IDX image/label pair (plain or gzip). Pixels are scaled by 1/255.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (images, labels) = (images.as_ref(), labels.as_ref());
    let img_bytes = open_maybe_gz(images)?;
    let lbl_bytes = open_maybe_gz(labels)?;
    let (n, rows, cols, pixels) = parse_idx_images(&img_bytes)?;
    let lbl = parse_idx_labels(&lbl_bytes)?;
    if lbl.len() != n {
        return Err(Error::Format {
            offset: 4,
            msg: format!("{} labels for {n} images", lbl.len()),
        });
    }
    let data = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let name = images
        .file_name()
        .and_then(|s| s.to_str())
        .map(|s| s.split('-').next().unwrap_or(s).to_string())
        .unwrap_or_default();
    Dataset::new("idx", name, Tensor::new(vec![n, rows * cols], data)?, lbl.to_vec(), rows, cols)
}

fn pixel_byte(v: f64) -> Result<u8> {
    let b = (v * 255.0).round();
    if b / 255.0 != v {
        return Err(Error::contract(format!("pixel {v} is not a multiple of 1/255")));
    }
    Ok(b as u8)
}

/// Serialize `ds` as IDX bytes `(images, labels)`.
pub fn idx_bytes(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let n = ds.len() as u32;
    let mut img = Vec::with_capacity(16 + ds.images.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&n.to_be_bytes());
    img.extend_from_slice(&(ds.rows as u32).to_be_bytes());
    img.extend_from_slice(&(ds.cols as u32).to_be_bytes());
    for &v in ds.images.data() {
        img.push(pixel_byte(v)?);
    }
    let mut lbl = Vec::with_capacity(8 + ds.len());
    lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&n.to_be_bytes());
    lbl.extend_from_slice(&ds.labels);
    Ok((img, lbl))
}

/// Write `ds` as an IDX pair, gzip-compressed when a path ends in `.gz`.
pub fn write_idx(ds: &Dataset, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    let (img, lbl) = idx_bytes(ds)?;
    for (path, bytes) in [(images.as_ref(), img), (labels.as_ref(), lbl)] {
        let file = BufWriter::new(File::create(path)?);
        if path.extension().is_some_and(|e| e == "gz") {
            let mut gz = GzEncoder::new(file, Compression::default());
            gz.write_all(&bytes)?;
            gz.finish()?.flush()?;
        } else {
            let mut file = file;
            file.write_all(&bytes)?;
            file.flush()?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Batching.

/// Endless stream of index batches over `0..n`, reshuffled every epoch.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n: usize,
    batch_size: usize,
    drop_last: bool,
    rng: SeededRng,
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64, drop_last: bool) -> Result<Self> {
        if batch_size == 0 || n == 0 {
            return Err(Error::contract("batch sampler needs n > 0 and batch size > 0"));
        }
        if drop_last && batch_size > n {
            return Err(Error::contract(format!("batch size {batch_size} exceeds {n} samples")));
        }
        let mut s = Self {
            n,
            batch_size,
            drop_last,
            rng: seeded_rng(seed),
            order: (0..n).collect(),
            pos: 0,
            epoch: 0,
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn batches_per_epoch(&self) -> usize {
        if self.drop_last {
            self.n / self.batch_size
        } else {
            self.n.div_ceil(self.batch_size)
        }
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let left = self.n - self.pos;
        if left == 0 || (self.drop_last && left < self.batch_size) {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let end = (self.pos + self.batch_size).min(self.n);
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

/// One batch of images and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor<f64>,
    pub labels: Vec<u8>,
}

/// Deterministic batch stream over a dataset.
pub struct Batches<'a> {
    ds: &'a Dataset,
    sampler: BatchSampler,
    binarize: bool,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let idx = self.sampler.next_batch();
        let images = self.ds.images.select_rows(&idx).ok()?;
        let images = if self.binarize { binarize(&images) } else { images };
        Some(Batch { images, labels: idx.iter().map(|&i| self.ds.labels[i]).collect() })
    }
}

impl Batches<'_> {
    pub fn batches_per_epoch(&self) -> usize {
        self.sampler.batches_per_epoch()
    }
}

/// Endless seeded batch stream. `drop_last` keeps every batch at exactly `b`.
pub fn batches(ds: &Dataset, b: usize, seed: u64, binarize: bool, drop_last: bool) -> Result<Batches<'_>> {
    Ok(Batches { ds, sampler: BatchSampler::new(ds.len(), b, seed, drop_last)?, binarize })
}

// ---------------------------------------------------------------------------
// Synthetic data and subsets.

/// Points of the 2D toy experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Toy2DSet {
    pub points: Tensor<f64>,
}

pub const TOY2D_POINTS: usize = 1000;

/// 1000 points uniform on `(0, 1]²`.
pub fn make_toy2d(seed: u64) -> Toy2DSet {
    let mut rng = seeded_rng(seed);
    let data = (0..TOY2D_POINTS * 2).map(|_| 1.0 - rng.random::<f64>()).collect();
    Toy2DSet { points: Tensor::from_parts(vec![TOY2D_POINTS, 2], data) }
}

/// `n` rows drawn without replacement, stratified by label.
///
/// Each class gets `n · share` rows rounded by largest remainder, capped at
/// its size; any shortfall is filled from the remaining rows at random.
pub fn subset(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > ds.len() {
        return Err(Error::contract(format!("subset of {n} from {} rows", ds.len())));
    }
    let mut rng = derived_rng(seed, 0x5b5e7);
    let classes = ds.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    for c in &mut by_class {
        c.shuffle(&mut rng);
    }
    let total = ds.len() as f64;
    let quotas: Vec<f64> = by_class.iter().map(|c| n as f64 * c.len() as f64 / total).collect();
    let mut take: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut short = n - take.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    for &c in order.iter().cycle().take(classes * 2) {
        if short == 0 {
            break;
        }
        if take[c] < by_class[c].len() {
            take[c] += 1;
            short -= 1;
        }
    }
    let mut chosen: Vec<usize> = Vec::with_capacity(n);
    let mut rest = Vec::new();
    for (c, rows) in by_class.iter().enumerate() {
        chosen.extend_from_slice(&rows[..take[c]]);
        rest.extend_from_slice(&rows[take[c]..]);
    }
    if short > 0 {
        rest.shuffle(&mut rng);
        chosen.extend_from_slice(&rest[..short]);
    }
    chosen.sort_unstable();
    ds.select(&chosen)
}
