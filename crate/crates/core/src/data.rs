//! Image ingestion, dataset splitting, class balancing and augmentation.
//!
//! Images are `h x w x 1` tensors. [`load_grayscale`] yields byte values
//! (0..=255 stored as `f64`); everything after [`normalize_unit`] works on
//! `[0, 1]`.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, ImageReader};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::models::IMAGE_SIZE;
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Normal,
    Covid,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Covid, Label::Normal];

    /// Position in the softmax output; COVID is the positive class.
    pub fn index(self) -> usize {
        match self {
            Label::Normal => 0,
            Label::Covid => 1,
        }
    }

    pub fn from_index(i: usize) -> Label {
        if i == 1 {
            Label::Covid
        } else {
            Label::Normal
        }
    }

    /// Also the class subdirectory name under the data root.
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "Normal",
            Label::Covid => "COVID",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "COVID" => Ok(Label::Covid),
            "Normal" => Ok(Label::Normal),
            _ => Err(Error::Data(format!(
                "unknown label `{s}` (expected COVID or Normal)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Test,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Val => "val",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "val" => Ok(Split::Val),
            _ => Err(Error::Data(format!(
                "unknown split `{s}` (expected train, test or val)"
            ))),
        }
    }
}

/// Whether a record is a source image or an augmented copy of one. Each
/// augmented copy of a source gets its own slot number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Origin {
    Original,
    Augmented { slot: usize },
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Original => f.write_str("original"),
            Origin::Augmented { slot } => write!(f, "augmented:{slot}"),
        }
    }
}

impl FromStr for Origin {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "original" {
            return Ok(Origin::Original);
        }
        s.strip_prefix("augmented:")
            .and_then(|n| n.parse().ok())
            .map(|slot| Origin::Augmented { slot })
            .ok_or_else(|| Error::Data(format!("bad origin `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub path: PathBuf,
    pub label: Label,
    pub split: Split,
    pub origin: Origin,
    /// Split seed for originals; per-slot warp seed for augmented copies.
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub covid: usize,
    pub normal: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.covid + self.normal
    }

    fn bump(&mut self, label: Label) {
        match label {
            Label::Covid => self.covid += 1,
            Label::Normal => self.normal += 1,
        }
    }
}

pub const MANIFEST_HEADER: [&str; 5] = ["path", "label", "split", "origin", "seed"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    /// Sorted by path, then origin (original first, then slots in order).
    pub records: Vec<SampleRecord>,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn new(mut records: Vec<SampleRecord>, seed: u64) -> Self {
        records.sort_by(|a, b| (&a.path, a.origin).cmp(&(&b.path, b.origin)));
        DatasetManifest { records, seed }
    }

    pub fn counts(&self, split: Split) -> ClassCounts {
        let mut c = ClassCounts::default();
        for r in self.records.iter().filter(|r| r.split == split) {
            c.bump(r.label);
        }
        c
    }

    /// Records of `split` with their manifest row index.
    pub fn split_records(&self, split: Split) -> Vec<(usize, &SampleRecord)> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .collect()
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Data(format!("manifest encoding failed: {e}"));
        w.write_record(MANIFEST_HEADER).map_err(csv_err)?;
        for r in &self.records {
            let path = r.path.to_str().ok_or_else(|| {
                Error::Data(format!("path is not valid UTF-8: {}", r.path.display()))
            })?;
            w.write_record([
                path,
                r.label.as_str(),
                r.split.as_str(),
                &r.origin.to_string(),
                &r.seed.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.into_inner()
            .map_err(|e| Error::Data(format!("manifest encoding failed: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_csv()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&bytes, path)
    }

    pub fn from_csv(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(bytes);
        let header = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
        if header.iter().ne(MANIFEST_HEADER) {
            return Err(bad(format!(
                "expected header {}",
                MANIFEST_HEADER.join(",")
            )));
        }
        let mut records = Vec::new();
        let mut seed = None;
        for (line, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| bad(e.to_string()))?;
            let at = |e: Error| bad(format!("row {}: {e}", line + 2));
            let record = SampleRecord {
                path: PathBuf::from(&row[0]),
                label: row[1].parse().map_err(at)?,
                split: row[2].parse().map_err(at)?,
                origin: row[3].parse().map_err(at)?,
                seed: row[4]
                    .parse()
                    .map_err(|_| bad(format!("row {}: bad seed `{}`", line + 2, &row[4])))?,
            };
            if record.origin == Origin::Original {
                seed.get_or_insert(record.seed);
            } else if record.split != Split::Train {
                return Err(bad(format!(
                    "row {}: augmented record outside train",
                    line + 2
                )));
            }
            records.push(record);
        }
        Ok(DatasetManifest::new(records, seed.unwrap_or(0)))
    }
}

/// Lists `COVID/*.png` and `Normal/*.png` under `root`, sorted by path.
pub fn scan_dataset(root: &Path) -> Result<Vec<(PathBuf, Label)>> {
    let mut out = Vec::new();
    for label in Label::ALL {
        let dir = root.join(label.as_str());
        if !dir.is_dir() {
            return Err(Error::Usage(format!(
                "missing class directory {}",
                dir.display()
            )));
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
            })
            .collect();
        if files.is_empty() {
            return Err(Error::Usage(format!("no PNG images in {}", dir.display())));
        }
        files.sort();
        out.extend(files.into_iter().map(|p| (p, label)));
    }
    Ok(out)
}

/// Stratified split: per class, shuffle and take `floor(0.7 n)` for train,
/// `floor(0.2 n)` for test and the remainder for validation.
pub fn split_dataset(records: &[(PathBuf, Label)], seed: u64) -> Result<DatasetManifest> {
    let mut out = Vec::with_capacity(records.len());
    for (k, label) in Label::ALL.into_iter().enumerate() {
        let mut paths: Vec<&PathBuf> = records
            .iter()
            .filter(|(_, l)| *l == label)
            .map(|(p, _)| p)
            .collect();
        if paths.is_empty() {
            return Err(Error::Data(format!("class {label} has no records")));
        }
        paths.sort();
        paths.shuffle(&mut rng::stream(seed, Purpose::Split, &[k as u64]));
        let n = paths.len();
        let (train, test) = (7 * n / 10, 2 * n / 10);
        for (i, p) in paths.into_iter().enumerate() {
            let split = if i < train {
                Split::Train
            } else if i < train + test {
                Split::Test
            } else {
                Split::Val
            };
            out.push(SampleRecord {
                path: p.clone(),
                label,
                split,
                origin: Origin::Original,
                seed,
            });
        }
    }
    Ok(DatasetManifest::new(out, seed))
}

/// Adds augmented copies of minority-class training records, cycling over
/// the minority sources in path order, until both classes have equal
/// training counts. Each copy gets a fresh warp seed from `rng`.
pub fn balance_by_augmentation(
    manifest: &DatasetManifest,
    rng: &mut impl RngCore,
) -> DatasetManifest {
    let counts = manifest.counts(Split::Train);
    let (minority, deficit) = if counts.covid < counts.normal {
        (Label::Covid, counts.normal - counts.covid)
    } else {
        (Label::Normal, counts.covid - counts.normal)
    };
    let sources: Vec<&SampleRecord> = manifest
        .records
        .iter()
        .filter(|r| r.split == Split::Train && r.label == minority && r.origin == Origin::Original)
        .collect();
    let mut records = manifest.records.clone();
    if deficit > 0 && !sources.is_empty() {
        let mut next_slot: Vec<usize> = sources
            .iter()
            .map(|s| {
                manifest
                    .records
                    .iter()
                    .filter(|r| r.path == s.path && r.origin != Origin::Original)
                    .count()
            })
            .collect();
        for i in 0..deficit {
            let k = i % sources.len();
            records.push(SampleRecord {
                path: sources[k].path.clone(),
                label: minority,
                split: Split::Train,
                origin: Origin::Augmented { slot: next_slot[k] },
                seed: rng.next_u64(),
            });
            next_slot[k] += 1;
        }
    }
    DatasetManifest::new(records, manifest.seed)
}

fn format_error(path: &Path, e: impl fmt::Display) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Decodes a PNG into an 8-bit grayscale plane. Color sources use luminance
/// `0.299 R + 0.587 G + 0.114 B` rounded to nearest; alpha is ignored and
/// 16-bit sources are scaled to 8 bits first.
pub fn load_grayscale(path: &Path) -> Result<Tensor> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => format_error(path, other),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = if img.color().has_color() {
        let rgb = match img {
            DynamicImage::ImageRgb8(rgb) => rgb,
            other => other.to_rgb8(),
        };
        rgb.pixels()
            .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).round())
            .collect()
    } else {
        img.to_luma8()
            .into_raw()
            .into_iter()
            .map(f64::from)
            .collect()
    };
    Tensor::from_vec(&[h, w, 1], data)
}

/// Writes a `[0, 1]` single-channel image as an 8-bit grayscale PNG.
pub fn save_grayscale(img: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = image_dims(img)?;
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf =
        image::GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches dimensions");
    buf.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => format_error(path, other),
    })
}

fn image_dims(img: &Tensor) -> Result<(usize, usize)> {
    match img.shape() {
        [h, w, 1] => Ok((*h, *w)),
        s => Err(Error::dim(format!(
            "expected an h x w x 1 image, got {s:?}"
        ))),
    }
}

pub fn normalize_unit(img: &Tensor) -> Tensor {
    img.map(|v| v / 255.0)
}

/// Bilinear sample at fractional `(y, x)`, clamping to the nearest edge.
fn sample(data: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (y - y0 as f64, x - x0 as f64);
    let top = data[y0 * w + x0] * (1.0 - tx) + data[y0 * w + x1] * tx;
    let bottom = data[y1 * w + x0] * (1.0 - tx) + data[y1 * w + x1] * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Bilinear resize with half-pixel centers: output pixel `d` samples the
/// source at `(d + 0.5) * in / out - 0.5`, clamped to the edge.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = image_dims(img)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Parameter(format!(
            "resize target must be positive, got {out_h}x{out_w}"
        )));
    }
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let src = img.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let y = (r as f64 + 0.5) * sy - 0.5;
        for c in 0..out_w {
            let x = (c as f64 + 0.5) * sx - 0.5;
            out.push(sample(src, h, w, y, x));
        }
    }
    Tensor::from_vec(&[out_h, out_w, 1], out)
}

/// Decode, scale to `[0, 1]` and resize to the network input size.
pub fn load_sample(path: &Path) -> Result<Tensor> {
    let raw = load_grayscale(path)?;
    resize_bilinear(&normalize_unit(&raw), IMAGE_SIZE, IMAGE_SIZE)
}

/// Sampling ranges for augmentation; every field is symmetric about the
/// identity except `zoom`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentRanges {
    pub rotation_deg: f64,
    /// Fraction of width (x) or height (y).
    pub shift: f64,
    pub shear_deg: f64,
    pub zoom: (f64, f64),
}

pub const AUGMENT_RANGES: AugmentRanges = AugmentRanges {
    rotation_deg: 15.0,
    shift: 0.10,
    shear_deg: 10.0,
    zoom: (0.9, 1.1),
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    pub shift_x: f64,
    pub shift_y: f64,
    pub shear_deg: f64,
    /// Magnification: values above 1 enlarge the content.
    pub zoom: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        rotation_deg: 0.0,
        shift_x: 0.0,
        shift_y: 0.0,
        shear_deg: 0.0,
        zoom: 1.0,
    };

    pub fn sample(ranges: &AugmentRanges, rng: &mut impl Rng) -> Self {
        AugmentParams {
            rotation_deg: rng.random_range(-ranges.rotation_deg..=ranges.rotation_deg),
            shift_x: rng.random_range(-ranges.shift..=ranges.shift),
            shift_y: rng.random_range(-ranges.shift..=ranges.shift),
            shear_deg: rng.random_range(-ranges.shear_deg..=ranges.shear_deg),
            zoom: rng.random_range(ranges.zoom.0..=ranges.zoom.1),
        }
    }

    /// The warp an augmented slot uses in a given epoch.
    pub fn for_epoch(slot_seed: u64, epoch: u64) -> Self {
        Self::sample(
            &AUGMENT_RANGES,
            &mut rng::stream(slot_seed, Purpose::Augment, &[epoch]),
        )
    }

    pub fn within(&self, r: &AugmentRanges) -> bool {
        self.rotation_deg.abs() <= r.rotation_deg
            && self.shift_x.abs() <= r.shift
            && self.shift_y.abs() <= r.shift
            && self.shear_deg.abs() <= r.shear_deg
            && (r.zoom.0..=r.zoom.1).contains(&self.zoom)
    }

    /// Linear part of the forward map in `(x, y)` pixel coordinates:
    /// rotate * shear * zoom.
    fn linear(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let t = self.shear_deg.to_radians().tan();
        let z = self.zoom;
        [[c * z, (c * t - s) * z], [s * z, (s * t + c) * z]]
    }
}

/// Warps `img` by zoom, shear, rotation and shift (applied in that order)
/// about the image center. Each output pixel is inverse-mapped into the
/// source and sampled bilinearly; samples outside take the nearest edge
/// pixel. The result is clamped to `[0, 1]`.
pub fn augment_sample(img: &Tensor, params: &AugmentParams) -> Result<Tensor> {
    let (h, w) = image_dims(img)?;
    let [[a, b], [c, d]] = params.linear();
    let det = a * d - b * c;
    if !det.is_finite() || det.abs() < 1e-12 {
        return Err(Error::Parameter(format!(
            "degenerate augmentation {params:?}"
        )));
    }
    let inv = [[d / det, -b / det], [-c / det, a / det]];
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (tx, ty) = (params.shift_x * w as f64, params.shift_y * h as f64);
    let src = img.data();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        let v = r as f64 - cy - ty;
        for col in 0..w {
            let u = col as f64 - cx - tx;
            let x = inv[0][0] * u + inv[0][1] * v + cx;
            let y = inv[1][0] * u + inv[1][1] * v + cy;
            out.push(sample(src, h, w, y, x).clamp(0.0, 1.0));
        }
    }
    Tensor::from_vec(&[h, w, 1], out)
}
