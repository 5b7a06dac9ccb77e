//! Dataset manifests, image preprocessing, and the synthetic generator.

mod synth;

pub use synth::{
    generate_image, quality_label, synthesize, DegradationKind, SplitCounts, SyntheticConfig,
    SyntheticImage,
};

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imgio::{read_image, RgbImage};
use crate::label::QualityLabel;
use crate::tensor::Tensor;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    /// Image path, relative to the manifest's directory.
    pub image: String,
    pub label: QualityLabel,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    /// Per-class counts (good, usable, unusable) within one split.
    pub fn class_counts(&self, split: Split) -> [u64; 3] {
        let mut counts = [0u64; 3];
        for r in self.records.iter().filter(|r| r.split == split) {
            counts[r.label.index()] += 1;
        }
        counts
    }

    pub fn split_records(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,quality,split\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{}\n", r.image, r.label.code(), r.split));
        }
        out
    }
}

/// Parse a manifest CSV. Accepts the two-column header `image,quality`
/// (records take `fallback_split`) and the three-column
/// `image,quality,split`. Leading/trailing whitespace per field is ignored;
/// duplicate paths within a split and unknown label codes are errors that
/// name the offending line.
pub fn load_manifest(path: impl AsRef<Path>, fallback_split: Split) -> Result<DatasetManifest> {
    let text = fs::read_to_string(&path)?;
    parse_manifest(&text, fallback_split)
}

pub fn parse_manifest(text: &str, fallback_split: Split) -> Result<DatasetManifest> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::data("empty manifest"))?;
    let header_cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let has_split = match header_cols.as_slice() {
        ["image", "quality"] => false,
        ["image", "quality", "split"] => true,
        _ => {
            return Err(Error::data_at(
                1,
                format!("unrecognized header {header:?}, expected image,quality[,split]"),
            ))
        }
    };
    let mut records = Vec::new();
    let mut seen: HashSet<(Split, String)> = HashSet::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let expected = if has_split { 3 } else { 2 };
        if cols.len() != expected {
            return Err(Error::data_at(
                line_no,
                format!("expected {expected} columns, found {}", cols.len()),
            ));
        }
        let image = cols[0].to_string();
        if image.is_empty() {
            return Err(Error::data_at(line_no, "missing image path".to_string()));
        }
        let code: u8 = cols[1]
            .parse()
            .map_err(|_| Error::data_at(line_no, format!("invalid quality code {:?}", cols[1])))?;
        let label = QualityLabel::from_code(code)
            .ok_or_else(|| Error::data_at(line_no, format!("unknown quality code {code}")))?;
        let split = if has_split {
            Split::parse(cols[2])
                .ok_or_else(|| Error::data_at(line_no, format!("unknown split {:?}", cols[2])))?
        } else {
            fallback_split
        };
        if !seen.insert((split, image.clone())) {
            return Err(Error::data_at(line_no, format!("duplicate path {image:?} in {split} split")));
        }
        records.push(ManifestRecord { image, label, split });
    }
    Ok(DatasetManifest { records })
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<()> {
    fs::write(path, manifest.to_csv())?;
    Ok(())
}

/// Reassign splits at random: `train_fraction` of the records (rounded)
/// become train, the rest test. Deterministic per seed.
pub fn split_manifest(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::data(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..manifest.records.len()).collect();
    order.shuffle(&mut StdRng::seed_from_u64(seed));
    let n_train = (manifest.records.len() as f64 * train_fraction).round() as usize;
    let mut train = DatasetManifest::default();
    let mut test = DatasetManifest::default();
    for (rank, &idx) in order.iter().enumerate() {
        let mut record = manifest.records[idx].clone();
        if rank < n_train {
            record.split = Split::Train;
            train.records.push(record);
        } else {
            record.split = Split::Test;
            test.records.push(record);
        }
    }
    Ok((train, test))
}

// ── preprocessing ───────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    /// Square network input resolution.
    pub resolution: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { resolution: 64, mean: [0.5; 3], std: [0.25; 3] }
    }
}

/// Bilinear resample to a square target; both up- and downscaling.
pub fn resize_bilinear(image: &RgbImage, target: usize) -> RgbImage {
    if image.width() == target && image.height() == target {
        return image.clone();
    }
    let mut out = RgbImage::new(target, target);
    let sx = image.width() as f64 / target as f64;
    let sy = image.height() as f64 / target as f64;
    for oy in 0..target {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (image.height() - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(image.height() - 1);
        let wy = (fy - y0 as f64) as f32;
        for ox in 0..target {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (image.width() - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(image.width() - 1);
            let wx = (fx - x0 as f64) as f32;
            let mut rgb = [0.0f32; 3];
            let (p00, p01) = (image.pixel(x0, y0), image.pixel(x1, y0));
            let (p10, p11) = (image.pixel(x0, y1), image.pixel(x1, y1));
            for c in 0..3 {
                let top = p00[c] + (p01[c] - p00[c]) * wx;
                let bot = p10[c] + (p11[c] - p10[c]) * wx;
                rgb[c] = top + (bot - top) * wy;
            }
            out.set_pixel(ox, oy, rgb);
        }
    }
    out
}

/// Resize to the configured resolution and standardize per channel,
/// producing a planar 3 x r x r tensor. Inputs already at the target
/// resolution skip resampling. Channel count is fixed at 3 by
/// construction of [`RgbImage`]; non-RGB files are rejected at load time.
pub fn preprocess(image: &RgbImage, cfg: &PreprocessConfig) -> Tensor {
    let r = cfg.resolution;
    let resized;
    let source = if image.width() == r && image.height() == r {
        image
    } else {
        resized = resize_bilinear(image, r);
        &resized
    };
    let mut data = vec![0.0f32; 3 * r * r];
    for y in 0..r {
        for x in 0..r {
            let px = source.pixel(x, y);
            for c in 0..3 {
                data[c * r * r + y * r + x] = (px[c] - cfg.mean[c]) / cfg.std[c];
            }
        }
    }
    Tensor::new(&[3, r, r], data).expect("preprocess shape")
}

/// A preprocessed, labeled image ready for training or evaluation.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor,
    pub label: QualityLabel,
}

/// Load and preprocess every record of one split. `base_dir` is the
/// directory manifest paths are relative to.
pub fn load_dataset(
    manifest: &DatasetManifest,
    base_dir: impl AsRef<Path>,
    split: Split,
    cfg: &PreprocessConfig,
) -> Result<Vec<Sample>> {
    let base: PathBuf = base_dir.as_ref().to_path_buf();
    let mut samples = Vec::new();
    for record in manifest.split_records(split) {
        let img = read_image(base.join(&record.image))?;
        samples.push(Sample { image: preprocess(&img, cfg), label: record.label });
    }
    Ok(samples)
}
