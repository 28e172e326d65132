//! Synthetic 64×64 image families with ground-truth pathology masks.
//!
//! Two regimes, each a two-class problem (0 = normal, 1 = pathological):
//!
//! - band: a bright vertical band with a smooth intensity profile;
//!   pathological samples carry a contiguous zero-intensity gap. The
//!   pathology is *missing* signal, and the mask marks gap rows × band
//!   columns.
//! - blob: a textured background; pathological samples carry an added
//!   bright Gaussian blob. The pathology is *extra* signal, and the mask
//!   marks pixels receiving more than half the blob's peak.
//!
//! Every sample is rendered from its own deterministic substream of the
//! dataset seed, so datasets regenerate bit-identically and individual
//! samples do not depend on generation order.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::io;
use crate::rng::{sample_rng, stage_rng};
use crate::tensor::Tensor;

pub const IMG_H: usize = 64;
pub const IMG_W: usize = 64;
pub const CLASS_NORMAL: usize = 0;
pub const CLASS_PATHOLOGICAL: usize = 1;
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Band,
    Blob,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Band => "band",
            Family::Blob => "blob",
        })
    }
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "band" => Ok(Family::Band),
            "blob" => Ok(Family::Blob),
            other => Err(Error::invalid(format!("unknown family {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

/// One image with its label and ground-truth pathology mask. Normal samples
/// carry an all-zero mask.
#[derive(Debug, Clone)]
pub struct Sample {
    /// [1, 64, 64], values in [0,1].
    pub image: Tensor,
    pub label: usize,
    /// [64, 64], values in {0,1}.
    pub mask: Tensor,
}

impl Sample {
    fn validate(&self, index: usize) -> Result<()> {
        if self.image.shape() != [1, IMG_H, IMG_W] || self.mask.shape() != [IMG_H, IMG_W] {
            return Err(Error::Corrupt(format!(
                "sample {index}: bad shapes image {:?} mask {:?}",
                self.image.shape(),
                self.mask.shape()
            )));
        }
        if self.image.min() < 0.0 || self.image.max() > 1.0 {
            return Err(Error::Corrupt(format!("sample {index}: image outside [0,1]")));
        }
        let mask_positive = self.mask.data().iter().any(|&v| v > 0.0);
        if (self.label == CLASS_PATHOLOGICAL) != mask_positive {
            return Err(Error::Corrupt(format!(
                "sample {index}: label {} inconsistent with mask occupancy {mask_positive}",
                self.label
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Parallel to `samples`.
    pub splits: Vec<Split>,
    pub seed: u64,
    pub family: Family,
    /// Human-readable generator parameters, persisted in meta.txt.
    pub params: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices belonging to one split, in index order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Per-class sample counts over the whole dataset.
    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0usize; NUM_CLASSES];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }
}

struct BandGeometry {
    col0: usize,
    col1: usize,
    base: f32,
    wobble: f32,
    phase: f32,
    /// Row range of the zero-intensity gap for pathological samples.
    gap: Option<(usize, usize)>,
}

fn draw_band_geometry(
    rng: &mut impl Rng,
    gap_fraction: (f64, f64),
    pathological: bool,
) -> BandGeometry {
    let width = rng.gen_range(12..=20usize);
    let col0 = rng.gen_range(4..IMG_W - 4 - width);
    let base = 0.8f32;
    let wobble = rng.gen_range(0.05..0.1f32);
    let phase = rng.gen_range(0.0..std::f32::consts::TAU);
    let gap = pathological.then(|| {
        let frac = rng.gen_range(gap_fraction.0..gap_fraction.1);
        let len = ((IMG_H as f64 * frac).round() as usize).max(1);
        let row0 = rng.gen_range(0..=IMG_H - len);
        (row0, row0 + len)
    });
    BandGeometry { col0, col1: col0 + width, base, wobble, phase, gap }
}

/// Noise-free band image plus its mask.
fn render_band(geom: &BandGeometry) -> (Tensor, Tensor) {
    let mut clean = Tensor::zeros(&[IMG_H, IMG_W]);
    let mut mask = Tensor::zeros(&[IMG_H, IMG_W]);
    for row in 0..IMG_H {
        let in_gap = geom.gap.is_some_and(|(r0, r1)| row >= r0 && row < r1);
        let profile = geom.base
            + geom.wobble
                * (std::f32::consts::TAU * 2.0 * row as f32 / IMG_H as f32 + geom.phase).sin();
        for col in geom.col0..geom.col1 {
            if in_gap {
                mask.set2(row, col, 1.0);
            } else {
                clean.set2(row, col, profile);
            }
        }
    }
    (clean, mask)
}

struct BlobGeometry {
    bg_phase_r: f32,
    bg_phase_c: f32,
    /// (center_row, center_col, radius, amplitude) of the added blob.
    blob: Option<(f32, f32, f32, f32)>,
}

fn draw_blob_geometry(
    rng: &mut impl Rng,
    blob_radius: (f64, f64),
    pathological: bool,
) -> BlobGeometry {
    let bg_phase_r = rng.gen_range(0.0..std::f32::consts::TAU);
    let bg_phase_c = rng.gen_range(0.0..std::f32::consts::TAU);
    let blob = pathological.then(|| {
        let r = rng.gen_range(blob_radius.0..blob_radius.1) as f32;
        let margin = r.ceil() as usize + 2;
        let cr = rng.gen_range(margin..IMG_H - margin) as f32;
        let cc = rng.gen_range(margin..IMG_W - margin) as f32;
        let amp = rng.gen_range(0.4..0.6f32);
        (cr, cc, r, amp)
    });
    BlobGeometry { bg_phase_r, bg_phase_c, blob }
}

/// Noise-free blob image plus its mask (pixels receiving more than half the
/// blob's peak, i.e. distance < radius under the half-peak falloff).
fn render_blob(geom: &BlobGeometry) -> (Tensor, Tensor) {
    let mut clean = Tensor::zeros(&[IMG_H, IMG_W]);
    let mut mask = Tensor::zeros(&[IMG_H, IMG_W]);
    let ln2 = std::f32::consts::LN_2;
    for row in 0..IMG_H {
        for col in 0..IMG_W {
            let texture = 0.3
                + 0.15
                    * (std::f32::consts::TAU * 3.0 * row as f32 / IMG_H as f32 + geom.bg_phase_r)
                        .sin()
                    * (std::f32::consts::TAU * 2.0 * col as f32 / IMG_W as f32 + geom.bg_phase_c)
                        .sin();
            let mut v = texture;
            if let Some((cr, cc, r, amp)) = geom.blob {
                let d2 = (row as f32 - cr).powi(2) + (col as f32 - cc).powi(2);
                v += amp * (-d2 * ln2 / (r * r)).exp();
                if d2 < r * r {
                    mask.set2(row, col, 1.0);
                }
            }
            clean.set2(row, col, v);
        }
    }
    (clean, mask)
}

fn noisy_image(clean: &Tensor, noise_level: f64, rng: &mut impl Rng) -> Tensor {
    if noise_level == 0.0 {
        return clean.reshaped(&[1, IMG_H, IMG_W]).expect("image shape");
    }
    let data = clean
        .data()
        .iter()
        .map(|&v| (v + rng.gen_range(0.0..noise_level) as f32).clamp(0.0, 1.0))
        .collect();
    Tensor::from_vec(vec![1, IMG_H, IMG_W], data).expect("image shape")
}

fn check_generator_args(n: usize, range: (f64, f64), range_what: &str, noise: f64) -> Result<()> {
    if n < 10 {
        return Err(Error::invalid(format!("dataset needs n ≥ 10, got {n}")));
    }
    if !(range.0 > 0.0 && range.1 > range.0) {
        return Err(Error::invalid(format!(
            "{range_what} range must satisfy 0 < lo < hi, got {range:?}"
        )));
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(Error::invalid(format!("noise level must be in [0,1], got {noise}")));
    }
    Ok(())
}

/// Band dataset: labels alternate normal/pathological so balance is within
/// one sample of 50/50. `gap_fraction` is the gap length as a fraction of
/// the band height.
pub fn generate_band_dataset(
    n: usize,
    gap_fraction: (f64, f64),
    noise_level: f64,
    seed: u64,
) -> Result<Dataset> {
    check_generator_args(n, gap_fraction, "gap fraction", noise_level)?;
    if gap_fraction.1 > 1.0 {
        return Err(Error::invalid(format!(
            "gap fraction {gap_fraction:?} exceeds the band (gap would leave the image)"
        )));
    }
    let samples = (0..n)
        .map(|i| {
            let mut rng = sample_rng(seed, "band-data", i as u64);
            let label = if i % 2 == 0 { CLASS_NORMAL } else { CLASS_PATHOLOGICAL };
            let geom = draw_band_geometry(&mut rng, gap_fraction, label == CLASS_PATHOLOGICAL);
            let (clean, mask) = render_band(&geom);
            Sample { image: noisy_image(&clean, noise_level, &mut rng), label, mask }
        })
        .collect();
    Ok(Dataset {
        samples,
        splits: vec![Split::Train; n],
        seed,
        family: Family::Band,
        params: format!(
            "n={n} gap_fraction={}..{} noise={noise_level}",
            gap_fraction.0, gap_fraction.1
        ),
    })
}

/// Blob dataset: textured background, pathological samples get an added
/// bright Gaussian blob of the given radius range (pixels).
pub fn generate_blob_dataset(
    n: usize,
    blob_radius: (f64, f64),
    noise_level: f64,
    seed: u64,
) -> Result<Dataset> {
    check_generator_args(n, blob_radius, "blob radius", noise_level)?;
    let margin = blob_radius.1.ceil() as usize + 2;
    if 2 * margin >= IMG_H {
        return Err(Error::invalid(format!(
            "blob radius {blob_radius:?} leaves no room in a {IMG_H}×{IMG_W} image"
        )));
    }
    let samples = (0..n)
        .map(|i| {
            let mut rng = sample_rng(seed, "blob-data", i as u64);
            let label = if i % 2 == 0 { CLASS_NORMAL } else { CLASS_PATHOLOGICAL };
            let geom = draw_blob_geometry(&mut rng, blob_radius, label == CLASS_PATHOLOGICAL);
            let (clean, mask) = render_blob(&geom);
            Sample { image: noisy_image(&clean, noise_level, &mut rng), label, mask }
        })
        .collect();
    Ok(Dataset {
        samples,
        splits: vec![Split::Train; n],
        seed,
        family: Family::Blob,
        params: format!(
            "n={n} blob_radius={}..{} noise={noise_level}",
            blob_radius.0, blob_radius.1
        ),
    })
}

/// Assigns train/val/test tags, stratified by class via largest-remainder
/// apportionment within each class. A strictly positive fraction that ends
/// up with zero samples is rejected.
pub fn split_dataset(mut ds: Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<Dataset> {
    let fr = [fractions.0, fractions.1, fractions.2];
    if fr.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::invalid(format!(
            "split fractions must be in [0,1] and sum to 1, got {fractions:?}"
        )));
    }
    let mut rng = stage_rng(seed, "split");
    let mut totals = [0usize; 3];
    for class in 0..NUM_CLASSES {
        let mut members: Vec<usize> = (0..ds.len())
            .filter(|&i| ds.samples[i].label == class)
            .collect();
        members.shuffle(&mut rng);
        let m = members.len();
        // Largest-remainder apportionment of m samples to the 3 fractions.
        let exact: Vec<f64> = fr.iter().map(|f| f * m as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut leftover = m - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        for &slot in order.iter().cycle() {
            if leftover == 0 {
                break;
            }
            counts[slot] += 1;
            leftover -= 1;
        }
        let mut cursor = 0usize;
        for (slot, &count) in counts.iter().enumerate() {
            let tag = [Split::Train, Split::Val, Split::Test][slot];
            for &idx in &members[cursor..cursor + count] {
                ds.splits[idx] = tag;
            }
            cursor += count;
            totals[slot] += count;
        }
    }
    for (slot, &f) in fr.iter().enumerate() {
        if f > 0.0 && totals[slot] == 0 {
            return Err(Error::invalid(format!(
                "fraction {f} for {} yields an empty split",
                [Split::Train, Split::Val, Split::Test][slot]
            )));
        }
    }
    Ok(ds)
}

/// Writes `images/*.cft`, `masks/*.cft`, `labels.csv` and `meta.txt`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut labels = String::from("index,label,split,family\n");
    for (i, sample) in ds.samples.iter().enumerate() {
        io::write_tensor(&dir.join(format!("images/{i:05}.cft")), &sample.image)?;
        io::write_tensor(&dir.join(format!("masks/{i:05}.cft")), &sample.mask)?;
        labels.push_str(&format!("{i},{},{},{}\n", sample.label, ds.splits[i], ds.family));
    }
    io::write_atomic(&dir.join("labels.csv"), labels.as_bytes())?;
    let meta = format!("seed={}\nfamily={}\nparams={}\n", ds.seed, ds.family, ds.params);
    io::write_atomic(&dir.join("meta.txt"), meta.as_bytes())?;
    Ok(())
}

/// Loads a dataset directory written by [`save_dataset`], re-validating the
/// per-sample invariants.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let labels_path = dir.join("labels.csv");
    let text = fs::read_to_string(&labels_path)
        .map_err(|e| Error::Corrupt(format!("reading {}: {e}", labels_path.display())))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("index,label,split,family") => {}
        other => return Err(Error::Corrupt(format!("labels.csv header {other:?}"))),
    }
    let mut samples = Vec::new();
    let mut splits = Vec::new();
    let mut family: Option<Family> = None;
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        let [index, label, split, fam] = fields.as_slice() else {
            return Err(Error::Corrupt(format!("labels.csv line {}: {line:?}", lineno + 2)));
        };
        let index: usize = index
            .parse()
            .map_err(|_| Error::Corrupt(format!("bad index {index:?}")))?;
        if index != samples.len() {
            return Err(Error::Corrupt(format!(
                "labels.csv indices out of order at {index}"
            )));
        }
        let label: usize = label
            .parse()
            .map_err(|_| Error::Corrupt(format!("bad label {label:?}")))?;
        if label >= NUM_CLASSES {
            return Err(Error::Corrupt(format!("label {label} out of range")));
        }
        let fam: Family = fam.parse()?;
        if *family.get_or_insert(fam) != fam {
            return Err(Error::Corrupt("mixed families in labels.csv".into()));
        }
        let sample = Sample {
            image: io::read_tensor(&dir.join(format!("images/{index:05}.cft")))?,
            label,
            mask: io::read_tensor(&dir.join(format!("masks/{index:05}.cft")))?,
        };
        sample.validate(index)?;
        samples.push(sample);
        splits.push(split.parse()?);
    }
    if samples.is_empty() {
        return Err(Error::Corrupt("dataset has no samples".into()));
    }
    let family = family.unwrap();

    let meta_path = dir.join("meta.txt");
    let meta = fs::read_to_string(&meta_path)
        .map_err(|e| Error::Corrupt(format!("reading {}: {e}", meta_path.display())))?;
    let mut seed = None;
    let mut params = String::new();
    for line in meta.lines() {
        if let Some(v) = line.strip_prefix("seed=") {
            seed = v.parse::<u64>().ok();
        } else if let Some(v) = line.strip_prefix("params=") {
            params = v.to_string();
        }
    }
    let seed = seed.ok_or_else(|| Error::Corrupt("meta.txt missing seed".into()))?;
    Ok(Dataset { samples, splits, seed, family, params })
}
