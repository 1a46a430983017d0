use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::TensorFile;
use crate::provenance::RunInfo;
use crate::{Error, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Affine map between raw intensities and `[−1, 1]`:
/// `raw = min + (norm + 1)·(max − min)/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormConstants {
    pub min: f64,
    pub max: f64,
}

impl NormConstants {
    pub fn span(&self) -> f64 {
        self.max - self.min
    }

    pub fn to_raw(&self, norm: &Array2<f64>) -> Array2<f64> {
        let half = 0.5 * self.span();
        norm.mapv(|v| self.min + (v + 1.0) * half)
    }

    /// Scale factor from normalized to raw units (for residuals and σ).
    pub fn raw_scale(&self) -> f64 {
        0.5 * self.span()
    }
}

/// Per-slice min-max normalization to `[−1, 1]`, rounded to `f32` precision so
/// in-memory and on-disk datasets agree exactly. Constant maps normalize to 0
/// with constants `(v − 1, v + 1)`.
pub fn normalize_minmax(raw: &Array2<f64>) -> Result<(Array2<f64>, NormConstants)> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite intensity in input map".into()));
    }
    let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max - min > 1e-12) {
        return Ok((raw.mapv(|_| 0.0), NormConstants { min: min - 1.0, max: min + 1.0 }));
    }
    let nc = NormConstants { min, max };
    let scale = 2.0 / nc.span();
    let norm = raw.mapv(|v| (((v - min) * scale - 1.0).clamp(-1.0, 1.0) as f32) as f64);
    Ok((norm, nc))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub input_a: Array2<f64>,
    pub target_b: Array2<f64>,
    pub subject_id: String,
    pub slice_index: usize,
    pub norm_a: NormConstants,
    pub norm_b: NormConstants,
}

impl PairedSample {
    /// Normalizes raw maps per slice.
    pub fn from_raw(a: &Array2<f64>, b: &Array2<f64>, subject_id: String, slice_index: usize) -> Result<Self> {
        if a.dim() != b.dim() {
            let (ha, wa) = a.dim();
            let (hb, wb) = b.dim();
            return Err(Error::Data(format!(
                "pair {subject_id}/{slice_index}: shapes {ha}x{wa} and {hb}x{wb} differ"
            )));
        }
        let (input_a, norm_a) = normalize_minmax(a)?;
        let (target_b, norm_b) = normalize_minmax(b)?;
        Ok(Self {
            input_a,
            target_b,
            subject_id,
            slice_index,
            norm_a,
            norm_b,
        })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.input_a.dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Subject-level partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn subjects(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn is_disjoint(&self) -> bool {
        let mut seen = BTreeSet::new();
        self.train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .all(|s| seen.insert(s.as_str()))
    }
}

/// Shuffles subjects and assigns `max(1, round(0.2·n))` each to validation
/// and test, the rest to training. Needs at least three subjects.
pub fn split_subjects(ids: &[String], seed: u64) -> Result<Splits> {
    let unique: BTreeSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::Data("duplicate subject ids".into()));
    }
    let n = ids.len();
    if n < 3 {
        return Err(Error::InsufficientSamples { need: 3, got: n });
    }
    let held = ((0.2 * n as f64).round() as usize).max(1);
    let mut order: Vec<String> = ids.to_vec();
    order.sort();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5B1D));
    let mut take = |k: usize| {
        let mut part: Vec<String> = order.drain(..k).collect();
        part.sort();
        part
    };
    let test = take(held);
    let val = take(held);
    let rest = n - 2 * held;
    let train = take(rest);
    Ok(Splits { train, val, test })
}

/// In-memory paired dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub task: String,
    pub height: usize,
    pub width: usize,
    /// Declared dynamic range of domain B in raw units.
    pub b_range: NormConstants,
    pub samples: Vec<PairedSample>,
    pub splits: Splits,
    /// Number of subjects in the training split.
    pub supervision_level: usize,
    /// Command, configuration hash and seed that produced the dataset.
    pub run: Option<RunInfo>,
}

impl DatasetManifest {
    pub fn new(task: String, samples: Vec<PairedSample>, splits: Splits, b_range: NormConstants) -> Result<Self> {
        let (height, width) = samples
            .first()
            .map(PairedSample::dim)
            .ok_or_else(|| Error::Data("dataset has no samples".into()))?;
        let m = Self {
            task,
            height,
            width,
            b_range,
            supervision_level: splits.train.len(),
            run: None,
            samples,
            splits,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.splits.is_disjoint() {
            return Err(Error::Data("splits share subjects".into()));
        }
        if self.supervision_level != self.splits.train.len() {
            return Err(Error::Data(format!(
                "supervision level {} does not match {} training subjects",
                self.supervision_level,
                self.splits.train.len()
            )));
        }
        if !(self.b_range.span() > 0.0) {
            return Err(Error::Data("domain B range must have positive width".into()));
        }
        for s in &self.samples {
            if s.input_a.dim() != (self.height, self.width) || s.target_b.dim() != (self.height, self.width) {
                return Err(Error::Data(format!(
                    "sample {}/{} does not match dataset size {}x{}",
                    s.subject_id, s.slice_index, self.height, self.width
                )));
            }
        }
        Ok(())
    }

    pub fn split_of(&self, subject: &str) -> Option<Split> {
        [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .find(|&sp| self.splits.subjects(sp).iter().any(|s| s == subject))
    }

    /// Indices of samples whose subject belongs to `split`, in manifest order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        let set: BTreeSet<&str> = self.splits.subjects(split).iter().map(String::as_str).collect();
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| set.contains(s.subject_id.as_str()))
            .map(|(i, _)| i)
            .collect()
    }

    /// Writes `manifest.json` and one tensor pair per sample under `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let tensors = dir.join("tensors");
        fs::create_dir_all(&tensors).map_err(|e| Error::io(&tensors, e))?;
        let mut entries = Vec::with_capacity(self.samples.len());
        for (i, s) in self.samples.iter().enumerate() {
            let a_rel = format!("tensors/{i:05}_a.upg");
            let b_rel = format!("tensors/{i:05}_b.upg");
            let meta = |domain: &str, nc: NormConstants| {
                json!({
                    "domain": domain,
                    "subject_id": s.subject_id,
                    "slice_index": s.slice_index,
                    "layout": ["height", "width"],
                    "scale": "normalized to [-1, 1]",
                    "norm": nc,
                })
            };
            TensorFile::from_map(&s.input_a).write_with_sidecar(&dir.join(&a_rel), &meta("a", s.norm_a))?;
            TensorFile::from_map(&s.target_b).write_with_sidecar(&dir.join(&b_rel), &meta("b", s.norm_b))?;
            entries.push(SampleEntry {
                subject_id: s.subject_id.clone(),
                slice_index: s.slice_index,
                input_a: a_rel,
                target_b: b_rel,
                norm_a: s.norm_a,
                norm_b: s.norm_b,
            });
        }
        let file = ManifestFile {
            schema_version: MANIFEST_SCHEMA_VERSION,
            task: self.task.clone(),
            height: self.height,
            width: self.width,
            b_range: self.b_range,
            supervision_level: self.supervision_level,
            splits: self.splits.clone(),
            run: self.run.clone(),
            samples: entries,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&file)? + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Loads a manifest written by [`DatasetManifest::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ManifestFile = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if file.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "{}: unsupported manifest schema {}",
                path.display(),
                file.schema_version
            )));
        }
        let root = path.parent().unwrap_or(Path::new("."));
        let samples = file
            .samples
            .iter()
            .map(|e| {
                let read = |rel: &str| {
                    let p = root.join(rel);
                    TensorFile::read(&p)?.to_map(&p)
                };
                Ok(PairedSample {
                    input_a: read(&e.input_a)?,
                    target_b: read(&e.target_b)?,
                    subject_id: e.subject_id.clone(),
                    slice_index: e.slice_index,
                    norm_a: e.norm_a,
                    norm_b: e.norm_b,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let m = Self {
            task: file.task,
            height: file.height,
            width: file.width,
            b_range: file.b_range,
            samples,
            splits: file.splits,
            supervision_level: file.supervision_level,
            run: file.run,
        };
        m.validate()?;
        Ok(m)
    }
}

/// Serialized manifest; tensor paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    pub schema_version: u32,
    pub task: String,
    pub height: usize,
    pub width: usize,
    pub b_range: NormConstants,
    pub supervision_level: usize,
    pub splits: Splits,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunInfo>,
    pub samples: Vec<SampleEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub subject_id: String,
    pub slice_index: usize,
    pub input_a: String,
    pub target_b: String,
    pub norm_a: NormConstants,
    pub norm_b: NormConstants,
}

/// Keeps `level` randomly chosen training subjects; validation and test are
/// untouched. `level` equal to the pool size returns the manifest unchanged.
pub fn subset_supervision(manifest: &DatasetManifest, level: usize, seed: u64) -> Result<DatasetManifest> {
    let pool = manifest.splits.train.len();
    if level == 0 || level > pool {
        return Err(Error::Data(format!(
            "supervision level {level} outside 1..={pool} training subjects"
        )));
    }
    if level == pool {
        return Ok(manifest.clone());
    }
    let mut chosen = manifest.splits.train.clone();
    chosen.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5B5E_7001));
    chosen.truncate(level);
    chosen.sort();
    let mut out = manifest.clone();
    out.splits.train = chosen;
    out.supervision_level = level;
    out.validate()?;
    Ok(out)
}

/// Parses `<subject>_<slice>` stems; anything else is its own subject, slice 0.
fn parse_stem(stem: &str) -> (String, usize) {
    if let Some((subject, slice)) = stem.rsplit_once('_') {
        if let Ok(k) = slice.parse::<usize>() {
            if !subject.is_empty() {
                return (subject.to_string(), k);
            }
        }
    }
    (stem.to_string(), 0)
}

/// A raw grayscale slice loaded from disk, intensities in `[0, 1]` for raster
/// files and unchanged for tensor containers.
#[derive(Debug, Clone)]
pub struct LoadedImage {
    pub stem: String,
    pub subject_id: String,
    pub slice_index: usize,
    pub image: Array2<f64>,
}

fn load_raster(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let deep = matches!(
        img.color(),
        image::ColorType::L16 | image::ColorType::La16 | image::ColorType::Rgb16 | image::ColorType::Rgba16
    );
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = if deep {
        img.into_luma16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()
    } else {
        img.into_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect()
    };
    Ok(Array2::from_shape_vec((h, w), data).expect("buffer matches image size"))
}

/// Loads every `.png` and `.upg` file in `dir`, sorted by file name.
pub fn load_image_dir(dir: &Path) -> Result<Vec<LoadedImage>> {
    let read = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = read
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("png" | "upg")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("{}: no .png or .upg images", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let image = if p.extension().and_then(|e| e.to_str()) == Some("upg") {
                TensorFile::read(p)?.to_map(p)?
            } else {
                load_raster(p)?
            };
            let (subject_id, slice_index) = parse_stem(&stem);
            Ok(LoadedImage {
                stem,
                subject_id,
                slice_index,
                image,
            })
        })
        .collect()
}

/// Builds `(degrade(clean), clean)` pairs from clean slices.
pub fn pairs_from_clean<F>(task: &str, clean: &[LoadedImage], seed: u64, b_range: NormConstants, mut degrade: F) -> Result<DatasetManifest>
where
    F: FnMut(&Array2<f64>, u64) -> Result<Array2<f64>>,
{
    let mut samples = Vec::with_capacity(clean.len());
    for (i, img) in clean.iter().enumerate() {
        let a = degrade(&img.image, seed.wrapping_add(i as u64))?;
        samples.push(PairedSample::from_raw(&a, &img.image, img.subject_id.clone(), img.slice_index)?);
    }
    finish(task, samples, seed, b_range)
}

/// Pairs images in two directories by file stem.
pub fn pairs_from_dirs(a: &[LoadedImage], b: &[LoadedImage], seed: u64, b_range: NormConstants) -> Result<DatasetManifest> {
    let by_stem: BTreeMap<&str, &LoadedImage> = b.iter().map(|i| (i.stem.as_str(), i)).collect();
    let mut samples = Vec::with_capacity(a.len());
    for ia in a {
        let ib = by_stem
            .get(ia.stem.as_str())
            .ok_or_else(|| Error::Data(format!("no domain-B image for {}", ia.stem)))?;
        samples.push(PairedSample::from_raw(&ia.image, &ib.image, ia.subject_id.clone(), ia.slice_index)?);
    }
    if samples.len() != b.len() {
        return Err(Error::Data(format!(
            "directories hold {} and {} images",
            a.len(),
            b.len()
        )));
    }
    finish("paired-dirs", samples, seed, b_range)
}

fn finish(task: &str, samples: Vec<PairedSample>, seed: u64, b_range: NormConstants) -> Result<DatasetManifest> {
    let subjects: BTreeSet<String> = samples.iter().map(|s| s.subject_id.clone()).collect();
    let ids: Vec<String> = subjects.into_iter().collect();
    let splits = split_subjects(&ids, seed)?;
    DatasetManifest::new(task.to_string(), samples, splits, b_range)
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    #[test]
    fn split_sizes() {
        for (n, t) in [(3, 1), (10, 6), (16, 10), (29, 17)] {
            let s = split_subjects(&ids(n), 4).unwrap();
            assert_eq!(s.train.len(), t, "n={n}");
            assert_eq!(s.val.len(), s.test.len());
            assert!(s.is_disjoint());
        }
        assert!(split_subjects(&ids(2), 0).is_err());
    }

    #[test]
    fn normalization_round_trip() {
        let raw = array![[0.0, 2.0], [4.0, 1.0]];
        let (n, c) = normalize_minmax(&raw).unwrap();
        assert_eq!(n, array![[-1.0, 0.0], [1.0, -0.5]]);
        assert_eq!(c.to_raw(&n), raw);
        let (z, c) = normalize_minmax(&Array2::from_elem((2, 2), 3.0)).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        assert!(c.to_raw(&z).iter().all(|&v| v == 3.0));
    }

    #[test]
    fn stem_parsing() {
        assert_eq!(parse_stem("p07_012"), ("p07".into(), 12));
        assert_eq!(parse_stem("scan"), ("scan".into(), 0));
        assert_eq!(parse_stem("_3"), ("_3".into(), 0));
    }
}
