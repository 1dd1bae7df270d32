//! Slice preprocessing, dataset layout, splitting and sample assembly.
//!
//! On-disk layout: `root/subjects/<id>/slice_####.png` (8-bit grayscale,
//! zero-padded four digit index) and `root/labels.csv` with header
//! `subject_id,label`, label one of `normal` or `cad`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::resample::linear_taps;
use crate::tensor::Tensor;

pub const SUBJECTS_DIR: &str = "subjects";
pub const LABELS_FILE: &str = "labels.csv";

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slice8 {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Slice8 {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::shape(format!("{height}x{width} slice with {} pixels", data.len())));
        }
        Ok(Slice8 { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Slice8 { height, width, data: vec![value; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

/// Round half up to the nearest 8-bit level.
pub fn quantize(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Output of [`histogram_stretch`].
#[derive(Debug, Clone, PartialEq)]
pub struct Stretched {
    pub slice: Slice8,
    /// Set when the input was constant and the map was undefined.
    pub constant_input: bool,
}

/// Linear min-max stretch of an intensity array to `[0, 255]`.
pub fn histogram_stretch(height: usize, width: usize, values: &[f64]) -> Result<Stretched> {
    if values.len() != height * width || values.is_empty() {
        return Err(Error::shape(format!("{height}x{width} slice with {} values", values.len())));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("slice value at index {i}")));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        log::warn!("constant slice (value {min}); stretch undefined, emitting zeros");
        return Ok(Stretched { slice: Slice8::filled(height, width, 0), constant_input: true });
    }
    let scale = 255.0 / (max - min);
    let data = values.iter().map(|&v| quantize((v - min) * scale)).collect();
    Ok(Stretched { slice: Slice8 { height, width, data }, constant_input: false })
}

/// [`histogram_stretch`] of an 8-bit slice.
pub fn stretch_slice(slice: &Slice8) -> Stretched {
    let values: Vec<f64> = slice.data.iter().map(|&v| v as f64).collect();
    histogram_stretch(slice.height, slice.width, &values).expect("8-bit slices are finite and well formed")
}

/// Pixel-center aligned bilinear resize.
pub fn resize_bilinear(slice: &Slice8, height: usize, width: usize) -> Result<Slice8> {
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!("resize target {height}x{width} must be at least 1x1")));
    }
    if height == slice.height && width == slice.width {
        return Ok(slice.clone());
    }
    let ty = linear_taps(slice.height, height);
    let tx = linear_taps(slice.width, width);
    let mut rows = vec![0.0f64; height * slice.width];
    for (y, t) in ty.iter().enumerate() {
        for x in 0..slice.width {
            rows[y * slice.width + x] = t.w_lo * slice.get(t.lo, x) as f64 + t.w_hi * slice.get(t.hi, x) as f64;
        }
    }
    let mut data = Vec::with_capacity(height * width);
    for y in 0..height {
        let r = &rows[y * slice.width..(y + 1) * slice.width];
        data.extend(tx.iter().map(|t| quantize(t.w_lo * r[t.lo] + t.w_hi * r[t.hi])));
    }
    Ok(Slice8 { height, width, data })
}

/// Output of [`resample_slices`].
#[derive(Debug, Clone, PartialEq)]
pub struct Resampled {
    pub slices: Vec<Slice8>,
    /// Set when a single input slice had to be replicated.
    pub replicated: bool,
}

/// Linear resampling along the slice axis to exactly `target` slices.
pub fn resample_slices(volume: &[Slice8], target: usize) -> Result<Resampled> {
    let first = volume.first().ok_or_else(|| Error::invalid("cannot resample an empty volume"))?;
    if target == 0 {
        return Err(Error::invalid("target slice count must be at least 1"));
    }
    if let Some(s) = volume.iter().find(|s| s.height != first.height || s.width != first.width) {
        return Err(Error::shape(format!(
            "slices differ in size: {}x{} vs {}x{}",
            first.height, first.width, s.height, s.width
        )));
    }
    if volume.len() == target {
        return Ok(Resampled { slices: volume.to_vec(), replicated: false });
    }
    if volume.len() == 1 {
        log::warn!("single-slice volume replicated to {target} slices");
        return Ok(Resampled { slices: vec![first.clone(); target], replicated: true });
    }
    let slices = linear_taps(volume.len(), target)
        .iter()
        .map(|t| {
            let (a, b) = (&volume[t.lo], &volume[t.hi]);
            let data =
                a.data.iter().zip(&b.data).map(|(&p, &q)| quantize(t.w_lo * p as f64 + t.w_hi * q as f64)).collect();
            Slice8 { height: first.height, width: first.width, data }
        })
        .collect();
    Ok(Resampled { slices, replicated: false })
}

/// Reads an 8-bit single-channel PNG; other color types are rejected.
pub fn read_png(path: &Path) -> Result<Slice8> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            Slice8::new(h as usize, w as usize, g.into_raw())
        }
        other => Err(Error::data(path, format!("expected 8-bit grayscale, found {:?}", other.color()))),
    }
}

pub fn write_png(path: &Path, slice: &Slice8) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    image::save_buffer(path, &slice.data, slice.width as u32, slice.height as u32, image::ExtendedColorType::L8)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn slice_file_name(index: usize) -> String {
    format!("slice_{index:04}.png")
}

fn parse_slice_index(name: &str) -> Option<usize> {
    let digits = name.strip_prefix("slice_")?.strip_suffix(".png")?;
    if digits.len() != 4 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

/// Subject-level class. `Cad` is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Cad,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Normal, Label::Cad];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Cad => "cad",
        }
    }

    /// 1 for the positive class, 0 otherwise.
    pub fn target(self) -> f32 {
        match self {
            Label::Normal => 0.0,
            Label::Cad => 1.0,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Cad
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
            "normal" => Ok(Label::Normal),
            "cad" => Ok(Label::Cad),
            other => Err(Error::invalid(format!("unknown label `{other}` (expected normal or cad)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
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
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}` (expected train, val or test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub label: Label,
    /// Slice files in index order.
    pub slices: Vec<PathBuf>,
}

impl SubjectRecord {
    pub fn slice_count(&self) -> usize {
        self.slices.len()
    }
}

/// Subjects per class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub normal: usize,
    pub cad: usize,
}

impl ClassCounts {
    pub fn new(normal: usize, cad: usize) -> Self {
        ClassCounts { normal, cad }
    }

    pub fn get(&self, label: Label) -> usize {
        match label {
            Label::Normal => self.normal,
            Label::Cad => self.cad,
        }
    }

    fn bump(&mut self, label: Label) {
        match label {
            Label::Normal => self.normal += 1,
            Label::Cad => self.cad += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.normal + self.cad
    }
}

/// Requested subjects per split and class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPlan {
    pub train: ClassCounts,
    pub val: ClassCounts,
    pub test: ClassCounts,
}

impl SplitPlan {
    /// Equal class counts in every split.
    pub fn balanced(train: usize, val: usize, test: usize) -> Self {
        SplitPlan {
            train: ClassCounts::new(train, train),
            val: ClassCounts::new(val, val),
            test: ClassCounts::new(test, test),
        }
    }

    pub fn get(&self, split: Split) -> ClassCounts {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: PathBuf,
    /// Sorted by subject id.
    pub subjects: Vec<SubjectRecord>,
    /// Split of every subject, once assigned.
    pub assignment: BTreeMap<String, Split>,
    pub split_seed: Option<u64>,
}

impl DatasetManifest {
    pub fn subject(&self, id: &str) -> Option<&SubjectRecord> {
        self.subjects.iter().find(|s| s.id == id)
    }

    pub fn class_counts(&self) -> ClassCounts {
        let mut c = ClassCounts::default();
        for s in &self.subjects {
            c.bump(s.label);
        }
        c
    }

    /// Subjects of one split in id order.
    pub fn subjects_in(&self, split: Split) -> Vec<&SubjectRecord> {
        self.subjects.iter().filter(|s| self.assignment.get(&s.id) == Some(&split)).collect()
    }

    pub fn split_counts(&self, split: Split) -> ClassCounts {
        let mut c = ClassCounts::default();
        for s in self.subjects_in(split) {
            c.bump(s.label);
        }
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::data(path, e.to_string()))
    }
}

#[derive(Debug, Deserialize)]
struct LabelRow {
    subject_id: String,
    label: String,
}

/// Reads `labels.csv` and enumerates every subject's slice files.
pub fn load_dataset(root: &Path) -> Result<DatasetManifest> {
    let labels_path = root.join(LABELS_FILE);
    let mut reader = csv::Reader::from_path(&labels_path).map_err(|e| Error::data(&labels_path, e.to_string()))?;
    let headers = reader.headers().map_err(|e| Error::data(&labels_path, e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != ["subject_id", "label"] {
        return Err(Error::data(&labels_path, format!("header must be `subject_id,label`, found `{}`", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let mut subjects = Vec::new();
    for (i, row) in reader.deserialize::<LabelRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::data(&labels_path, format!("line {line}: {e}")))?;
        let label: Label =
            row.label.parse().map_err(|e: Error| Error::data(&labels_path, format!("line {line}: {e}")))?;
        if subjects.iter().any(|s: &SubjectRecord| s.id == row.subject_id) {
            return Err(Error::data(&labels_path, format!("line {line}: duplicate subject `{}`", row.subject_id)));
        }
        let dir = root.join(SUBJECTS_DIR).join(&row.subject_id);
        let slices = list_slices(&dir)?;
        subjects.push(SubjectRecord { id: row.subject_id, label, slices });
    }
    subjects.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(DatasetManifest { source: root.to_path_buf(), subjects, assignment: BTreeMap::new(), split_seed: None })
}

fn list_slices(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut indexed = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        match parse_slice_index(&name) {
            Some(i) => indexed.push((i, entry.path())),
            None => return Err(Error::data(entry.path(), "slice files must be named slice_####.png")),
        }
    }
    if indexed.is_empty() {
        return Err(Error::data(dir, "subject has no slices"));
    }
    indexed.sort();
    Ok(indexed.into_iter().map(|(_, p)| p).collect())
}

/// Loads every slice of a subject, checking that all share one size.
pub fn load_volume(record: &SubjectRecord) -> Result<Vec<Slice8>> {
    let slices = record.slices.iter().map(|p| read_png(p)).collect::<Result<Vec<_>>>()?;
    if let Some((i, s)) = slices.iter().enumerate().find(|(_, s)| s.height != slices[0].height || s.width != slices[0].width) {
        return Err(Error::data(&record.slices[i], format!("slice is {}x{}, expected {}x{}", s.height, s.width, slices[0].height, slices[0].width)));
    }
    Ok(slices)
}

/// Per-class seeded shuffle followed by contiguous train / val / test assignment.
pub fn split_dataset(manifest: &DatasetManifest, plan: &SplitPlan, seed: u64) -> Result<DatasetManifest> {
    let mut assignment = BTreeMap::new();
    for (k, label) in Label::ALL.into_iter().enumerate() {
        let mut ids: Vec<&str> = manifest.subjects.iter().filter(|s| s.label == label).map(|s| s.id.as_str()).collect();
        let wanted: usize = Split::ALL.iter().map(|&s| plan.get(s).get(label)).sum();
        if wanted != ids.len() {
            return Err(Error::Config(format!(
                "split plan asks for {wanted} {label} subjects, dataset has {}",
                ids.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        ids.shuffle(&mut rng);
        let mut it = ids.into_iter();
        for split in Split::ALL {
            for id in it.by_ref().take(plan.get(split).get(label)) {
                assignment.insert(id.to_string(), split);
            }
        }
    }
    Ok(DatasetManifest { assignment, split_seed: Some(seed), ..manifest.clone() })
}

/// One slice with its subject's label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceSample {
    pub subject_id: String,
    pub slice_index: usize,
    pub path: PathBuf,
    pub label: Label,
}

/// Every slice of every subject in `split`, labeled with the subject label.
pub fn make_slice_samples(manifest: &DatasetManifest, split: Split) -> Vec<SliceSample> {
    manifest
        .subjects_in(split)
        .into_iter()
        .flat_map(|s| {
            s.slices.iter().enumerate().map(move |(i, p)| SliceSample {
                subject_id: s.id.clone(),
                slice_index: i,
                path: p.clone(),
                label: s.label,
            })
        })
        .collect()
}

/// Preprocessing targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    /// In-plane size `[height, width]` after resizing.
    pub size: [usize; 2],
    /// Slice count after resampling; `None` keeps the original count.
    pub slices: Option<usize>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { size: [64, 64], slices: Some(64) }
    }
}

/// Stretch, resize and resample one volume.
pub fn preprocess_volume(volume: &[Slice8], config: &PreprocessConfig) -> Result<Vec<Slice8>> {
    let [h, w] = config.size;
    let planes = volume
        .iter()
        .map(|s| resize_bilinear(&stretch_slice(s).slice, h, w))
        .collect::<Result<Vec<_>>>()?;
    match config.slices {
        Some(n) => Ok(resample_slices(&planes, n)?.slices),
        None => Ok(planes),
    }
}

/// Writes the preprocessed mirror of a dataset under `out`.
pub fn preprocess_dataset(manifest: &DatasetManifest, out: &Path, config: &PreprocessConfig) -> Result<DatasetManifest> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut labels = String::from("subject_id,label\n");
    for s in &manifest.subjects {
        let vol = preprocess_volume(&load_volume(s)?, config)?;
        let dir = out.join(SUBJECTS_DIR).join(&s.id);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for (i, slice) in vol.iter().enumerate() {
            write_png(&dir.join(slice_file_name(i)), slice)?;
        }
        labels.push_str(&format!("{},{}\n", s.id, s.label));
    }
    let lp = out.join(LABELS_FILE);
    fs::write(&lp, labels).map_err(|e| Error::io(&lp, e))?;
    let mut m = load_dataset(out)?;
    m.assignment = manifest.assignment.clone();
    m.split_seed = manifest.split_seed;
    Ok(m)
}

/// Model input for a volume: `[1, D, H, W]` with intensities scaled to `[0, 1]`.
pub fn volume_tensor(volume: &[Slice8]) -> Result<Tensor<f32>> {
    let first = volume.first().ok_or_else(|| Error::invalid("empty volume"))?;
    let mut data = Vec::with_capacity(volume.len() * first.data.len());
    for s in volume {
        if s.height != first.height || s.width != first.width {
            return Err(Error::shape("volume slices differ in size"));
        }
        data.extend(s.data.iter().map(|&v| v as f32 / 255.0));
    }
    Tensor::new(&[1, volume.len(), first.height, first.width], data)
}

/// Model input for a slice: `[1, H, W]` scaled to `[0, 1]`.
pub fn slice_tensor(slice: &Slice8) -> Tensor<f32> {
    Tensor::new(&[1, slice.height, slice.width], slice.data.iter().map(|&v| v as f32 / 255.0).collect())
        .expect("slice dims are nonzero")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stretch_closed_form() {
        let v = [100.0, 228.0, 164.0, 100.0];
        let s = histogram_stretch(2, 2, &v).unwrap();
        assert_eq!(s.slice.data, vec![0, 255, 128, 0]);
        assert!(!s.constant_input);
    }

    #[test]
    fn constant_slice_is_flagged() {
        let s = histogram_stretch(1, 3, &[77.0; 3]).unwrap();
        assert!(s.constant_input);
        assert_eq!(s.slice.data, vec![0; 3]);
    }

    #[test]
    fn bilinear_center_sample() {
        let s = Slice8::new(2, 2, vec![0, 2, 4, 6]).unwrap();
        assert_eq!(resize_bilinear(&s, 1, 1).unwrap().data, vec![3]);
        assert_eq!(resize_bilinear(&s, 2, 2).unwrap(), s);
    }

    #[test]
    fn two_slice_ramp() {
        let vol = vec![Slice8::filled(1, 1, 0), Slice8::filled(1, 1, 255)];
        let out = resample_slices(&vol, 4).unwrap();
        let v: Vec<u8> = out.slices.iter().map(|s| s.data[0]).collect();
        // sample positions -0.25, 0.25, 0.75, 1.25 clamped to [0, 1]
        assert_eq!(v, vec![0, 64, 191, 255]);
    }

    #[test]
    fn single_slice_replicates() {
        let out = resample_slices(&[Slice8::filled(2, 2, 9)], 3).unwrap();
        assert!(out.replicated);
        assert_eq!(out.slices.len(), 3);
    }

    #[test]
    fn slice_names() {
        assert_eq!(parse_slice_index("slice_0012.png"), Some(12));
        assert_eq!(parse_slice_index("slice_12.png"), None);
        assert_eq!(slice_file_name(7), "slice_0007.png");
    }
}
