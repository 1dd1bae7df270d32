//! Synthetic CTCA-like volumes with known labels, lesion boxes and masks.
//!
//! Each volume holds a noisy background, an ellipsoidal heart surrogate, a
//! bright tube (the vessel) that winds through every slice, and, for
//! abnormal subjects, hyperintense spheres centred on the tube. One pixel of
//! every slice is a full-scale calibration marker so the per-slice min-max
//! stretch keeps absolute contrast between slices with and without lesions.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{quantize, slice_file_name, write_png, Label, Slice8, LABELS_FILE, SUBJECTS_DIR};
use crate::error::{Error, Result};

pub const GROUND_TRUTH_DIR: &str = "ground_truth";
pub const MASKS_DIR: &str = "masks";
/// Mask PNG value of foreground voxels.
pub const MASK_ON: u8 = 255;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    /// `[depth, height, width]` in voxels.
    pub extent: [usize; 3],
    /// When set, each subject's slice count is drawn from this inclusive range.
    pub depth_range: Option<[usize; 2]>,
    pub background: f64,
    pub noise_std: f64,
    pub heart_intensity: f64,
    /// Heart semi-axes as fractions of the extents.
    pub heart_axes: [f64; 3],
    pub vessel_intensity: f64,
    pub vessel_radius: [f64; 2],
    /// Amplitude of the in-plane meander as a fraction of the in-plane extent.
    pub vessel_curvature: f64,
    /// Inclusive lesion count range for abnormal subjects.
    pub lesion_count: [usize; 2],
    /// In-plane lesion radius range.
    pub lesion_radius: [f64; 2],
    /// Depth semi-axis as a multiple of the in-plane radius; below 1 the
    /// lesion is a flattened ellipsoid covering fewer slices.
    pub lesion_axial_scale: f64,
    /// Added to the vessel intensity inside lesions.
    pub lesion_boost: f64,
    pub abnormal: bool,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            extent: [64, 64, 64],
            depth_range: None,
            background: 30.0,
            noise_std: 8.0,
            heart_intensity: 110.0,
            heart_axes: [0.3, 0.2, 0.2],
            vessel_intensity: 170.0,
            vessel_radius: [2.0, 3.0],
            vessel_curvature: 0.15,
            lesion_count: [1, 3],
            lesion_radius: [4.0, 6.0],
            lesion_axial_scale: 1.0,
            lesion_boost: 80.0,
            abnormal: false,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.extent.iter().any(|&e| e < 8) {
            return bad(format!("phantom extent {:?} must be at least 8 per axis", self.extent));
        }
        if let Some([lo, hi]) = self.depth_range {
            if lo < 8 || lo > hi {
                return bad(format!("depth range [{lo}, {hi}] is invalid"));
            }
        }
        if self.vessel_radius[0] <= 0.0 || self.vessel_radius[0] > self.vessel_radius[1] {
            return bad(format!("vessel radius range {:?} is invalid", self.vessel_radius));
        }
        if self.lesion_radius[0] <= 0.0 || self.lesion_radius[0] > self.lesion_radius[1] {
            return bad(format!("lesion radius range {:?} is invalid", self.lesion_radius));
        }
        if self.lesion_count[0] == 0 || self.lesion_count[0] > self.lesion_count[1] {
            return bad(format!("lesion count range {:?} must start at 1", self.lesion_count));
        }
        if !(self.lesion_axial_scale > 0.0 && self.lesion_axial_scale <= 1.0) {
            return bad(format!("lesion axial scale {} must lie in (0, 1]", self.lesion_axial_scale));
        }
        if self.noise_std < 0.0 || self.lesion_boost <= 0.0 {
            return bad("noise must be nonnegative and the lesion boost positive".into());
        }
        Ok(())
    }
}

/// Inclusive voxel bounding box, `[z, y, x]` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl BoundingBox {
    pub fn contains(&self, p: &[usize]) -> bool {
        (0..3).all(|d| p[d] >= self.min[d] && p[d] <= self.max[d])
    }

    /// Grows each side by `fraction` of the matching volume extent, clipped to the volume.
    pub fn dilate(&self, fraction: f64, extent: [usize; 3]) -> BoundingBox {
        let mut out = *self;
        for d in 0..3 {
            let m = (fraction * extent[d] as f64).round() as usize;
            out.min[d] = self.min[d].saturating_sub(m);
            out.max[d] = (self.max[d] + m).min(extent[d] - 1);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionRecord {
    /// `[z, y, x]` voxel coordinates.
    pub center: [f64; 3],
    /// In-plane radius.
    pub radius: f64,
    /// Depth semi-axis.
    pub axial_radius: f64,
    pub bbox: BoundingBox,
}

impl LesionRecord {
    /// Whether the `[z, y, x]` point lies inside the ellipsoid.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let [dz, dy, dx] = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        (dz / self.axial_radius).powi(2) + (dy * dy + dx * dx) / (self.radius * self.radius) <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomVolume {
    pub slices: Vec<Slice8>,
    /// Foreground (vessel, heart, lesions) per slice; `MASK_ON` or 0.
    pub mask: Vec<Slice8>,
    pub label: Label,
    pub lesions: Vec<LesionRecord>,
}

impl PhantomVolume {
    pub fn extent(&self) -> [usize; 3] {
        [self.slices.len(), self.slices[0].height, self.slices[0].width]
    }

    /// Indices of slices that intersect at least one lesion box.
    pub fn lesion_slices(&self) -> Vec<usize> {
        (0..self.slices.len())
            .filter(|&z| self.lesions.iter().any(|l| z >= l.bbox.min[0] && z <= l.bbox.max[0]))
            .collect()
    }
}

struct Tube {
    base: [f64; 2],
    amp: f64,
    freq: f64,
    phase: [f64; 2],
    radius: f64,
    depth: f64,
}

impl Tube {
    fn center(&self, z: f64) -> [f64; 2] {
        let t = std::f64::consts::TAU * self.freq * z / self.depth;
        [self.base[0] + self.amp * (t + self.phase[0]).sin(), self.base[1] + self.amp * (t + self.phase[1]).cos()]
    }
}

/// One phantom from its spec; identical specs give identical volumes.
pub fn gen_phantom_volume(spec: &PhantomSpec) -> Result<PhantomVolume> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let depth = match spec.depth_range {
        Some([lo, hi]) => rng.random_range(lo..=hi),
        None => spec.extent[0],
    };
    let [h, w] = [spec.extent[1], spec.extent[2]];
    let radius = rng.random_range(spec.vessel_radius[0]..=spec.vessel_radius[1]);
    let amp = spec.vessel_curvature * h.min(w) as f64;
    let margin = amp + spec.vessel_radius[1].max(spec.lesion_radius[1]) + 2.0;
    let mut base = [0.0; 2];
    for (d, &e) in [h, w].iter().enumerate() {
        let (lo, hi) = (margin, e as f64 - 1.0 - margin);
        if lo > hi {
            return Err(Error::Config(format!(
                "vessel meander {amp:.1} with radius {:.1} does not fit an in-plane extent of {e}",
                spec.vessel_radius[1]
            )));
        }
        base[d] = rng.random_range(lo..=hi);
    }
    let tube = Tube {
        base,
        amp,
        freq: rng.random_range(0.5..1.5),
        phase: [rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..std::f64::consts::TAU)],
        radius,
        depth: depth as f64,
    };
    let heart_c = [
        depth as f64 * rng.random_range(0.35..0.65),
        h as f64 * rng.random_range(0.3..0.7),
        w as f64 * rng.random_range(0.3..0.7),
    ];
    let heart_r = [
        spec.heart_axes[0] * depth as f64,
        spec.heart_axes[1] * h as f64,
        spec.heart_axes[2] * w as f64,
    ];

    let mut lesions = Vec::new();
    if spec.abnormal {
        let n = rng.random_range(spec.lesion_count[0]..=spec.lesion_count[1]);
        for _ in 0..n {
            let r = rng.random_range(spec.lesion_radius[0]..=spec.lesion_radius[1]);
            let rz = r * spec.lesion_axial_scale;
            let zlo = rz.ceil();
            let zhi = depth as f64 - 1.0 - rz.ceil();
            if zlo > zhi {
                return Err(Error::Config(format!("lesion depth radius {rz:.1} does not fit {depth} slices")));
            }
            let z = rng.random_range(zlo..=zhi).round();
            let [cy, cx] = tube.center(z);
            let lo = |c: f64, r: f64| (c - r).ceil().max(0.0) as usize;
            let hi = |c: f64, r: f64, e: usize| ((c + r).floor() as usize).min(e - 1);
            let bbox = BoundingBox {
                min: [lo(z, rz), lo(cy, r), lo(cx, r)],
                max: [hi(z, rz, depth), hi(cy, r, h), hi(cx, r, w)],
            };
            lesions.push(LesionRecord { center: [z, cy, cx], radius: r, axial_radius: rz, bbox });
        }
    }

    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("finite noise std");
    let mut slices = Vec::with_capacity(depth);
    let mut mask = Vec::with_capacity(depth);
    for z in 0..depth {
        let zf = z as f64;
        let [ty, tx] = tube.center(zf);
        let mut img = vec![0u8; h * w];
        let mut m = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                let (yf, xf) = (y as f64, x as f64);
                let mut v = spec.background;
                let mut fg = false;
                let e = ((zf - heart_c[0]) / heart_r[0]).powi(2)
                    + ((yf - heart_c[1]) / heart_r[1]).powi(2)
                    + ((xf - heart_c[2]) / heart_r[2]).powi(2);
                if e <= 1.0 {
                    v = spec.heart_intensity;
                    fg = true;
                }
                if (yf - ty).powi(2) + (xf - tx).powi(2) <= tube.radius.powi(2) {
                    v = spec.vessel_intensity;
                    fg = true;
                }
                for l in &lesions {
                    if l.contains([zf, yf, xf]) {
                        v = spec.vessel_intensity + spec.lesion_boost;
                        fg = true;
                    }
                }
                let n = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                img[y * w + x] = quantize((v + n).clamp(0.0, 255.0));
                m[y * w + x] = if fg { MASK_ON } else { 0 };
            }
        }
        img[0] = 255;
        m[0] = 0;
        slices.push(Slice8 { height: h, width: w, data: img });
        mask.push(Slice8 { height: h, width: w, data: m });
    }
    let label = if spec.abnormal { Label::Cad } else { Label::Normal };
    Ok(PhantomVolume { slices, mask, label, lesions })
}

/// Seed of subject `index` derived from the dataset seed.
pub fn subject_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.next_u64()
}

pub fn subject_id(index: usize) -> String {
    format!("ph{index:04}")
}

/// Ground truth of one subject as written to `ground_truth/<id>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub subject_id: String,
    pub label: Label,
    pub extent: [usize; 3],
    pub lesions: Vec<LesionRecord>,
}

/// Spec of subject `index` in a dataset: normals first, then abnormals.
pub fn subject_spec(template: &PhantomSpec, n_normal: usize, seed: u64, index: usize) -> PhantomSpec {
    PhantomSpec { abnormal: index >= n_normal, seed: subject_seed(seed, index), ..template.clone() }
}

/// Writes a loadable dataset plus `ground_truth/` sidecars and `masks/`.
pub fn gen_phantom_dataset(
    n_normal: usize,
    n_abnormal: usize,
    template: &PhantomSpec,
    seed: u64,
    out: &Path,
) -> Result<Vec<GroundTruth>> {
    if n_normal == 0 || n_abnormal == 0 {
        return Err(Error::Config("phantom datasets need at least one subject per class".into()));
    }
    template.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut labels = String::from("subject_id,label\n");
    let mut truths = Vec::new();
    for i in 0..n_normal + n_abnormal {
        let id = subject_id(i);
        let vol = gen_phantom_volume(&subject_spec(template, n_normal, seed, i))?;
        for (dir, planes) in [(out.join(SUBJECTS_DIR).join(&id), &vol.slices), (out.join(MASKS_DIR).join(&id), &vol.mask)] {
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            for (z, s) in planes.iter().enumerate() {
                write_png(&dir.join(slice_file_name(z)), s)?;
            }
        }
        let gt = GroundTruth { subject_id: id.clone(), label: vol.label, extent: vol.extent(), lesions: vol.lesions.clone() };
        let gp = ground_truth_path(out, &id);
        fs::create_dir_all(gp.parent().expect("has parent")).map_err(|e| Error::io(out, e))?;
        fs::write(&gp, serde_json::to_string_pretty(&gt)? + "\n").map_err(|e| Error::io(&gp, e))?;
        labels.push_str(&format!("{id},{}\n", vol.label));
        truths.push(gt);
    }
    let lp = out.join(LABELS_FILE);
    fs::write(&lp, labels).map_err(|e| Error::io(&lp, e))?;
    Ok(truths)
}

pub fn ground_truth_path(root: &Path, id: &str) -> PathBuf {
    root.join(GROUND_TRUTH_DIR).join(format!("{id}.json"))
}

pub fn load_ground_truth(root: &Path, id: &str) -> Result<GroundTruth> {
    let p = ground_truth_path(root, id);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::data(&p, e.to_string()))
}
