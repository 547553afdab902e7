//! Samples, the on-disk container, synthetic phantoms and external import.
//!
//! A sample `<id>` is three files: `<id>.img` (f32 little-endian, row-major),
//! `<id>.lbl` (u8) and `<id>.json` (dtype, shape, vocabulary, version). A
//! dataset directory lists its cases in `dataset.json`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::{organ_class, NUM_CLASSES, ORGANS};

pub const FORMAT_VERSION: u32 = 1;
pub const DATASET_FILE: &str = "dataset.json";
/// Accepted band for the mean per-organ area fraction of generated phantoms.
pub const AREA_BAND: (f64, f64) = (0.02, 0.20);

#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    /// Intensities in `[0, 1]`.
    pub image: Array2<f32>,
    pub label: Array2<u8>,
    pub organs_present: Vec<String>,
    pub case_id: String,
}

impl SegSample {
    pub fn new(image: Array2<f32>, label: Array2<u8>, case_id: impl Into<String>) -> Result<Self> {
        let case_id = case_id.into();
        ensure!(
            image.dim() == label.dim(),
            Error::Validation(format!("{case_id}: image {:?} and label {:?} differ in shape", image.dim(), label.dim()))
        );
        if let Some(v) = image.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("{case_id}: intensity {v} outside [0, 1]")));
        }
        if let Some(&v) = label.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::Validation(format!(
                "{case_id}: label value {v} is not a valid class (vocabulary has {NUM_CLASSES})"
            )));
        }
        let mut present = [false; NUM_CLASSES];
        label.iter().for_each(|&v| present[v as usize] = true);
        let organs_present = ORGANS.iter().enumerate().filter(|(i, _)| present[i + 1]).map(|(_, o)| o.to_string()).collect();
        Ok(Self { image, label, organs_present, case_id })
    }

    pub fn size(&self) -> (usize, usize) {
        self.image.dim()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub version: u32,
    pub case_id: String,
    pub image_dtype: String,
    pub label_dtype: String,
    pub shape: [usize; 2],
    pub classes: Vec<String>,
    pub organs_present: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub version: u32,
    pub source: String,
    pub seed: Option<u64>,
    pub cases: Vec<String>,
}

pub fn class_vocabulary() -> Vec<String> {
    std::iter::once("background").chain(ORGANS).map(String::from).collect()
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::load(path, e.to_string()))
}

pub fn save_sample(dir: &Path, sample: &SegSample) -> Result<()> {
    let (h, w) = sample.size();
    let stem = dir.join(&sample.case_id);
    let mut img = Vec::with_capacity(h * w * 4);
    sample.image.iter().for_each(|v| img.extend_from_slice(&v.to_le_bytes()));
    write(&stem.with_extension("img"), &img)?;
    write(&stem.with_extension("lbl"), &sample.label.iter().copied().collect::<Vec<u8>>())?;
    let side = Sidecar {
        version: FORMAT_VERSION,
        case_id: sample.case_id.clone(),
        image_dtype: "f32".into(),
        label_dtype: "u8".into(),
        shape: [h, w],
        classes: class_vocabulary(),
        organs_present: sample.organs_present.clone(),
    };
    write(&stem.with_extension("json"), serde_json::to_string_pretty(&side)?.as_bytes())
}

/// Reads `<dir>/<case_id>.{json,img,lbl}`. Any malformed file is a load error
/// naming it; content violations are validation errors.
pub fn load_sample(dir: &Path, case_id: &str) -> Result<SegSample> {
    let stem = dir.join(case_id);
    let side_path = stem.with_extension("json");
    let side: Sidecar =
        serde_json::from_slice(&read(&side_path)?).map_err(|e| Error::load(&side_path, format!("bad sidecar: {e}")))?;
    ensure!(
        side.version == FORMAT_VERSION,
        Error::load(&side_path, format!("unsupported format version {}", side.version))
    );
    ensure!(
        side.image_dtype == "f32" && side.label_dtype == "u8",
        Error::load(&side_path, format!("unsupported dtypes {}/{}", side.image_dtype, side.label_dtype))
    );
    ensure!(
        side.classes == class_vocabulary(),
        Error::Validation(format!("{case_id}: class vocabulary {:?} differs from {:?}", side.classes, class_vocabulary()))
    );
    let [h, w] = side.shape;
    let img_path = stem.with_extension("img");
    let bytes = read(&img_path)?;
    ensure!(
        bytes.len() == h * w * 4,
        Error::load(&img_path, format!("expected {} bytes for {h}x{w} f32, found {}", h * w * 4, bytes.len()))
    );
    let pixels = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let lbl_path = stem.with_extension("lbl");
    let labels = read(&lbl_path)?;
    ensure!(
        labels.len() == h * w,
        Error::load(&lbl_path, format!("expected {} bytes for {h}x{w} u8, found {}", h * w, labels.len()))
    );
    let image = Array2::from_shape_vec((h, w), pixels).expect("length checked");
    let label = Array2::from_shape_vec((h, w), labels).expect("length checked");
    SegSample::new(image, label, case_id)
}

pub fn save_dataset(dir: &Path, samples: &[SegSample], source: &str, seed: Option<u64>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in samples {
        save_sample(dir, s)?;
    }
    let index = DatasetIndex {
        version: FORMAT_VERSION,
        source: source.into(),
        seed,
        cases: samples.iter().map(|s| s.case_id.clone()).collect(),
    };
    write(&dir.join(DATASET_FILE), serde_json::to_string_pretty(&index)?.as_bytes())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<SegSample>> {
    let path = dir.join(DATASET_FILE);
    let index: DatasetIndex =
        serde_json::from_slice(&read(&path)?).map_err(|e| Error::load(&path, format!("bad dataset index: {e}")))?;
    ensure!(!index.cases.is_empty(), Error::load(&path, "dataset lists no cases"));
    index.cases.iter().map(|c| load_sample(dir, c)).collect()
}

struct OrganShape {
    center: (f64, f64),
    radii: (f64, f64),
    intensity: f64,
    /// Spatial frequency of the texture pattern, cycles per 100 px.
    texture: f64,
}

/// Rough axial-slice layout on a unit square (x right, y down).
fn organ_shape(organ: &str) -> OrganShape {
    let (center, radii, intensity, texture) = match organ {
        "spleen" => ((0.76, 0.36), (0.10, 0.13), 0.49, 3.0),
        "kidney_r" => ((0.28, 0.62), (0.08, 0.11), 0.77, 5.0),
        "kidney_l" => ((0.72, 0.63), (0.08, 0.11), 0.70, 4.0),
        "gallbladder" => ((0.36, 0.44), (0.07, 0.08), 0.35, 1.5),
        "liver" => ((0.30, 0.30), (0.17, 0.14), 0.63, 2.0),
        "stomach" => ((0.58, 0.27), (0.12, 0.09), 0.42, 6.0),
        "aorta" => ((0.50, 0.60), (0.06, 0.06), 0.90, 1.0),
        "pancreas" => ((0.52, 0.45), (0.13, 0.05), 0.56, 7.0),
        _ => unreachable!("validated organ"),
    };
    OrganShape { center, radii, intensity, texture }
}

/// Painting order: large organs first so small ones stay visible.
const PAINT_ORDER: [&str; 8] = ["liver", "spleen", "stomach", "kidney_r", "kidney_l", "pancreas", "gallbladder", "aorta"];

/// One phantom slice. Each organ is a rotated ellipse whose radius is
/// perturbed by two low-order harmonics; labels are painted from the same masks.
pub fn phantom(rng: &mut impl Rng, size: usize, organs: &[&str], case_id: &str) -> Result<SegSample> {
    for o in organs {
        organ_class(o)?;
    }
    let s = size as f64;
    let noise = Normal::new(0.0, 0.02).expect("std");
    let mut image = Array2::<f64>::zeros((size, size));
    let mut label = Array2::<u8>::zeros((size, size));
    let body = (0.46 + rng.random_range(-0.02..0.02), 0.40 + rng.random_range(-0.02..0.02));
    for ((y, x), v) in image.indexed_iter_mut() {
        let (u, w) = ((x as f64 + 0.5) / s - 0.5, (y as f64 + 0.5) / s - 0.5);
        if (u / body.0).powi(2) + (w / body.1).powi(2) <= 1.0 {
            *v = 0.22;
        }
    }
    for organ in PAINT_ORDER.iter().filter(|o| organs.contains(o)) {
        let shape = organ_shape(organ);
        let class = organ_class(organ)? as u8;
        let cx = (shape.center.0 + rng.random_range(-0.035..0.035)) * s;
        let cy = (shape.center.1 + rng.random_range(-0.035..0.035)) * s;
        let rx = shape.radii.0 * rng.random_range(0.85..1.15) * s;
        let ry = shape.radii.1 * rng.random_range(0.85..1.15) * s;
        let rot = rng.random_range(-0.4..0.4);
        let harmonics = [(2.0, rng.random_range(0.0..0.08), rng.random_range(0.0..2.0 * PI)), (3.0, rng.random_range(0.0..0.06), rng.random_range(0.0..2.0 * PI))];
        let phase = rng.random_range(0.0..2.0 * PI);
        let (sin_r, cos_r) = f64::sin_cos(rot);
        let reach = rx.max(ry) * 1.2;
        let (y0, y1) = (((cy - reach).floor().max(0.0)) as usize, ((cy + reach).ceil().min(s - 1.0)) as usize);
        let (x0, x1) = (((cx - reach).floor().max(0.0)) as usize, ((cx + reach).ceil().min(s - 1.0)) as usize);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let (u, v) = (dx * cos_r + dy * sin_r, -dx * sin_r + dy * cos_r);
                let theta = v.atan2(u);
                let bump: f64 = harmonics.iter().map(|(k, a, p)| a * (k * theta + p).sin()).sum();
                let r = ((u / rx).powi(2) + (v / ry).powi(2)).sqrt();
                if r <= 1.0 + bump {
                    let f = shape.texture * 2.0 * PI / 100.0;
                    let tex = 0.03 * ((f * x as f64 + phase).sin() * (f * y as f64).cos());
                    image[[y, x]] = shape.intensity + tex;
                    label[[y, x]] = class;
                }
            }
        }
    }
    let image = image.mapv(|v| (v + noise.sample(rng)).clamp(0.0, 1.0) as f32);
    SegSample::new(image, label, case_id)
}

/// `n_cases` phantoms; case `i` draws from its own stream of the seed.
pub fn gen_synthetic(seed: u64, n_cases: usize, organs: &[&str], size: usize) -> Result<Vec<SegSample>> {
    ensure!(n_cases >= 1, Error::Argument("n_cases must be at least 1".into()));
    ensure!(size >= 16, Error::Argument(format!("phantom size {size} is too small")));
    (0..n_cases)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            phantom(&mut rng, size, organs, &format!("case{i:04}"))
        })
        .collect()
}

/// Mean over (sample, present organ) of the organ's pixel fraction.
pub fn mean_area_fraction(samples: &[SegSample]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for s in samples {
        let total = s.label.len() as f64;
        let mut counts = [0usize; NUM_CLASSES];
        s.label.iter().for_each(|&v| counts[v as usize] += 1);
        for &c in counts.iter().skip(1).filter(|&&c| c > 0) {
            sum += c as f64 / total;
            n += 1;
        }
    }
    if n == 0 { 0.0 } else { sum / n as f64 }
}

/// Random rotation within ±`max_deg` (nearest neighbour for both arrays, so
/// labels stay exact) and independent horizontal / vertical flips.
pub fn augment(sample: &SegSample, rng: &mut impl Rng, max_deg: f64) -> SegSample {
    let (h, w) = sample.size();
    let angle = rng.random_range(-max_deg..=max_deg).to_radians();
    let (flip_x, flip_y) = (rng.random_bool(0.5), rng.random_bool(0.5));
    let (sin, cos) = angle.sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut image = Array2::zeros((h, w));
    let mut label = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = (cos * dx + sin * dy + cx).round();
            let sy = (-sin * dx + cos * dy + cy).round();
            if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
                continue;
            }
            let (mut sx, mut sy) = (sx as usize, sy as usize);
            if flip_x {
                sx = w - 1 - sx;
            }
            if flip_y {
                sy = h - 1 - sy;
            }
            image[[y, x]] = sample.image[[sy, sx]];
            label[[y, x]] = sample.label[[sy, sx]];
        }
    }
    SegSample::new(image, label, sample.case_id.clone()).expect("augmentation preserves validity")
}

/// Label id in the common preprocessed abdominal CT release → our class id.
/// That release orders: 1 aorta, 2 gallbladder, 3 kidney_l, 4 kidney_r,
/// 5 liver, 6 pancreas, 7 spleen, 8 stomach.
pub const EXTERNAL_LABEL_MAP: [(u8, &str); 8] = [
    (1, "aorta"),
    (2, "gallbladder"),
    (3, "kidney_l"),
    (4, "kidney_r"),
    (5, "liver"),
    (6, "pancreas"),
    (7, "spleen"),
    (8, "stomach"),
];

pub fn map_external_label(v: u8) -> Result<u8> {
    if v == 0 {
        return Ok(0);
    }
    let organ = EXTERNAL_LABEL_MAP
        .iter()
        .find(|(k, _)| *k == v)
        .map(|(_, o)| *o)
        .ok_or_else(|| Error::Validation(format!("external label value {v} has no mapping")))?;
    Ok(organ_class(organ)? as u8)
}

/// Min-max scales to `[0, 1]` when any value lies outside it. A constant slice becomes zeros.
pub fn normalize_intensity(image: &Array2<f32>) -> Array2<f32> {
    if image.iter().all(|v| (0.0..=1.0).contains(v)) {
        return image.clone();
    }
    let lo = image.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = image.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if hi > lo { image.mapv(|v| (v - lo) / (hi - lo)) } else { Array2::zeros(image.raw_dim()) }
}

/// Bilinear resize for images and nearest-neighbour for labels.
pub fn resize_pair(image: &Array2<f32>, label: &Array2<u8>, size: usize) -> (Array2<f32>, Array2<u8>) {
    let (h, w) = image.dim();
    if (h, w) == (size, size) {
        return (image.clone(), label.clone());
    }
    let src = |i: usize, n: usize| ((i as f64 + 0.5) * n as f64 / size as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let img = Array2::from_shape_fn((size, size), |(y, x)| {
        let (sy, sx) = (src(y, h), src(x, w));
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
        let top = image[[y0, x0]] * (1.0 - fx) + image[[y0, x1]] * fx;
        let bot = image[[y1, x0]] * (1.0 - fx) + image[[y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    });
    let lbl = Array2::from_shape_fn((size, size), |(y, x)| {
        let sy = ((y * h) / size).min(h - 1);
        let sx = ((x * w) / size).min(w - 1);
        label[[sy, sx]]
    });
    (img, lbl)
}

/// Reads every `*.npz` slice in `dir` (arrays `image` and `label`), remaps the
/// labels, normalizes and resizes to `size`, and writes a dataset to `out`.
#[cfg(feature = "npz-import")]
pub fn import_external(dir: &Path, out: &Path, size: usize) -> Result<Vec<SegSample>> {
    use ndarray_npy::NpzReader;

    let mut files: Vec<std::path::PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "npz"))
        .collect();
    files.sort();
    ensure!(!files.is_empty(), Error::load(dir, "no .npz slices found"));
    let mut samples = Vec::with_capacity(files.len());
    for path in &files {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut npz = NpzReader::new(file).map_err(|e| Error::load(path, e.to_string()))?;
        let image: Array2<f32> = read_npz_f32(&mut npz, "image").map_err(|e| Error::load(path, e))?;
        let raw: Array2<f32> = read_npz_f32(&mut npz, "label").map_err(|e| Error::load(path, e))?;
        ensure!(
            image.dim() == raw.dim(),
            Error::Validation(format!("{}: image {:?} vs label {:?}", path.display(), image.dim(), raw.dim()))
        );
        let mut label = Array2::zeros(raw.raw_dim());
        for (dst, &v) in label.iter_mut().zip(&raw) {
            ensure!(
                v >= 0.0 && v.fract() == 0.0 && v < 256.0,
                Error::Validation(format!("{}: label value {v} is not a class id", path.display()))
            );
            *dst = map_external_label(v as u8)?;
        }
        let (image, label) = resize_pair(&normalize_intensity(&image), &label, size);
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("slice").to_string();
        samples.push(SegSample::new(image, label, id)?);
    }
    save_dataset(out, &samples, &format!("import:{}", dir.display()), None)?;
    Ok(samples)
}

#[cfg(feature = "npz-import")]
fn read_npz_f32<R: std::io::Read + std::io::Seek>(
    npz: &mut ndarray_npy::NpzReader<R>,
    name: &str,
) -> std::result::Result<Array2<f32>, String> {
    let key = format!("{name}.npy");
    if let Ok(a) = npz.by_name::<ndarray::OwnedRepr<f32>, ndarray::Ix2>(&key) {
        return Ok(a);
    }
    if let Ok(a) = npz.by_name::<ndarray::OwnedRepr<f64>, ndarray::Ix2>(&key) {
        return Ok(a.mapv(|v| v as f32));
    }
    if let Ok(a) = npz.by_name::<ndarray::OwnedRepr<u8>, ndarray::Ix2>(&key) {
        return Ok(a.mapv(f32::from));
    }
    Err(format!("array `{name}` missing or not a 2-D f32/f64/u8 array"))
}
