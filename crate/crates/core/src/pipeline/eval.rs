//! Evaluation reports, inference and heatmap / mask image I/O.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayD, Axis};

use super::data::{resize_pair, SegSample};
use super::model::PgSeg;
use super::train::stack_images;
use crate::autodiff::Real;
use crate::error::{ensure, Error, Result};
use crate::losses_metrics::{evaluate_case, summarize, write_csv, MetricReport, MetricSummary};
use crate::nn::ParamStore;
use crate::NUM_CLASSES;

pub const REPORT_CSV: &str = "metrics.csv";
pub const SUMMARY_JSON: &str = "summary.json";

/// Where predictions come from. `Injected` bypasses the model (oracle hook).
pub enum Predictor<'a, T: Real> {
    Model { model: &'a PgSeg, store: &'a ParamStore<T>, batch: usize },
    Injected(&'a dyn Fn(&SegSample) -> Array2<u8>),
}

pub fn check_compatible(model: &PgSeg, samples: &[SegSample]) -> Result<()> {
    ensure!(
        model.config.classes == NUM_CLASSES,
        Error::Config(format!("checkpoint predicts {} classes, datasets use {NUM_CLASSES}", model.config.classes))
    );
    let n = model.config.image_size();
    for s in samples {
        ensure!(
            s.size() == (n, n),
            Error::Shape(format!("case {} is {:?}, checkpoint expects {n}x{n}", s.case_id, s.size()))
        );
    }
    Ok(())
}

/// Per-case reports (in dataset order) and the summary table.
pub fn evaluate<T: Real>(predictor: &Predictor<'_, T>, samples: &[SegSample]) -> Result<(Vec<MetricReport>, MetricSummary)> {
    ensure!(!samples.is_empty(), Error::Argument("nothing to evaluate".into()));
    let mut reports = Vec::with_capacity(samples.len());
    match predictor {
        Predictor::Model { model, store, batch } => {
            check_compatible(model, samples)?;
            for chunk in samples.chunks((*batch).max(1)) {
                let refs: Vec<&SegSample> = chunk.iter().collect();
                let images = stack_images(&refs).mapv(|v| T::lit(v as f64));
                let pred = model.predict(*store, &images)?;
                for (i, s) in chunk.iter().enumerate() {
                    reports.push(evaluate_case(&s.case_id, pred.labels.index_axis(Axis(0), i), s.label.view())?);
                }
            }
        }
        Predictor::Injected(f) => {
            for s in samples {
                let p = f(s);
                ensure!(p.dim() == s.size(), Error::Shape(format!("injected mask for {} has shape {:?}", s.case_id, p.dim())));
                ensure!(
                    p.iter().all(|&v| (v as usize) < NUM_CLASSES),
                    Error::Config(format!("injected mask for {} uses more than {NUM_CLASSES} classes", s.case_id))
                );
                reports.push(evaluate_case(&s.case_id, p.view(), s.label.view())?);
            }
        }
    }
    let summary = summarize(&reports)?;
    Ok((reports, summary))
}

/// Writes `metrics.csv` (one row per case per organ) and `summary.json`.
pub fn write_reports(dir: &Path, reports: &[MetricReport], summary: &MetricSummary) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(REPORT_CSV);
    let f = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    write_csv(reports, f)?;
    let json_path = dir.join(SUMMARY_JSON);
    fs::write(&json_path, serde_json::to_string_pretty(summary)?).map_err(|e| Error::io(&json_path, e))
}

/// Label map and, on request, the guide heatmap for one `(S, S)` image.
pub fn infer<T: Real>(
    model: &PgSeg,
    store: &ParamStore<T>,
    image: &Array2<f32>,
    emit_heatmap: bool,
) -> Result<(Array2<u8>, Option<Array2<u8>>)> {
    let n = model.config.image_size();
    ensure!(
        image.dim() == (n, n),
        Error::Shape(format!("image is {:?}, model expects {n}x{n}", image.dim()))
    );
    let x: ArrayD<T> = image.mapv(|v| T::lit(v as f64)).into_shape_with_order((1, 1, n, n)).expect("image").into_dyn();
    let pred = model.predict(store, &x)?;
    let labels = pred.labels.index_axis(Axis(0), 0).to_owned();
    let heat = if emit_heatmap {
        let guide = pred
            .guide
            .ok_or_else(|| Error::Config("this model was built without the prior, so it has no guide matrix".into()))?;
        Some(guide_heatmap(&guide, n)?)
    } else {
        None
    };
    Ok((labels, heat))
}

/// Channel mean of `|G|` for the first batch item, resized to `size` and
/// min-max scaled to 0..=255. A constant map gives all zeros.
pub fn guide_heatmap<T: Real>(guide: &ArrayD<T>, size: usize) -> Result<Array2<u8>> {
    ensure!(guide.ndim() == 4, Error::Shape(format!("guide must be (B, C, h, w), got {:?}", guide.shape())));
    let g = guide.index_axis(Axis(0), 0);
    let energy = g.mapv(|v| v.abs().as_f64() as f32).mean_axis(Axis(0)).expect("channels");
    let energy = energy.into_dimensionality::<ndarray::Ix2>().expect("2-D");
    let dummy = Array2::zeros(energy.raw_dim());
    let (big, _) = resize_pair(&energy, &dummy, size);
    Ok(min_max_u8(&big))
}

pub fn min_max_u8(a: &Array2<f32>) -> Array2<u8> {
    let lo = a.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = a.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(hi > lo) {
        return Array2::zeros(a.raw_dim());
    }
    a.mapv(|v| (((v - lo) / (hi - lo)) * 255.0).round().clamp(0.0, 255.0) as u8)
}

pub fn write_png(path: &Path, img: &Array2<u8>) -> Result<()> {
    let (h, w) = img.dim();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::load(path, e.to_string());
    let mut writer = enc.write_header().map_err(png_err)?;
    let data: Vec<u8> = img.iter().copied().collect();
    writer.write_image_data(&data).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Reads an 8-bit grayscale PNG.
pub fn read_png(path: &Path) -> Result<Array2<u8>> {
    let file = fs::File::open(path).map_err(|e| Error::load(path, e.to_string()))?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(file))
        .read_info()
        .map_err(|e| Error::load(path, e.to_string()))?;
    let info = dec.info();
    ensure!(
        info.color_type == png::ColorType::Grayscale && info.bit_depth == png::BitDepth::Eight,
        Error::load(path, format!("expected 8-bit grayscale, found {:?} {:?}", info.color_type, info.bit_depth))
    );
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0; dec.output_buffer_size().ok_or_else(|| Error::load(path, "image too large"))?];
    let frame = dec.next_frame(&mut buf).map_err(|e| Error::load(path, e.to_string()))?;
    buf.truncate(frame.buffer_size());
    ensure!(buf.len() == w * h, Error::load(path, "unexpected row padding"));
    Ok(Array2::from_shape_vec((h, w), buf).expect("length checked"))
}
