//! Applying predicted errors, baseline-versus-corrected evaluation, and the
//! feature ablation study.

use crate::error::{Error, Result};
use crate::groundtruth::ErrorImage;
use crate::image::{Image, Mask};
use crate::metrics::MetricsReport;
use crate::network::Model;
use crate::raster::{FeatureImageSet, FeatureKind};
use crate::train::{fine_tune, predict_errors, train, Sample, TrainConfig};

/// Corrected inverse depths at or below this are treated as invalid.
pub const MIN_INVERSE_DEPTH: f64 = 1e-6;

/// Evaluation batch size for inference.
const EVAL_BATCH: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Corrected {
    /// `i_cam - delta` where both are defined, `i_cam` elsewhere.
    pub inverse_depth: Image<f64>,
    /// `1 / inverse_depth` on `valid`, 0 elsewhere.
    pub depth: Image<f64>,
    /// Joint mask minus pixels whose corrected inverse depth is not positive.
    pub valid: Mask,
}

/// Subtracts the predicted error from the camera inverse depth.
pub fn correct(inverse_depth: &Image<f32>, coverage: &Mask, pred: &ErrorImage) -> Result<Corrected> {
    if !inverse_depth.same_size(coverage) || !inverse_depth.same_size(&pred.mask) {
        return Err(Error::Shape("correction inputs differ in size".into()));
    }
    let (w, h) = (inverse_depth.width(), inverse_depth.height());
    let mut inv = Vec::with_capacity(w * h);
    let mut depth = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for p in 0..w * h {
        let ic = inverse_depth.data()[p] as f64;
        let joint = coverage.data()[p] && pred.mask.data()[p];
        let i = if joint { ic - pred.delta.data()[p] } else { ic };
        let ok = joint && i > MIN_INVERSE_DEPTH;
        inv.push(i);
        depth.push(if ok { 1.0 / i } else { 0.0 });
        valid.push(ok);
    }
    Ok(Corrected {
        inverse_depth: Image::from_vec(w, h, 1, inv)?,
        depth: Image::from_vec(w, h, 1, depth)?,
        valid: Image::from_vec(w, h, 1, valid)?,
    })
}

/// Space in which RMSE is measured. The thresholded accuracy is the same in
/// both because depth ratios equal inverse-depth ratios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MetricSpace {
    #[default]
    InverseDepth,
    Depth,
}

impl MetricSpace {
    pub fn name(self) -> &'static str {
        match self {
            MetricSpace::InverseDepth => "inverse_depth",
            MetricSpace::Depth => "depth",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "inverse_depth" => Ok(MetricSpace::InverseDepth),
            "depth" => Ok(MetricSpace::Depth),
            _ => Err(Error::Config(format!("unknown metric space `{text}` (inverse_depth, depth)"))),
        }
    }
}

/// Pooled comparison data for a set of frames.
struct Pooled {
    baseline: Vec<f64>,
    corrected: Vec<f64>,
    reference: Vec<f64>,
    mask: Vec<bool>,
}

fn pool(samples: &[Sample], preds: &[ErrorImage]) -> Result<Pooled> {
    let mut p = Pooled {
        baseline: Vec::new(),
        corrected: Vec::new(),
        reference: Vec::new(),
        mask: Vec::new(),
    };
    for (s, pred) in samples.iter().zip(preds) {
        let c = correct(&s.features.inverse_depth, &s.features.mask, pred)?;
        let reference = s.reference_inverse_depth();
        for i in 0..reference.len() {
            let on = s.target.mask.data()[i];
            p.mask.push(on);
            p.baseline.push(s.features.inverse_depth.data()[i] as f64);
            // invalid corrections stay in the evaluated set and are clamped
            // so that they count as failures rather than being dropped
            p.corrected.push(c.inverse_depth.data()[i].max(MIN_INVERSE_DEPTH));
            p.reference.push(reference[i]);
        }
    }
    Ok(p)
}

fn report(label: &str, pred: &[f64], reference: &[f64], mask: &[bool], space: MetricSpace) -> Result<MetricsReport> {
    let mut r = MetricsReport::compute(label, pred, reference, mask)?;
    if space == MetricSpace::Depth {
        let inv = |v: &[f64]| v.iter().map(|x| 1.0 / x).collect::<Vec<_>>();
        r.rmse = crate::metrics::rmse(&inv(pred), &inv(reference), mask)?;
    }
    Ok(r)
}

/// Baseline (camera inverse depth) and corrected metrics against the
/// reference for given predictions, pooled over all frames on the joint
/// masks.
pub fn evaluate_predictions(
    samples: &[Sample],
    preds: &[ErrorImage],
    space: MetricSpace,
    label: &str,
) -> Result<(MetricsReport, MetricsReport)> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set is empty".into()));
    }
    if samples.len() != preds.len() {
        return Err(Error::Shape(format!("{} samples, {} predictions", samples.len(), preds.len())));
    }
    let p = pool(samples, preds)?;
    let base = report("baseline", &p.baseline, &p.reference, &p.mask, space)?;
    let corr = report(label, &p.corrected, &p.reference, &p.mask, space)?;
    Ok((base, corr))
}

/// Baseline and corrected metrics of `model` on `samples`.
pub fn evaluate(model: &Model<f32>, samples: &[Sample], space: MetricSpace) -> Result<(MetricsReport, MetricsReport)> {
    evaluate_disabled(model, samples, &[], space, "corrected")
}

fn evaluate_disabled(
    model: &Model<f32>,
    samples: &[Sample],
    disabled: &[FeatureKind],
    space: MetricSpace,
    label: &str,
) -> Result<(MetricsReport, MetricsReport)> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set is empty".into()));
    }
    let sets: Vec<&FeatureImageSet> = samples.iter().map(|s| &s.features).collect();
    let preds = predict_errors(model, &sets, disabled, EVAL_BATCH)?;
    evaluate_predictions(samples, &preds, space, label)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMode {
    /// Zero the disabled channels of the trained model at inference.
    Cheap,
    /// Retrain without the disabled features.
    Faithful,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub disabled: Vec<FeatureKind>,
    pub metrics: MetricsReport,
}

/// Features removed in the reduced-input rows.
pub const REDUCED_SET: [FeatureKind; 3] = [FeatureKind::Area, FeatureKind::ViewAngle, FeatureKind::EdgeRatio];

/// Per-feature ablation. Rows: the full model, one row per enabled feature
/// with that feature disabled, the reduced set, and (when `train_set` is
/// given) the reduced set after fine-tuning.
///
/// In [`AblationMode::Faithful`] every non-full row retrains from scratch
/// on `train_set`, which is then required.
pub fn ablation_study(
    model: &Model<f32>,
    eval_set: &[Sample],
    mode: AblationMode,
    train_set: Option<(&[Sample], &TrainConfig)>,
    space: MetricSpace,
) -> Result<Vec<AblationRow>> {
    let sel = model.selection();
    let mut configs: Vec<(String, Vec<FeatureKind>)> = vec![("full".into(), Vec::new())];
    for kind in sel.kinds() {
        configs.push((format!("no_{}", kind.name()), vec![kind]));
    }
    let reduced: Vec<FeatureKind> = REDUCED_SET.iter().copied().filter(|&k| sel.enabled(k)).collect();
    if !reduced.is_empty() && reduced.len() < sel.kinds().len() {
        configs.push(("no_area_view_angle_edge_ratio".into(), reduced.clone()));
    }

    let mut rows = Vec::new();
    for (label, disabled) in configs {
        let metrics = if disabled.is_empty() || mode == AblationMode::Cheap {
            evaluate_disabled(model, eval_set, &disabled, space, &label)?.1
        } else {
            let (data, cfg) = train_set
                .ok_or_else(|| Error::Config("faithful ablation needs a training set".into()))?;
            let mut s = sel;
            for &k in &disabled {
                s.set(k, false);
            }
            if s.validate().is_err() {
                continue;
            }
            let retrained = train(data, cfg, s, None)?;
            evaluate_disabled(&retrained.model, eval_set, &[], space, &label)?.1
        };
        rows.push(AblationRow {
            label,
            disabled,
            metrics,
        });
    }
    if let (Some((data, cfg)), false) = (train_set, reduced.is_empty() || reduced.len() == sel.kinds().len()) {
        let mut s = sel;
        for &k in &reduced {
            s.set(k, false);
        }
        let tuned = fine_tune(model, data, cfg, s)?;
        let label = "no_area_view_angle_edge_ratio_fine_tuned".to_string();
        rows.push(AblationRow {
            metrics: evaluate_disabled(&tuned.model, eval_set, &[], space, &label)?.1,
            label,
            disabled: reduced,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let reports: Vec<MetricsReport> = rows.iter().map(|r| r.metrics.clone()).collect();
    crate::metrics::reports_to_csv(&reports)
}

/// Signed error as an RGB image: red for positive, blue for negative, with
/// full intensity at `|delta| >= scale`. Pixels outside the mask are black.
pub fn error_overlay(err: &ErrorImage, scale: f64) -> Image<u8> {
    let (w, h) = (err.width(), err.height());
    let mut out = Image::filled(w, h, 3, 0u8);
    for r in 0..h {
        for c in 0..w {
            if !err.mask.get(c, r) {
                continue;
            }
            let v = err.delta.get(c, r) / scale.max(f64::MIN_POSITIVE);
            let level = (v.abs().min(1.0) * 255.0).round() as u8;
            let px = out.pixel_mut(c, r);
            if v > 0.0 {
                px[0] = level;
            } else {
                px[2] = level;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(values: &[f32]) -> Image<f32> {
        Image::from_vec(values.len(), 1, 1, values.to_vec()).unwrap()
    }

    fn err(values: &[f64], mask: &[bool]) -> ErrorImage {
        ErrorImage {
            delta: Image::from_vec(values.len(), 1, 1, values.to_vec()).unwrap(),
            mask: Image::from_vec(mask.len(), 1, 1, mask.to_vec()).unwrap(),
        }
    }

    #[test]
    fn zero_prediction_is_a_no_op() {
        let inv = img(&[0.5, 0.25, 0.1]);
        let cov = Image::from_vec(3, 1, 1, vec![true; 3]).unwrap();
        let c = correct(&inv, &cov, &err(&[0.0; 3], &[true; 3])).unwrap();
        assert_eq!(c.inverse_depth.data(), &[0.5, 0.25, 0.1f32 as f64]);
        assert!(c.valid.data().iter().all(|&v| v));
    }

    #[test]
    fn arithmetic_example() {
        let inv = img(&[1.0]);
        let cov = Image::from_vec(1, 1, 1, vec![true]).unwrap();
        let c = correct(&inv, &cov, &err(&[0.5], &[true])).unwrap();
        assert_eq!(c.inverse_depth.data(), &[0.5]);
        assert_eq!(c.depth.data(), &[2.0]);
    }

    #[test]
    fn nonpositive_corrections_are_invalid() {
        let inv = img(&[0.5, 0.5, 0.5]);
        let cov = Image::from_vec(3, 1, 1, vec![true, true, false]).unwrap();
        let c = correct(&inv, &cov, &err(&[0.5, 0.6, 0.1], &[true; 3])).unwrap();
        assert_eq!(c.valid.data(), &[false, false, false]);
        assert_eq!(c.depth.data(), &[0.0, 0.0, 0.0]);
        assert_eq!(c.inverse_depth.data()[2], 0.5);
    }

    #[test]
    fn overlay_colors() {
        let o = error_overlay(&err(&[0.2, -0.1, 0.05], &[true, true, false]), 0.2);
        assert_eq!(o.pixel(0, 0), &[255, 0, 0]);
        assert_eq!(o.pixel(1, 0), &[0, 0, 128]);
        assert_eq!(o.pixel(2, 0), &[0, 0, 0]);
    }

    #[test]
    fn oracle_predictions_give_perfect_metrics() {
        let mut f = FeatureImageSet::empty(3, 1);
        let mut t = ErrorImage::zeros(3, 1);
        for (c, (ic, d)) in [(0.5f32, 0.1), (0.2, -0.05), (0.3, 0.0)].into_iter().enumerate() {
            f.mask.set(c, 0, true);
            f.inverse_depth.set(c, 0, ic);
            t.mask.set(c, 0, c != 2);
            t.delta.set(c, 0, d);
        }
        let s = Sample::new(f, t.clone(), 0).unwrap();
        let (base, corr) = evaluate_predictions(&[s.clone()], &[t], MetricSpace::InverseDepth, "oracle").unwrap();
        assert_eq!(corr.rmse, 0.0);
        assert_eq!(corr.delta, [1.0, 1.0, 1.0]);
        assert!(base.rmse > 0.0);
        let zero = ErrorImage {
            delta: Image::filled(3, 1, 1, 0.0),
            mask: s.features.mask.clone(),
        };
        let (base2, corr2) = evaluate_predictions(&[s], &[zero], MetricSpace::Depth, "zero").unwrap();
        assert_eq!((base2.rmse, base2.delta), (corr2.rmse, corr2.delta));
    }
}
