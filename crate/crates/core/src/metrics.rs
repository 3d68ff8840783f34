//! Mask- and instance-level evaluation.
//!
//! Mask scores pool pixel counts over the whole dataset (micro
//! aggregation) before computing precision, recall, F1 and IoU. MF and MI
//! are the means of the roof and footprint F1 / IoU. EPE is the centroid
//! distance of a predicted polygon to its ground truth; LE compares roof
//! offset lengths, and aLE is its mean over all instances.

use std::collections::BTreeMap;
use std::ops::Add;

use serde::{Deserialize, Serialize};

use crate::codec::OffsetVec;
use crate::dataio::{Dataset, PredictionRecord};
use crate::error::{Error, Result};
use crate::geometry::{rasterize_union, CentroidMode, Polygon, RasterMask};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PixelConfusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Add for PixelConfusion {
    type Output = PixelConfusion;
    fn add(self, o: PixelConfusion) -> PixelConfusion {
        PixelConfusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl std::iter::Sum for PixelConfusion {
    fn sum<I: Iterator<Item = PixelConfusion>>(iter: I) -> Self {
        iter.fold(PixelConfusion::default(), Add::add)
    }
}

impl PixelConfusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion(pred: &RasterMask, gt: &RasterMask) -> Result<PixelConfusion> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(Error::ShapeMismatch(format!(
            "prediction mask {}x{} vs ground truth {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let mut c = PixelConfusion::default();
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskScores {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall, F1 and IoU. Empty-vs-empty masks score 1 everywhere;
/// otherwise zero denominators give 0.
pub fn scores(c: &PixelConfusion) -> MaskScores {
    if c.tp + c.fp + c.fn_ == 0 {
        return MaskScores {
            f1: 1.0,
            precision: 1.0,
            recall: 1.0,
            iou: 1.0,
        };
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    MaskScores {
        f1,
        precision,
        recall,
        iou: ratio(c.tp, c.tp + c.fp + c.fn_),
    }
}

/// Centroid distance between a predicted and a ground-truth polygon.
pub fn epe(pred: &Polygon, gt: &Polygon) -> f64 {
    epe_with(pred, gt, CentroidMode::Area)
}

pub fn epe_with(pred: &Polygon, gt: &Polygon, mode: CentroidMode) -> f64 {
    pred.centroid_with(mode).distance(gt.centroid_with(mode))
}

/// Length error `| |o| - |o_hat| |`.
pub fn le(pred_o: OffsetVec, gt_o: OffsetVec) -> f64 {
    (gt_o.norm() - pred_o.norm()).abs()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub footprint_epe: f64,
    pub roof_epe: f64,
    pub le: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub roof: MaskScores,
    pub footprint: MaskScores,
    pub mf: f64,
    pub mi: f64,
    pub mean_epe_roof: f64,
    pub mean_epe_footprint: f64,
    pub ale: f64,
    pub instances: usize,
    pub roof_confusion: PixelConfusion,
    pub footprint_confusion: PixelConfusion,
    /// How mask counts were pooled across images.
    pub aggregation: String,
    pub centroid: CentroidMode,
}

impl Report {
    pub const CSV_HEADER: [&'static str; 15] = [
        "roof_f1",
        "roof_precision",
        "roof_recall",
        "roof_iou",
        "footprint_f1",
        "footprint_precision",
        "footprint_recall",
        "footprint_iou",
        "mf",
        "mi",
        "mean_epe_roof",
        "mean_epe_footprint",
        "ale",
        "instances",
        "aggregation",
    ];

    pub fn csv_row(&self) -> Vec<String> {
        let f = crate::dataio::canon::format_float;
        vec![
            f(self.roof.f1),
            f(self.roof.precision),
            f(self.roof.recall),
            f(self.roof.iou),
            f(self.footprint.f1),
            f(self.footprint.precision),
            f(self.footprint.recall),
            f(self.footprint.iou),
            f(self.mf),
            f(self.mi),
            f(self.mean_epe_roof),
            f(self.mean_epe_footprint),
            f(self.ale),
            self.instances.to_string(),
            self.aggregation.clone(),
        ]
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Pool per-image confusions and average per-instance errors.
pub fn aggregate(
    per_instance: &[InstanceResult],
    roof_confusions: &[PixelConfusion],
    footprint_confusions: &[PixelConfusion],
    centroid: CentroidMode,
) -> Report {
    let roof_confusion: PixelConfusion = roof_confusions.iter().copied().sum();
    let footprint_confusion: PixelConfusion = footprint_confusions.iter().copied().sum();
    let roof = scores(&roof_confusion);
    let footprint = scores(&footprint_confusion);
    Report {
        mf: (roof.f1 + footprint.f1) / 2.0,
        mi: (roof.iou + footprint.iou) / 2.0,
        roof,
        footprint,
        mean_epe_roof: mean(per_instance.iter().map(|r| r.roof_epe)),
        mean_epe_footprint: mean(per_instance.iter().map(|r| r.footprint_epe)),
        ale: mean(per_instance.iter().map(|r| r.le)),
        instances: per_instance.len(),
        roof_confusion,
        footprint_confusion,
        aggregation: "micro".to_owned(),
        centroid,
    }
}

/// Evaluate predictions against a dataset. Predictions are matched to
/// annotations by id.
pub fn evaluate(
    dataset: &Dataset,
    predictions: &[PredictionRecord],
    centroid: CentroidMode,
) -> Result<Report> {
    let by_id: BTreeMap<u64, &PredictionRecord> = predictions.iter().map(|p| (p.id, p)).collect();
    let per_image = par::map_slice(&dataset.manifest.images, |_, image| -> Result<_> {
        let records = dataset.records_of(image.id);
        let preds = records
            .iter()
            .map(|r| {
                by_id
                    .get(&r.id)
                    .copied()
                    .ok_or_else(|| Error::IdMismatch(format!("no prediction for id {}", r.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let (w, h) = (image.width, image.height);
        let fp = confusion(
            &rasterize_union(preds.iter().map(|p| &p.footprint), w, h)?,
            &rasterize_union(records.iter().map(|r| &r.footprint), w, h)?,
        )?;
        let rf = confusion(
            &rasterize_union(preds.iter().map(|p| &p.roof), w, h)?,
            &rasterize_union(records.iter().map(|r| &r.roof), w, h)?,
        )?;
        let instances: Vec<InstanceResult> = records
            .iter()
            .zip(&preds)
            .map(|(r, p)| InstanceResult {
                footprint_epe: epe_with(&p.footprint, &r.footprint, centroid),
                roof_epe: epe_with(&p.roof, &r.roof, centroid),
                le: le(p.o_hat, r.o_vec),
            })
            .collect();
        Ok((fp, rf, instances))
    });
    let mut fps = Vec::new();
    let mut rfs = Vec::new();
    let mut all = Vec::new();
    for item in per_image {
        let (fp, rf, inst) = item?;
        fps.push(fp);
        rfs.push(rf);
        all.extend(inst);
    }
    Ok(aggregate(&all, &rfs, &fps, centroid))
}
