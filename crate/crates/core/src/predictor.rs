//! The offset-prediction contract and its two realizations.
//!
//! A predictor looks at the current polygon batch and the image evidence and
//! proposes one corrective offset per instance, for either the footprint
//! stage (label → footprint, applied iteratively) or the roof stage
//! (footprint → roof, applied once). [`OraclePredictor`] models an
//! imperfect learned predictor that knows the ground truth;
//! [`CorrelationPredictor`] finds the best-matching integer shift of each
//! polygon against an evidence raster.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::codec::OffsetVec;
use crate::error::{Error, Result};
use crate::geometry::{Point2, PolygonBatch};
use crate::{par, rng};

/// Evidence layer names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    FootprintEvidence,
    RoofEvidence,
}

impl Channel {
    pub const ALL: [Channel; 2] = [Channel::FootprintEvidence, Channel::RoofEvidence];

    pub fn name(self) -> &'static str {
        match self {
            Channel::FootprintEvidence => "footprint_evidence",
            Channel::RoofEvidence => "roof_evidence",
        }
    }
}

/// Evidence in `[0, 1]` stored as 8-bit levels (`value = level / 255`),
/// with per-row prefix sums for constant-time run sums.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvidenceRaster {
    width: usize,
    height: usize,
    levels: Vec<u8>,
    row_prefix: Vec<u64>,
    // (width+1) x (height+1) summed-area tables of levels and squared levels
    sat: Vec<u64>,
    sat_sq: Vec<u64>,
}

impl EvidenceRaster {
    pub fn from_levels(width: usize, height: usize, levels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || levels.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} levels for a {width}x{height} raster",
                levels.len()
            )));
        }
        let mut row_prefix = vec![0u64; (width + 1) * height];
        for y in 0..height {
            let mut acc = 0u64;
            for x in 0..width {
                acc += u64::from(levels[y * width + x]);
                row_prefix[y * (width + 1) + x + 1] = acc;
            }
        }
        let stride = width + 1;
        let mut sat = vec![0u64; stride * (height + 1)];
        let mut sat_sq = vec![0u64; stride * (height + 1)];
        for y in 0..height {
            let (mut row, mut row_sq) = (0u64, 0u64);
            for x in 0..width {
                let v = u64::from(levels[y * width + x]);
                row += v;
                row_sq += v * v;
                sat[(y + 1) * stride + x + 1] = sat[y * stride + x + 1] + row;
                sat_sq[(y + 1) * stride + x + 1] = sat_sq[y * stride + x + 1] + row_sq;
            }
        }
        Ok(Self {
            width,
            height,
            levels,
            row_prefix,
            sat,
            sat_sq,
        })
    }

    /// Quantize real values in `[0, 1]` (clamped) to `round(255 v)`.
    pub fn from_values(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        let levels = values
            .iter()
            .map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8)
            .collect();
        Self::from_levels(width, height, levels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn levels(&self) -> &[u8] {
        &self.levels
    }

    pub fn level(&self, x: usize, y: usize) -> u8 {
        self.levels[y * self.width + x]
    }

    pub fn value(&self, x: usize, y: usize) -> f64 {
        f64::from(self.level(x, y)) / 255.0
    }

    /// Sum of levels over columns `[x0, x1)` of `row`, clipped to the raster.
    fn run_sum(&self, row: i64, x0: i64, x1: i64) -> u64 {
        if row < 0 || row >= self.height as i64 {
            return 0;
        }
        let a = x0.clamp(0, self.width as i64) as usize;
        let b = x1.clamp(0, self.width as i64) as usize;
        if a >= b {
            return 0;
        }
        let base = row as usize * (self.width + 1);
        self.row_prefix[base + b] - self.row_prefix[base + a]
    }

    /// Sums of levels and squared levels over `[x0, x1) x [y0, y1)`, clipped.
    fn box_sums(&self, x0: i64, y0: i64, x1: i64, y1: i64) -> (u64, u64) {
        let cx = |x: i64| x.clamp(0, self.width as i64) as usize;
        let cy = |y: i64| y.clamp(0, self.height as i64) as usize;
        let (a, b, c, d) = (cx(x0), cx(x1), cy(y0), cy(y1));
        if a >= b || c >= d {
            return (0, 0);
        }
        let stride = self.width + 1;
        let get = |t: &[u64]| t[d * stride + b] + t[c * stride + a] - t[c * stride + b] - t[d * stride + a];
        (get(&self.sat), get(&self.sat_sq))
    }
}

/// Per-instance ground-truth centroids, in batch order. Only the oracle
/// reads these.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HiddenTruth {
    pub footprints: Vec<Point2>,
    pub roofs: Vec<Point2>,
}

/// Everything a predictor may condition on besides the polygons themselves.
#[derive(Debug, Clone, Default)]
pub struct PredictorContext {
    pub channels: BTreeMap<Channel, EvidenceRaster>,
    pub hidden_truth: Option<HiddenTruth>,
}

impl PredictorContext {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_channel(mut self, channel: Channel, raster: EvidenceRaster) -> Result<Self> {
        if let Some(existing) = self.channels.values().next() {
            if (existing.width, existing.height) != (raster.width, raster.height) {
                return Err(Error::ShapeMismatch(format!(
                    "channel {} is {}x{}, others are {}x{}",
                    channel.name(),
                    raster.width,
                    raster.height,
                    existing.width,
                    existing.height
                )));
            }
        }
        self.channels.insert(channel, raster);
        Ok(self)
    }

    pub fn with_truth(mut self, truth: HiddenTruth) -> Self {
        self.hidden_truth = Some(truth);
        self
    }

    pub fn channel(&self, channel: Channel) -> Option<&EvidenceRaster> {
        self.channels.get(&channel)
    }
}

/// Identifies one prediction call within a denoising run; stochastic
/// predictors key their randomness on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct StepKey {
    pub run: u32,
    pub step: u32,
}

impl StepKey {
    pub const fn new(run: u32, step: u32) -> Self {
        Self { run, step }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionStatus {
    Ok,
    /// The best match sits on the edge of the search window; the true
    /// displacement may be larger.
    WindowBoundary,
    /// No usable prediction; the engine freezes the instance.
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffsetPrediction {
    pub offsets: Vec<OffsetVec>,
    pub scores: Vec<f64>,
    pub status: Vec<PredictionStatus>,
}

impl OffsetPrediction {
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    fn from_rows(rows: Vec<(OffsetVec, f64, PredictionStatus)>) -> Self {
        let mut out = OffsetPrediction {
            offsets: Vec::with_capacity(rows.len()),
            scores: Vec::with_capacity(rows.len()),
            status: Vec::with_capacity(rows.len()),
        };
        for (o, s, st) in rows {
            out.offsets.push(o);
            out.scores.push(s);
            out.status.push(st);
        }
        out
    }
}

/// Offset predictor used by the denoising engine.
pub trait OffsetPredictor: Sync {
    /// Offset moving each polygon toward its footprint.
    fn predict_footprint(
        &self,
        ctx: &PredictorContext,
        batch: &PolygonBatch,
        key: StepKey,
    ) -> Result<OffsetPrediction>;

    /// Offset moving each (footprint) polygon onto its roof.
    fn predict_roof(
        &self,
        ctx: &PredictorContext,
        batch: &PolygonBatch,
        key: StepKey,
    ) -> Result<OffsetPrediction>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OraclePredictorParams {
    /// Fraction of the remaining error removed per unit step.
    pub kappa: f64,
    /// Per-axis standard deviation of the prediction noise, px.
    pub rho: f64,
    pub seed: u64,
}

impl Default for OraclePredictorParams {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            rho: 0.0,
            seed: 0,
        }
    }
}

impl OraclePredictorParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(Error::InvalidParameter(format!(
                "oracle kappa must lie in [0, 1], got {}",
                self.kappa
            )));
        }
        if !(self.rho.is_finite() && self.rho >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "oracle rho must be finite and non-negative, got {}",
                self.rho
            )));
        }
        Ok(())
    }
}

/// Predicts `kappa * (truth - current) + noise` with isotropic Gaussian noise
/// of constant per-axis std `rho`.
///
/// Relative to an idealized learned predictor with per-step std `b_t * nu`,
/// this corresponds to `b_t = |rho-driven step| / nu` near convergence and
/// `b_t ≈ kappa` far from it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OraclePredictor {
    pub params: OraclePredictorParams,
    /// Extra stream key, e.g. the image id, so that instances with the same
    /// batch index in different images draw independent noise.
    pub stream: u64,
}

impl OraclePredictor {
    pub fn new(params: OraclePredictorParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params, stream: 0 })
    }

    pub fn with_stream(mut self, stream: u64) -> Self {
        self.stream = stream;
        self
    }

    fn predict(
        &self,
        truth: &[Point2],
        batch: &PolygonBatch,
        stage: u64,
        key: StepKey,
    ) -> Result<OffsetPrediction> {
        if truth.len() != batch.count() {
            return Err(Error::ShapeMismatch(format!(
                "{} truth entries for {} instances",
                truth.len(),
                batch.count()
            )));
        }
        let p = self.params;
        let rows = par::map_range(batch.count(), |i| {
            let current = batch.polygon(i).centroid();
            let mut offset = truth[i].sub(current) * p.kappa;
            if p.rho > 0.0 {
                let mut rng = rng::keyed(
                    p.seed,
                    &[self.stream, stage, u64::from(key.run), u64::from(key.step), i as u64],
                );
                offset += rng::gaussian2(&mut rng, p.rho);
            }
            (offset, 1.0, PredictionStatus::Ok)
        });
        Ok(OffsetPrediction::from_rows(rows))
    }
}

impl OffsetPredictor for OraclePredictor {
    fn predict_footprint(
        &self,
        ctx: &PredictorContext,
        batch: &PolygonBatch,
        key: StepKey,
    ) -> Result<OffsetPrediction> {
        let truth = ctx.hidden_truth.as_ref().ok_or(Error::MissingGroundTruth)?;
        self.predict(&truth.footprints, batch, 0, key)
    }

    fn predict_roof(
        &self,
        ctx: &PredictorContext,
        batch: &PolygonBatch,
        key: StepKey,
    ) -> Result<OffsetPrediction> {
        let truth = ctx.hidden_truth.as_ref().ok_or(Error::MissingGroundTruth)?;
        self.predict(&truth.roofs, batch, 1, key)
    }
}

/// Convenience wrapper for [`OraclePredictor::predict_footprint`] with an
/// explicit step index.
pub fn oracle_predict(
    ctx: &PredictorContext,
    batch: &PolygonBatch,
    params: &OraclePredictorParams,
    step_index: u32,
) -> Result<OffsetPrediction> {
    OraclePredictor::new(*params)?.predict_footprint(ctx, batch, StepKey::new(0, step_index))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationScore {
    /// Sum of evidence under the shifted stencil.
    OverlapSum,
    /// Overlap sum divided by the stencil area.
    NormalizedOverlap,
    /// Zero-mean normalized cross-correlation of the binary stencil with the
    /// evidence over the stencil's bounding box grown by `margin`. Unlike the
    /// overlap scores it penalizes evidence just outside the stencil, so a
    /// larger neighbouring building cannot outscore the right one.
    #[default]
    Zncc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrelationParams {
    /// Half-width of the square search window, px.
    pub search_radius: u32,
    pub target_channel: Channel,
    pub score: CorrelationScore,
    /// Background border around the stencil for `Zncc`, px.
    #[serde(default = "default_margin")]
    pub margin: u32,
}

fn default_margin() -> u32 {
    DEFAULT_MARGIN
}

pub const DEFAULT_MARGIN: u32 = 4;

impl CorrelationParams {
    pub fn footprint_default() -> Self {
        Self {
            search_radius: 32,
            target_channel: Channel::FootprintEvidence,
            score: CorrelationScore::Zncc,
            margin: DEFAULT_MARGIN,
        }
    }

    pub fn roof_default() -> Self {
        Self {
            search_radius: 72,
            target_channel: Channel::RoofEvidence,
            score: CorrelationScore::Zncc,
            margin: DEFAULT_MARGIN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.search_radius < 1 {
            return Err(Error::InvalidParameter("search_radius must be at least 1".into()));
        }
        if self.score == CorrelationScore::Zncc && self.margin < 1 {
            return Err(Error::InvalidParameter("zncc needs margin >= 1".into()));
        }
        Ok(())
    }
}

/// Exhaustive integer-shift matching of each rasterized polygon against an
/// evidence channel.
///
/// Ties on score go to the smallest shift norm, then to the lexicographically
/// smallest `(du, dv)`. Pixels outside the raster count as empty evidence.
pub fn correlate_predict(
    ctx: &PredictorContext,
    batch: &PolygonBatch,
    params: &CorrelationParams,
) -> Result<OffsetPrediction> {
    params.validate()?;
    let raster = ctx.channel(params.target_channel).ok_or_else(|| {
        Error::InvalidParameter(format!(
            "context has no {} channel",
            params.target_channel.name()
        ))
    })?;
    let w = i64::from(params.search_radius);
    let m = i64::from(params.margin);
    let rows = par::map_range(batch.count(), |i| {
        let runs = batch
            .polygon(i)
            .scanline_runs(raster.width(), raster.height());
        let area: u64 = runs.iter().map(|&(_, a, b)| (b - a) as u64).sum();
        if area == 0 {
            return (OffsetVec::ZERO, 0.0, PredictionStatus::Failed);
        }
        let (x0, x1) = runs.iter().fold((i64::MAX, i64::MIN), |(lo, hi), &(_, a, b)| {
            (lo.min(a as i64), hi.max(b as i64))
        });
        let y0 = runs[0].0 as i64;
        let y1 = runs[runs.len() - 1].0 as i64 + 1;
        let (bx0, by0, bx1, by1) = (x0 - m, y0 - m, x1 + m, y1 + m);
        let n = ((bx1 - bx0) * (by1 - by0)) as f64;
        let a = area as f64;
        let var_t = a - a * a / n;
        let score_at = |du: i64, dv: i64| -> f64 {
            let sum: u64 = runs
                .iter()
                .map(|&(row, a, b)| raster.run_sum(row as i64 + dv, a as i64 + du, b as i64 + du))
                .sum();
            match params.score {
                CorrelationScore::OverlapSum => sum as f64 / 255.0,
                CorrelationScore::NormalizedOverlap => sum as f64 / 255.0 / a,
                CorrelationScore::Zncc => {
                    let (s, s2) = raster.box_sums(bx0 + du, by0 + dv, bx1 + du, by1 + dv);
                    let (s, s2) = (s as f64, s2 as f64);
                    let var_e = s2 - s * s / n;
                    if var_e <= 0.0 || var_t <= 0.0 {
                        0.0
                    } else {
                        (sum as f64 - s * a / n) / (var_e * var_t).sqrt()
                    }
                }
            }
        };
        // (score, norm², du, dv): larger score wins, then smaller norm, then (du, dv)
        let mut best: Option<(f64, i64, i64, i64)> = None;
        for du in -w..=w {
            for dv in -w..=w {
                let cand = (score_at(du, dv), du * du + dv * dv, du, dv);
                let better = match best {
                    None => true,
                    Some(b) => cand.0 > b.0 || (cand.0 == b.0 && (cand.1, cand.2, cand.3) < (b.1, b.2, b.3)),
                };
                if better {
                    best = Some(cand);
                }
            }
        }
        let (score, _, du, dv) = best.expect("window is non-empty");
        let status = if du.abs() == w || dv.abs() == w {
            PredictionStatus::WindowBoundary
        } else {
            PredictionStatus::Ok
        };
        (OffsetVec::new(du as f64, dv as f64), score, status)
    });
    Ok(OffsetPrediction::from_rows(rows))
}

/// Correlation matcher with separate settings for the two stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorrelationPredictor {
    pub footprint: CorrelationParams,
    pub roof: CorrelationParams,
}

impl Default for CorrelationPredictor {
    fn default() -> Self {
        Self {
            footprint: CorrelationParams::footprint_default(),
            roof: CorrelationParams::roof_default(),
        }
    }
}

impl OffsetPredictor for CorrelationPredictor {
    fn predict_footprint(
        &self,
        ctx: &PredictorContext,
        batch: &PolygonBatch,
        _key: StepKey,
    ) -> Result<OffsetPrediction> {
        correlate_predict(ctx, batch, &self.footprint)
    }

    fn predict_roof(
        &self,
        ctx: &PredictorContext,
        batch: &PolygonBatch,
        _key: StepKey,
    ) -> Result<OffsetPrediction> {
        correlate_predict(ctx, batch, &self.roof)
    }
}

/// Smooth-L1 with transition point 1, summed over both components.
pub fn smooth_l1(pred: OffsetVec, target: OffsetVec) -> f64 {
    let e = pred - target;
    [e.dx, e.dy]
        .into_iter()
        .map(|x| {
            let a = x.abs();
            if a < 1.0 {
                0.5 * a * a
            } else {
                a - 0.5
            }
        })
        .sum()
}

/// Weighted offset-regression part of the training loss,
/// `gamma * (L(f) + L(o))`, on encoded offsets.
pub fn alignment_loss(
    pred_f: OffsetVec,
    target_f: OffsetVec,
    pred_o: OffsetVec,
    target_o: OffsetVec,
    gamma: f64,
) -> f64 {
    gamma * (smooth_l1(pred_f, target_f) + smooth_l1(pred_o, target_o))
}

/// Default weight of the offset terms.
pub const DEFAULT_GAMMA: f64 = 0.1;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{pad_batch, rasterize_union, Polygon};

    fn ctx_with_truth(truth: Vec<Point2>) -> PredictorContext {
        PredictorContext::new().with_truth(HiddenTruth {
            roofs: truth.clone(),
            footprints: truth,
        })
    }

    fn square_at(x: f64, y: f64, s: f64) -> Polygon {
        Polygon::rect(x - s / 2.0, y - s / 2.0, x + s / 2.0, y + s / 2.0).unwrap()
    }

    fn evidence(polys: &[Polygon], w: usize, h: usize) -> EvidenceRaster {
        let m = rasterize_union(polys, w, h).unwrap();
        let levels = m.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
        EvidenceRaster::from_levels(w, h, levels).unwrap()
    }

    #[test]
    fn ideal_oracle_points_at_truth() {
        let ctx = ctx_with_truth(vec![Point2::new(0.0, 0.0)]);
        let batch = pad_batch(&[square_at(10.0, 0.0, 4.0)]).unwrap();
        let params = OraclePredictorParams { kappa: 1.0, rho: 0.0, seed: 0 };
        let p = oracle_predict(&ctx, &batch, &params, 1).unwrap();
        assert_eq!(p.offsets, vec![OffsetVec::new(-10.0, 0.0)]);
        assert_eq!(p.scores, vec![1.0]);
    }

    #[test]
    fn zero_kappa_oracle_is_still() {
        let ctx = ctx_with_truth(vec![Point2::new(0.0, 0.0)]);
        let batch = pad_batch(&[square_at(10.0, 7.0, 4.0)]).unwrap();
        let params = OraclePredictorParams { kappa: 0.0, rho: 0.0, seed: 0 };
        let p = oracle_predict(&ctx, &batch, &params, 1).unwrap();
        assert_eq!(p.offsets[0].norm(), 0.0);
    }

    #[test]
    fn half_kappa_contraction() {
        let truth = Point2::new(100.0, 100.0);
        let ctx = ctx_with_truth(vec![truth]);
        let mut poly = square_at(100.0 + 48.0, 100.0 - 20.0, 8.0);
        let d0 = poly.centroid().distance(truth);
        let params = OraclePredictorParams { kappa: 0.5, rho: 0.0, seed: 0 };
        for t in 1..=6u32 {
            let p = oracle_predict(&ctx, &pad_batch(&[poly.clone()]).unwrap(), &params, t).unwrap();
            let before = poly.centroid().distance(truth);
            assert!((p.offsets[0].norm() - 0.5 * before).abs() < 1e-12);
            poly = poly.translate(p.offsets[0]);
            let expected = d0 * 0.5f64.powi(t as i32);
            assert!((poly.centroid().distance(truth) - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn oracle_without_truth_errors() {
        let batch = pad_batch(&[square_at(0.0, 0.0, 2.0)]).unwrap();
        let err = oracle_predict(&PredictorContext::new(), &batch, &Default::default(), 0).unwrap_err();
        assert_eq!(err.to_string(), "oracle requires ground truth");
    }

    #[test]
    fn oracle_noise_std_matches_rho() {
        let n = 10_000;
        let truth: Vec<Point2> = (0..n).map(|_| Point2::new(0.0, 0.0)).collect();
        let polys: Vec<Polygon> = (0..n).map(|_| square_at(6.0, -8.0, 2.0)).collect();
        let batch = pad_batch(&polys).unwrap();
        let params = OraclePredictorParams { kappa: 1.0, rho: 2.0, seed: 12 };
        let p = oracle_predict(&ctx_with_truth(truth), &batch, &params, 3).unwrap();
        let mean = |f: &dyn Fn(&OffsetVec) -> f64| p.offsets.iter().map(f).sum::<f64>() / n as f64;
        let mx = mean(&|o| o.dx);
        let my = mean(&|o| o.dy);
        let sx = mean(&|o| (o.dx - mx).powi(2)).sqrt();
        let sy = mean(&|o| (o.dy - my).powi(2)).sqrt();
        assert!((sx / 2.0 - 1.0).abs() < 0.03, "std x {sx}");
        assert!((sy / 2.0 - 1.0).abs() < 0.03, "std y {sy}");
        assert!((mx + 6.0).abs() < 0.1 && (my - 8.0).abs() < 0.1);
    }

    #[test]
    fn oracle_noise_is_keyed_by_step_and_run() {
        let ctx = ctx_with_truth(vec![Point2::new(0.0, 0.0)]);
        let batch = pad_batch(&[square_at(0.0, 0.0, 2.0)]).unwrap();
        let o = OraclePredictor::new(OraclePredictorParams { kappa: 1.0, rho: 1.0, seed: 3 }).unwrap();
        let a = o.predict_footprint(&ctx, &batch, StepKey::new(0, 1)).unwrap();
        let b = o.predict_footprint(&ctx, &batch, StepKey::new(0, 1)).unwrap();
        let c = o.predict_footprint(&ctx, &batch, StepKey::new(0, 2)).unwrap();
        let d = o.predict_footprint(&ctx, &batch, StepKey::new(1, 1)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn correlation_recovers_known_displacement() {
        let truth = Polygon::from_coords(&[
            (60.0, 50.0),
            (100.0, 50.0),
            (100.0, 70.0),
            (80.0, 70.0),
            (80.0, 90.0),
            (60.0, 90.0),
        ])
        .unwrap();
        let ctx = PredictorContext::new()
            .with_channel(Channel::FootprintEvidence, evidence(std::slice::from_ref(&truth), 160, 160))
            .unwrap();
        let query = truth.translate(OffsetVec::new(12.0, -5.0));
        let params = CorrelationParams::footprint_default();
        let p = correlate_predict(&ctx, &pad_batch(&[query]).unwrap(), &params).unwrap();
        assert!((p.offsets[0] - OffsetVec::new(-12.0, 5.0)).norm() <= 1.0);
        assert_eq!(p.status[0], PredictionStatus::Ok);
        assert!((p.scores[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aligned_query_stays_put() {
        let b = square_at(40.0, 40.0, 16.0);
        let ctx = PredictorContext::new()
            .with_channel(Channel::FootprintEvidence, evidence(std::slice::from_ref(&b), 80, 80))
            .unwrap();
        let p = correlate_predict(&ctx, &pad_batch(&[b]).unwrap(), &CorrelationParams::footprint_default())
            .unwrap();
        assert_eq!(p.offsets[0], OffsetVec::ZERO);
        // under the overlap score a stencil inside a larger block ties across
        // several shifts; the tie-break must still pick (0, 0)
        let overlap = CorrelationParams {
            score: CorrelationScore::NormalizedOverlap,
            ..CorrelationParams::footprint_default()
        };
        let small = square_at(40.0, 40.0, 8.0);
        let p = correlate_predict(&ctx, &pad_batch(&[small]).unwrap(), &overlap).unwrap();
        assert_eq!(p.offsets[0], OffsetVec::ZERO);
    }

    #[test]
    fn zncc_prefers_matching_building_over_larger_neighbour() {
        // own footprint blurred at its edges, a bigger neighbour close by:
        // overlap scores are drawn into the neighbour, zncc is not
        let own = square_at(40.0, 40.0, 16.0);
        let big = square_at(78.0, 40.0, 40.0);
        let mut vals = vec![0.0; 140 * 80];
        let mask = rasterize_union([&own, &big], 140, 80).unwrap();
        for y in 0..80 {
            for x in 0..140 {
                if mask.get(x, y) {
                    let (x0, y0, x1, y1) = own.bounds();
                    let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
                    let inside = xf > x0 && xf < x1 && yf > y0 && yf < y1;
                    let edge = inside && (xf < x0 + 1.0 || xf > x1 - 1.0 || yf < y0 + 1.0 || yf > y1 - 1.0);
                    vals[y * 140 + x] = if edge { 0.6 } else { 1.0 };
                }
            }
        }
        let ctx = PredictorContext::new()
            .with_channel(Channel::FootprintEvidence, EvidenceRaster::from_values(140, 80, &vals).unwrap())
            .unwrap();
        let q = pad_batch(&[own.translate(OffsetVec::new(5.0, 3.0))]).unwrap();
        let p = correlate_predict(&ctx, &q, &CorrelationParams::footprint_default()).unwrap();
        assert_eq!(p.offsets[0], OffsetVec::new(-5.0, -3.0));
        let overlap = CorrelationParams {
            score: CorrelationScore::NormalizedOverlap,
            ..CorrelationParams::footprint_default()
        };
        let p = correlate_predict(&ctx, &q, &overlap).unwrap();
        assert_ne!(p.offsets[0], OffsetVec::new(-5.0, -3.0));
    }

    #[test]
    fn zncc_needs_margin() {
        let params = CorrelationParams { margin: 0, ..CorrelationParams::footprint_default() };
        assert!(params.validate().is_err());
    }

    #[test]
    fn correlation_flags_window_boundary() {
        let truth = square_at(120.0, 60.0, 20.0);
        let ctx = PredictorContext::new()
            .with_channel(Channel::FootprintEvidence, evidence(std::slice::from_ref(&truth), 200, 120))
            .unwrap();
        let query = truth.translate(OffsetVec::new(-40.0, 0.0));
        let p = correlate_predict(&ctx, &pad_batch(&[query]).unwrap(), &CorrelationParams::footprint_default())
            .unwrap();
        assert_eq!(p.offsets[0], OffsetVec::new(32.0, 0.0));
        assert_eq!(p.status[0], PredictionStatus::WindowBoundary);
        assert!(p.scores[0] > 0.0 && p.scores[0] < 1.0);
    }

    #[test]
    fn correlation_flags_polygon_outside_image() {
        let ctx = PredictorContext::new()
            .with_channel(Channel::FootprintEvidence, evidence(&[square_at(10.0, 10.0, 4.0)], 32, 32))
            .unwrap();
        let far = square_at(-100.0, -100.0, 4.0);
        let p = correlate_predict(&ctx, &pad_batch(&[far]).unwrap(), &CorrelationParams::footprint_default())
            .unwrap();
        assert_eq!(p.offsets[0], OffsetVec::ZERO);
        assert_eq!(p.scores[0], 0.0);
        assert_eq!(p.status[0], PredictionStatus::Failed);
    }

    #[test]
    fn correlation_is_translation_covariant() {
        let target = square_at(50.0, 50.0, 14.0);
        let query = target.translate(OffsetVec::new(7.0, 3.0));
        let params = CorrelationParams::footprint_default();
        let base_ctx = PredictorContext::new()
            .with_channel(Channel::FootprintEvidence, evidence(std::slice::from_ref(&target), 128, 128))
            .unwrap();
        let base = correlate_predict(&base_ctx, &pad_batch(std::slice::from_ref(&query)).unwrap(), &params).unwrap();
        let s = OffsetVec::new(13.0, -9.0);
        let moved_ctx = PredictorContext::new()
            .with_channel(Channel::FootprintEvidence, evidence(&[target.translate(s)], 128, 128))
            .unwrap();
        let moved = correlate_predict(&moved_ctx, &pad_batch(&[query.translate(s)]).unwrap(), &params).unwrap();
        assert_eq!(base.offsets, moved.offsets);
        assert_eq!(base.scores, moved.scores);
    }

    #[test]
    fn overlap_sum_score() {
        let target = square_at(20.0, 20.0, 4.0);
        let ctx = PredictorContext::new()
            .with_channel(Channel::FootprintEvidence, evidence(std::slice::from_ref(&target), 40, 40))
            .unwrap();
        let params = CorrelationParams { score: CorrelationScore::OverlapSum, ..CorrelationParams::footprint_default() };
        let p = correlate_predict(&ctx, &pad_batch(&[target]).unwrap(), &params).unwrap();
        assert_eq!(p.scores[0], 16.0);
    }

    #[test]
    fn missing_channel_errors() {
        let batch = pad_batch(&[square_at(0.0, 0.0, 2.0)]).unwrap();
        assert!(correlate_predict(&PredictorContext::new(), &batch, &CorrelationParams::roof_default()).is_err());
    }

    #[test]
    fn smooth_l1_examples() {
        let t = OffsetVec::new(0.3, -0.7);
        assert_eq!(smooth_l1(t, t), 0.0);
        assert_eq!(smooth_l1(OffsetVec::new(0.5, 0.0), OffsetVec::ZERO), 0.125);
        assert_eq!(smooth_l1(OffsetVec::new(2.0, 0.0), OffsetVec::ZERO), 1.5);
    }

    #[test]
    fn smooth_l1_is_c1_at_transition() {
        let f = |e: f64| smooth_l1(OffsetVec::new(e, 0.0), OffsetVec::ZERO);
        let h = 1e-6;
        assert!((f(1.0 - h) - f(1.0 + h)).abs() < 3e-6);
        // one-sided slopes on either side of the kink
        let left = (f(1.0 - h) - f(1.0 - 2.0 * h)) / h;
        let right = (f(1.0 + 2.0 * h) - f(1.0 + h)) / h;
        assert!((left - 1.0).abs() < 1e-5 && (right - 1.0).abs() < 1e-5);
        assert!(f(-3.0) > 0.0 && f(0.0) == 0.0);
    }

    #[test]
    fn alignment_loss_examples() {
        let z = OffsetVec::ZERO;
        let r = OffsetVec::new(2.0, 0.0);
        assert_eq!(alignment_loss(r, r, r, r, 0.1), 0.0);
        assert_eq!(alignment_loss(r, z, r, z, 0.0), 0.0);
        assert!((alignment_loss(r, z, r, z, DEFAULT_GAMMA) - 0.3).abs() < 1e-15);
    }
}
