//! Multi-step footprint denoising, one-step roof lifting, test-time
//! augmentation and convergence diagnostics.
//!
//! Positions are never updated in place. Each instance carries a cumulative
//! offset `S_t = S_{t-1} + a_t * raw_t`, accumulated left to right in step
//! order, and the polygon at step `t` is always `P_0` translated by `S_t`.
//! The final output therefore equals the initial batch translated by the
//! recorded weighted sum exactly, not just up to rounding.

use serde::{Deserialize, Serialize};

use crate::codec::OffsetVec;
use crate::error::{Error, Result};
use crate::geometry::{Point2, PolygonBatch};
use crate::predictor::{OffsetPredictor, PredictionStatus, PredictorContext, StepKey};
use crate::rng;

/// Total schedule weight `sum_{t=1..T} delta^(t-1)`.
///
/// Computed as the geometric sum `(1 - delta^T) / (1 - delta)`, or `T` for
/// `delta == 1`.
pub fn energy(delta: f64, steps: u32) -> f64 {
    if delta == 1.0 {
        f64::from(steps)
    } else {
        (1.0 - delta.powi(steps as i32)) / (1.0 - delta)
    }
}

/// Exponential step-weight schedule `a_t = delta^(t-1)`, `t = 1..=steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub delta: f64,
    pub steps: u32,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            delta: 1.0,
            steps: 5,
        }
    }
}

impl Schedule {
    pub fn new(delta: f64, steps: u32) -> Result<Self> {
        let s = Self { delta, steps };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "delta must be positive and finite, got {}",
                self.delta
            )));
        }
        if self.steps < 1 {
            return Err(Error::InvalidParameter("steps must be at least 1".into()));
        }
        if !self.weight(self.steps).is_finite() {
            return Err(Error::InvalidParameter(format!(
                "delta^{} overflows",
                self.steps - 1
            )));
        }
        Ok(())
    }

    /// Weight of step `t` (1-based).
    pub fn weight(&self, t: u32) -> f64 {
        self.delta.powi(t as i32 - 1)
    }

    pub fn weights(&self) -> Vec<f64> {
        (1..=self.steps).map(|t| self.weight(t)).collect()
    }

    pub fn energy(&self) -> f64 {
        energy(self.delta, self.steps)
    }

    /// The same schedule continued for `extra` further steps.
    pub fn extended(&self, extra: u32) -> Schedule {
        Schedule {
            delta: self.delta,
            steps: self.steps + extra,
        }
    }
}

/// One denoising step for every instance.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: u32,
    pub weight: f64,
    /// Predictor output actually applied (zero for frozen instances).
    pub raw: Vec<OffsetVec>,
    /// Offset from the run's starting polygons after this step.
    pub cumulative: Vec<OffsetVec>,
    pub centroids: Vec<Point2>,
    pub status: Vec<PredictionStatus>,
}

/// Record of one denoising run in compact (centroid track) form.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub run: u32,
    /// Starting polygons; absent for trajectories rebuilt from a dump.
    pub start: Option<PolygonBatch>,
    pub start_centroids: Vec<Point2>,
    pub steps: Vec<StepRecord>,
    /// Instances frozen after a failed prediction.
    pub frozen: Vec<bool>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn instance_count(&self) -> usize {
        self.start_centroids.len()
    }

    /// Cumulative offsets after step `t` (`t = 0` is the start).
    pub fn cumulative(&self, t: usize) -> Vec<OffsetVec> {
        if t == 0 {
            vec![OffsetVec::ZERO; self.instance_count()]
        } else {
            self.steps[t - 1].cumulative.clone()
        }
    }

    /// Centroids after step `t` (`t = 0` is the start).
    pub fn centroids(&self, t: usize) -> &[Point2] {
        if t == 0 {
            &self.start_centroids
        } else {
            &self.steps[t - 1].centroids
        }
    }

    /// Polygons after step `t`, when the start batch is known.
    pub fn position(&self, t: usize) -> Option<PolygonBatch> {
        self.start.as_ref().map(|b| {
            b.translate_each(&self.cumulative(t))
                .expect("cumulative offsets match the batch")
        })
    }

    /// `sum_t a_t * raw_t` for one instance, accumulated in step order.
    pub fn weighted_sum(&self, instance: usize) -> OffsetVec {
        self.steps
            .iter()
            .fold(OffsetVec::ZERO, |acc, s| acc + s.raw[instance] * s.weight)
    }

    pub fn mean_epe(&self, t: usize, truth: &[Point2]) -> f64 {
        let c = self.centroids(t);
        c.iter().zip(truth).map(|(a, b)| a.distance(*b)).sum::<f64>() / c.len().max(1) as f64
    }
}

fn check_prediction_len(n: usize, got: usize) -> Result<()> {
    if n != got {
        return Err(Error::ShapeMismatch(format!(
            "predictor returned {got} offsets for {n} instances"
        )));
    }
    Ok(())
}

/// Run the footprint denoising loop on `batch` for run id `run`.
pub fn denoise_run(
    ctx: &PredictorContext,
    batch: &PolygonBatch,
    predictor: &dyn OffsetPredictor,
    schedule: &Schedule,
    run: u32,
) -> Result<Trajectory> {
    schedule.validate()?;
    let n = batch.count();
    let mut cumulative = vec![OffsetVec::ZERO; n];
    let mut frozen = vec![false; n];
    let mut current = batch.clone();
    let mut steps = Vec::with_capacity(schedule.steps as usize);
    for t in 1..=schedule.steps {
        let weight = schedule.weight(t);
        let pred = predictor.predict_footprint(ctx, &current, StepKey::new(run, t))?;
        check_prediction_len(n, pred.len())?;
        let mut raw = pred.offsets;
        for i in 0..n {
            if pred.status[i] == PredictionStatus::Failed {
                frozen[i] = true;
            }
            if frozen[i] {
                raw[i] = OffsetVec::ZERO;
            } else {
                cumulative[i] += raw[i] * weight;
            }
        }
        current = batch.translate_each(&cumulative)?;
        steps.push(StepRecord {
            t,
            weight,
            raw,
            cumulative: cumulative.clone(),
            centroids: current.centroids(),
            status: pred.status,
        });
    }
    Ok(Trajectory {
        run,
        start: Some(batch.clone()),
        start_centroids: batch.centroids(),
        steps,
        frozen,
    })
}

/// Iterative footprint correction; returns the corrected batch and the
/// trajectory of run 0.
pub fn denoise_footprint(
    ctx: &PredictorContext,
    batch: &PolygonBatch,
    predictor: &dyn OffsetPredictor,
    schedule: &Schedule,
) -> Result<(PolygonBatch, Trajectory)> {
    let traj = denoise_run(ctx, batch, predictor, schedule, 0)?;
    let out = batch.translate_each(&traj.cumulative(traj.len()))?;
    Ok((out, traj))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoofLift {
    pub roofs: PolygonBatch,
    pub offsets: Vec<OffsetVec>,
    /// Relative building height, `|o|`.
    pub heights: Vec<f64>,
    pub status: Vec<PredictionStatus>,
}

/// Single-step footprint → roof lift.
pub fn lift_to_roof(
    ctx: &PredictorContext,
    footprints: &PolygonBatch,
    predictor: &dyn OffsetPredictor,
) -> Result<RoofLift> {
    let pred = predictor.predict_roof(ctx, footprints, StepKey::new(0, 0))?;
    check_prediction_len(footprints.count(), pred.len())?;
    let offsets: Vec<OffsetVec> = pred
        .offsets
        .iter()
        .zip(&pred.status)
        .map(|(&o, &s)| if s == PredictionStatus::Failed { OffsetVec::ZERO } else { o })
        .collect();
    Ok(RoofLift {
        roofs: footprints.translate_each(&offsets)?,
        heights: offsets.iter().map(|o| o.norm()).collect(),
        offsets,
        status: pred.status,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtaStrategy {
    #[default]
    None,
    /// Perturb-and-rerun, averaging run endpoints.
    T1,
    /// Continue past `T`, averaging the extra steps.
    #[serde(rename = "t1_5")]
    T15,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TtaConfig {
    pub strategy: TtaStrategy,
    pub runs: u32,
    pub extra_steps: u32,
    pub perturb_sigma: f64,
    pub seed: u64,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            strategy: TtaStrategy::None,
            runs: 4,
            extra_steps: 5,
            perturb_sigma: 5.0,
            seed: 0,
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        match self.strategy {
            TtaStrategy::T1 if self.runs < 1 => {
                Err(Error::InvalidParameter("t1 needs runs >= 1".into()))
            }
            TtaStrategy::T1 if !(self.perturb_sigma.is_finite() && self.perturb_sigma >= 0.0) => {
                Err(Error::InvalidParameter("perturb_sigma must be non-negative".into()))
            }
            TtaStrategy::T15 if self.extra_steps < 1 => {
                Err(Error::InvalidParameter("t1_5 needs extra_steps >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Result of a full footprint-stage run under some TTA strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct FootprintEstimate {
    pub footprints: PolygonBatch,
    /// Total correction per instance relative to the input batch.
    pub offsets: Vec<OffsetVec>,
    pub trajectories: Vec<Trajectory>,
    pub frozen: Vec<bool>,
}

fn mean_offsets(sets: &[Vec<OffsetVec>]) -> Vec<OffsetVec> {
    let k = sets.len() as f64;
    let n = sets.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| sets.iter().fold(OffsetVec::ZERO, |acc, s| acc + s[i]) / k)
        .collect()
}

fn estimate(
    batch: &PolygonBatch,
    offsets: Vec<OffsetVec>,
    trajectories: Vec<Trajectory>,
) -> Result<FootprintEstimate> {
    let frozen = (0..batch.count())
        .map(|i| trajectories.iter().any(|t| t.frozen[i]))
        .collect();
    Ok(FootprintEstimate {
        footprints: batch.translate_each(&offsets)?,
        offsets,
        trajectories,
        frozen,
    })
}

/// Perturb-and-rerun: run 1 starts from the input, every later run from the
/// previous endpoint plus a rigid Gaussian kick; the output is the mean
/// endpoint.
pub fn tta_t1(
    ctx: &PredictorContext,
    batch: &PolygonBatch,
    predictor: &dyn OffsetPredictor,
    schedule: &Schedule,
    cfg: &TtaConfig,
) -> Result<FootprintEstimate> {
    cfg.validate()?;
    let n = batch.count();
    let mut start = vec![OffsetVec::ZERO; n];
    let mut endpoints = Vec::with_capacity(cfg.runs as usize);
    let mut trajectories = Vec::with_capacity(cfg.runs as usize);
    for run in 0..cfg.runs {
        if run > 0 {
            let prev: &Vec<OffsetVec> = endpoints.last().expect("previous run");
            start = (0..n)
                .map(|i| {
                    let mut r = rng::keyed(cfg.seed, &[u64::from(run), i as u64]);
                    prev[i] + rng::gaussian2(&mut r, cfg.perturb_sigma)
                })
                .collect();
        }
        let traj = denoise_run(ctx, &batch.translate_each(&start)?, predictor, schedule, run)?;
        let end = traj.cumulative(traj.len());
        endpoints.push((0..n).map(|i| start[i] + end[i]).collect());
        trajectories.push(traj);
    }
    estimate(batch, mean_offsets(&endpoints), trajectories)
}

/// Run `T + extra_steps` steps and average the positions after steps
/// `T+1 ..= T+extra_steps`.
pub fn tta_t15(
    ctx: &PredictorContext,
    batch: &PolygonBatch,
    predictor: &dyn OffsetPredictor,
    schedule: &Schedule,
    cfg: &TtaConfig,
) -> Result<FootprintEstimate> {
    cfg.validate()?;
    let long = schedule.extended(cfg.extra_steps);
    let traj = denoise_run(ctx, batch, predictor, &long, 0)?;
    let later: Vec<Vec<OffsetVec>> = (schedule.steps as usize + 1..=long.steps as usize)
        .map(|t| traj.cumulative(t))
        .collect();
    estimate(batch, mean_offsets(&later), vec![traj])
}

/// Footprint stage under the configured strategy.
pub fn estimate_footprints(
    ctx: &PredictorContext,
    batch: &PolygonBatch,
    predictor: &dyn OffsetPredictor,
    schedule: &Schedule,
    tta: &TtaConfig,
) -> Result<FootprintEstimate> {
    match tta.strategy {
        TtaStrategy::None => {
            let traj = denoise_run(ctx, batch, predictor, schedule, 0)?;
            let offsets = traj.cumulative(traj.len());
            estimate(batch, offsets, vec![traj])
        }
        TtaStrategy::T1 => tta_t1(ctx, batch, predictor, schedule, tta),
        TtaStrategy::T15 => tta_t15(ctx, batch, predictor, schedule, tta),
    }
}

/// Both stages for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub footprint: FootprintEstimate,
    pub roof: RoofLift,
    /// Label → roof correction, `f_hat + o_hat`.
    pub roof_offsets: Vec<OffsetVec>,
}

/// Footprint denoising followed by the roof lift.
pub fn align(
    ctx: &PredictorContext,
    labels: &PolygonBatch,
    predictor: &dyn OffsetPredictor,
    schedule: &Schedule,
    tta: &TtaConfig,
) -> Result<Alignment> {
    let footprint = estimate_footprints(ctx, labels, predictor, schedule, tta)?;
    let roof = lift_to_roof(ctx, &footprint.footprints, predictor)?;
    let roof_offsets = footprint
        .offsets
        .iter()
        .zip(&roof.offsets)
        .map(|(&f, &o)| crate::codec::compose(f, o))
        .collect();
    Ok(Alignment {
        footprint,
        roof,
        roof_offsets,
    })
}

/// Options for [`analyze_oscillation`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OscillationOptions {
    /// First step included in the running means.
    pub window_start: usize,
    /// Block width for windowed means.
    pub window: usize,
    /// Normalizing scale; estimated from the first step when `None`.
    pub nu: Option<f64>,
    /// Relative stability tolerance for the running means.
    pub tolerance: f64,
}

impl Default for OscillationOptions {
    fn default() -> Self {
        Self {
            window_start: 10,
            window: 10,
            nu: None,
            tolerance: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    ConvergedPoint,
    ConvergedRing,
    NotConverged,
}

impl Regime {
    pub fn label(self) -> &'static str {
        match self {
            Regime::ConvergedPoint => "converged point",
            Regime::ConvergedRing => "converged ring",
            Regime::NotConverged => "not converged",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub energy: f64,
    pub steps: usize,
    pub window_start: usize,
    pub nu_hat: f64,
    /// Mean centroid error for `t = 0..=T`, when truth is available.
    pub per_step_mean_epe: Option<Vec<f64>>,
    /// Mean of `a_t^2 |raw_t|^2 / nu^2` over instances, `t = 1..=T`.
    pub step_energies: Vec<f64>,
    /// `(1 / (t - n + 1)) * sum_{s=n..t}` of the step energies, `t = n..=T`.
    pub running_means: Vec<f64>,
    /// Block means of width `window`, aligned to end at `T`.
    pub window_means: Vec<f64>,
    /// `(max - min) / mean` over the last five windows.
    pub window_spread: f64,
    /// Mean centroid error over the second half of `n..=T`.
    pub stationary_radius: Option<f64>,
    /// Relative difference of the mean radius between the two halves of
    /// the final third of the run.
    pub radius_drift: Option<f64>,
    pub tolerance: f64,
    pub converged: bool,
    pub regime: Regime,
}

const ZERO_ENERGY: f64 = 1e-18;

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn relative_spread(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let m = mean(xs);
    if m.abs() <= ZERO_ENERGY {
        0.0
    } else {
        (max - min) / m
    }
}

/// Post-convergence behaviour of one or more runs sharing a schedule.
///
/// `truth`, when given, holds the ground-truth centroids for each trajectory
/// in the same order.
pub fn analyze_oscillation(
    trajectories: &[Trajectory],
    truth: Option<&[Vec<Point2>]>,
    schedule: &Schedule,
    opts: &OscillationOptions,
) -> Result<ConvergenceReport> {
    let steps = trajectories.first().map_or(0, Trajectory::len);
    let n = opts.window_start;
    if steps <= n {
        return Err(Error::InvalidParameter(format!(
            "trajectory has {steps} steps, window start {n} needs more"
        )));
    }
    if n < 1 || opts.window < 1 {
        return Err(Error::InvalidParameter("window start and width must be >= 1".into()));
    }
    if trajectories.iter().any(|t| t.len() != steps) {
        return Err(Error::ShapeMismatch("trajectories differ in length".into()));
    }
    if let Some(truth) = truth {
        if truth.len() != trajectories.len()
            || truth.iter().zip(trajectories).any(|(g, t)| g.len() != t.instance_count())
        {
            return Err(Error::ShapeMismatch("truth does not match trajectories".into()));
        }
    }
    let instances: usize = trajectories.iter().map(Trajectory::instance_count).sum();
    let step_sq = |t: usize| -> f64 {
        trajectories
            .iter()
            .flat_map(|tr| {
                let s = &tr.steps[t - 1];
                s.raw.iter().map(move |r| (*r * s.weight).norm_squared())
            })
            .sum::<f64>()
            / instances.max(1) as f64
    };
    let nu_hat = match opts.nu {
        Some(nu) => nu,
        None => {
            let est = (step_sq(1) / 2.0).sqrt();
            if est > 0.0 {
                est
            } else {
                1.0
            }
        }
    };
    let nu2 = nu_hat * nu_hat;
    let step_energies: Vec<f64> = (1..=steps).map(|t| step_sq(t) / nu2).collect();
    let tail = &step_energies[n - 1..];
    let running_means: Vec<f64> = tail
        .iter()
        .scan(0.0, |acc, e| {
            *acc += e;
            Some(*acc)
        })
        .enumerate()
        .map(|(k, s)| s / (k + 1) as f64)
        .collect();
    let mut window_means = Vec::new();
    let mut end = steps;
    while end >= n - 1 + opts.window && end >= opts.window && end - opts.window + 1 >= n {
        window_means.push(mean(&step_energies[end - opts.window..end]));
        end -= opts.window;
    }
    window_means.reverse();
    let last5 = &window_means[window_means.len().saturating_sub(5)..];
    let window_spread = relative_spread(last5);

    let per_step_mean_epe = truth.map(|truth| {
        (0..=steps)
            .map(|t| {
                trajectories
                    .iter()
                    .zip(truth)
                    .flat_map(|(tr, g)| tr.centroids(t).iter().zip(g).map(|(c, g)| c.distance(*g)))
                    .sum::<f64>()
                    / instances.max(1) as f64
            })
            .collect::<Vec<f64>>()
    });
    let stationary_radius = per_step_mean_epe
        .as_ref()
        .map(|e| mean(&e[(n + steps).div_ceil(2)..=steps]));
    let radius_drift = per_step_mean_epe.as_ref().map(|e| {
        let from = steps - steps / 3;
        let mid = (from + steps).div_ceil(2);
        let a = mean(&e[from..mid]);
        let b = mean(&e[mid..=steps]);
        if a.max(b) <= ZERO_ENERGY {
            0.0
        } else {
            (a - b).abs() / a.max(b)
        }
    });

    let half = &running_means[running_means.len() / 2..];
    let all_zero = tail.iter().all(|&e| e <= ZERO_ENERGY);
    let converged = all_zero || relative_spread_max(half) < opts.tolerance;
    let regime = if all_zero {
        Regime::ConvergedPoint
    } else if converged {
        Regime::ConvergedRing
    } else {
        Regime::NotConverged
    };
    Ok(ConvergenceReport {
        energy: schedule.energy(),
        steps,
        window_start: n,
        nu_hat,
        per_step_mean_epe,
        step_energies,
        running_means,
        window_means,
        window_spread,
        stationary_radius,
        radius_drift,
        tolerance: opts.tolerance,
        converged,
        regime,
    })
}

fn relative_spread_max(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    if max <= ZERO_ENERGY {
        0.0
    } else {
        (max - min) / max
    }
}

/// Whether every instance's total correction stays within
/// `energy * max |raw_t|`.
pub fn correction_within_energy_bound(traj: &Trajectory, schedule: &Schedule) -> bool {
    let e = schedule.energy();
    (0..traj.instance_count()).all(|i| {
        let max_raw = traj.steps.iter().map(|s| s.raw[i].norm()).fold(0.0, f64::max);
        traj.weighted_sum(i).norm() <= e * max_raw * (1.0 + 1e-12)
    })
}
