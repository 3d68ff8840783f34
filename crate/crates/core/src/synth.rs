//! Synthetic off-nadir scenes with exact label/footprint/roof geometry.
//!
//! Footprints are axis-aligned rectangles and L-shapes with integer corners.
//! Roofs are the footprints shifted along a per-image view direction by a
//! per-building height; historical labels are the footprints shifted by an
//! isotropic Gaussian draw. All offsets are snapped to a 1/64 px grid so
//! that `f + o = r` holds exactly and every coordinate survives the
//! six-decimal file format unchanged.

use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{compose, OffsetVec};
use crate::dataio::{self, AnnotationRecord, Dataset, DatasetManifest, ImageEntry, ViewTag};
use crate::error::{Error, Result};
use crate::geometry::{rasterize_union, Polygon};
use crate::predictor::{Channel, EvidenceRaster, HiddenTruth, PredictorContext};
use crate::{par, rng};

/// Offsets are snapped to multiples of this (exactly six decimals).
pub const GRID: f64 = 1.0 / 64.0;

pub fn snap(v: f64) -> f64 {
    (v / GRID).round() * GRID
}

pub fn snap_offset(v: OffsetVec) -> OffsetVec {
    OffsetVec::new(snap(v.dx), snap(v.dy))
}

const PLACEMENT_RETRIES: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub n_buildings: usize,
    /// Inclusive side-length range of footprints, px.
    pub size_range: (u32, u32),
    /// Roof-offset magnitude range, px; `(0, 0)` is a near-nadir view.
    pub height_range: (f64, f64),
    /// Direction of the roof offsets, radians; drawn per image when absent.
    pub view_azimuth: Option<f64>,
    /// Per-axis std of the label misplacement, px.
    pub osm_nu: f64,
    /// Box-blur radius of the evidence channels, px.
    pub blur_radius: u32,
    /// Minimum empty margin between footprint bounding boxes, px.
    pub min_gap: u32,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 512,
            height: 512,
            n_buildings: 8,
            size_range: (24, 64),
            height_range: (20.0, 60.0),
            view_azimuth: None,
            osm_nu: 20.0,
            blur_radius: 1,
            min_gap: 6,
            seed: 7,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.width == 0 || self.height == 0 {
            return bad(format!("image size {}x{} must be positive", self.width, self.height));
        }
        let (lo, hi) = self.size_range;
        if lo < 4 || lo > hi {
            return bad(format!("size_range ({lo}, {hi}) must satisfy 4 <= lo <= hi"));
        }
        let (h0, h1) = self.height_range;
        if !(h0.is_finite() && h1.is_finite() && 0.0 <= h0 && h0 <= h1) {
            return bad(format!("height_range ({h0}, {h1}) must satisfy 0 <= lo <= hi"));
        }
        if !(self.osm_nu.is_finite() && self.osm_nu >= 0.0) {
            return bad(format!("osm_nu must be finite and non-negative, got {}", self.osm_nu));
        }
        if let Some(a) = self.view_azimuth {
            if !a.is_finite() {
                return bad("view_azimuth must be finite".into());
            }
        }
        let margin = self.margin();
        if 2 * margin + hi as usize > self.width.min(self.height) {
            return bad(format!(
                "{}x{} image cannot hold a {hi} px building with {margin} px margins",
                self.width, self.height
            ));
        }
        Ok(())
    }

    /// Border kept free so that roofs stay inside the image.
    fn margin(&self) -> usize {
        self.height_range.1.ceil() as usize + 2
    }

    pub fn is_near_nadir(&self) -> bool {
        self.height_range.1 == 0.0
    }
}

/// One building: label, footprint and roof with their offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneInstance {
    pub osm: Polygon,
    pub footprint: Polygon,
    pub roof: Polygon,
    pub f_vec: OffsetVec,
    pub r_vec: OffsetVec,
    pub o_vec: OffsetVec,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneChannels {
    pub footprint: EvidenceRaster,
    pub roof: EvidenceRaster,
}

impl SceneChannels {
    pub fn get(&self, channel: Channel) -> &EvidenceRaster {
        match channel {
            Channel::FootprintEvidence => &self.footprint,
            Channel::RoofEvidence => &self.roof,
        }
    }

    pub fn context(&self) -> PredictorContext {
        PredictorContext::new()
            .with_channel(Channel::FootprintEvidence, self.footprint.clone())
            .and_then(|c| c.with_channel(Channel::RoofEvidence, self.roof.clone()))
            .expect("scene channels share dimensions")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub channels: SceneChannels,
    pub instances: Vec<SceneInstance>,
    /// Buildings that could not be placed without overlap.
    pub unplaced: usize,
    pub azimuth: f64,
}

impl Scene {
    pub fn truth(&self) -> HiddenTruth {
        HiddenTruth {
            footprints: self.instances.iter().map(|s| s.footprint.centroid()).collect(),
            roofs: self.instances.iter().map(|s| s.roof.centroid()).collect(),
        }
    }
}

fn footprint_shape<R: Rng>(rng: &mut R, x: f64, y: f64, w: f64, h: f64) -> Polygon {
    if rng.random_bool(0.5) {
        return Polygon::rect(x, y, x + w, y + h).expect("finite rectangle");
    }
    // L-shape: remove one corner block of at most half the extent
    let nw = rng.random_range(1..=((w as u32) / 2).max(1)) as f64;
    let nh = rng.random_range(1..=((h as u32) / 2).max(1)) as f64;
    let (x1, y1) = (x + w, y + h);
    let pts = match rng.random_range(0..4) {
        0 => [(x, y), (x1 - nw, y), (x1 - nw, y + nh), (x1, y + nh), (x1, y1), (x, y1)],
        1 => [(x, y), (x1, y), (x1, y1 - nh), (x1 - nw, y1 - nh), (x1 - nw, y1), (x, y1)],
        2 => [(x, y), (x1, y), (x1, y1), (x + nw, y1), (x + nw, y1 - nh), (x, y1 - nh)],
        _ => [(x + nw, y), (x1, y), (x1, y1), (x, y1), (x, y + nh), (x + nw, y + nh)],
    };
    Polygon::from_coords(&pts).expect("finite L-shape")
}

/// Sample one scene.
pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut layout = rng::keyed(cfg.seed, &[0]);
    let azimuth = cfg
        .view_azimuth
        .unwrap_or_else(|| layout.random_range(0.0..TAU));
    let margin = cfg.margin() as i64;
    let (lo, hi) = cfg.size_range;
    let gap = i64::from(cfg.min_gap);
    let mut boxes: Vec<(i64, i64, i64, i64)> = Vec::new();
    let mut instances = Vec::new();
    let mut unplaced = 0;
    for b in 0..cfg.n_buildings {
        let mut draw = rng::keyed(cfg.seed, &[1, b as u64]);
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let w = i64::from(layout.random_range(lo..=hi));
            let h = i64::from(layout.random_range(lo..=hi));
            let x = layout.random_range(margin..=cfg.width as i64 - margin - w);
            let y = layout.random_range(margin..=cfg.height as i64 - margin - h);
            let clear = boxes.iter().all(|&(bx0, by0, bx1, by1)| {
                x + w + gap <= bx0 || bx1 + gap <= x || y + h + gap <= by0 || by1 + gap <= y
            });
            if clear {
                placed = Some((x, y, w, h));
                break;
            }
        }
        let Some((x, y, w, h)) = placed else {
            unplaced += 1;
            continue;
        };
        boxes.push((x, y, x + w, y + h));
        let footprint = footprint_shape(&mut draw, x as f64, y as f64, w as f64, h as f64);
        let (h0, h1) = cfg.height_range;
        let height = if h1 > h0 { draw.random_range(h0..=h1) } else { h0 };
        let o_vec = snap_offset(OffsetVec::new(height * azimuth.cos(), height * azimuth.sin()));
        let f_vec = snap_offset(rng::gaussian2(&mut draw, cfg.osm_nu));
        instances.push(SceneInstance {
            osm: footprint.translate(-f_vec),
            roof: footprint.translate(o_vec),
            footprint,
            f_vec,
            r_vec: compose(f_vec, o_vec),
            o_vec,
        });
    }
    let channels = render_channels(&instances, cfg)?;
    Ok(Scene {
        channels,
        instances,
        unplaced,
        azimuth,
    })
}

fn blurred(polys: &[&Polygon], cfg: &SceneConfig) -> Result<EvidenceRaster> {
    let (w, h) = (cfg.width, cfg.height);
    let mask = rasterize_union(polys.iter().copied(), w, h)?;
    let r = cfg.blur_radius as usize;
    if r == 0 {
        let levels = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
        return EvidenceRaster::from_levels(w, h, levels);
    }
    // integral image, zero outside the raster
    let mut integral = vec![0u32; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0u32;
        for x in 0..w {
            row += u32::from(mask.get(x, y));
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let window = ((2 * r + 1) * (2 * r + 1)) as u32;
    let mut levels = vec![0u8; w * h];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let count = integral[y1 * (w + 1) + x1] + integral[y0 * (w + 1) + x0]
                - integral[y0 * (w + 1) + x1]
                - integral[y1 * (w + 1) + x0];
            // round(255 * count / window) in integers
            levels[y * w + x] = ((510 * count + window) / (2 * window)) as u8;
        }
    }
    EvidenceRaster::from_levels(w, h, levels)
}

/// Blurred union masks of the footprints and of the roofs.
pub fn render_channels(instances: &[SceneInstance], cfg: &SceneConfig) -> Result<SceneChannels> {
    let footprints: Vec<&Polygon> = instances.iter().map(|s| &s.footprint).collect();
    let roofs: Vec<&Polygon> = instances.iter().map(|s| &s.roof).collect();
    Ok(SceneChannels {
        footprint: blurred(&footprints, cfg)?,
        roof: blurred(&roofs, cfg)?,
    })
}

/// Multi-image dataset settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub scene: SceneConfig,
    pub n_images: usize,
    /// Fraction of images (taken first) rendered near-nadir.
    pub near_nadir_ratio: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            n_images: 20,
            near_nadir_ratio: 0.0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_images < 1 {
            return Err(Error::InvalidParameter("n_images must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.near_nadir_ratio) {
            return Err(Error::InvalidParameter("near_nadir_ratio must lie in [0, 1]".into()));
        }
        self.scene.validate()
    }

    /// Config of image `index`, with its derived seed.
    pub fn image_config(&self, index: usize) -> SceneConfig {
        let mut c = self.scene;
        c.seed = rng::mix(self.scene.seed, &[index as u64]);
        let near = (self.near_nadir_ratio * self.n_images as f64).round() as usize;
        if index < near {
            c.height_range = (0.0, 0.0);
        }
        c
    }
}

/// Generate every image in memory; images are independent and built in
/// parallel.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<(Dataset, usize)> {
    cfg.validate()?;
    let scenes = par::map_range(cfg.n_images, |i| generate_scene(&cfg.image_config(i)));
    let mut images = Vec::with_capacity(cfg.n_images);
    let mut records = Vec::new();
    let mut channels = Vec::with_capacity(cfg.n_images);
    let mut unplaced = 0;
    for (i, scene) in scenes.into_iter().enumerate() {
        let scene = scene?;
        let image_cfg = cfg.image_config(i);
        let id = i as u32;
        unplaced += scene.unplaced;
        images.push(ImageEntry::new(
            id,
            image_cfg.width,
            image_cfg.height,
            if image_cfg.is_near_nadir() { ViewTag::NearNadir } else { ViewTag::OffNadir },
        ));
        for inst in scene.instances {
            records.push(AnnotationRecord {
                id: records.len() as u64,
                image_id: id,
                osm: inst.osm,
                footprint: inst.footprint,
                roof: inst.roof,
                f_vec: inst.f_vec,
                o_vec: inst.o_vec,
                r_vec: inst.r_vec,
            });
        }
        channels.push(scene.channels);
    }
    let manifest = DatasetManifest::new(images, serde_json::to_value(cfg).expect("plain config"), cfg.scene.seed);
    Ok((
        Dataset {
            manifest,
            records,
            channels,
        },
        unplaced,
    ))
}

/// Generate and write a dataset directory.
pub fn build_dataset(cfg: &DatasetConfig, out: &Path) -> Result<(Dataset, usize)> {
    let (dataset, unplaced) = generate_dataset(cfg)?;
    dataio::write_dataset(&dataset, out)?;
    Ok((dataset, unplaced))
}

/// Mean label displacement `|f|` over a set of instances.
pub fn mean_displacement<'a>(instances: impl IntoIterator<Item = &'a OffsetVec>) -> f64 {
    let (sum, n) = instances
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v.norm(), n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
