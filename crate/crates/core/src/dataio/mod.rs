//! On-disk formats.
//!
//! A dataset directory holds `manifest.json`, `annotations.json` and one
//! binary graymap per image and channel under `channels/`. Alignment runs add
//! `predictions.json` (plus an optional trajectory dump in JSON lines), and
//! evaluation adds `metrics.json` / `metrics.csv`. Every JSON document carries
//! `format_version` and is written canonically (see [`canon`]), so equal
//! content always produces equal bytes.

pub mod canon;
pub mod pgm;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::codec::OffsetVec;
use crate::denoise::{StepRecord, Trajectory};
use crate::error::{Error, Result};
use crate::geometry::{Point2, Polygon};
use crate::predictor::{Channel, PredictionStatus};
use crate::synth::SceneChannels;

pub const FORMAT_VERSION: &str = "1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const CHANNELS_DIR: &str = "channels";

/// Maximum tolerated `|f + o - r|` on load, px.
pub const CLOSURE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewTag {
    NearNadir,
    OffNadir,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: u32,
    pub width: usize,
    pub height: usize,
    pub view: ViewTag,
    /// Channel name → path relative to the dataset root.
    pub channels: BTreeMap<String, String>,
}

impl ImageEntry {
    pub fn new(id: u32, width: usize, height: usize, view: ViewTag) -> Self {
        let channels = Channel::ALL
            .iter()
            .map(|c| (c.name().to_owned(), channel_file(id, *c)))
            .collect();
        Self {
            id,
            width,
            height,
            view,
            channels,
        }
    }
}

pub fn channel_file(image_id: u32, channel: Channel) -> String {
    format!("{CHANNELS_DIR}/img_{image_id}_{}.pgm", channel.name())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: String,
    pub annotations: String,
    pub master_seed: u64,
    /// Echo of the generator configuration.
    pub generator: Value,
    pub images: Vec<ImageEntry>,
}

impl DatasetManifest {
    pub fn new(images: Vec<ImageEntry>, generator: Value, master_seed: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION.to_owned(),
            annotations: ANNOTATIONS_FILE.to_owned(),
            master_seed,
            generator,
            images,
        }
    }
}

/// Ground truth for one building.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub id: u64,
    pub image_id: u32,
    pub osm: Polygon,
    pub footprint: Polygon,
    pub roof: Polygon,
    pub f_vec: OffsetVec,
    pub o_vec: OffsetVec,
    pub r_vec: OffsetVec,
}

type Ring = Vec<[f64; 2]>;

fn ring(p: &Polygon) -> Ring {
    p.vertices().iter().map(|v| [v.x, v.y]).collect()
}

fn vec2(v: OffsetVec) -> [f64; 2] {
    [v.dx, v.dy]
}

fn offset(v: [f64; 2]) -> OffsetVec {
    OffsetVec::new(v[0], v[1])
}

fn polygon(r: &Ring, what: &str) -> std::result::Result<Polygon, String> {
    Polygon::new(r.iter().map(|&[x, y]| Point2::new(x, y)).collect())
        .map_err(|e| format!("{what}: {e}"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordWire {
    id: u64,
    image_id: u32,
    osm: Ring,
    footprint: Ring,
    roof: Ring,
    f_vec: [f64; 2],
    o_vec: [f64; 2],
    r_vec: [f64; 2],
}

impl From<&AnnotationRecord> for RecordWire {
    fn from(r: &AnnotationRecord) -> Self {
        Self {
            id: r.id,
            image_id: r.image_id,
            osm: ring(&r.osm),
            footprint: ring(&r.footprint),
            roof: ring(&r.roof),
            f_vec: vec2(r.f_vec),
            o_vec: vec2(r.o_vec),
            r_vec: vec2(r.r_vec),
        }
    }
}

impl RecordWire {
    fn validate(&self) -> std::result::Result<AnnotationRecord, String> {
        let rec = AnnotationRecord {
            id: self.id,
            image_id: self.image_id,
            osm: polygon(&self.osm, "osm")?,
            footprint: polygon(&self.footprint, "footprint")?,
            roof: polygon(&self.roof, "roof")?,
            f_vec: offset(self.f_vec),
            o_vec: offset(self.o_vec),
            r_vec: offset(self.r_vec),
        };
        if ![rec.f_vec, rec.o_vec, rec.r_vec].iter().all(|v| v.is_finite()) {
            return Err("non-finite offset".into());
        }
        let gap = (rec.f_vec + rec.o_vec - rec.r_vec).norm();
        if gap > CLOSURE_TOLERANCE {
            return Err(format!("f_vec + o_vec differs from r_vec by {gap:.6} px"));
        }
        Ok(rec)
    }
}

#[derive(Serialize, Deserialize)]
struct AnnotationsWire {
    format_version: String,
    annotations: Vec<RecordWire>,
}

/// A dataset in memory; `channels[k]` belongs to `manifest.images[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<AnnotationRecord>,
    pub channels: Vec<SceneChannels>,
}

impl Dataset {
    pub fn record_ids(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.id).collect()
    }

    /// Records of one image, in file order.
    pub fn records_of(&self, image_id: u32) -> Vec<&AnnotationRecord> {
        self.records.iter().filter(|r| r.image_id == image_id).collect()
    }

    pub fn channels_of(&self, image_id: u32) -> Option<&SceneChannels> {
        self.manifest
            .images
            .iter()
            .position(|i| i.id == image_id)
            .map(|k| &self.channels[k])
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Write any serializable value as a canonical JSON document.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_file(path, canon::to_pretty(value))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn check_version(path: &Path, found: &str) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.to_owned(),
            found: found.to_owned(),
            expected: FORMAT_VERSION.to_owned(),
        });
    }
    Ok(())
}

/// Write manifest, annotations and channel rasters. The manifest is written
/// last.
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    for (entry, channels) in dataset.manifest.images.iter().zip(&dataset.channels) {
        for channel in Channel::ALL {
            let rel = entry.channels.get(channel.name()).ok_or_else(|| {
                Error::InvalidParameter(format!("image {} lacks {}", entry.id, channel.name()))
            })?;
            let path = root.join(rel);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            pgm::write(&path, channels.get(channel))?;
        }
    }
    let annotations = AnnotationsWire {
        format_version: FORMAT_VERSION.to_owned(),
        annotations: dataset.records.iter().map(RecordWire::from).collect(),
    };
    write_json(&root.join(&dataset.manifest.annotations), &annotations)?;
    write_json(&root.join(MANIFEST_FILE), &dataset.manifest)
}

/// A loaded dataset plus the records dropped in lenient mode.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    pub dataset: Dataset,
    pub rejected: Vec<String>,
}

/// Load and validate a dataset directory. In strict mode any invalid record
/// fails the load; in lenient mode invalid records are dropped and listed.
pub fn load_dataset(root: &Path, lenient: bool) -> Result<LoadedDataset> {
    let manifest_path = root.join(MANIFEST_FILE);
    let manifest: DatasetManifest = read_json(&manifest_path)?;
    check_version(&manifest_path, &manifest.format_version)?;

    let mut image_ids = BTreeSet::new();
    let mut channels = Vec::with_capacity(manifest.images.len());
    for entry in &manifest.images {
        if !image_ids.insert(entry.id) {
            return Err(Error::format(&manifest_path, format!("duplicate image id {}", entry.id)));
        }
        let load = |c: Channel| -> Result<_> {
            let rel = entry.channels.get(c.name()).ok_or_else(|| {
                Error::format(&manifest_path, format!("image {} lacks {}", entry.id, c.name()))
            })?;
            let path = root.join(rel);
            let raster = pgm::read(&path)?;
            if (raster.width(), raster.height()) != (entry.width, entry.height) {
                return Err(Error::format(
                    &path,
                    format!("raster is {}x{}, manifest says {}x{}", raster.width(), raster.height(), entry.width, entry.height),
                ));
            }
            Ok(raster)
        };
        channels.push(SceneChannels {
            footprint: load(Channel::FootprintEvidence)?,
            roof: load(Channel::RoofEvidence)?,
        });
    }

    let ann_path = root.join(&manifest.annotations);
    let wire: AnnotationsWire = read_json(&ann_path)?;
    check_version(&ann_path, &wire.format_version)?;
    let mut seen = BTreeSet::new();
    let mut records = Vec::with_capacity(wire.annotations.len());
    let mut rejected = Vec::new();
    for w in &wire.annotations {
        let outcome = if !seen.insert(w.id) {
            Err("duplicate id".to_owned())
        } else if !image_ids.contains(&w.image_id) {
            Err(format!("unknown image_id {}", w.image_id))
        } else {
            w.validate()
        };
        match outcome {
            Ok(r) => records.push(r),
            Err(msg) => rejected.push(format!("record {}: {msg}", w.id)),
        }
    }
    if !rejected.is_empty() && !lenient {
        return Err(Error::RejectedRecords(rejected));
    }
    Ok(LoadedDataset {
        dataset: Dataset {
            manifest,
            records,
            channels,
        },
        rejected,
    })
}

/// Aligned output for one building.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub id: u64,
    pub footprint: Polygon,
    pub roof: Polygon,
    pub o_hat: OffsetVec,
    pub flags: Vec<String>,
    pub trajectory: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionWire {
    id: u64,
    footprint: Ring,
    roof: Ring,
    o_hat: [f64; 2],
    flags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trajectory: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct PredictionsWire {
    format_version: String,
    config: Value,
    predictions: Vec<PredictionWire>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionFile {
    /// Effective run configuration that produced the predictions.
    pub config: Value,
    pub predictions: Vec<PredictionRecord>,
}

pub fn write_predictions(path: &Path, file: &PredictionFile) -> Result<()> {
    let wire = PredictionsWire {
        format_version: FORMAT_VERSION.to_owned(),
        config: file.config.clone(),
        predictions: file
            .predictions
            .iter()
            .map(|p| PredictionWire {
                id: p.id,
                footprint: ring(&p.footprint),
                roof: ring(&p.roof),
                o_hat: vec2(p.o_hat),
                flags: p.flags.clone(),
                trajectory: p.trajectory.clone(),
            })
            .collect(),
    };
    write_json(path, &wire)
}

/// Load predictions and check that their ids are exactly `expected_ids`.
pub fn load_predictions(path: &Path, expected_ids: &[u64]) -> Result<PredictionFile> {
    let wire: PredictionsWire = read_json(path)?;
    check_version(path, &wire.format_version)?;

    let expected: BTreeSet<u64> = expected_ids.iter().copied().collect();
    let mut seen = BTreeSet::new();
    let mut duplicate = Vec::new();
    for p in &wire.predictions {
        if !seen.insert(p.id) {
            duplicate.push(p.id);
        }
    }
    let missing: Vec<u64> = expected.difference(&seen).copied().collect();
    let extra: Vec<u64> = seen.difference(&expected).copied().collect();
    if !(missing.is_empty() && extra.is_empty() && duplicate.is_empty()) {
        let mut parts = Vec::new();
        if !missing.is_empty() {
            parts.push(format!("missing ids {missing:?}"));
        }
        if !extra.is_empty() {
            parts.push(format!("unknown ids {extra:?}"));
        }
        if !duplicate.is_empty() {
            parts.push(format!("duplicate ids {duplicate:?}"));
        }
        return Err(Error::IdMismatch(parts.join("; ")));
    }

    let mut rejected = Vec::new();
    let mut predictions = Vec::with_capacity(wire.predictions.len());
    for p in wire.predictions {
        let checked = polygon(&p.footprint, "footprint").and_then(|f| {
            let r = polygon(&p.roof, "roof")?;
            let o = offset(p.o_hat);
            if !o.is_finite() {
                return Err("non-finite o_hat".to_owned());
            }
            Ok((f, r, o))
        });
        match checked {
            Ok((footprint, roof, o_hat)) => predictions.push(PredictionRecord {
                id: p.id,
                footprint,
                roof,
                o_hat,
                flags: p.flags,
                trajectory: p.trajectory,
            }),
            Err(msg) => rejected.push(format!("prediction {}: {msg}", p.id)),
        }
    }
    if !rejected.is_empty() {
        return Err(Error::RejectedRecords(rejected));
    }
    Ok(PredictionFile {
        config: wire.config,
        predictions,
    })
}

/// One line of a trajectory dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRow {
    pub run: u32,
    pub image_id: u32,
    pub instance_id: u64,
    pub t: u32,
    pub a_t: f64,
    pub raw: [f64; 2],
    pub centroid: [f64; 2],
}

/// Rows for one trajectory, `t = 0` (start, `a_t = 0`) through `T`.
pub fn trajectory_rows(traj: &Trajectory, image_id: u32, instance_ids: &[u64]) -> Vec<TrajectoryRow> {
    let mut rows = Vec::with_capacity((traj.len() + 1) * instance_ids.len());
    for (i, &id) in instance_ids.iter().enumerate() {
        let c = traj.start_centroids[i];
        rows.push(TrajectoryRow {
            run: traj.run,
            image_id,
            instance_id: id,
            t: 0,
            a_t: 0.0,
            raw: [0.0, 0.0],
            centroid: [c.x, c.y],
        });
        for s in &traj.steps {
            let c = s.centroids[i];
            rows.push(TrajectoryRow {
                run: traj.run,
                image_id,
                instance_id: id,
                t: s.t,
                a_t: s.weight,
                raw: vec2(s.raw[i]),
                centroid: [c.x, c.y],
            });
        }
    }
    rows
}

pub fn write_trajectories(path: &Path, rows: &[TrajectoryRow]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&canon::to_line(r));
        text.push('\n');
    }
    write_file(path, text)
}

pub fn read_trajectories(path: &Path) -> Result<Vec<TrajectoryRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| {
            serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", k + 1)))
        })
        .collect()
}

/// A trajectory rebuilt from dump rows, tagged with its image and the
/// instance ids in track order.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedTrajectory {
    pub image_id: u32,
    pub instance_ids: Vec<u64>,
    pub trajectory: Trajectory,
}

/// Group dump rows by `(image, run)` and rebuild compact trajectories.
/// Polygon snapshots are not stored in dumps, so `start` is absent.
pub fn assemble_trajectories(path: &Path, rows: &[TrajectoryRow]) -> Result<Vec<LoadedTrajectory>> {
    // (image, run) -> instance -> t -> row
    type Tracks<'a> = BTreeMap<u64, BTreeMap<u32, &'a TrajectoryRow>>;
    let mut groups: BTreeMap<(u32, u32), Tracks> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.image_id, r.run))
            .or_default()
            .entry(r.instance_id)
            .or_default()
            .insert(r.t, r);
    }
    let mut out = Vec::with_capacity(groups.len());
    for ((image_id, run), tracks) in groups {
        let ids: Vec<u64> = tracks.keys().copied().collect();
        let steps_per: BTreeSet<usize> = tracks.values().map(BTreeMap::len).collect();
        if steps_per.len() != 1 {
            return Err(Error::format(path, format!("image {image_id} run {run}: ragged tracks")));
        }
        let len = *steps_per.iter().next().expect("non-empty group");
        for track in tracks.values() {
            if track.keys().copied().ne(0..len as u32) {
                return Err(Error::format(path, format!("image {image_id} run {run}: steps must be 0..{len}")));
            }
        }
        let point = |r: &TrajectoryRow| Point2::new(r.centroid[0], r.centroid[1]);
        let start_centroids = tracks.values().map(|t| point(t[&0])).collect();
        let mut cumulative = vec![OffsetVec::ZERO; ids.len()];
        let mut steps = Vec::with_capacity(len.saturating_sub(1));
        for t in 1..len as u32 {
            let rows_t: Vec<&TrajectoryRow> = tracks.values().map(|tr| tr[&t]).collect();
            let weight = rows_t[0].a_t;
            let raw: Vec<OffsetVec> = rows_t.iter().map(|r| offset(r.raw)).collect();
            for (c, r) in cumulative.iter_mut().zip(&raw) {
                *c += *r * weight;
            }
            steps.push(StepRecord {
                t,
                weight,
                raw,
                cumulative: cumulative.clone(),
                centroids: rows_t.iter().map(|r| point(r)).collect(),
                status: vec![PredictionStatus::Ok; ids.len()],
            });
        }
        out.push(LoadedTrajectory {
            image_id,
            trajectory: Trajectory {
                run,
                start: None,
                start_centroids,
                steps,
                frozen: vec![false; ids.len()],
            },
            instance_ids: ids,
        });
    }
    Ok(out)
}

/// Write a CSV file from a header and pre-formatted rows.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut text = header.join(",");
    text.push('\n');
    for r in rows {
        text.push_str(&r.join(","));
        text.push('\n');
    }
    write_file(path, text)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text)
}

/// Resolve `p` against `base` unless absolute.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_owned()
    } else {
        base.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, DatasetConfig, SceneConfig};

    fn fixture() -> Dataset {
        let cfg = DatasetConfig {
            scene: SceneConfig { n_buildings: 4, seed: 42, ..Default::default() },
            n_images: 3,
            near_nadir_ratio: 0.0,
        };
        generate_dataset(&cfg).unwrap().0
    }

    fn edit_annotations(root: &Path, f: impl FnOnce(&mut Value)) {
        let path = root.join(ANNOTATIONS_FILE);
        let mut v: Value = read_json(&path).unwrap();
        f(&mut v);
        write_json(&path, &v).unwrap();
    }

    #[test]
    fn write_load_roundtrip_and_byte_determinism() {
        let ds = fixture();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_dataset(&ds, a.path()).unwrap();
        write_dataset(&ds, b.path()).unwrap();
        for f in [MANIFEST_FILE, ANNOTATIONS_FILE, "channels/img_2_roof_evidence.pgm"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
        let loaded = load_dataset(a.path(), false).unwrap();
        assert!(loaded.rejected.is_empty());
        assert_eq!(loaded.dataset, ds);
        assert_eq!(loaded.dataset.manifest.images.len(), 3);
        assert_eq!(loaded.dataset.records.len(), 12);
    }

    #[test]
    fn floats_use_six_decimals() {
        let ds = fixture();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(ANNOTATIONS_FILE)).unwrap();
        assert!(text.contains("\"format_version\": \"1\""));
        let first = &ds.records[0].footprint.vertices()[0];
        assert!(text.contains(&format!("[{:.6}, {:.6}]", first.x, first.y)));
        assert!(!text.contains('\r'));
        let bytes = fs::read(dir.path().join("channels/img_0_footprint_evidence.pgm")).unwrap();
        assert!(bytes.starts_with(b"P5\n512 512\n255\n"));
    }

    #[test]
    fn closure_violation_rejected_unless_lenient() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&fixture(), dir.path()).unwrap();
        edit_annotations(dir.path(), |v| {
            let r = &mut v["annotations"][5]["r_vec"][0];
            *r = serde_json::json!(r.as_f64().unwrap() + 0.01);
        });
        match load_dataset(dir.path(), false) {
            Err(Error::RejectedRecords(list)) => {
                assert_eq!(list.len(), 1);
                assert!(list[0].starts_with("record 5:"), "{list:?}");
            }
            other => panic!("expected rejection, got {other:?}"),
        }
        let lenient = load_dataset(dir.path(), true).unwrap();
        assert_eq!(lenient.dataset.records.len(), 11);
        assert_eq!(lenient.rejected.len(), 1);
    }

    #[test]
    fn short_rings_and_unknown_images_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&fixture(), dir.path()).unwrap();
        edit_annotations(dir.path(), |v| {
            v["annotations"][0]["osm"] = serde_json::json!([[0.0, 0.0], [1.0, 1.0]]);
            v["annotations"][1]["image_id"] = serde_json::json!(99);
        });
        let Err(Error::RejectedRecords(list)) = load_dataset(dir.path(), false) else {
            panic!("expected rejection");
        };
        assert_eq!(list.len(), 2);
    }

    #[test]
    fn version_mismatch_refused() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&fixture(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut v: Value = read_json(&path).unwrap();
        v["format_version"] = serde_json::json!("2");
        write_json(&path, &v).unwrap();
        assert!(matches!(load_dataset(dir.path(), false), Err(Error::Version { .. })));
    }

    #[test]
    fn missing_channel_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&fixture(), dir.path()).unwrap();
        fs::remove_file(dir.path().join("channels/img_1_roof_evidence.pgm")).unwrap();
        assert!(matches!(load_dataset(dir.path(), false), Err(Error::Io { .. })));
    }

    fn gt_predictions(ds: &Dataset) -> PredictionFile {
        PredictionFile {
            config: serde_json::json!({"predictor": "copy"}),
            predictions: ds
                .records
                .iter()
                .map(|r| PredictionRecord {
                    id: r.id,
                    footprint: r.footprint.clone(),
                    roof: r.roof.clone(),
                    o_hat: r.o_vec,
                    flags: vec![],
                    trajectory: None,
                })
                .collect(),
        }
    }

    #[test]
    fn predictions_roundtrip_and_id_checks() {
        let ds = fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("predictions.json");
        let preds = gt_predictions(&ds);
        write_predictions(&path, &preds).unwrap();
        assert_eq!(load_predictions(&path, &ds.record_ids()).unwrap(), preds);

        let mut short = preds.clone();
        short.predictions.retain(|p| p.id != 7);
        write_predictions(&path, &short).unwrap();
        let err = load_predictions(&path, &ds.record_ids()).unwrap_err();
        assert!(matches!(err, Error::IdMismatch(_)));
        assert!(err.to_string().contains("missing ids [7]"), "{err}");
    }

    #[test]
    fn empty_prediction_polygons_named() {
        let ds = fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("predictions.json");
        write_predictions(&path, &gt_predictions(&ds)).unwrap();
        let mut v: Value = read_json(&path).unwrap();
        v["predictions"][3]["footprint"] = serde_json::json!([]);
        write_json(&path, &v).unwrap();
        let err = load_predictions(&path, &ds.record_ids()).unwrap_err();
        assert!(err.to_string().contains("prediction 3"), "{err}");
    }
}
