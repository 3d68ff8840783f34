//! Polygons, padded polygon batches and pixel-center rasterization.

use serde::{Deserialize, Serialize};

use crate::codec::OffsetVec;
use crate::error::{Error, Result};

/// A point in pixel coordinates, origin at the top-left corner, y down.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn offset(self, v: OffsetVec) -> Point2 {
        Point2::new(self.x + v.dx, self.y + v.dy)
    }

    /// Vector from `from` to `self`.
    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, from: Point2) -> OffsetVec {
        OffsetVec::new(self.x - from.x, self.y - from.y)
    }

    pub fn distance(self, other: Point2) -> f64 {
        self.sub(other).norm()
    }
}

/// How a polygon is reduced to a representative point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentroidMode {
    /// Area-weighted (shoelace) centroid, vertex mean for degenerate rings.
    #[default]
    Area,
    /// Arithmetic mean of the vertices.
    VertexMean,
}

/// Below this absolute signed area (px²) the area centroid falls back to
/// the vertex mean.
pub const DEGENERATE_AREA: f64 = 1e-9;

/// A closed ring of at least three finite vertices. The closing edge is
/// implicit. Rings need not be simple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point2>", into = "Vec<Point2>")]
pub struct Polygon {
    vertices: Vec<Point2>,
}

impl TryFrom<Vec<Point2>> for Polygon {
    type Error = Error;
    fn try_from(vertices: Vec<Point2>) -> Result<Self> {
        Polygon::new(vertices)
    }
}

impl From<Polygon> for Vec<Point2> {
    fn from(p: Polygon) -> Self {
        p.vertices
    }
}

impl Polygon {
    pub fn new(vertices: Vec<Point2>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::InvalidPolygon(format!(
                "need at least 3 vertices, got {}",
                vertices.len()
            )));
        }
        if let Some(k) = vertices.iter().position(|p| !p.is_finite()) {
            return Err(Error::InvalidPolygon(format!("vertex {k} is not finite")));
        }
        Ok(Self { vertices })
    }

    /// Build from `(x, y)` pairs.
    pub fn from_coords(coords: &[(f64, f64)]) -> Result<Self> {
        Self::new(coords.iter().map(|&(x, y)| Point2::new(x, y)).collect())
    }

    /// Axis-aligned rectangle with corners `(x0, y0)` and `(x1, y1)`.
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::from_coords(&[(x0, y0), (x1, y0), (x1, y1), (x0, y1)])
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    fn edges(&self) -> impl Iterator<Item = (Point2, Point2)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn signed_area(&self) -> f64 {
        0.5 * self
            .edges()
            .map(|(a, b)| a.x * b.y - b.x * a.y)
            .sum::<f64>()
    }

    pub fn vertex_mean(&self) -> Point2 {
        let n = self.vertices.len() as f64;
        let (sx, sy) = self
            .vertices
            .iter()
            .fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
        Point2::new(sx / n, sy / n)
    }

    /// Area-weighted centroid; the vertex mean when the ring encloses no area.
    pub fn centroid(&self) -> Point2 {
        // shoelace sums relative to the first vertex keep the result
        // well-conditioned far from the origin
        let o = self.vertices[0];
        let mut a2 = 0.0;
        let mut cx = 0.0;
        let mut cy = 0.0;
        for (p, q) in self.edges() {
            let (px, py) = (p.x - o.x, p.y - o.y);
            let (qx, qy) = (q.x - o.x, q.y - o.y);
            let cross = px * qy - qx * py;
            a2 += cross;
            cx += (px + qx) * cross;
            cy += (py + qy) * cross;
        }
        if (0.5 * a2).abs() < DEGENERATE_AREA {
            return self.vertex_mean();
        }
        Point2::new(o.x + cx / (3.0 * a2), o.y + cy / (3.0 * a2))
    }

    pub fn centroid_with(&self, mode: CentroidMode) -> Point2 {
        match mode {
            CentroidMode::Area => self.centroid(),
            CentroidMode::VertexMean => self.vertex_mean(),
        }
    }

    /// Rigid translation of every vertex.
    pub fn translate(&self, off: OffsetVec) -> Polygon {
        Polygon {
            vertices: self.vertices.iter().map(|p| p.offset(off)).collect(),
        }
    }

    /// `(min_x, min_y, max_x, max_y)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        self.vertices.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(x0, y0, x1, y1), p| (x0.min(p.x), y0.min(p.y), x1.max(p.x), y1.max(p.y)),
        )
    }

    /// Even-odd fill as horizontal runs of pixel columns `[start, end)` per
    /// row, restricted to a `width`×`height` grid. A pixel is inside iff its
    /// center is inside the ring.
    pub fn scanline_runs(&self, width: usize, height: usize) -> Vec<(usize, usize, usize)> {
        let mut runs = Vec::new();
        if width == 0 || height == 0 {
            return runs;
        }
        let (_, y0, _, y1) = self.bounds();
        let row_lo = (y0 - 0.5).floor().max(0.0) as usize;
        let row_hi = ((y1 - 0.5).ceil().max(-1.0) + 1.0).min(height as f64) as usize;
        let mut xs: Vec<f64> = Vec::with_capacity(8);
        for row in row_lo..row_hi {
            let py = row as f64 + 0.5;
            xs.clear();
            for (a, b) in self.edges() {
                if (a.y > py) != (b.y > py) {
                    xs.push((b.x - a.x) * (py - a.y) / (b.y - a.y) + a.x);
                }
            }
            if xs.len() < 2 {
                continue;
            }
            xs.sort_by(f64::total_cmp);
            for pair in xs.chunks_exact(2) {
                // centers px with pair[0] <= px < pair[1]
                let start = first_center_at_or_after(pair[0], width);
                let end = first_center_at_or_after(pair[1], width);
                if start < end {
                    runs.push((row, start, end));
                }
            }
        }
        runs
    }
}

/// Smallest column `i` in `0..=width` whose center `i + 0.5` is `>= x`.
fn first_center_at_or_after(x: f64, width: usize) -> usize {
    if x <= 0.5 {
        return 0;
    }
    if x > width as f64 - 0.5 {
        return width;
    }
    let mut i = (x - 0.5).ceil() as usize;
    while i > 0 && (i - 1) as f64 + 0.5 >= x {
        i -= 1;
    }
    while i < width && (i as f64 + 0.5) < x {
        i += 1;
    }
    i
}

/// Rigid translation of a polygon.
pub fn translate(poly: &Polygon, off: OffsetVec) -> Polygon {
    poly.translate(off)
}

/// Centroid of a polygon (area-weighted, vertex-mean fallback).
pub fn centroid(poly: &Polygon) -> Point2 {
    poly.centroid()
}

/// A row-major binary occupancy grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl RasterMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Set every pixel covered by `poly` (union with existing content).
    pub fn fill_polygon(&mut self, poly: &Polygon) {
        for (row, start, end) in poly.scanline_runs(self.width, self.height) {
            let base = row * self.width;
            self.bits[base + start..base + end].fill(true);
        }
    }
}

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidParameter(format!(
            "raster dimensions must be positive, got {width}x{height}"
        )));
    }
    Ok(())
}

/// Rasterize one polygon: pixel `(i, j)` is set iff its center
/// `(i + 0.5, j + 0.5)` lies inside under the even-odd rule.
pub fn rasterize(poly: &Polygon, width: usize, height: usize) -> Result<RasterMask> {
    check_dims(width, height)?;
    let mut mask = RasterMask::new(width, height);
    mask.fill_polygon(poly);
    Ok(mask)
}

/// Rasterize the union of several polygons.
pub fn rasterize_union<'a>(
    polys: impl IntoIterator<Item = &'a Polygon>,
    width: usize,
    height: usize,
) -> Result<RasterMask> {
    check_dims(width, height)?;
    let mut mask = RasterMask::new(width, height);
    for p in polys {
        mask.fill_polygon(p);
    }
    Ok(mask)
}

/// Padded `count × max_vertices × 2` keypoint matrix with a validity mask.
///
/// Row `i` holds the vertices of instance `i` in its first `n_i` slots;
/// padded slots carry zero coordinates and a zero mask entry.
#[derive(Debug, Clone, PartialEq)]
pub struct PolygonBatch {
    count: usize,
    max_vertices: usize,
    coords: Vec<f64>,
    validity: Vec<u8>,
}

impl PolygonBatch {
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn max_vertices(&self) -> usize {
        self.max_vertices
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn validity(&self) -> &[u8] {
        &self.validity
    }

    pub fn is_valid(&self, instance: usize, k: usize) -> bool {
        self.validity[instance * self.max_vertices + k] == 1
    }

    pub fn vertex_count(&self, instance: usize) -> usize {
        let row = &self.validity[instance * self.max_vertices..(instance + 1) * self.max_vertices];
        row.iter().take_while(|&&v| v == 1).count()
    }

    pub fn point(&self, instance: usize, k: usize) -> Point2 {
        let base = (instance * self.max_vertices + k) * 2;
        Point2::new(self.coords[base], self.coords[base + 1])
    }

    /// Assemble a batch from raw parts, checking shape and mask layout.
    pub fn from_parts(
        count: usize,
        max_vertices: usize,
        coords: Vec<f64>,
        validity: Vec<u8>,
    ) -> Result<Self> {
        if coords.len() != count * max_vertices * 2 || validity.len() != count * max_vertices {
            return Err(Error::ShapeMismatch(format!(
                "expected {count}x{max_vertices}x2 coordinates and {count}x{max_vertices} mask"
            )));
        }
        for i in 0..count {
            let row = &validity[i * max_vertices..(i + 1) * max_vertices];
            let n = row.iter().take_while(|&&v| v == 1).count();
            if n < 3 || row[n..].iter().any(|&v| v != 0) {
                return Err(Error::ShapeMismatch(format!(
                    "instance {i}: validity must be a prefix of at least 3 ones"
                )));
            }
        }
        Ok(Self {
            count,
            max_vertices,
            coords,
            validity,
        })
    }

    /// The polygon of one instance.
    pub fn polygon(&self, instance: usize) -> Polygon {
        let n = self.vertex_count(instance);
        Polygon {
            vertices: (0..n).map(|k| self.point(instance, k)).collect(),
        }
    }

    pub fn polygons(&self) -> Vec<Polygon> {
        (0..self.count).map(|i| self.polygon(i)).collect()
    }

    pub fn centroids(&self) -> Vec<Point2> {
        (0..self.count).map(|i| self.polygon(i).centroid()).collect()
    }

    /// Zero every padded coordinate (Hadamard product with the mask).
    pub fn apply_mask(&mut self) {
        for (slot, &m) in self.validity.iter().enumerate() {
            let keep = f64::from(m);
            self.coords[2 * slot] *= keep;
            self.coords[2 * slot + 1] *= keep;
        }
    }

    /// Translate every instance rigidly by its own offset.
    pub fn translate_each(&self, offsets: &[OffsetVec]) -> Result<PolygonBatch> {
        if offsets.len() != self.count {
            return Err(Error::ShapeMismatch(format!(
                "{} offsets for {} instances",
                offsets.len(),
                self.count
            )));
        }
        let mut out = self.clone();
        for (i, off) in offsets.iter().enumerate() {
            for k in 0..self.vertex_count(i) {
                let base = (i * self.max_vertices + k) * 2;
                out.coords[base] += off.dx;
                out.coords[base + 1] += off.dy;
            }
        }
        Ok(out)
    }

    /// Keep only the listed instances, in the given order.
    pub fn select(&self, indices: &[usize]) -> PolygonBatch {
        let l = self.max_vertices;
        let mut coords = Vec::with_capacity(indices.len() * l * 2);
        let mut validity = Vec::with_capacity(indices.len() * l);
        for &i in indices {
            coords.extend_from_slice(&self.coords[i * l * 2..(i + 1) * l * 2]);
            validity.extend_from_slice(&self.validity[i * l..(i + 1) * l]);
        }
        PolygonBatch {
            count: indices.len(),
            max_vertices: l,
            coords,
            validity,
        }
    }
}

/// Pad a list of polygons into a batch of width `max vertex count`.
pub fn pad_batch(polys: &[Polygon]) -> Result<PolygonBatch> {
    let max_vertices = polys.iter().map(Polygon::len).max().ok_or(Error::EmptyBatch)?;
    let count = polys.len();
    let mut coords = vec![0.0; count * max_vertices * 2];
    let mut validity = vec![0u8; count * max_vertices];
    for (i, poly) in polys.iter().enumerate() {
        for (k, p) in poly.vertices.iter().enumerate() {
            let slot = i * max_vertices + k;
            coords[2 * slot] = p.x;
            coords[2 * slot + 1] = p.y;
            validity[slot] = 1;
        }
    }
    Ok(PolygonBatch {
        count,
        max_vertices,
        coords,
        validity,
    })
}

/// Inverse of [`pad_batch`].
pub fn unpad(batch: &PolygonBatch) -> Vec<Polygon> {
    batch.polygons()
}
