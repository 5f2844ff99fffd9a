//! BEV grid definition and ground-truth height maps.
//!
//! Cells are addressed as `(i, j)` with `i` along `x` and `j` along `z`; the
//! flat index is `j * cells_x + i`. Height maps built from boxes give every
//! cell whose center falls inside a box footprint the box's center height and
//! vertical extent. LiDAR maps use the mode interval of a per-cell height
//! histogram and the lowest return.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::geometry::WorldPoint;
use crate::pgm::GrayImage;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum GridError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("height maps were built on different grids")]
    GridMismatch,
    #[error("cell ({0}, {1}) is outside the grid")]
    OutOfRange(i64, i64),
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("malformed height map csv at line {line}: {reason}")]
    Csv { line: usize, reason: String },
}

/// Grid layout over the BEV plane plus the modelled height range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub cells_x: usize,
    pub cells_z: usize,
    pub cell_size: f64,
    /// `(x_min, z_min)` in meters.
    pub origin: (f64, f64),
    /// `(y_min, y_max)` in meters.
    pub height_range: (f64, f64),
}

impl Default for GridSpec {
    /// 200 × 200 cells of 0.512 m centered on the ego, heights in [-5, 3] m.
    fn default() -> Self {
        Self {
            cells_x: 200,
            cells_z: 200,
            cell_size: 0.512,
            origin: (-51.2, -51.2),
            height_range: (-5.0, 3.0),
        }
    }
}

impl GridSpec {
    pub fn new(
        cells_x: usize,
        cells_z: usize,
        cell_size: f64,
        origin: (f64, f64),
        height_range: (f64, f64),
    ) -> Result<Self, GridError> {
        let g = Self { cells_x, cells_z, cell_size, origin, height_range };
        g.validate()?;
        Ok(g)
    }

    /// Smaller ego-centered grid used by the synthetic workloads: same cell
    /// size and height range as the default, `n × n` cells.
    pub fn ego_square(n: usize) -> Self {
        let half = n as f64 * 0.512 / 2.0;
        Self { cells_x: n, cells_z: n, origin: (-half, -half), ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), GridError> {
        let bad = |m: &str| Err(GridError::InvalidGrid(m.to_string()));
        if self.cells_x == 0 || self.cells_z == 0 {
            return bad("cell counts must be positive");
        }
        if !(self.cell_size.is_finite() && self.cell_size > 0.0) {
            return bad("cell size must be positive");
        }
        if !(self.origin.0.is_finite() && self.origin.1.is_finite()) {
            return bad("origin must be finite");
        }
        let (lo, hi) = self.height_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return bad("height range must satisfy y_min < y_max");
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.cells_x * self.cells_z
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.cells_x + i
    }

    pub fn cell_of(&self, index: usize) -> (usize, usize) {
        (index % self.cells_x, index / self.cells_x)
    }

    pub fn height_span(&self) -> f64 {
        self.height_range.1 - self.height_range.0
    }

    pub fn height_mid(&self) -> f64 {
        0.5 * (self.height_range.0 + self.height_range.1)
    }

    pub fn x_max(&self) -> f64 {
        self.origin.0 + self.cells_x as f64 * self.cell_size
    }

    pub fn z_max(&self) -> f64 {
        self.origin.1 + self.cells_z as f64 * self.cell_size
    }

    /// Cell containing `(x, z)`, or `None` when the point is off the grid.
    pub fn world_to_cell(&self, x: f64, z: f64) -> Option<(usize, usize)> {
        let fi = ((x - self.origin.0) / self.cell_size).floor();
        let fj = ((z - self.origin.1) / self.cell_size).floor();
        if !(fi >= 0.0 && fj >= 0.0) || fi >= self.cells_x as f64 || fj >= self.cells_z as f64 {
            return None;
        }
        Some((fi as usize, fj as usize))
    }

    /// Center of cell `(i, j)` as `(x, z)`.
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.origin.0 + (i as f64 + 0.5) * self.cell_size,
            self.origin.1 + (j as f64 + 0.5) * self.cell_size,
        )
    }

    pub fn cell_center_checked(&self, i: usize, j: usize) -> Result<(f64, f64), GridError> {
        if i >= self.cells_x || j >= self.cells_z {
            return Err(GridError::OutOfRange(i as i64, j as i64));
        }
        Ok(self.cell_center(i, j))
    }

    pub fn center_of_index(&self, index: usize) -> (f64, f64) {
        let (i, j) = self.cell_of(index);
        self.cell_center(i, j)
    }
}

/// Oriented 3D box. `size = (w, h, l)`: `l` runs along the heading
/// `(sin yaw, cos yaw)` in the `(x, z)` plane, `w` across it and `h` along `y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub class_id: u32,
    pub velocity: [f64; 2],
}

impl Box3D {
    pub fn validate(&self) -> Result<(), GridError> {
        if self.size.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(GridError::InvalidBox("sizes must be positive".into()));
        }
        if self.center.iter().chain(&self.velocity).chain([&self.yaw]).any(|v| !v.is_finite()) {
            return Err(GridError::InvalidBox("non-finite box parameter".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.size[0]
    }
    pub fn height(&self) -> f64 {
        self.size[1]
    }
    pub fn length(&self) -> f64 {
        self.size[2]
    }

    /// Unit heading in the `(x, z)` plane.
    pub fn heading(&self) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (s, c)
    }

    /// Offset `(dx, dz)` from the center expressed as `(along, across)`.
    pub fn to_local(&self, x: f64, z: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let dx = x - self.center[0];
        let dz = z - self.center[2];
        (dx * s + dz * c, dx * c - dz * s)
    }

    pub fn footprint_contains(&self, x: f64, z: f64) -> bool {
        let (a, b) = self.to_local(x, z);
        // boundary cells count as inside despite rounding in the rotation
        const EDGE_TOL: f64 = 1e-9;
        a.abs() <= 0.5 * self.length() + EDGE_TOL && b.abs() <= 0.5 * self.width() + EDGE_TOL
    }

    /// Footprint corners `(x, z)` in counter-clockwise order (x right, z up).
    pub fn footprint(&self) -> [(f64, f64); 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = 0.5 * self.length();
        let hw = 0.5 * self.width();
        let corner = |a: f64, b: f64| (self.center[0] + a * s + b * c, self.center[2] + a * c - b * s);
        [corner(-hl, -hw), corner(-hl, hw), corner(hl, hw), corner(hl, -hw)]
    }

    /// The eight 3D corners.
    pub fn corners(&self) -> [WorldPoint; 8] {
        let fp = self.footprint();
        let y0 = self.center[1] - 0.5 * self.height();
        let y1 = self.center[1] + 0.5 * self.height();
        let mut out = [WorldPoint::new(0.0, 0.0, 0.0); 8];
        for (k, &(x, z)) in fp.iter().enumerate() {
            out[k] = WorldPoint::new(x, y0, z);
            out[k + 4] = WorldPoint::new(x, y1, z);
        }
        out
    }

    pub fn bev_distance(&self, x: f64, z: f64) -> f64 {
        (self.center[0] - x).hypot(self.center[2] - z)
    }
}

/// Per-cell `(y, h, indicator)` field.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightMap {
    grid: GridSpec,
    y: Vec<f64>,
    h: Vec<f64>,
    indicator: Vec<bool>,
}

impl HeightMap {
    /// All cells unset, carrying the sentinel `(midpoint, full range)`.
    pub fn empty(grid: GridSpec) -> Self {
        let n = grid.num_cells();
        Self {
            grid,
            y: vec![grid.height_mid(); n],
            h: vec![grid.height_span(); n],
            indicator: vec![false; n],
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }
    pub fn y(&self) -> &[f64] {
        &self.y
    }
    pub fn h(&self) -> &[f64] {
        &self.h
    }
    pub fn indicator(&self) -> &[bool] {
        &self.indicator
    }

    pub fn occupied_count(&self) -> usize {
        self.indicator.iter().filter(|&&b| b).count()
    }

    pub fn set(&mut self, index: usize, y: f64, h: f64) {
        self.y[index] = y;
        self.h[index] = h;
        self.indicator[index] = true;
    }

    pub fn clear(&mut self, index: usize) {
        self.y[index] = self.grid.height_mid();
        self.h[index] = self.grid.height_span();
        self.indicator[index] = false;
    }

    /// Writes `i,j,indicator,y_m,h_m` rows, with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("i,j,indicator,y_m,h_m\n");
        for idx in 0..self.grid.num_cells() {
            let (i, j) = self.grid.cell_of(idx);
            let _ = writeln!(s, "{},{},{},{},{}", i, j, self.indicator[idx] as u8, self.y[idx], self.h[idx]);
        }
        s
    }

    pub fn from_csv(grid: GridSpec, text: &str) -> Result<Self, GridError> {
        let mut map = Self::empty(grid);
        let mut seen = 0usize;
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let err = |reason: &str| GridError::Csv { line: n + 1, reason: reason.to_string() };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(err("expected 5 fields"));
            }
            let i: usize = f[0].trim().parse().map_err(|_| err("bad i"))?;
            let j: usize = f[1].trim().parse().map_err(|_| err("bad j"))?;
            let ind: u8 = f[2].trim().parse().map_err(|_| err("bad indicator"))?;
            let y: f64 = f[3].trim().parse().map_err(|_| err("bad y"))?;
            let h: f64 = f[4].trim().parse().map_err(|_| err("bad h"))?;
            if i >= grid.cells_x || j >= grid.cells_z {
                return Err(err("cell outside grid"));
            }
            let idx = grid.index(i, j);
            map.y[idx] = y;
            map.h[idx] = h;
            map.indicator[idx] = match ind {
                0 => false,
                1 => true,
                _ => return Err(err("indicator must be 0 or 1")),
            };
            seen += 1;
        }
        if seen != grid.num_cells() {
            return Err(GridError::Csv { line: 0, reason: format!("expected {} rows, got {seen}", grid.num_cells()) });
        }
        Ok(map)
    }

    /// 8-bit gray value of a cell: `y` mapped linearly from the height range
    /// to 1..=255, so 0 marks only unset cells.
    pub fn gray_value(&self, index: usize) -> u8 {
        if !self.indicator[index] {
            return 0;
        }
        let t = (self.y[index] - self.grid.height_range.0) / self.grid.height_span();
        1 + (t.clamp(0.0, 1.0) * 254.0).round() as u8
    }

    /// Heat image with `+z` up: image row `r` holds grid row `cells_z - 1 - r`.
    pub fn to_pgm(&self) -> GrayImage {
        let g = &self.grid;
        let mut px = Vec::with_capacity(g.num_cells());
        for r in 0..g.cells_z {
            let j = g.cells_z - 1 - r;
            for i in 0..g.cells_x {
                px.push(self.gray_value(g.index(i, j)));
            }
        }
        GrayImage::new(g.cells_x, g.cells_z, px)
    }
}

/// Owning box index for every cell (cell center inside the footprint;
/// nearest box center wins on overlap, lower index on exact ties).
pub fn rasterize_boxes(g: &GridSpec, boxes: &[Box3D]) -> Vec<Option<usize>> {
    let mut owner: Vec<Option<usize>> = vec![None; g.num_cells()];
    let mut best = vec![f64::INFINITY; g.num_cells()];
    for (b_idx, b) in boxes.iter().enumerate() {
        let fp = b.footprint();
        let (mut x0, mut x1, mut z0, mut z1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for &(x, z) in &fp {
            x0 = x0.min(x);
            x1 = x1.max(x);
            z0 = z0.min(z);
            z1 = z1.max(z);
        }
        let lo_i = (((x0 - g.origin.0) / g.cell_size).floor() - 1.0).max(0.0) as usize;
        let lo_j = (((z0 - g.origin.1) / g.cell_size).floor() - 1.0).max(0.0) as usize;
        let hi_i = ((x1 - g.origin.0) / g.cell_size).ceil() + 1.0;
        let hi_j = ((z1 - g.origin.1) / g.cell_size).ceil() + 1.0;
        if hi_i < 0.0 || hi_j < 0.0 {
            continue;
        }
        let hi_i = (hi_i as usize).min(g.cells_x);
        let hi_j = (hi_j as usize).min(g.cells_z);
        for j in lo_j..hi_j {
            for i in lo_i..hi_i {
                let (cx, cz) = g.cell_center(i, j);
                if !b.footprint_contains(cx, cz) {
                    continue;
                }
                let idx = g.index(i, j);
                let d = b.bev_distance(cx, cz);
                if d < best[idx] {
                    best[idx] = d;
                    owner[idx] = Some(b_idx);
                }
            }
        }
    }
    owner
}

/// Ground-truth heights from boxes: each covered cell carries its box's
/// center height and vertical size, clipped to the grid's height range.
pub fn heightmap_from_boxes(g: &GridSpec, boxes: &[Box3D]) -> HeightMap {
    let owner = rasterize_boxes(g, boxes);
    let mut map = HeightMap::empty(*g);
    let (lo, hi) = g.height_range;
    for (idx, o) in owner.iter().enumerate() {
        if let Some(b) = o.map(|k| &boxes[k]) {
            let bottom = (b.center[1] - 0.5 * b.height()).max(lo);
            let top = (b.center[1] + 0.5 * b.height()).min(hi);
            if top < bottom {
                continue;
            }
            if bottom == b.center[1] - 0.5 * b.height() && top == b.center[1] + 0.5 * b.height() {
                map.set(idx, b.center[1], b.height());
            } else {
                map.set(idx, 0.5 * (bottom + top), top - bottom);
            }
        }
    }
    map
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LidarCloud {
    pub points: Vec<WorldPoint>,
}

/// Index of the height interval containing `y`, or `None` outside the range.
pub fn height_interval(g: &GridSpec, y: f64, intervals: usize) -> Option<usize> {
    let (lo, hi) = g.height_range;
    if !(y >= lo && y <= hi) {
        return None;
    }
    let k = ((y - lo) / g.height_span() * intervals as f64).floor() as usize;
    Some(k.min(intervals - 1))
}

/// LiDAR heights: per cell, `y` is the center of the most populated height
/// interval (lowest interval on ties) and `y − h/2` is the lowest return.
/// Points off the grid or outside the height range are ignored. `h` is
/// clipped to `[0, 2 (y_max − y)]` so the extent stays inside the range.
pub fn heightmap_from_lidar(g: &GridSpec, cloud: &LidarCloud, intervals: usize) -> HeightMap {
    let intervals = intervals.max(2);
    let n = g.num_cells();
    let mut counts = vec![0u32; n * intervals];
    let mut lowest = vec![f64::INFINITY; n];
    for p in &cloud.points {
        let Some((i, j)) = g.world_to_cell(p.x, p.z) else { continue };
        let Some(k) = height_interval(g, p.y, intervals) else { continue };
        let idx = g.index(i, j);
        counts[idx * intervals + k] += 1;
        lowest[idx] = lowest[idx].min(p.y);
    }
    let width = g.height_span() / intervals as f64;
    let mut map = HeightMap::empty(*g);
    for idx in 0..n {
        let hist = &counts[idx * intervals..(idx + 1) * intervals];
        let mut mode = 0;
        for k in 1..intervals {
            if hist[k] > hist[mode] {
                mode = k;
            }
        }
        if hist[mode] == 0 {
            continue;
        }
        let y = g.height_range.0 + (mode as f64 + 0.5) * width;
        let h = (2.0 * (y - lowest[idx])).clamp(0.0, 2.0 * (g.height_range.1 - y));
        map.set(idx, y, h);
    }
    map
}

/// Cell-wise fusion preferring box-derived heights over LiDAR heights.
pub fn fuse_heightmaps(from_boxes: &HeightMap, from_lidar: &HeightMap) -> Result<HeightMap, GridError> {
    if from_boxes.grid != from_lidar.grid {
        return Err(GridError::GridMismatch);
    }
    let mut out = from_boxes.clone();
    for idx in 0..out.grid.num_cells() {
        if !from_boxes.indicator[idx] && from_lidar.indicator[idx] {
            out.set(idx, from_lidar.y[idx], from_lidar.h[idx]);
        }
    }
    Ok(out)
}

/// Loss weights growing with distance from the ego origin:
/// `1 + d / d_max`, so the nearest cell gets ~1 and the farthest exactly 2.
pub fn centerness_weights(g: &GridSpec) -> Vec<f64> {
    let dist: Vec<f64> = (0..g.num_cells())
        .map(|idx| {
            let (x, z) = g.center_of_index(idx);
            x.hypot(z)
        })
        .collect();
    let max = dist.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return vec![1.0; dist.len()];
    }
    dist.into_iter().map(|d| 1.0 + d / max).collect()
}
