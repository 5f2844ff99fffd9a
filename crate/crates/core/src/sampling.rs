//! Height-driven feature sampling from camera feature maps into BEV queries.
//!
//! Each cell spreads anchor heights over `[y − h/2, y + h/2]`, lifts them to
//! 3D reference points at the cell center, projects those into every camera
//! and bilinearly samples the feature map there. Valid samples are averaged
//! into the cell's query; behind-camera and out-of-image samples are skipped.

use crate::bevgrid::{GridError, GridSpec, HeightMap};
use crate::exec::Execution;
use crate::geometry::{CameraModel, WorldPoint};
use crate::pgm::GrayImage;

/// Dense per-camera feature image, channels interleaved:
/// `values[(row * width + col) * channels + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub camera_index: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Image pixels per feature pixel.
    pub stride: f64,
    pub values: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(camera_index: usize, width: usize, height: usize, channels: usize, stride: f64) -> Self {
        assert!(width > 0 && height > 0 && channels > 0 && stride > 0.0, "feature map dimensions");
        Self { camera_index, width, height, channels, stride, values: vec![0.0; width * height * channels] }
    }

    pub fn texel(&self, col: usize, row: usize) -> &[f32] {
        let o = (row * self.width + col) * self.channels;
        &self.values[o..o + self.channels]
    }

    pub fn texel_mut(&mut self, col: usize, row: usize) -> &mut [f32] {
        let o = (row * self.width + col) * self.channels;
        &mut self.values[o..o + self.channels]
    }

    /// Adds the bilinear sample at image pixel `(u, v)` into `out`. Returns
    /// `false`, leaving `out` untouched, when the location falls outside
    /// `[0, W−1] × [0, H−1]` in feature-pixel coordinates.
    pub fn sample_into(&self, u: f64, v: f64, out: &mut [f64]) -> bool {
        let fu = u / self.stride;
        let fv = v / self.stride;
        let (w1, h1) = ((self.width - 1) as f64, (self.height - 1) as f64);
        if !(fu >= 0.0 && fv >= 0.0 && fu <= w1 && fv <= h1) {
            return false;
        }
        let c0 = (fu.floor() as usize).min(self.width.saturating_sub(2));
        let r0 = (fv.floor() as usize).min(self.height.saturating_sub(2));
        let c1 = (c0 + 1).min(self.width - 1);
        let r1 = (r0 + 1).min(self.height - 1);
        let ax = fu - c0 as f64;
        let ay = fv - r0 as f64;
        let taps = [
            (c0, r0, (1.0 - ax) * (1.0 - ay)),
            (c1, r0, ax * (1.0 - ay)),
            (c0, r1, (1.0 - ax) * ay),
            (c1, r1, ax * ay),
        ];
        for (c, r, w) in taps {
            if w == 0.0 {
                continue;
            }
            for (o, &t) in out.iter_mut().zip(self.texel(c, r)) {
                *o += w * t as f64;
            }
        }
        true
    }
}

/// Bilinear feature at image pixel `(u, v)`, or `None` outside the map.
pub fn bilinear_sample(fm: &FeatureMap, u: f64, v: f64) -> Option<Vec<f64>> {
    let mut out = vec![0.0; fm.channels];
    fm.sample_into(u, v, &mut out).then_some(out)
}

/// `n` heights spread uniformly over `[y − h/2, y + h/2]`, endpoints included.
pub fn anchor_heights(y: f64, h: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![y],
        _ => {
            let lo = y - 0.5 * h;
            let step = h / (n - 1) as f64;
            (0..n).map(|k| lo + step * k as f64).collect()
        }
    }
}

/// 3D reference points at the center of `cell` for each anchor height.
pub fn reference_points(g: &GridSpec, cell: (usize, usize), anchors: &[f64]) -> Result<Vec<WorldPoint>, GridError> {
    let (x, z) = g.cell_center_checked(cell.0, cell.1)?;
    Ok(anchors.iter().map(|&y| WorldPoint::new(x, y, z)).collect())
}

/// Anything that can provide an anchor span `(y, h)` per grid cell.
pub trait HeightSource {
    fn anchor_span(&self, index: usize) -> (f64, f64);
}

impl HeightSource for HeightMap {
    fn anchor_span(&self, index: usize) -> (f64, f64) {
        (self.y()[index], self.h()[index])
    }
}

/// Explicit per-cell `(y, h)` table.
impl HeightSource for Vec<(f64, f64)> {
    fn anchor_span(&self, index: usize) -> (f64, f64) {
        self[index]
    }
}

/// The same span everywhere: fixed anchors over the full height range.
#[derive(Debug, Clone, Copy)]
pub struct UniformHeights {
    pub y: f64,
    pub h: f64,
}

impl UniformHeights {
    pub fn full_range(g: &GridSpec) -> Self {
        Self { y: g.height_mid(), h: g.height_span() }
    }
}

impl HeightSource for UniformHeights {
    fn anchor_span(&self, _index: usize) -> (f64, f64) {
        (self.y, self.h)
    }
}

/// Aggregated per-cell queries and valid-sample counts.
#[derive(Debug, Clone, PartialEq)]
pub struct BevQueryGrid {
    channels: usize,
    features: Vec<f64>,
    hits: Vec<u32>,
}

impl BevQueryGrid {
    pub fn zeros(cells: usize, channels: usize) -> Self {
        Self { channels, features: vec![0.0; cells * channels], hits: vec![0; cells] }
    }

    pub fn from_parts(channels: usize, features: Vec<f64>, hits: Vec<u32>) -> Self {
        assert_eq!(features.len(), hits.len() * channels, "query grid shape");
        Self { channels, features, hits }
    }

    pub fn num_cells(&self) -> usize {
        self.hits.len()
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn hits(&self) -> &[u32] {
        &self.hits
    }
    pub fn features(&self) -> &[f64] {
        &self.features
    }
    pub fn cell(&self, index: usize) -> &[f64] {
        &self.features[index * self.channels..(index + 1) * self.channels]
    }

    fn zero_cell(&mut self, index: usize) {
        self.features[index * self.channels..(index + 1) * self.channels].fill(0.0);
        self.hits[index] = 0;
    }

    /// Gray dump of one channel scaled by its maximum, `+z` up.
    pub fn channel_pgm(&self, g: &GridSpec, channel: usize) -> GrayImage {
        assert_eq!(self.num_cells(), g.num_cells(), "query grid must cover the grid");
        let max = (0..self.num_cells()).map(|k| self.cell(k)[channel]).fold(0.0, f64::max);
        let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
        let mut px = Vec::with_capacity(g.num_cells());
        for r in 0..g.cells_z {
            let j = g.cells_z - 1 - r;
            for i in 0..g.cells_x {
                let v = self.cell(g.index(i, j))[channel].max(0.0) * scale;
                px.push(v.round().min(255.0) as u8);
            }
        }
        GrayImage::new(g.cells_x, g.cells_z, px)
    }
}

/// Samples one cell into `out` (length = channels, zeroed by the caller) and
/// returns the number of valid samples; `out` holds their mean.
pub fn aggregate_cell(
    g: &GridSpec,
    index: usize,
    span: (f64, f64),
    cams: &[CameraModel],
    fms: &[FeatureMap],
    n_anchors: usize,
    out: &mut [f64],
) -> u32 {
    let (x, z) = g.center_of_index(index);
    let anchors = anchor_heights(span.0, span.1, n_anchors);
    let mut hits = 0u32;
    for (cam, fm) in cams.iter().zip(fms) {
        if cam.misses_column(x, z, fm.stride * (fm.width - 1) as f64) {
            continue;
        }
        for &y in &anchors {
            let Ok(px) = cam.project(WorldPoint::new(x, y, z)) else { continue };
            if fm.sample_into(px.u, px.v, out) {
                hits += 1;
            }
        }
    }
    if hits > 0 {
        let inv = 1.0 / hits as f64;
        out.iter_mut().for_each(|o| *o *= inv);
    }
    hits
}

/// Aggregates the listed cells (in the given order) into a query grid with
/// one row per listed cell.
pub fn aggregate_cells<H: HeightSource + Sync>(
    g: &GridSpec,
    cells: &[usize],
    heights: &H,
    cams: &[CameraModel],
    fms: &[FeatureMap],
    n_anchors: usize,
    exec: Execution,
) -> BevQueryGrid {
    assert_eq!(cams.len(), fms.len(), "cameras and feature maps must align");
    let channels = fms.first().map_or(1, |f| f.channels);
    let rows = exec.map_slice(cells, |&idx| {
        let mut out = vec![0.0; channels];
        let hits = aggregate_cell(g, idx, heights.anchor_span(idx), cams, fms, n_anchors, &mut out);
        (out, hits)
    });
    let mut features = Vec::with_capacity(cells.len() * channels);
    let mut hits = Vec::with_capacity(cells.len());
    for (f, h) in rows {
        features.extend_from_slice(&f);
        hits.push(h);
    }
    BevQueryGrid { channels, features, hits }
}

/// Aggregates every grid cell.
pub fn aggregate<H: HeightSource + Sync>(
    g: &GridSpec,
    heights: &H,
    cams: &[CameraModel],
    fms: &[FeatureMap],
    n_anchors: usize,
    exec: Execution,
) -> BevQueryGrid {
    let cells: Vec<usize> = (0..g.num_cells()).collect();
    aggregate_cells(g, &cells, heights, cams, fms, n_anchors, exec)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Zeroes (feature and hit count) every cell whose segmentation probability
/// `sigmoid(logit)` is below `tau`.
pub fn apply_query_mask(q: &BevQueryGrid, logits: &[f64], tau: f64) -> BevQueryGrid {
    assert_eq!(logits.len(), q.num_cells(), "one logit per cell");
    let mut out = q.clone();
    for (idx, &l) in logits.iter().enumerate() {
        if sigmoid(l) < tau {
            out.zero_cell(idx);
        }
    }
    out
}

/// Uncertainty-based variant: zeroes cells whose predicted height
/// uncertainty exceeds `max_sigma`.
pub fn apply_uncertainty_mask(q: &BevQueryGrid, sigmas: &[f64], max_sigma: f64) -> BevQueryGrid {
    assert_eq!(sigmas.len(), q.num_cells(), "one sigma per cell");
    let mut out = q.clone();
    for (idx, &s) in sigmas.iter().enumerate() {
        if s > max_sigma {
            out.zero_cell(idx);
        }
    }
    out
}

#[cfg(test)]
// oracles index channels by hand
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp_map(w: usize, h: usize, c: usize, stride: f64) -> FeatureMap {
        let mut fm = FeatureMap::zeros(0, w, h, c, stride);
        for r in 0..h {
            for col in 0..w {
                for (k, v) in fm.texel_mut(col, r).iter_mut().enumerate() {
                    *v = ((col * 7 + r * 13 + k * 3) % 17) as f32 / 17.0;
                }
            }
        }
        fm
    }

    #[test]
    fn anchors_examples() {
        assert_eq!(anchor_heights(0.0, 4.0, 5), vec![-2.0, -1.0, 0.0, 1.0, 2.0]);
        assert_eq!(anchor_heights(0.7, 3.0, 1), vec![0.7]);
        assert_eq!(anchor_heights(0.7, 0.0, 3), vec![0.7; 3]);
    }

    #[test]
    fn anchors_symmetric_about_center() {
        for n in 1..10 {
            let a = anchor_heights(1.3, 2.6, n);
            for (x, y) in a.iter().zip(a.iter().rev()) {
                assert!(((x - 1.3) + (y - 1.3)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reference_point_examples() {
        let g = GridSpec::default();
        let p = reference_points(&g, (100, 100), &[0.0]).unwrap();
        assert!((p[0].x - 0.256).abs() < 1e-12 && p[0].y == 0.0 && (p[0].z - 0.256).abs() < 1e-12);
        let p = reference_points(&g, (3, 7), &anchor_heights(0.0, 2.0, 4)).unwrap();
        assert_eq!(p.len(), 4);
        assert!(p.iter().all(|q| q.x == p[0].x && q.z == p[0].z));
        assert!(reference_points(&g, (200, 0), &[0.0]).is_err());
    }

    #[test]
    fn bilinear_exact_and_mean() {
        let fm = ramp_map(6, 5, 3, 2.0);
        assert_eq!(
            bilinear_sample(&fm, 4.0, 6.0).unwrap(),
            fm.texel(2, 3).iter().map(|&v| v as f64).collect::<Vec<_>>()
        );
        let s = bilinear_sample(&fm, 3.0, 5.0).unwrap();
        for k in 0..3 {
            let mean = [fm.texel(1, 2)[k], fm.texel(2, 2)[k], fm.texel(1, 3)[k], fm.texel(2, 3)[k]]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>()
                / 4.0;
            assert!((s[k] - mean).abs() < 1e-12);
        }
        assert!(bilinear_sample(&fm, -0.1, 1.0).is_none());
        assert!(bilinear_sample(&fm, 10.01, 1.0).is_none());
        assert!(bilinear_sample(&fm, 10.0, 8.0).is_some());
    }

    #[test]
    fn bilinear_matches_four_tap_oracle() {
        let fm = ramp_map(9, 7, 4, 1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let u = rng.random_range(0.0..8.0 * 1.5);
            let v = rng.random_range(0.0..6.0 * 1.5);
            let s = bilinear_sample(&fm, u, v).unwrap();
            let (x, y) = (u / 1.5, v / 1.5);
            for k in 0..4 {
                // weight every texel by the tent function in both axes
                let mut want = 0.0;
                for r in 0..7 {
                    for c in 0..9 {
                        let w = (1.0 - (x - c as f64).abs()).max(0.0) * (1.0 - (y - r as f64).abs()).max(0.0);
                        want += w * fm.texel(c, r)[k] as f64;
                    }
                }
                assert!((s[k] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn behind_camera_contributes_nothing() {
        let g = GridSpec::new(4, 4, 1.0, (-2.0, -10.0), (-5.0, 3.0)).unwrap();
        let cam = CameraModel::new(50.0, 50.0, 32.0, 32.0, 64, 64).unwrap();
        let mut fm = FeatureMap::zeros(0, 64, 64, 2, 1.0);
        fm.values.fill(1.0);
        let q = aggregate(&g, &UniformHeights::full_range(&g), &[cam], &[fm], 4, Execution::Sequential);
        assert!(q.hits().iter().all(|&h| h == 0));
        assert!(q.features().iter().all(|&f| f == 0.0));
    }

    #[test]
    fn mask_examples() {
        let q = BevQueryGrid::from_parts(2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![1, 2, 3]);
        assert_eq!(apply_query_mask(&q, &[f64::INFINITY; 3], 0.25), q);
        let off = apply_query_mask(&q, &[f64::NEG_INFINITY; 3], 0.25);
        assert!(off.features().iter().all(|&f| f == 0.0) && off.hits().iter().all(|&h| h == 0));
        let once = apply_query_mask(&q, &[3.0, -3.0, 0.0], 0.25);
        assert_eq!(apply_query_mask(&once, &[3.0, -3.0, 0.0], 0.25), once);
        assert_eq!(once.cell(1), &[0.0, 0.0]);
        assert_eq!(once.cell(2), &[5.0, 6.0]);
        let unc = apply_uncertainty_mask(&q, &[0.5, 2.0, 1.0], 1.0);
        assert_eq!(unc.hits(), &[1, 0, 3]);
    }
}
