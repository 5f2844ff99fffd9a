//! End-to-end desk workflow on synthetic scenes: render, train the height
//! predictor with self-recursive resampling, build final BEV queries under
//! different height sources, read detections out of them and score them.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bevgrid::{centerness_weights, heightmap_from_boxes, rasterize_boxes, Box3D, GridSpec, HeightMap};
use crate::exec::Execution;
use crate::metrics::{evaluate, Detection, EvalResult, Frame};
use crate::predictor::{
    cell_ranges, decode, fit, init_embeddings, targets_from_map, BatchSource, CellBatch, CellTarget, Decoded, Embedding, EpochLog,
    FitConfig, Optimizer, PredictorError, PredictorParams,
};
use crate::sampling::{aggregate, aggregate_cells, apply_query_mask, BevQueryGrid, FeatureMap, UniformHeights};
use crate::synthscene::{
    decode_signature, render, RenderConfig, Scene, CH_IDENTITY, CH_OBJECTNESS, IDENTITY_LEN, SIGNATURE_CHANNELS,
};

/// Cells closer than this to the ego count as "near" in error breakdowns.
pub const NEAR_RANGE_M: f64 = 12.0;

/// Turning aggregated queries into boxes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReadoutConfig {
    /// Minimum objectness for a cell to seed or join a detection.
    pub objectness: f64,
    /// Minimum cosine between centered identity codes of neighbouring cells.
    pub identity_cosine: f64,
    pub min_cells: usize,
}

impl Default for ReadoutConfig {
    fn default() -> Self {
        Self { objectness: 0.2, identity_cosine: 0.9, min_cells: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub grid: GridSpec,
    pub n_anchors: usize,
    /// Segmentation probability below which queries are masked out.
    pub tau: f64,
    pub render: RenderConfig,
    /// Training renders draw a per-scene background noise amplitude
    /// uniformly from `[0, train_noise_max]`.
    pub train_noise_max: f64,
    /// Background cells sampled per occupied cell when building batches.
    pub background_ratio: usize,
    /// Share of the sampled background cells drawn from smear cells.
    pub hard_negative_fraction: f64,
    pub readout: ReadoutConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::ego_square(96),
            n_anchors: 8,
            tau: 0.25,
            render: RenderConfig::default(),
            train_noise_max: 0.0,
            background_ratio: 2,
            hard_negative_fraction: 0.5,
            readout: ReadoutConfig::default(),
        }
    }
}

/// A scene with everything derived from it that does not depend on the
/// predictor.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub scene: Scene,
    pub gt: HeightMap,
    /// Index of the box owning each cell.
    pub owner: Vec<Option<usize>>,
    pub views: Vec<FeatureMap>,
}

impl PreparedScene {
    pub fn new(scene: Scene, grid: &GridSpec, render_cfg: &RenderConfig) -> Self {
        let gt = heightmap_from_boxes(grid, &scene.boxes);
        let owner = rasterize_boxes(grid, &scene.boxes);
        let views = render(&scene, render_cfg);
        Self { scene, gt, owner, views }
    }
}

pub fn prepare_all(scenes: &[Scene], cfg: &PipelineConfig, exec: Execution) -> Vec<PreparedScene> {
    exec.map_slice(scenes, |s| PreparedScene::new(s.clone(), &cfg.grid, &cfg.render))
}

/// Box whose identity code best matches the aggregated query:
/// argmax of the dot product between the query's centered identity channels
/// and each box's ±1 code. `None` for an all-zero query.
pub fn dominant_box(q: &[f64], n_boxes: usize) -> Option<usize> {
    let ids = &q[CH_IDENTITY..CH_IDENTITY + IDENTITY_LEN];
    if ids.iter().all(|&v| v == 0.0) {
        return None;
    }
    (0..n_boxes)
        .map(|slot| {
            let code = crate::synthscene::identity_code(slot);
            let dot: f64 = ids.iter().zip(&code).map(|(&v, &c)| v * (2.0 * c as f64 - 1.0)).sum();
            (slot, dot)
        })
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(slot, _)| slot)
}

/// Fraction of occupied cells whose dominant sampled identity is their
/// owning box, aggregating with ground-truth heights.
pub fn closed_loop_accuracy(p: &PreparedScene, grid: &GridSpec, n_anchors: usize, exec: Execution) -> (usize, usize) {
    let q = aggregate(grid, &p.gt, &p.scene.cameras, &p.views, n_anchors, exec);
    let mut good = 0;
    let mut total = 0;
    for (idx, o) in p.owner.iter().enumerate() {
        if let Some(b) = o {
            total += 1;
            if dominant_box(q.cell(idx), p.scene.boxes.len()) == Some(*b) {
                good += 1;
            }
        }
    }
    (good, total)
}

/// Training batches: every occupied cell plus a seeded sample of background
/// cells, with queries resampled at the heights the current parameters
/// predict at each layer.
pub struct TrainingSet {
    grid: GridSpec,
    n_anchors: usize,
    scenes: Vec<PreparedScene>,
    cells: Vec<Vec<usize>>,
    ranges: Vec<Vec<f64>>,
    targets: Vec<Vec<CellTarget>>,
}

impl TrainingSet {
    pub fn new(scenes: &[Scene], cfg: &PipelineConfig, seed: u64, exec: Execution) -> Self {
        let weights = centerness_weights(&cfg.grid);
        let prepared: Vec<PreparedScene> = exec.map(scenes.len(), |k| {
            let mut rc = cfg.render;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ scenes[k].seed.rotate_left(17));
            rc.noise_amplitude = cfg.train_noise_max * rand::Rng::random::<f64>(&mut rng);
            rc.noise_seed = seed;
            PreparedScene::new(scenes[k].clone(), &cfg.grid, &rc)
        });
        let mut cells = Vec::with_capacity(prepared.len());
        let mut targets = Vec::with_capacity(prepared.len());
        for (k, p) in prepared.iter().enumerate() {
            let occupied: Vec<usize> = (0..cfg.grid.num_cells()).filter(|&i| p.gt.indicator()[i]).collect();
            // Smear cells light up under full-range anchors without holding
            // a box; they are the negatives the mask exists for.
            let smear_q = aggregate(&cfg.grid, &UniformHeights::full_range(&cfg.grid), &p.scene.cameras, &p.views, cfg.n_anchors, exec);
            let (mut smear, mut plain): (Vec<usize>, Vec<usize>) = (0..cfg.grid.num_cells())
                .filter(|&i| !p.gt.indicator()[i])
                .partition(|&i| smear_q.cell(i)[0] >= cfg.readout.objectness);
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
            smear.shuffle(&mut rng);
            plain.shuffle(&mut rng);
            let n_bg = cfg.background_ratio * occupied.len().max(1);
            let n_smear = ((n_bg as f64 * cfg.hard_negative_fraction).round() as usize).min(smear.len());
            let n_plain = (n_bg - n_smear).min(plain.len());
            let mut chosen = occupied;
            chosen.extend_from_slice(&smear[..n_smear]);
            chosen.extend_from_slice(&plain[..n_plain]);
            chosen.sort_unstable();
            targets.push(targets_from_map(&p.gt, &weights, &chosen));
            cells.push(chosen);
        }
        let ranges = cells.iter().map(|c| cell_ranges(&cfg.grid, c)).collect();
        Self { grid: cfg.grid, n_anchors: cfg.n_anchors, scenes: prepared, cells, ranges, targets }
    }

    pub fn scenes(&self) -> &[PreparedScene] {
        &self.scenes
    }
}

impl BatchSource for TrainingSet {
    fn num_scenes(&self) -> usize {
        self.scenes.len()
    }

    fn batch(&self, params: &PredictorParams, s: usize) -> CellBatch {
        let p = &self.scenes[s];
        let cells = &self.cells[s];
        let mut es = init_embeddings(cells.len());
        let mut spans = vec![(self.grid.height_mid(), self.grid.height_span()); self.grid.num_cells()];
        let mut queries = Vec::with_capacity(params.num_layers());
        for l in 0..params.num_layers() {
            for (d, &c) in decode(&es, &self.grid).iter().zip(cells) {
                spans[c] = (d.y, d.h);
            }
            let q = aggregate_cells(&self.grid, cells, &spans, &p.scene.cameras, &p.views, self.n_anchors, Execution::Sequential);
            es = params.forward(&es, &q, &self.ranges[s], l).expect("batch shapes agree");
            queries.push(q);
        }
        CellBatch { queries, targets: self.targets[s].clone(), ranges: self.ranges[s].clone(), grid: self.grid }
    }
}

/// Training recipe for the desk-scale pipeline: Adam with a cosine-decayed
/// step, since resampling the anchors every epoch makes the loss surface move
/// under plain momentum.
pub fn desk_fit_config(epochs: usize, seed: u64) -> FitConfig {
    FitConfig {
        epochs,
        lr: 0.004,
        momentum: 0.9,
        optimizer: Optimizer::Adam { beta2: 0.999, eps: 1e-8 },
        seed,
        final_lr_scale: 0.05,
        backtrack: false,
        ..FitConfig::default()
    }
}

/// Trains the predictor on `scenes`.
pub fn train(
    scenes: &[Scene],
    cfg: &PipelineConfig,
    fit_cfg: &FitConfig,
    exec: Execution,
) -> Result<(PredictorParams, Vec<EpochLog>), PredictorError> {
    let set = TrainingSet::new(scenes, cfg, fit_cfg.seed, exec);
    fit(&set, SIGNATURE_CHANNELS, fit_cfg, exec)
}

/// Where the anchor heights of the final aggregation come from.
#[derive(Debug, Clone, Copy)]
pub enum HeightMode<'a> {
    /// Ground-truth height map; the optional mask uses the GT indicator.
    GroundTruth,
    /// Self-recursive predictor; the optional mask uses its segmentation.
    Predicted(&'a PredictorParams),
    /// Fixed anchors over the full height range, never masked.
    Baseline,
}

/// Runs the predictor over the whole grid: `E_0 → (aggregate → refine) × L`.
pub fn predict_embeddings(params: &PredictorParams, p: &PreparedScene, cfg: &PipelineConfig, exec: Execution) -> Vec<Embedding> {
    let mut es = init_embeddings(cfg.grid.num_cells());
    let all: Vec<usize> = (0..cfg.grid.num_cells()).collect();
    let ranges = cell_ranges(&cfg.grid, &all);
    for l in 0..params.num_layers() {
        let d = decode(&es, &cfg.grid);
        let q = aggregate(&cfg.grid, &d, &p.scene.cameras, &p.views, cfg.n_anchors, exec);
        es = params.forward(&es, &q, &ranges, l).expect("full-grid shapes agree");
    }
    es
}

/// Final BEV queries and, for the predicted mode, the decoded predictions.
pub fn final_queries(
    p: &PreparedScene,
    mode: HeightMode,
    mask: bool,
    cfg: &PipelineConfig,
    exec: Execution,
) -> (BevQueryGrid, Option<Vec<Decoded>>) {
    let g = &cfg.grid;
    match mode {
        HeightMode::GroundTruth => {
            let q = aggregate(g, &p.gt, &p.scene.cameras, &p.views, cfg.n_anchors, exec);
            if !mask {
                return (q, None);
            }
            let logits: Vec<f64> =
                p.gt.indicator().iter().map(|&o| if o { f64::INFINITY } else { f64::NEG_INFINITY }).collect();
            (apply_query_mask(&q, &logits, cfg.tau), None)
        }
        HeightMode::Predicted(params) => {
            let es = predict_embeddings(params, p, cfg, exec);
            let d = decode(&es, g);
            let q = aggregate(g, &d, &p.scene.cameras, &p.views, cfg.n_anchors, exec);
            let q = if mask {
                let logits: Vec<f64> = es.iter().map(|e| e[4]).collect();
                apply_query_mask(&q, &logits, cfg.tau)
            } else {
                q
            };
            (q, Some(d))
        }
        HeightMode::Baseline => {
            (aggregate(g, &UniformHeights::full_range(g), &p.scene.cameras, &p.views, cfg.n_anchors, exec), None)
        }
    }
}

fn centered_identity(q: &[f64]) -> [f64; IDENTITY_LEN] {
    let ids = &q[CH_IDENTITY..CH_IDENTITY + IDENTITY_LEN];
    let mean = ids.iter().sum::<f64>() / IDENTITY_LEN as f64;
    let mut out = [0.0; IDENTITY_LEN];
    for (o, &v) in out.iter_mut().zip(ids) {
        *o = v - mean;
    }
    out
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Groups confident cells into 8-connected components of consistent
/// identity and turns each into a box: objectness-weighted centroid,
/// attributes decoded from the weighted mean signature, score = mean
/// objectness.
pub fn readout(q: &BevQueryGrid, g: &GridSpec, cfg: &ReadoutConfig) -> Vec<Detection> {
    let n = g.num_cells();
    let cand: Vec<bool> = (0..n).map(|k| q.hits()[k] > 0 && q.cell(k)[CH_OBJECTNESS] >= cfg.objectness).collect();
    let ids: Vec<[f64; IDENTITY_LEN]> = (0..n).map(|k| centered_identity(q.cell(k))).collect();
    let mut label = vec![usize::MAX; n];
    let mut out = Vec::new();
    for seed in 0..n {
        if !cand[seed] || label[seed] != usize::MAX {
            continue;
        }
        let comp = out.len();
        let mut members = vec![seed];
        let mut queue = VecDeque::from([seed]);
        label[seed] = comp;
        while let Some(k) = queue.pop_front() {
            let (i, j) = g.cell_of(k);
            for dj in -1i64..=1 {
                for di in -1i64..=1 {
                    let (ni, nj) = (i as i64 + di, j as i64 + dj);
                    if (di == 0 && dj == 0) || ni < 0 || nj < 0 || ni >= g.cells_x as i64 || nj >= g.cells_z as i64 {
                        continue;
                    }
                    let nb = g.index(ni as usize, nj as usize);
                    if cand[nb] && label[nb] == usize::MAX && cosine(&ids[k], &ids[nb]) >= cfg.identity_cosine {
                        label[nb] = comp;
                        members.push(nb);
                        queue.push_back(nb);
                    }
                }
            }
        }
        out.push(members);
    }
    out.into_iter()
        .filter(|m| m.len() >= cfg.min_cells)
        .map(|members| component_box(q, g, &members))
        .collect()
}

fn component_box(q: &BevQueryGrid, g: &GridSpec, members: &[usize]) -> Detection {
    let mut wsum = 0.0;
    let (mut x, mut z) = (0.0, 0.0);
    let mut sig = vec![0.0; q.channels()];
    for &k in members {
        let c = q.cell(k);
        let w = c[CH_OBJECTNESS];
        let (cx, cz) = g.center_of_index(k);
        wsum += w;
        x += w * cx;
        z += w * cz;
        // the objectness-weighted sum of normalized signatures is the plain sum
        for (s, &v) in sig.iter_mut().zip(c) {
            *s += v;
        }
    }
    let sig: Vec<f64> = sig.iter().map(|s| s / wsum).collect();
    let d = decode_signature(&sig, g.height_range);
    Detection {
        bbox: Box3D { center: [x / wsum, d.center_y, z / wsum], size: d.size, yaw: d.yaw, class_id: d.class_id, velocity: d.velocity },
        score: (wsum / members.len() as f64).clamp(0.0, 1.0),
    }
}

/// Per-scene outputs of one evaluation run.
#[derive(Debug, Clone)]
pub struct SceneEval {
    pub frame: Frame,
    /// Predicted minus ground-truth `y` and BEV range per occupied cell
    /// (predicted mode only).
    pub y_errors: Vec<(f64, f64)>,
}

/// Reads out and scores every scene under one height mode.
pub fn evaluate_scenes(
    prepared: &[PreparedScene],
    mode: HeightMode,
    mask: bool,
    cfg: &PipelineConfig,
    exec: Execution,
) -> (EvalResult, Vec<SceneEval>) {
    // parallelism lives inside aggregation; scenes run in order
    let per_scene: Vec<SceneEval> = prepared
        .iter()
        .map(|p| {
            let (q, d) = final_queries(p, mode, mask, cfg, exec);
            let detections = readout(&q, &cfg.grid, &cfg.readout);
            let y_errors = match d {
                Some(d) => (0..cfg.grid.num_cells())
                    .filter(|&k| p.gt.indicator()[k])
                    .map(|k| {
                        let (x, z) = cfg.grid.center_of_index(k);
                        (d[k].y - p.gt.y()[k], x.hypot(z))
                    })
                    .collect(),
                None => Vec::new(),
            };
            SceneEval { frame: Frame { detections, ground_truth: p.scene.boxes.clone() }, y_errors }
        })
        .collect();
    let frames: Vec<Frame> = per_scene.iter().map(|s| s.frame.clone()).collect();
    (evaluate(&frames), per_scene)
}

/// Linear-interpolated percentile (`pct` in `[0, 100]`) of absolute values.
pub fn abs_percentile(values: &[f64], pct: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v: Vec<f64> = values.iter().map(|x| x.abs()).collect();
    v.sort_by(f64::total_cmp);
    let pos = pct / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthscene::generate;

    #[test]
    fn dominant_box_of_pure_code() {
        let mut q = vec![0.0; SIGNATURE_CHANNELS];
        let code = crate::synthscene::identity_code(3);
        for k in 0..IDENTITY_LEN {
            q[CH_IDENTITY + k] = 0.4 * code[k] as f64;
        }
        assert_eq!(dominant_box(&q, 6), Some(3));
        assert_eq!(dominant_box(&vec![0.0; SIGNATURE_CHANNELS], 6), None);
    }

    #[test]
    fn percentile_examples() {
        assert_eq!(abs_percentile(&[-1.0, 2.0, 3.0, -4.0, 5.0], 50.0), 3.0);
        assert_eq!(abs_percentile(&[1.0, 2.0], 75.0), 1.75);
    }

    #[test]
    fn gt_readout_recovers_boxes() {
        let cfg = PipelineConfig::default();
        let s = generate(4, 6, &cfg.grid).unwrap();
        let p = PreparedScene::new(s, &cfg.grid, &cfg.render);
        let (q, _) = final_queries(&p, HeightMode::GroundTruth, true, &cfg, Execution::default());
        let dets = readout(&q, &cfg.grid, &cfg.readout);
        let frame = Frame { detections: dets, ground_truth: p.scene.boxes.clone() };
        let r = evaluate(&[frame]);
        assert!(r.map > 0.5, "{r:?}");
    }
}
