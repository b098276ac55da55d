//! Miniature camera-based BEV detector: a strided conv backbone, a
//! geometric lift onto a learnable BEV grid, conv encoder/decoder layers
//! with integrator hook points, and a center-heatmap head with a toy
//! average-precision metric.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{uniform_tensor, BilinearTap, Graph, ParamId, ParamStore, Tensor, TensorId};
use crate::fusion::{ChainConfig, HookShapes, IntegratorChain};
use crate::layers::{Conv1x1Layer, Conv3x3Layer};
use crate::lidar::{CameraModel, VoxelSpec};
use crate::scene::SceneGt;
use crate::{Error, Result};

/// Metric <-> cell mapping of the BEV query grid: G x G cells covering the
/// perception range of a voxel spec.
#[derive(Debug, Clone, Copy)]
pub struct GridMap {
    pub x_min: f64,
    pub y_min: f64,
    pub cell_x: f64,
    pub cell_y: f64,
    pub g: usize,
}

impl GridMap {
    pub fn new(spec: &VoxelSpec, g: usize) -> Self {
        GridMap {
            x_min: spec.x_range.0,
            y_min: spec.y_range.0,
            cell_x: (spec.x_range.1 - spec.x_range.0) / g as f64,
            cell_y: (spec.y_range.1 - spec.y_range.0) / g as f64,
            g,
        }
    }

    pub fn cell_center(&self, ci: usize, cj: usize) -> (f64, f64) {
        (self.x_min + (ci as f64 + 0.5) * self.cell_x, self.y_min + (cj as f64 + 0.5) * self.cell_y)
    }

    pub fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let ci = ((x - self.x_min) / self.cell_x).floor().clamp(0.0, (self.g - 1) as f64) as usize;
        let cj = ((y - self.y_min) / self.cell_y).floor().clamp(0.0, (self.g - 1) as f64) as usize;
        (ci, cj)
    }
}

#[derive(Debug, Clone)]
pub struct DetectorConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub backbone_channels: [usize; 3],
    pub c_q: usize,
    pub bev_grid: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub voxel: VoxelSpec,
    pub match_radius: f64,
    pub aux_depth: bool,
    pub head_prior: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            image_h: 64,
            image_w: 96,
            backbone_channels: [16, 32, 64],
            c_q: 64,
            bev_grid: 48,
            enc_layers: 2,
            dec_layers: 2,
            voxel: VoxelSpec {
                x_range: (-51.2, 51.2),
                y_range: (-51.2, 51.2),
                z_range: (-5.0, 3.0),
                voxel: (0.23, 0.23, 8.0),
            },
            match_radius: 2.0,
            aux_depth: false,
            head_prior: 0.1,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_q != self.backbone_channels[2] {
            return Err(Error::Config(format!(
                "BEV channels ({}) must equal the last backbone stage ({})",
                self.c_q, self.backbone_channels[2]
            )));
        }
        if self.bev_grid < 3 || self.image_h < 8 || self.image_w < 8 {
            return Err(Error::Config("grid must be >= 3 and image at least 8x8".into()));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(Error::Config("encoder and decoder need at least one layer".into()));
        }
        if !(0.0 < self.head_prior && self.head_prior < 1.0) {
            return Err(Error::Config(format!("head prior {} outside (0,1)", self.head_prior)));
        }
        self.voxel.validate()
    }

    pub fn grid(&self) -> GridMap {
        GridMap::new(&self.voxel, self.bev_grid)
    }

    /// Spatial extent of backbone stage s (0-based), halving with ceil.
    pub fn stage_hw(&self, s: usize) -> (usize, usize) {
        let mut h = self.image_h;
        let mut w = self.image_w;
        for _ in 0..=s {
            h = (h - 1) / 2 + 1;
            w = (w - 1) / 2 + 1;
        }
        (h, w)
    }
}

/// Per-scene model inputs. The BEV map arrives already pooled to the query
/// grid; pass all-zero tensors for the missing-LiDAR protocol.
#[derive(Debug, Clone)]
pub struct SceneInputs {
    pub image: Tensor,
    pub m_depth: Tensor,
    pub m_bev: Tensor,
}

/// Graph handles of one forward pass.
pub struct DetOutput {
    pub heatmap_logits: TensorId,
    pub heatmap: TensorId,
    pub sizes: TensorId,
    pub aux_depth: Option<TensorId>,
}

pub struct Detector {
    pub store: ParamStore,
    pub cfg: DetectorConfig,
    pub chain: IntegratorChain,
    backbone: Vec<Conv3x3Layer>,
    q_bev: ParamId,
    enc_convs: Vec<Conv3x3Layer>,
    dec_convs: Vec<Conv3x3Layer>,
    head_hm: Conv1x1Layer,
    head_sz: Conv1x1Layer,
    aux_head: Option<Conv1x1Layer>,
    lift_taps: Arc<Vec<Option<BilinearTap>>>,
    cam: CameraModel,
}

impl Detector {
    /// Builds the model. The camera weights draw from one seeded stream and
    /// the integrator chain from another, so models that differ only in
    /// fusion configuration share identical camera weights.
    pub fn new(cfg: DetectorConfig, chain_cfg: ChainConfig, cam: &CameraModel, seed: u64) -> Result<Self> {
        cfg.validate()?;
        cam.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);

        let mut backbone = Vec::new();
        let mut c_in = 3;
        for (s, &c_out) in cfg.backbone_channels.iter().enumerate() {
            backbone.push(Conv3x3Layer::random(&mut store, &format!("backbone.s{s}"), c_in, c_out, 2, &mut rng));
            c_in = c_out;
        }

        let g = cfg.bev_grid;
        let q_bev = store.add("q_bev", uniform_tensor(&[cfg.c_q, g, g], 0.1, &mut rng));
        let mut enc_convs = Vec::new();
        for l in 0..cfg.enc_layers {
            enc_convs.push(Conv3x3Layer::random(&mut store, &format!("encoder.l{l}"), cfg.c_q, cfg.c_q, 1, &mut rng));
        }
        let mut dec_convs = Vec::new();
        for l in 0..cfg.dec_layers {
            dec_convs.push(Conv3x3Layer::random(&mut store, &format!("decoder.l{l}"), cfg.c_q, cfg.c_q, 1, &mut rng));
        }
        let head_hm = Conv1x1Layer::random(&mut store, "head.heatmap", cfg.c_q, 1, &mut rng);
        // bias toward the background prior keeps the focal loss stable early
        store.get_mut(head_hm.b).data_mut()[0] = (cfg.head_prior / (1.0 - cfg.head_prior)).ln();
        let head_sz = Conv1x1Layer::random(&mut store, "head.sizes", cfg.c_q, 2, &mut rng);
        let aux_head = cfg
            .aux_depth
            .then(|| Conv1x1Layer::random(&mut store, "head.aux_depth", cfg.backbone_channels[0], 1, &mut rng));

        let shapes = HookShapes {
            image_channels: 3,
            backbone_channels: cfg.backbone_channels,
            bev_channels: cfg.c_q,
            enc_layers: cfg.enc_layers,
            dec_layers: cfg.dec_layers,
            bev_map_channels: 3 * cfg.voxel.bins_z(),
        };
        let mut chain_rng = ChaCha8Rng::seed_from_u64(seed);
        chain_rng.set_stream(1);
        let chain = IntegratorChain::new(&mut store, chain_cfg, shapes, chain_rng.gen());

        let lift_taps = Arc::new(build_lift_taps(&cfg, cam));
        Ok(Detector {
            store,
            cfg,
            chain,
            backbone,
            q_bev,
            enc_convs,
            dec_convs,
            head_hm,
            head_sz,
            aux_head,
            lift_taps,
            cam: cam.clone(),
        })
    }

    pub fn grid(&self) -> GridMap {
        self.cfg.grid()
    }

    pub fn cam(&self) -> &CameraModel {
        &self.cam
    }

    /// Full forward pass. `Graph::new` for training, `Graph::inference` for
    /// evaluation; the store must not be bound beforehand.
    pub fn forward(&self, g: &mut Graph, inputs: &SceneInputs) -> Result<DetOutput> {
        self.store.bind(g);
        self.forward_bound(g, inputs)
    }

    /// Forward assuming the caller already bound this detector's store
    /// (used by gradient checks that override one parameter).
    pub fn forward_bound(&self, g: &mut Graph, inputs: &SceneInputs) -> Result<DetOutput> {
        let image = g.constant(inputs.image.clone());
        let mut st = self.chain.begin(g, &inputs.m_depth, &inputs.m_bev)?;

        let mut x = self.chain.image_input_hook(g, image, &st)?;
        let mut stage1 = None;
        for (s, conv) in self.backbone.iter().enumerate() {
            x = conv.forward(g, x)?;
            x = g.relu(x)?;
            x = self.chain.backbone_hook(g, s, x, &mut st)?;
            if s == 0 {
                stage1 = Some(x);
            }
        }

        let grid = self.cfg.bev_grid;
        let lifted = g.gather_bilinear(x, self.lift_taps.clone(), grid, grid)?;
        let mut bev = g.param(self.q_bev);
        for (l, conv) in self.enc_convs.iter().enumerate() {
            bev = g.add(bev, lifted)?;
            bev = conv.forward(g, bev)?;
            bev = g.relu(bev)?;
            bev = self.chain.encoder_hook(g, l, bev, &mut st)?;
        }
        for (l, conv) in self.dec_convs.iter().enumerate() {
            bev = conv.forward(g, bev)?;
            bev = g.relu(bev)?;
            bev = self.chain.decoder_hook(g, l, bev, &mut st)?;
        }

        let heatmap_logits = self.head_hm.forward(g, bev)?;
        let heatmap = g.sigmoid(heatmap_logits)?;
        let sizes = self.head_sz.forward(g, bev)?;
        let aux_depth = match (&self.aux_head, stage1) {
            (Some(head), Some(feats)) => {
                let pred = head.forward(g, feats)?;
                Some(g.resize_bilinear(pred, self.cfg.image_h, self.cfg.image_w)?)
            }
            _ => None,
        };
        Ok(DetOutput { heatmap_logits, heatmap, sizes, aux_depth })
    }
}

/// Bilinear taps from BEV cell centers (ground plane z = 0) into the last
/// backbone stage's feature map; cells behind the camera or projecting
/// outside the image get no tap and lift as zeros.
fn build_lift_taps(cfg: &DetectorConfig, cam: &CameraModel) -> Vec<Option<BilinearTap>> {
    let grid = cfg.grid();
    let (fh, fw) = cfg.stage_hw(2);
    let sx = fw as f64 / cam.width as f64;
    let sy = fh as f64 / cam.height as f64;
    let mut taps = Vec::with_capacity(grid.g * grid.g);
    for ci in 0..grid.g {
        for cj in 0..grid.g {
            let (x, y) = grid.cell_center(ci, cj);
            let Some((u, v, _)) = cam.project([x, y, 0.0]) else {
                taps.push(None);
                continue;
            };
            if u < 0.0 || v < 0.0 || u >= cam.width as f64 || v >= cam.height as f64 {
                taps.push(None);
                continue;
            }
            // same half-pixel mapping as the bilinear resize
            let uf = ((u + 0.5) * sx - 0.5).clamp(0.0, (fw - 1) as f64);
            let vf = ((v + 0.5) * sy - 0.5).clamp(0.0, (fh - 1) as f64);
            let x0 = uf.floor() as usize;
            let y0 = vf.floor() as usize;
            let x1 = (x0 + 1).min(fw - 1);
            let y1 = (y0 + 1).min(fh - 1);
            let fx = uf - x0 as f64;
            let fy = vf - y0 as f64;
            taps.push(Some(BilinearTap {
                idx: [y0 * fw + x0, y0 * fw + x1, y1 * fw + x0, y1 * fw + x1],
                w: [(1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx, fy * (1.0 - fx), fy * fx],
            }));
        }
    }
    taps
}

// ---- targets and loss ----------------------------------------------------

#[derive(Debug, Clone)]
pub struct Targets {
    pub heatmap: Tensor,
    pub sizes: Tensor,
    pub pos_cells: Vec<usize>,
}

/// Gaussian center splats plus log-size regression targets at the positive
/// cells. Sigma is half the larger box extent in cells, floored at one cell.
pub fn build_targets(gt: &SceneGt, grid: &GridMap) -> Targets {
    let g = grid.g;
    let mut heatmap = Tensor::zeros(&[1, g, g]);
    let mut sizes = Tensor::zeros(&[2, g, g]);
    let mut pos_cells = Vec::new();
    let cell = 0.5 * (grid.cell_x + grid.cell_y);
    for b in &gt.boxes {
        let (ci, cj) = grid.cell_of(b.cx, b.cy);
        let sigma = (b.w.max(b.l) / (2.0 * cell)).max(1.0);
        let radius = (3.0 * sigma).ceil() as isize;
        for di in -radius..=radius {
            for dj in -radius..=radius {
                let (i, j) = (ci as isize + di, cj as isize + dj);
                if i < 0 || j < 0 || i >= g as isize || j >= g as isize {
                    continue;
                }
                let val = (-((di * di + dj * dj) as f64) / (2.0 * sigma * sigma)).exp();
                let at = i as usize * g + j as usize;
                if val > heatmap.data()[at] {
                    heatmap.data_mut()[at] = val;
                }
            }
        }
        let center = ci * g + cj;
        if !pos_cells.contains(&center) {
            pos_cells.push(center);
        }
        heatmap.data_mut()[center] = 1.0;
        sizes.data_mut()[center] = b.w.ln();
        sizes.data_mut()[g * g + center] = b.l.ln();
    }
    Targets { heatmap, sizes, pos_cells }
}

pub const FOCAL_ALPHA: f64 = 2.0;
pub const FOCAL_BETA: f64 = 4.0;
pub const SIZE_LOSS_WEIGHT: f64 = 0.5;
pub const AUX_DEPTH_WEIGHT: f64 = 0.1;

/// Penalty-reduced focal loss on the heatmap plus weighted L1 on log sizes
/// at positive cells; an empty scene degrades to the heatmap term alone.
/// When the model predicts an auxiliary depth map, an L1 term against the
/// rasterized LiDAR depth (at its hit pixels) is added.
pub fn detection_loss(
    g: &mut Graph,
    out: &DetOutput,
    gt: &SceneGt,
    grid: &GridMap,
    aux_target: Option<&Tensor>,
) -> Result<TensorId> {
    let targets = build_targets(gt, grid);
    let focal = g.focal_loss(out.heatmap_logits, &targets.heatmap, FOCAL_ALPHA, FOCAL_BETA)?;
    let l1 = g.masked_l1(out.sizes, &targets.sizes, Arc::new(targets.pos_cells.clone()))?;
    let weighted = g.scale(l1, SIZE_LOSS_WEIGHT)?;
    let mut total = g.add(focal, weighted)?;
    if let (Some(aux), Some(target)) = (out.aux_depth, aux_target) {
        let hits: Vec<usize> = target.data().iter().enumerate().filter(|(_, &d)| d > 0.0).map(|(i, _)| i).collect();
        let aux_l1 = g.masked_l1(aux, target, Arc::new(hits))?;
        let aux_w = g.scale(aux_l1, AUX_DEPTH_WEIGHT)?;
        total = g.add(total, aux_w)?;
    }
    Ok(total)
}

// ---- toy average precision -------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct Peak {
    pub score: f64,
    pub x: f64,
    pub y: f64,
}

const PEAK_THRESHOLD: f64 = 0.1;

/// Strict 3x3 local maxima above threshold, strongest first.
pub fn extract_peaks(heatmap: &Tensor, grid: &GridMap) -> Vec<Peak> {
    let g = grid.g;
    let data = heatmap.data();
    let mut peaks = Vec::new();
    for ci in 0..g {
        for cj in 0..g {
            let v = data[ci * g + cj];
            if v <= PEAK_THRESHOLD {
                continue;
            }
            let mut is_max = true;
            'scan: for di in -1isize..=1 {
                for dj in -1isize..=1 {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let (i, j) = (ci as isize + di, cj as isize + dj);
                    if i < 0 || j < 0 || i >= g as isize || j >= g as isize {
                        continue;
                    }
                    if data[i as usize * g + j as usize] >= v {
                        is_max = false;
                        break 'scan;
                    }
                }
            }
            if is_max {
                let (x, y) = grid.cell_center(ci, cj);
                peaks.push(Peak { score: v, x, y });
            }
        }
    }
    peaks.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then(a.x.partial_cmp(&b.x).unwrap()).then(a.y.partial_cmp(&b.y).unwrap()));
    peaks
}

/// Center-distance average precision: peaks are greedily matched to the
/// nearest unclaimed ground-truth center within `match_radius`, and the
/// precision-recall curve is integrated over the score sweep. An empty
/// scene scores 1.0 with no predictions and 0.0 otherwise.
pub fn toy_ap(heatmap: &Tensor, gt: &SceneGt, grid: &GridMap, match_radius: f64) -> f64 {
    let peaks = extract_peaks(heatmap, grid);
    if gt.boxes.is_empty() {
        return if peaks.is_empty() { 1.0 } else { 0.0 };
    }
    let n_gt = gt.boxes.len();
    let mut claimed = vec![false; n_gt];
    let mut tp = 0usize;
    let mut ap = 0.0;
    for (rank, p) in peaks.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (bi, b) in gt.boxes.iter().enumerate() {
            if claimed[bi] {
                continue;
            }
            let d = ((b.cx - p.x).powi(2) + (b.cy - p.y).powi(2)).sqrt();
            if d <= match_radius && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((bi, d));
            }
        }
        if let Some((bi, _)) = best {
            claimed[bi] = true;
            tp += 1;
            let precision = tp as f64 / (rank + 1) as f64;
            ap += precision / n_gt as f64;
        }
    }
    ap
}
