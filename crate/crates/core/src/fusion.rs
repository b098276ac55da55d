//! LiDAR geometry integrators: the depth-aware and geometry-aware embedding
//! blocks and the response chain that threads their state through a
//! detector.
//!
//! Every LiDAR-to-detector injection goes through a zero-initialized up
//! projection, so a freshly built fused model computes exactly the
//! camera-only forward pass and training grows the fusion from there.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Tensor, TensorId};
use crate::layers::{Conv1x1Layer, DenseLayer};
use crate::quat::{split_activation_graph, Activation, QuaternionLinear};
use crate::{Error, Result};

/// Which quaternion axes the two modalities occupy: the default packs image
/// features on the real axis and LiDAR depth state on the first imaginary
/// axis; the swapped variant exchanges them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AxisAssignment {
    #[default]
    LidarOnI,
    LidarOnR,
}

impl AxisAssignment {
    /// Packs the reduced image features and depth state onto (r, i, j, k);
    /// j and k stay zero.
    pub fn pack(&self, g: &mut Graph, f_img: TensorId, c_depth: TensorId) -> Result<TensorId> {
        let shape = g.value(f_img).shape().to_vec();
        let z0 = g.constant(Tensor::zeros(&shape));
        let z1 = g.constant(Tensor::zeros(&shape));
        match self {
            AxisAssignment::LidarOnI => g.stack0(&[f_img, c_depth, z0, z1]),
            AxisAssignment::LidarOnR => g.stack0(&[c_depth, f_img, z0, z1]),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lidar_on_i" => Ok(AxisAssignment::LidarOnI),
            "lidar_on_r" => Ok(AxisAssignment::LidarOnR),
            other => Err(Error::Config(format!("unknown axis assignment `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AxisAssignment::LidarOnI => "lidar_on_i",
            AxisAssignment::LidarOnR => "lidar_on_r",
        }
    }
}

/// The cross-modal mixing operation inside a depth-aware block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DaeMixingKind {
    /// Hamilton-product layer over the packed quaternion (4 h^2 weights).
    Quaternion,
    /// Real dense 1x1 conv over the same packed 4h channels (16 h^2), the
    /// MLP arm the quaternion layer is measured against.
    Dense,
    /// Plain concatenation of the two reduced streams followed by a 1x1
    /// conv of matched output size (4 h^2), the "without quaternion" arm.
    Concat,
}

#[derive(Debug, Clone)]
enum DaeMixing {
    Quaternion(QuaternionLinear),
    Dense { head_r: Conv1x1Layer, head_i: Conv1x1Layer, head_j: Conv1x1Layer, head_k: Conv1x1Layer },
    Concat { head_r: Conv1x1Layer, head_i: Conv1x1Layer },
}

impl DaeMixing {
    fn weight_count(&self) -> usize {
        match self {
            DaeMixing::Quaternion(q) => q.weight_param_count(),
            DaeMixing::Dense { head_r, head_i, head_j, head_k } => {
                head_r.weight_count() + head_i.weight_count() + head_j.weight_count() + head_k.weight_count()
            }
            DaeMixing::Concat { head_r, head_i } => head_r.weight_count() + head_i.weight_count(),
        }
    }
}

/// Depth-aware embedding: aligns the previous depth state to the stage's
/// spatial size, reduces both streams to a hidden width, mixes them, and
/// maps back through zero-initialized up projections.
#[derive(Debug, Clone)]
pub struct DaeBlock {
    g1: Conv1x1Layer,
    g2: Conv1x1Layer,
    mixing: DaeMixing,
    up_img: Conv1x1Layer,
    up_depth: Conv1x1Layer,
    pub hidden: usize,
    pub axis: AxisAssignment,
    c_img: usize,
    c_depth: usize,
}

impl DaeBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_img: usize,
        c_depth: usize,
        hidden: usize,
        kind: DaeMixingKind,
        axis: AxisAssignment,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g1 = Conv1x1Layer::random(store, &format!("{name}.g1"), c_img, hidden, &mut rng);
        let g2 = Conv1x1Layer::random(store, &format!("{name}.g2"), c_depth, hidden, &mut rng);
        let mixing = match kind {
            DaeMixingKind::Quaternion => DaeMixing::Quaternion(QuaternionLinear::suprasphere_init(
                store,
                &format!("{name}.quafa"),
                hidden,
                hidden,
                true,
                rng.gen(),
            )),
            DaeMixingKind::Dense => DaeMixing::Dense {
                head_r: Conv1x1Layer::random(store, &format!("{name}.mlp_r"), 4 * hidden, hidden, &mut rng),
                head_i: Conv1x1Layer::random(store, &format!("{name}.mlp_i"), 4 * hidden, hidden, &mut rng),
                head_j: Conv1x1Layer::random(store, &format!("{name}.mlp_j"), 4 * hidden, hidden, &mut rng),
                head_k: Conv1x1Layer::random(store, &format!("{name}.mlp_k"), 4 * hidden, hidden, &mut rng),
            },
            DaeMixingKind::Concat => DaeMixing::Concat {
                head_r: Conv1x1Layer::random(store, &format!("{name}.cat_r"), 2 * hidden, hidden, &mut rng),
                head_i: Conv1x1Layer::random(store, &format!("{name}.cat_i"), 2 * hidden, hidden, &mut rng),
            },
        };
        let up_img = Conv1x1Layer::zeros(store, &format!("{name}.up_img"), hidden, c_img);
        let up_depth = Conv1x1Layer::zeros(store, &format!("{name}.up_depth"), hidden, c_depth);
        DaeBlock { g1, g2, mixing, up_img, up_depth, hidden, axis, c_img, c_depth }
    }

    pub fn mixing_kind(&self) -> DaeMixingKind {
        match self.mixing {
            DaeMixing::Quaternion(_) => DaeMixingKind::Quaternion,
            DaeMixing::Dense { .. } => DaeMixingKind::Dense,
            DaeMixing::Concat { .. } => DaeMixingKind::Concat,
        }
    }

    /// Mixing-layer weights only (the Table-of-fusion-ops comparison),
    /// biases and reduce/up convs excluded.
    pub fn mixing_weight_count(&self) -> usize {
        self.mixing.weight_count()
    }

    /// Aligns the previous depth state to (h, w): when downsampling, the map
    /// is first edge-replicate padded up to a whole multiple of the target so
    /// the interpolation grid divides it evenly, then resized.
    fn align_state(&self, g: &mut Graph, state: TensorId, h: usize, w: usize) -> Result<TensorId> {
        let shape = g.value(state).shape();
        let (sh, sw) = (shape[1], shape[2]);
        let pad_h = if sh > h { h * sh.div_ceil(h) } else { sh };
        let pad_w = if sw > w { w * sw.div_ceil(w) } else { sw };
        let padded = if (pad_h, pad_w) != (sh, sw) { g.edge_pad(state, pad_h, pad_w)? } else { state };
        g.resize_bilinear(padded, h, w)
    }

    /// (enhanced image features, next depth state), both at the stage's
    /// spatial size.
    pub fn forward(&self, g: &mut Graph, f_img: TensorId, c_depth_prev: TensorId) -> Result<(TensorId, TensorId)> {
        let fs = g.value(f_img).shape().to_vec();
        if fs.len() != 3 || fs[0] != self.c_img {
            return Err(Error::shape("dae_forward", &fs, [self.c_img, 0, 0]));
        }
        if g.value(c_depth_prev).shape()[0] != self.c_depth {
            return Err(Error::shape("dae_forward", g.value(c_depth_prev).shape(), [self.c_depth, 0, 0]));
        }
        let (h, w) = (fs[1], fs[2]);
        let aligned = self.align_state(g, c_depth_prev, h, w)?;
        let f_hat = self.g1.forward(g, f_img)?;
        let c_hat = self.g2.forward(g, aligned)?;

        let (out_r, out_i) = match &self.mixing {
            DaeMixing::Quaternion(q) => {
                let packed = self.axis.pack(g, f_hat, c_hat)?;
                let mixed = q.forward(g, packed)?;
                let act = split_activation_graph(g, mixed, Activation::Relu)?;
                (g.slice0(act, 0)?, g.slice0(act, 1)?)
            }
            DaeMixing::Dense { head_r, head_i, .. } => {
                // same packing order, flattened to 4h real channels
                let shape = g.value(f_hat).shape().to_vec();
                let z0 = g.constant(Tensor::zeros(&shape));
                let z1 = g.constant(Tensor::zeros(&shape));
                let packed = match self.axis {
                    AxisAssignment::LidarOnI => g.concat(&[f_hat, c_hat, z0, z1], 0)?,
                    AxisAssignment::LidarOnR => g.concat(&[c_hat, f_hat, z0, z1], 0)?,
                };
                let r = head_r.forward(g, packed)?;
                let i = head_i.forward(g, packed)?;
                (g.relu(r)?, g.relu(i)?)
            }
            DaeMixing::Concat { head_r, head_i } => {
                let packed = g.concat(&[f_hat, c_hat], 0)?;
                let r = head_r.forward(g, packed)?;
                let i = head_i.forward(g, packed)?;
                (g.relu(r)?, g.relu(i)?)
            }
        };

        let up_r = self.up_img.forward(g, out_r)?;
        let f_enh = g.add(f_img, up_r)?;
        let c_next = self.up_depth.forward(g, out_i)?;
        Ok((f_enh, c_next))
    }
}

/// Geometry-aware embedding: concat + reduce, a pooled sigmoid gate over
/// channels, and a zero-initialized residual back into the BEV features.
#[derive(Debug, Clone)]
pub struct GaeBlock {
    proj: Conv1x1Layer,
    gate: DenseLayer,
    up: Conv1x1Layer,
    pub hidden: usize,
    c_q: usize,
    c_geo: usize,
}

impl GaeBlock {
    pub fn new(store: &mut ParamStore, name: &str, c_q: usize, c_geo: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj = Conv1x1Layer::random(store, &format!("{name}.proj"), c_q + c_geo, hidden, &mut rng);
        let gate = DenseLayer::random(store, &format!("{name}.gate"), hidden, hidden, &mut rng);
        let up = Conv1x1Layer::zeros(store, &format!("{name}.up"), hidden, c_q);
        GaeBlock { proj, gate, up, hidden, c_q, c_geo }
    }

    /// (refined BEV features, next geometry state [hidden, G, G]).
    pub fn forward(&self, g: &mut Graph, q_bev: TensorId, c_geo_prev: TensorId) -> Result<(TensorId, TensorId)> {
        let qs = g.value(q_bev).shape().to_vec();
        let cs = g.value(c_geo_prev).shape().to_vec();
        if qs.len() != 3 || qs[0] != self.c_q {
            return Err(Error::shape("gae_forward", &qs, [self.c_q, 0, 0]));
        }
        if cs[0] != self.c_geo || cs[1..] != qs[1..] {
            return Err(Error::shape("gae_forward", &cs, &qs));
        }
        let cat = g.concat(&[q_bev, c_geo_prev], 0)?;
        let proj = self.proj.forward(g, cat)?;
        let f_align = g.relu(proj)?;
        let pooled = g.global_avg_pool(f_align)?;
        let gated = self.gate.forward(g, pooled)?;
        let gate = g.sigmoid(gated)?;
        let c_geo = g.channel_scale(f_align, gate)?;
        let up = self.up.forward(g, c_geo)?;
        let q_out = g.add(q_bev, up)?;
        Ok((q_out, c_geo))
    }
}

/// Where quaternion mixing is inserted along the backbone's DAE blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuaFaPlacement {
    Off,
    #[default]
    FirstLayer,
    Depth(usize),
    All,
}

impl QuaFaPlacement {
    pub fn kind_for_stage(&self, stage: usize) -> DaeMixingKind {
        let quaternion = match self {
            QuaFaPlacement::Off => false,
            QuaFaPlacement::FirstLayer => stage == 0,
            QuaFaPlacement::Depth(k) => stage < *k,
            QuaFaPlacement::All => true,
        };
        if quaternion {
            DaeMixingKind::Quaternion
        } else {
            DaeMixingKind::Concat
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(QuaFaPlacement::Off),
            "first_layer" => Ok(QuaFaPlacement::FirstLayer),
            "all" => Ok(QuaFaPlacement::All),
            other => match other.strip_prefix("depth").map(str::trim) {
                Some(k) => k
                    .parse::<usize>()
                    .map(QuaFaPlacement::Depth)
                    .map_err(|_| Error::Config(format!("bad qua_fa depth in `{other}`"))),
                None => Err(Error::Config(format!("unknown qua_fa placement `{other}`"))),
            },
        }
    }

    pub fn name(&self) -> String {
        match self {
            QuaFaPlacement::Off => "off".into(),
            QuaFaPlacement::FirstLayer => "first_layer".into(),
            QuaFaPlacement::Depth(k) => format!("depth {k}"),
            QuaFaPlacement::All => "all".into(),
        }
    }
}

/// How LiDAR-derived features are fed into the camera model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionMode {
    CameraOnly,
    #[default]
    Progressive,
    InputSummation,
    DeepSummation,
    Separate,
}

impl FusionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "camera_only" => Ok(FusionMode::CameraOnly),
            "progressive" => Ok(FusionMode::Progressive),
            "input_summation" => Ok(FusionMode::InputSummation),
            "deep_summation" => Ok(FusionMode::DeepSummation),
            "separate" => Ok(FusionMode::Separate),
            other => Err(Error::Config(format!("unknown fusion mode `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FusionMode::CameraOnly => "camera_only",
            FusionMode::Progressive => "progressive",
            FusionMode::InputSummation => "input_summation",
            FusionMode::DeepSummation => "deep_summation",
            FusionMode::Separate => "separate",
        }
    }
}

/// Structural description the chain is built from.
#[derive(Debug, Clone)]
pub struct ChainConfig {
    pub mode: FusionMode,
    pub dae: bool,
    pub gae_enc: bool,
    pub gae_dec: bool,
    pub quafa: QuaFaPlacement,
    pub axis: AxisAssignment,
    pub hidden_dae: usize,
    pub hidden_gae: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            mode: FusionMode::Progressive,
            dae: true,
            gae_enc: true,
            gae_dec: true,
            quafa: QuaFaPlacement::FirstLayer,
            axis: AxisAssignment::LidarOnI,
            hidden_dae: 8,
            hidden_gae: 128,
        }
    }
}

impl ChainConfig {
    /// Default structure with narrow hidden widths; desk-scale tests and the
    /// trend harness use this to keep wall-clock down.
    pub fn default_small() -> Self {
        ChainConfig { hidden_gae: 16, ..Default::default() }
    }
}

/// Geometry of the detector the chain plugs into.
#[derive(Debug, Clone, Copy)]
pub struct HookShapes {
    pub image_channels: usize,
    pub backbone_channels: [usize; 3],
    pub bev_channels: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Channel count of the pooled BEV map handed to the chain.
    pub bev_map_channels: usize,
}

/// The integrator family wired for one detector: per-stage depth blocks,
/// per-layer geometry blocks, and the summation-variant embeddings, all
/// behind one mode switch.
#[derive(Debug, Clone)]
pub struct IntegratorChain {
    pub cfg: ChainConfig,
    shapes: HookShapes,
    dae_blocks: Vec<DaeBlock>,
    gae_enc: Vec<GaeBlock>,
    gae_dec: Vec<GaeBlock>,
    bev_embed: Option<Conv1x1Layer>,
    input_img_sum: Option<Conv1x1Layer>,
    deep_img_sum: Option<Conv1x1Layer>,
    deep_bev_sum: Option<Conv1x1Layer>,
}

/// Per-forward LiDAR state threaded by the chain.
pub struct ChainState {
    depth: Option<TensorId>,
    geo: Option<TensorId>,
    m_depth: Option<TensorId>,
    m_bev: Option<TensorId>,
    gae_index: usize,
}

impl IntegratorChain {
    pub fn new(store: &mut ParamStore, cfg: ChainConfig, shapes: HookShapes, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dae_blocks = Vec::new();
        let mut gae_enc = Vec::new();
        let mut gae_dec = Vec::new();
        let mut bev_embed = None;
        let mut input_img_sum = None;
        let mut deep_img_sum = None;
        let mut deep_bev_sum = None;

        match cfg.mode {
            FusionMode::CameraOnly => {}
            FusionMode::Progressive | FusionMode::Separate => {
                if cfg.dae {
                    for (s, &c_img) in shapes.backbone_channels.iter().enumerate() {
                        dae_blocks.push(DaeBlock::new(
                            store,
                            &format!("dae{s}"),
                            c_img,
                            1,
                            cfg.hidden_dae,
                            cfg.quafa.kind_for_stage(s),
                            cfg.axis,
                            rng.gen(),
                        ));
                    }
                }
                if cfg.gae_enc || cfg.gae_dec {
                    bev_embed = Some(Conv1x1Layer::random(
                        store,
                        "bev_embed",
                        shapes.bev_map_channels,
                        cfg.hidden_gae,
                        &mut rng,
                    ));
                }
                if cfg.gae_enc {
                    for l in 0..shapes.enc_layers {
                        gae_enc.push(GaeBlock::new(
                            store,
                            &format!("gae_enc{l}"),
                            shapes.bev_channels,
                            cfg.hidden_gae,
                            cfg.hidden_gae,
                            rng.gen(),
                        ));
                    }
                }
                if cfg.gae_dec {
                    for l in 0..shapes.dec_layers {
                        gae_dec.push(GaeBlock::new(
                            store,
                            &format!("gae_dec{l}"),
                            shapes.bev_channels,
                            cfg.hidden_gae,
                            cfg.hidden_gae,
                            rng.gen(),
                        ));
                    }
                }
            }
            FusionMode::InputSummation => {
                // the raw data inputs of a camera detector are its images;
                // the BEV queries are parameters, so input summation injects
                // the depth projection only and leaves the BEV map unused
                input_img_sum = Some(Conv1x1Layer::zeros(store, "input_img_sum", 1, shapes.image_channels));
            }
            FusionMode::DeepSummation => {
                if cfg.dae {
                    deep_img_sum = Some(Conv1x1Layer::zeros(
                        store,
                        "deep_img_sum",
                        1,
                        shapes.backbone_channels[2],
                    ));
                }
                if cfg.gae_enc || cfg.gae_dec {
                    deep_bev_sum = Some(Conv1x1Layer::zeros(
                        store,
                        "deep_bev_sum",
                        shapes.bev_map_channels,
                        shapes.bev_channels,
                    ));
                }
            }
        }

        IntegratorChain {
            cfg,
            shapes,
            dae_blocks,
            gae_enc,
            gae_dec,
            bev_embed,
            input_img_sum,
            deep_img_sum,
            deep_bev_sum,
        }
    }

    pub fn dae_blocks(&self) -> &[DaeBlock] {
        &self.dae_blocks
    }

    pub fn gae_block_count(&self) -> (usize, usize) {
        (self.gae_enc.len(), self.gae_dec.len())
    }

    /// Starts a forward pass: registers the LiDAR products as graph
    /// constants and initializes the threaded state.
    pub fn begin(&self, g: &mut Graph, m_depth: &Tensor, m_bev_pooled: &Tensor) -> Result<ChainState> {
        let m_depth_id = g.constant(m_depth.clone());
        let m_bev_id = g.constant(m_bev_pooled.clone());
        let mut state = ChainState {
            depth: None,
            geo: None,
            m_depth: Some(m_depth_id),
            m_bev: Some(m_bev_id),
            gae_index: 0,
        };
        if self.cfg.mode == FusionMode::Progressive {
            state.depth = Some(m_depth_id); // depth state starts from the raw projection
            if let Some(embed) = &self.bev_embed {
                state.geo = Some(embed.forward(g, m_bev_id)?);
            }
        }
        Ok(state)
    }

    /// Input-stage hook, applied to the raw image.
    pub fn image_input_hook(&self, g: &mut Graph, image: TensorId, st: &ChainState) -> Result<TensorId> {
        if let Some(embed) = &self.input_img_sum {
            let m = st.m_depth.expect("chain state initialized");
            let shape = g.value(image).shape().to_vec();
            let resized = g.resize_bilinear(m, shape[1], shape[2])?;
            let add = embed.forward(g, resized)?;
            return g.add(image, add);
        }
        Ok(image)
    }

    /// Per-backbone-stage hook; threads the depth state in progressive mode
    /// and re-reads the raw projection in separate mode.
    pub fn backbone_hook(&self, g: &mut Graph, stage: usize, feats: TensorId, st: &mut ChainState) -> Result<TensorId> {
        match self.cfg.mode {
            FusionMode::Progressive => {
                if let Some(block) = self.dae_blocks.get(stage) {
                    let prev = st.depth.expect("depth state initialized");
                    let (enh, next) = block.forward(g, feats, prev)?;
                    st.depth = Some(next);
                    return Ok(enh);
                }
                Ok(feats)
            }
            FusionMode::Separate => {
                if let Some(block) = self.dae_blocks.get(stage) {
                    let raw = st.m_depth.expect("chain state initialized");
                    let (enh, _) = block.forward(g, feats, raw)?;
                    return Ok(enh);
                }
                Ok(feats)
            }
            FusionMode::DeepSummation => {
                if stage == self.shapes.backbone_channels.len() - 1 {
                    if let Some(embed) = &self.deep_img_sum {
                        let m = st.m_depth.expect("chain state initialized");
                        let shape = g.value(feats).shape().to_vec();
                        let resized = g.resize_bilinear(m, shape[1], shape[2])?;
                        let add = embed.forward(g, resized)?;
                        return g.add(feats, add);
                    }
                }
                Ok(feats)
            }
            _ => Ok(feats),
        }
    }


    fn gae_apply(&self, g: &mut Graph, blocks: &[GaeBlock], layer: usize, bev: TensorId, st: &mut ChainState) -> Result<TensorId> {
        let Some(block) = blocks.get(layer) else {
            return Ok(bev);
        };
        let prev = match self.cfg.mode {
            FusionMode::Progressive => st.geo.expect("geo state initialized"),
            FusionMode::Separate => {
                let embed = self.bev_embed.as_ref().expect("separate mode has an embed");
                let m = st.m_bev.expect("chain state initialized");
                embed.forward(g, m)?
            }
            _ => return Ok(bev),
        };
        let (out, next) = block.forward(g, bev, prev)?;
        if self.cfg.mode == FusionMode::Progressive {
            st.geo = Some(next);
        }
        st.gae_index += 1;
        Ok(out)
    }

    /// Per-encoder-layer hook; deep summation injects its one embedded BEV
    /// map after the last encoder layer, where the decoder can still
    /// integrate it.
    pub fn encoder_hook(&self, g: &mut Graph, layer: usize, bev: TensorId, st: &mut ChainState) -> Result<TensorId> {
        match self.cfg.mode {
            FusionMode::Progressive | FusionMode::Separate => {
                let blocks: &[GaeBlock] = &self.gae_enc;
                self.gae_apply(g, blocks, layer, bev, st)
            }
            FusionMode::DeepSummation => {
                if layer + 1 == self.shapes.enc_layers {
                    if let Some(embed) = &self.deep_bev_sum {
                        let m = st.m_bev.expect("chain state initialized");
                        let add = embed.forward(g, m)?;
                        return g.add(bev, add);
                    }
                }
                Ok(bev)
            }
            _ => Ok(bev),
        }
    }

    /// Per-decoder-layer hook.
    pub fn decoder_hook(&self, g: &mut Graph, layer: usize, bev: TensorId, st: &mut ChainState) -> Result<TensorId> {
        match self.cfg.mode {
            FusionMode::Progressive | FusionMode::Separate => {
                let blocks: &[GaeBlock] = &self.gae_dec;
                self.gae_apply(g, blocks, layer, bev, st)
            }
            _ => Ok(bev),
        }
    }
}
