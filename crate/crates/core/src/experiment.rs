//! Experiment orchestration: seeded scene sets, the training loop, toy-AP
//! evaluation, the ablation matrix, the gradient-check suite, and CSV
//! reporting.
//!
//! Training scenes use even generator seeds and held-out evaluation scenes
//! use odd seeds, so the two sets are disjoint by construction. Every
//! variant of an ablation matrix trains on the same scene set.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{finite_diff_check, uniform_tensor, Graph, ParamStore, Sgd, Tensor};
use crate::config::{AblationAxis, RunConfig};
use crate::detect::{detection_loss, toy_ap, Detector, SceneInputs};
use crate::fusion::{AxisAssignment, DaeBlock, DaeMixingKind, FusionMode, GaeBlock, QuaFaPlacement};
use crate::layers::Conv1x1Layer;
use crate::lidar::{downsample_bev, project_depth, voxelize_bev};
use crate::quat::{split_activation_graph, Activation, QuaternionLinear};
use crate::scene::{generate_scene, SceneGt};
use crate::snapshot;
use crate::{Error, Result};

// ---- scene sets ------------------------------------------------------------

/// One scene prepared for the model: rendered image, LiDAR products at model
/// resolution, and ground truth.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub image: Tensor,
    pub m_depth: Tensor,
    pub m_bev: Tensor,
    pub gt: SceneGt,
}

impl SceneBundle {
    /// Model inputs; zero-filled LiDAR tensors under the missing-LiDAR
    /// protocol.
    pub fn inputs(&self, lidar_present: bool) -> SceneInputs {
        if lidar_present {
            SceneInputs { image: self.image.clone(), m_depth: self.m_depth.clone(), m_bev: self.m_bev.clone() }
        } else {
            SceneInputs {
                image: self.image.clone(),
                m_depth: Tensor::zeros(self.m_depth.shape()),
                m_bev: Tensor::zeros(self.m_bev.shape()),
            }
        }
    }
}

fn prepare_scene(cfg: &RunConfig, scene_seed: u64) -> Result<SceneBundle> {
    let scene = generate_scene(&cfg.scene_spec(scene_seed))?;
    let spec = cfg.voxel_spec();
    let bev = voxelize_bev(&scene.cloud, &spec)?;
    let m_bev = downsample_bev(&bev.grid, cfg.bev_grid, cfg.bev_grid)?;
    let depth = project_depth(&scene.cloud, &scene.cam, cfg.image_h, cfg.image_w, cfg.lidar_range)?;
    Ok(SceneBundle { image: scene.image, m_depth: depth.depth, m_bev, gt: scene.gt })
}

/// Training set: scene seeds 0, 2, 4, ...
pub fn build_train_set(cfg: &RunConfig) -> Result<Vec<SceneBundle>> {
    (0..cfg.train_scenes).map(|k| prepare_scene(cfg, 2 * k as u64)).collect()
}

/// Held-out evaluation set: scene seeds 1, 3, 5, ...
pub fn build_eval_set(cfg: &RunConfig) -> Result<Vec<SceneBundle>> {
    (0..cfg.eval_scenes).map(|k| prepare_scene(cfg, 2 * k as u64 + 1)).collect()
}

// ---- training and evaluation -------------------------------------------------

pub struct TrainOutcome {
    pub model: Detector,
    pub losses: Vec<f64>,
}

/// One optimization phase over the scene set: single-scene steps in a
/// per-epoch seeded shuffle. Any non-finite loss aborts with the offending
/// operation's name.
fn train_phase(cfg: &RunConfig, seed: u64, train_set: &[SceneBundle], model: &mut Detector, steps: usize) -> Result<Vec<f64>> {
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut opt = Sgd::new(&model.store, cfg.lr, cfg.momentum, cfg.grad_clip);
    let grid = model.grid();
    let mut losses = Vec::with_capacity(steps);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for step in 0..steps {
        if step % train_set.len() == 0 {
            let epoch = step / train_set.len();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(100 + epoch as u64);
            order.shuffle(&mut rng);
        }
        let bundle = &train_set[order[step % train_set.len()]];
        let inputs = bundle.inputs(cfg.lidar_present);
        let mut g = Graph::new();
        let out = model.forward(&mut g, &inputs)?;
        let aux = cfg.aux_depth.then_some(&inputs.m_depth);
        let loss = detection_loss(&mut g, &out, &bundle.gt, &grid, aux)?;
        let loss_val = g.scalar_value(loss);
        if !loss_val.is_finite() {
            // re-run with per-op validation to name the first bad operation
            let mut probe = Graph::new();
            probe.set_validate(true);
            let out = model.forward(&mut probe, &inputs)?;
            detection_loss(&mut probe, &out, &bundle.gt, &grid, aux)?;
            return Err(Error::NonFinite { op: "detection_loss" });
        }
        g.backward(loss)?;
        opt.step(&mut model.store, &g)?;
        losses.push(loss_val);
    }
    Ok(losses)
}

/// Trains the vision-only model that fused variants inherit from.
pub fn pretrain_camera(cfg: &RunConfig, seed: u64, train_set: &[SceneBundle]) -> Result<ParamStore> {
    let mut cam_cfg = cfg.clone();
    cam_cfg.fusion_mode = FusionMode::CameraOnly;
    let mut model = Detector::new(cam_cfg.detector_config(), cam_cfg.chain_config(), &cam_cfg.camera(), seed)?;
    train_phase(&cam_cfg, seed, train_set, &mut model, cfg.pretrain_steps)?;
    Ok(model.store)
}

/// Copies every matching parameter (by name) from a camera-only store into
/// a fused model's store; integrator parameters stay at their zero/seed
/// initialization. Returns the number of inherited tensors.
pub fn inherit_camera_params(dst: &mut ParamStore, src: &ParamStore) -> Result<usize> {
    let mut copied = 0;
    for (name, tensor) in src.iter() {
        let pid = dst
            .find(name)
            .ok_or_else(|| Error::Contract(format!("camera parameter `{name}` missing from fused model")))?;
        if dst.get(pid).shape() != tensor.shape() {
            return Err(Error::shape("inherit_camera_params", dst.get(pid).shape(), tensor.shape()));
        }
        *dst.get_mut(pid) = tensor.clone();
        dst.get_mut(pid).set_requires_grad(true);
        copied += 1;
    }
    Ok(copied)
}

/// Full training protocol. Fused variants inherit a camera-only model's
/// weights (`pretrain_steps` of vision-only training, or a caller-provided
/// store), then train end-to-end for `cfg.steps`. The camera-only mode
/// trains single-phase for the same total step budget.
pub fn train_from(
    cfg: &RunConfig,
    seed: u64,
    train_set: &[SceneBundle],
    pretrained: Option<&ParamStore>,
) -> Result<TrainOutcome> {
    if cfg.fusion_mode == FusionMode::CameraOnly {
        let mut model = Detector::new(cfg.detector_config(), cfg.chain_config(), &cfg.camera(), seed)?;
        let losses = train_phase(cfg, seed, train_set, &mut model, cfg.pretrain_steps + cfg.steps)?;
        return Ok(TrainOutcome { model, losses });
    }
    let mut model = Detector::new(cfg.detector_config(), cfg.chain_config(), &cfg.camera(), seed)?;
    if cfg.pretrain_steps > 0 {
        match pretrained {
            Some(store) => {
                inherit_camera_params(&mut model.store, store)?;
            }
            None => {
                let store = pretrain_camera(cfg, seed, train_set)?;
                inherit_camera_params(&mut model.store, &store)?;
            }
        }
    }
    let losses = train_phase(cfg, seed, train_set, &mut model, cfg.steps)?;
    Ok(TrainOutcome { model, losses })
}

/// Convenience wrapper running the full protocol with its own pretraining.
pub fn train(cfg: &RunConfig, seed: u64, train_set: &[SceneBundle]) -> Result<TrainOutcome> {
    train_from(cfg, seed, train_set, None)
}

/// Mean toy AP over the evaluation set. Errors if any output goes
/// non-finite.
pub fn evaluate(model: &Detector, eval_set: &[SceneBundle], lidar_present: bool) -> Result<f64> {
    let grid = model.grid();
    let mut total = 0.0;
    for bundle in eval_set {
        let inputs = bundle.inputs(lidar_present);
        let mut g = Graph::inference();
        let out = model.forward(&mut g, &inputs)?;
        if !g.value(out.heatmap).all_finite() || !g.value(out.sizes).all_finite() {
            return Err(Error::NonFinite { op: "detect_forward" });
        }
        total += toy_ap(g.value(out.heatmap), &bundle.gt, &grid, model.cfg.match_radius);
    }
    Ok(total / eval_set.len().max(1) as f64)
}

// ---- metrics and CSV -----------------------------------------------------------

pub const CSV_HEADER: &str = "run_id,config_hash,variant,seed,step,loss,toy_ap,lidar_present,wall_ms";

#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub run_id: String,
    pub config_hash: String,
    pub variant: String,
    pub seed: u64,
    pub step: usize,
    pub loss: f64,
    pub toy_ap: f64,
    pub lidar_present: bool,
    pub wall_ms: u128,
}

impl MetricsRecord {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.config_hash,
            self.variant,
            self.seed,
            self.step,
            self.loss,
            self.toy_ap,
            self.lidar_present,
            self.wall_ms
        )
    }
}

pub fn write_csv(path: impl AsRef<Path>, records: &[MetricsRecord]) -> Result<()> {
    let mut w = fs::File::create(path)?;
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        writeln!(w, "{}", r.to_csv_line())?;
    }
    Ok(())
}

fn write_manifest(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)?;
    let json = serde_json::to_string_pretty(&cfg.manifest_json())
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    fs::write(cfg.out_dir.join("manifest.json"), json)?;
    Ok(())
}

// ---- run modes -------------------------------------------------------------------

/// Trains one model per seed, writing checkpoints and a metrics CSV under
/// the output directory. Returns the records.
pub fn run_train(cfg: &RunConfig) -> Result<Vec<MetricsRecord>> {
    write_manifest(cfg)?;
    let train_set = build_train_set(cfg)?;
    let eval_set = build_eval_set(cfg)?;
    let hash = cfg.hash();
    let variant = cfg.fusion_mode.name().to_string();
    let mut records = Vec::new();
    for &seed in &cfg.seeds {
        let started = Instant::now();
        let outcome = train(cfg, seed, &train_set)?;
        let ap = evaluate(&outcome.model, &eval_set, cfg.lidar_present)?;
        let wall_ms = started.elapsed().as_millis();
        for (step, &loss) in outcome.losses.iter().enumerate() {
            if step % cfg.log_every == 0 {
                records.push(MetricsRecord {
                    run_id: format!("{variant}-s{seed}"),
                    config_hash: hash.clone(),
                    variant: variant.clone(),
                    seed,
                    step,
                    loss,
                    toy_ap: f64::NAN,
                    lidar_present: cfg.lidar_present,
                    wall_ms: 0,
                });
            }
        }
        records.push(MetricsRecord {
            run_id: format!("{variant}-s{seed}"),
            config_hash: hash.clone(),
            variant: variant.clone(),
            seed,
            step: cfg.steps,
            loss: *outcome.losses.last().unwrap_or(&f64::NAN),
            toy_ap: ap,
            lidar_present: cfg.lidar_present,
            wall_ms,
        });
        let ckpt = cfg.out_dir.join(format!("model-s{seed}.ckpt"));
        snapshot::write_checkpoint(&ckpt, &checkpoint_manifest(&outcome.model), &outcome.model.store)?;
    }
    write_csv(cfg.out_dir.join("metrics.csv"), &records)?;
    Ok(records)
}

/// Text manifest for a checkpoint: fusion structure, block kinds, stage
/// indices and hidden widths.
pub fn checkpoint_manifest(model: &Detector) -> Vec<String> {
    let chain = &model.chain;
    let mut lines = vec![format!("fusion mode={}", chain.cfg.mode.name())];
    for (s, block) in chain.dae_blocks().iter().enumerate() {
        let mixing = match block.mixing_kind() {
            DaeMixingKind::Quaternion => "quaternion",
            DaeMixingKind::Dense => "dense",
            DaeMixingKind::Concat => "concat",
        };
        lines.push(format!("block dae stage={s} hidden={} mixing={mixing} axis={}", block.hidden, block.axis.name()));
    }
    let (enc, dec) = chain.gae_block_count();
    for l in 0..enc {
        lines.push(format!("block gae_enc stage={l} hidden={}", chain.cfg.hidden_gae));
    }
    for l in 0..dec {
        lines.push(format!("block gae_dec stage={l} hidden={}", chain.cfg.hidden_gae));
    }
    lines
}

/// Loads a checkpoint into a model rebuilt from the config.
pub fn load_model(cfg: &RunConfig, ckpt: &Path) -> Result<Detector> {
    let mut model = Detector::new(cfg.detector_config(), cfg.chain_config(), &cfg.camera(), cfg.seeds.first().copied().unwrap_or(0))?;
    snapshot::load_checkpoint_into(ckpt, &mut model.store)?;
    Ok(model)
}

/// Evaluates a checkpoint on the held-out set.
pub fn run_eval(cfg: &RunConfig, ckpt: &Path) -> Result<f64> {
    let model = load_model(cfg, ckpt)?;
    let eval_set = build_eval_set(cfg)?;
    evaluate(&model, &eval_set, cfg.lidar_present)
}

/// Writes `count` scene directories under the output directory.
pub fn run_datagen(cfg: &RunConfig, count: usize) -> Result<()> {
    write_manifest(cfg)?;
    for k in 0..count {
        let scene = generate_scene(&cfg.scene_spec(2 * k as u64))?;
        crate::scene::save_scene(cfg.out_dir.join(format!("scene-{k:04}")), &scene)?;
    }
    Ok(())
}

// ---- ablation matrix ---------------------------------------------------------------

/// Trainable variants along one ablation axis. Robustness re-evaluates each
/// trained model with and without LiDAR instead of changing the model.
pub fn axis_variants(base: &RunConfig, axis: AblationAxis) -> Vec<(String, RunConfig)> {
    let mut variants = Vec::new();
    match axis {
        AblationAxis::Components => {
            for bits in 0..8u8 {
                let mut cfg = base.clone();
                cfg.fusion_mode = FusionMode::Progressive;
                cfg.dae = bits & 1 != 0;
                cfg.gae_enc = bits & 2 != 0;
                cfg.gae_dec = bits & 4 != 0;
                let label = format!(
                    "dae={}+gae_enc={}+gae_dec={}",
                    u8::from(cfg.dae),
                    u8::from(cfg.gae_enc),
                    u8::from(cfg.gae_dec)
                );
                variants.push((label, cfg));
            }
        }
        AblationAxis::Framework => {
            for mode in [
                FusionMode::CameraOnly,
                FusionMode::InputSummation,
                FusionMode::DeepSummation,
                FusionMode::Separate,
                FusionMode::Progressive,
            ] {
                let mut cfg = base.clone();
                cfg.fusion_mode = mode;
                variants.push((mode.name().to_string(), cfg));
            }
        }
        AblationAxis::QuaternionAxis => {
            for axis_choice in [AxisAssignment::LidarOnI, AxisAssignment::LidarOnR] {
                let mut cfg = base.clone();
                cfg.fusion_mode = FusionMode::Progressive;
                cfg.axis = axis_choice;
                variants.push((axis_choice.name().to_string(), cfg));
            }
        }
        AblationAxis::QuafaDepth => {
            for placement in [
                QuaFaPlacement::Off,
                QuaFaPlacement::FirstLayer,
                QuaFaPlacement::Depth(2),
                QuaFaPlacement::All,
            ] {
                let mut cfg = base.clone();
                cfg.fusion_mode = FusionMode::Progressive;
                cfg.qua_fa = placement;
                variants.push((placement.name().replace(' ', "_"), cfg));
            }
        }
        AblationAxis::Dims => {
            for dae_dim in [2usize, 8, 32] {
                let mut cfg = base.clone();
                cfg.c_dae = dae_dim;
                variants.push((format!("dae_dim={dae_dim}"), cfg));
            }
            for gae_dim in [8usize, 32, 128] {
                let mut cfg = base.clone();
                cfg.c_gae = gae_dim;
                variants.push((format!("gae_dim={gae_dim}"), cfg));
            }
        }
        AblationAxis::Robustness => {
            let mut cfg = base.clone();
            cfg.fusion_mode = FusionMode::Progressive;
            variants.push(("progressive".to_string(), cfg));
        }
    }
    variants
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub axis_name: String,
    pub records: Vec<MetricsRecord>,
    /// (variant, seed, error text) for runs that aborted on non-finite loss.
    pub failures: Vec<(String, u64, String)>,
}

impl AblationReport {
    /// Final evaluation rows for one variant, in seed order.
    pub fn variant_aps(&self, variant: &str, lidar_present: bool) -> Vec<(u64, f64)> {
        self.records
            .iter()
            .filter(|r| r.variant == variant && r.lidar_present == lidar_present)
            .map(|r| (r.seed, r.toy_ap))
            .collect()
    }

    pub fn median_ap(&self, variant: &str, lidar_present: bool) -> f64 {
        let mut aps: Vec<f64> = self.variant_aps(variant, lidar_present).into_iter().map(|(_, ap)| ap).collect();
        aps.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if aps.is_empty() {
            return f64::NAN;
        }
        let mid = aps.len() / 2;
        if aps.len() % 2 == 1 {
            aps[mid]
        } else {
            0.5 * (aps[mid - 1] + aps[mid])
        }
    }
}

/// Trains and evaluates every variant of the chosen axis on identical scene
/// sets; the robustness axis re-evaluates its trained models with zeroed
/// LiDAR inputs.
pub fn run_ablation_matrix(base: &RunConfig, axis: AblationAxis) -> Result<AblationReport> {
    let variants = axis_variants(base, axis);
    run_variant_matrix(base, &variants, axis == AblationAxis::Robustness, axis.name())
}

/// Trains and evaluates an explicit variant list on identical scene sets,
/// one job per (variant, seed), in parallel worker threads. All fused
/// variants of a seed inherit the same camera pretraining. When
/// `eval_both_lidar` is set, every trained model is evaluated twice: with
/// its LiDAR inputs and with zeroed ones. A job whose loss goes non-finite
/// contributes a flagged NaN row and the matrix continues.
pub fn run_variant_matrix(
    base: &RunConfig,
    variants: &[(String, RunConfig)],
    eval_both_lidar: bool,
    name: &str,
) -> Result<AblationReport> {
    let train_set = build_train_set(base)?;
    let eval_set = build_eval_set(base)?;

    // one shared vision-only pretraining per seed: every fused variant of the
    // matrix inherits the same camera weights, like rows of one study
    let pretrained: std::collections::HashMap<u64, ParamStore> = if base.pretrain_steps > 0 {
        base.seeds
            .par_iter()
            .map(|&seed| pretrain_camera(base, seed, &train_set).map(|store| (seed, store)))
            .collect::<Result<_>>()?
    } else {
        Default::default()
    };

    struct Job {
        label: String,
        cfg: RunConfig,
        seed: u64,
    }
    let jobs: Vec<Job> = variants
        .iter()
        .flat_map(|(label, cfg)| {
            base.seeds.iter().map(move |&seed| Job { label: label.clone(), cfg: cfg.clone(), seed })
        })
        .collect();

    type JobResult = (Vec<MetricsRecord>, Option<(String, u64, String)>);
    let results: Vec<JobResult> = jobs
        .par_iter()
        .map(|job| {
            let started = Instant::now();
            let run = (|| -> Result<Vec<MetricsRecord>> {
                let outcome = train_from(&job.cfg, job.seed, &train_set, pretrained.get(&job.seed))?;
                let hash = job.cfg.hash();
                let mut rows = Vec::new();
                let mut push = |lidar_present: bool, ap: f64, wall: u128| {
                    rows.push(MetricsRecord {
                        run_id: format!("{}-s{}", job.label, job.seed),
                        config_hash: hash.clone(),
                        variant: job.label.clone(),
                        seed: job.seed,
                        step: job.cfg.steps,
                        loss: *outcome.losses.last().unwrap_or(&f64::NAN),
                        toy_ap: ap,
                        lidar_present,
                        wall_ms: wall,
                    });
                };
                if eval_both_lidar {
                    let with = evaluate(&outcome.model, &eval_set, true)?;
                    let without = evaluate(&outcome.model, &eval_set, false)?;
                    push(true, with, started.elapsed().as_millis());
                    push(false, without, 0);
                } else {
                    let ap = evaluate(&outcome.model, &eval_set, job.cfg.lidar_present)?;
                    push(job.cfg.lidar_present, ap, started.elapsed().as_millis());
                }
                Ok(rows)
            })();
            match run {
                Ok(rows) => (rows, None),
                Err(e) => {
                    let flagged = MetricsRecord {
                        run_id: format!("{}-s{}", job.label, job.seed),
                        config_hash: job.cfg.hash(),
                        variant: job.label.clone(),
                        seed: job.seed,
                        step: job.cfg.steps,
                        loss: f64::NAN,
                        toy_ap: f64::NAN,
                        lidar_present: job.cfg.lidar_present,
                        wall_ms: started.elapsed().as_millis(),
                    };
                    (vec![flagged], Some((job.label.clone(), job.seed, e.to_string())))
                }
            }
        })
        .collect();

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (rows, failure) in results {
        records.extend(rows);
        failures.extend(failure);
    }
    records.sort_by(|a, b| {
        (&a.variant, a.seed, a.lidar_present)
            .cmp(&(&b.variant, b.seed, b.lidar_present))
    });
    Ok(AblationReport { axis_name: name.to_string(), records, failures })
}

/// Runs the matrix and writes `ablation-<axis>.csv` plus the manifest under
/// the output directory.
pub fn run_ablate(cfg: &RunConfig) -> Result<(AblationReport, PathBuf)> {
    write_manifest(cfg)?;
    let report = run_ablation_matrix(cfg, cfg.ablation_axis)?;
    let path = cfg.out_dir.join(format!("ablation-{}.csv", report.axis_name));
    write_csv(&path, &report.records)?;
    Ok((report, path))
}

// ---- gradient check suite --------------------------------------------------------

pub struct CheckItem {
    pub name: String,
    pub threshold: f64,
    #[allow(clippy::type_complexity)]
    pub run: Box<dyn Fn() -> Result<f64> + Send + Sync>,
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Default)]
pub struct CheckReport {
    pub outcomes: Vec<CheckOutcome>,
}

impl CheckReport {
    pub fn all_pass(&self) -> bool {
        self.outcomes.iter().all(|o| o.pass)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for o in &self.outcomes {
            out.push_str(&format!(
                "{:<34} {:>12.3e}  (limit {:>8.0e})  {}\n",
                o.name,
                o.max_rel_err,
                o.threshold,
                if o.pass { "pass" } else { "FAIL" }
            ));
        }
        out
    }
}

pub fn run_checks(items: &[CheckItem]) -> Result<CheckReport> {
    let mut outcomes = Vec::new();
    for item in items {
        let err = (item.run)()?;
        outcomes.push(CheckOutcome {
            name: item.name.clone(),
            max_rel_err: err,
            threshold: item.threshold,
            pass: err <= item.threshold,
        });
    }
    Ok(CheckReport { outcomes })
}

const ELEMENTWISE_TOL: f64 = 1e-7;
const OP_TOL: f64 = 1e-5;
const BLOCK_TOL: f64 = 1e-5;
const FULL_LOSS_TOL: f64 = 1e-4;
const CHECK_ROUNDS: usize = 5;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sized")
}

/// Random values bounded away from zero, for kinked ops like relu.
fn rand_tensor_off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag: f64 = rng.gen_range(0.2..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data).expect("sized")
}

fn max_over_rounds(
    seed: u64,
    threshold_shape: &[usize],
    off_kink: bool,
    f: impl Fn(&mut Graph, crate::TensorId, &mut ChaCha8Rng) -> Result<crate::TensorId>,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for round in 0..CHECK_ROUNDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (round as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let x = if off_kink {
            rand_tensor_off_kink(threshold_shape, &mut rng)
        } else {
            rand_tensor(threshold_shape, &mut rng)
        };
        let aux_rng = rng.clone();
        let err = finite_diff_check(|g, xid| f(g, xid, &mut aux_rng.clone()), &x, 1e-5)?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// The standard suite: every graph operation and every block at small
/// shapes, five seeded inputs each, reporting the worst relative error.
pub fn standard_checks(seed: u64) -> Vec<CheckItem> {
    let mut items: Vec<CheckItem> = Vec::new();
    let mut add = |name: &str, threshold: f64, run: Box<dyn Fn() -> Result<f64> + Send + Sync>| {
        items.push(CheckItem { name: name.to_string(), threshold, run });
    };

    // elementwise family
    add(
        "op: relu",
        ELEMENTWISE_TOL,
        Box::new(move || {
            max_over_rounds(seed ^ 1, &[3, 4, 4], true, |g, x, _| {
                let y = g.relu(x)?;
                g.sum(y)
            })
        }),
    );
    add(
        "op: sigmoid",
        ELEMENTWISE_TOL,
        Box::new(move || {
            max_over_rounds(seed ^ 2, &[3, 4, 4], false, |g, x, _| {
                let y = g.sigmoid(x)?;
                g.sum(y)
            })
        }),
    );
    add(
        "op: add/sub/scale",
        ELEMENTWISE_TOL,
        Box::new(move || {
            max_over_rounds(seed ^ 3, &[2, 3, 3], false, |g, x, rng| {
                let other = g.constant(rand_tensor(&[2, 3, 3], rng));
                let a = g.add(x, other)?;
                let b = g.sub(a, x)?;
                let c = g.scale(b, -1.7)?;
                let d = g.add(c, x)?;
                g.sum(d)
            })
        }),
    );
    add(
        "op: mul",
        ELEMENTWISE_TOL,
        Box::new(move || {
            max_over_rounds(seed ^ 4, &[2, 3, 3], false, |g, x, rng| {
                let other = g.constant(rand_tensor(&[2, 3, 3], rng));
                let y = g.mul(x, other)?;
                let z = g.mul(y, x)?;
                g.sum(z)
            })
        }),
    );
    add(
        "op: concat+slice+stack",
        ELEMENTWISE_TOL,
        Box::new(move || {
            max_over_rounds(seed ^ 5, &[2, 3, 3], false, |g, x, rng| {
                let other = g.constant(rand_tensor(&[3, 3, 3], rng));
                let cat = g.concat(&[x, other], 0)?;
                let s0 = g.slice0(cat, 0)?;
                let s1 = g.slice0(cat, 4)?;
                let st = g.stack0(&[s0, s1])?;
                g.sum(st)
            })
        }),
    );

    // structured ops
    add(
        "op: conv1x1",
        OP_TOL,
        Box::new(move || {
            max_over_rounds(seed ^ 6, &[3, 4, 4], false, |g, x, rng| {
                let w = g.leaf(&rand_tensor(&[5, 3], rng), true);
                let b = g.leaf(&rand_tensor(&[5], rng), true);
                let y = g.conv1x1(x, w, Some(b))?;
                g.sum(y)
            })
        }),
    );
    add(
        "op: conv3x3 stride 1",
        OP_TOL,
        Box::new(move || {
            max_over_rounds(seed ^ 7, &[2, 5, 5], false, |g, x, rng| {
                let w = g.leaf(&rand_tensor(&[3, 2, 3, 3], rng), true);
                let b = g.leaf(&rand_tensor(&[3], rng), true);
                let y = g.conv3x3(x, w, b, 1)?;
                g.sum(y)
            })
        }),
    );
    add(
        "op: conv3x3 stride 2",
        OP_TOL,
        Box::new(move || {
            max_over_rounds(seed ^ 8, &[2, 6, 5], false, |g, x, rng| {
                let w = g.leaf(&rand_tensor(&[3, 2, 3, 3], rng), true);
                let b = g.leaf(&rand_tensor(&[3], rng), true);
                let y = g.conv3x3(x, w, b, 2)?;
                g.sum(y)
            })
        }),
    );
    add(
        "op: resize_bilinear",
        OP_TOL,
        Box::new(move || {
            let up = max_over_rounds(seed ^ 9, &[2, 3, 4], false, |g, x, _| {
                let y = g.resize_bilinear(x, 7, 5)?;
                g.sum(y)
            })?;
            let down = max_over_rounds(seed ^ 10, &[2, 7, 6], false, |g, x, _| {
                let y = g.resize_bilinear(x, 3, 4)?;
                g.sum(y)
            })?;
            Ok(up.max(down))
        }),
    );
    add(
        "op: edge_pad",
        OP_TOL,
        Box::new(move || {
            max_over_rounds(seed ^ 11, &[2, 3, 4], false, |g, x, _| {
                let y = g.edge_pad(x, 5, 6)?;
                g.sum(y)
            })
        }),
    );
    add(
        "op: global_avg_pool",
        OP_TOL,
        Box::new(move || {
            max_over_rounds(seed ^ 12, &[3, 4, 5], false, |g, x, _| {
                let y = g.global_avg_pool(x)?;
                g.sum(y)
            })
        }),
    );
    add(
        "op: matvec",
        OP_TOL,
        Box::new(move || {
            max_over_rounds(seed ^ 13, &[6], false, |g, x, rng| {
                let w = g.leaf(&rand_tensor(&[4, 6], rng), true);
                let b = g.leaf(&rand_tensor(&[4], rng), true);
                let y = g.matvec(w, x, Some(b))?;
                g.sum(y)
            })
        }),
    );
    add(
        "op: channel_scale",
        OP_TOL,
        Box::new(move || {
            max_over_rounds(seed ^ 14, &[3, 4, 4], false, |g, x, rng| {
                let s = g.leaf(&rand_tensor(&[3], rng), true);
                let y = g.channel_scale(x, s)?;
                g.sum(y)
            })
        }),
    );
    add(
        "op: gather_bilinear",
        OP_TOL,
        Box::new(move || {
            max_over_rounds(seed ^ 15, &[2, 5, 5], false, |g, x, rng| {
                use crate::autodiff::BilinearTap;
                let mut taps = Vec::new();
                for _ in 0..9 {
                    if rng.gen_bool(0.2) {
                        taps.push(None);
                        continue;
                    }
                    let y0 = rng.gen_range(0..4usize);
                    let x0 = rng.gen_range(0..4usize);
                    let fy: f64 = rng.gen_range(0.0..1.0);
                    let fx: f64 = rng.gen_range(0.0..1.0);
                    taps.push(Some(BilinearTap {
                        idx: [y0 * 5 + x0, y0 * 5 + x0 + 1, (y0 + 1) * 5 + x0, (y0 + 1) * 5 + x0 + 1],
                        w: [(1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx, fy * (1.0 - fx), fy * fx],
                    }));
                }
                let y = g.gather_bilinear(x, std::sync::Arc::new(taps), 3, 3)?;
                g.sum(y)
            })
        }),
    );
    add(
        "op: focal_loss",
        OP_TOL,
        Box::new(move || {
            max_over_rounds(seed ^ 16, &[1, 4, 4], false, |g, x, rng| {
                let mut target = Tensor::zeros(&[1, 4, 4]);
                for v in target.data_mut().iter_mut() {
                    if rng.gen_bool(0.2) {
                        *v = 1.0;
                    } else if rng.gen_bool(0.3) {
                        *v = rng.gen_range(0.1..0.9);
                    }
                }
                g.focal_loss(x, &target, 2.0, 4.0)
            })
        }),
    );
    add(
        "op: masked_l1",
        OP_TOL,
        Box::new(move || {
            max_over_rounds(seed ^ 17, &[2, 4, 4], false, |g, x, rng| {
                // keep pred far from target so |.| has no kink in the probe range
                let target = g.value(x).clone();
                let mut shifted = target.clone();
                for v in shifted.data_mut().iter_mut() {
                    *v += if rng.gen_bool(0.5) { 2.0 } else { -2.0 };
                }
                let mask: Vec<usize> = (0..16).filter(|_| rng.gen_bool(0.4)).collect();
                g.masked_l1(x, &shifted, std::sync::Arc::new(mask))
            })
        }),
    );

    // blocks
    add(
        "block: qlinear + split relu",
        BLOCK_TOL,
        Box::new(move || {
            let mut worst = 0.0f64;
            for round in 0..CHECK_ROUNDS {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 20 ^ (round as u64) << 8);
                let mut store = ParamStore::new();
                let layer = QuaternionLinear::suprasphere_init(&mut store, "q", 2, 2, true, rng.gen());
                let x = rand_tensor_off_kink(&[4, 2, 3, 3], &mut rng);
                let err = finite_diff_check(
                    |g, xid| {
                        store.bind(g);
                        let y = layer.forward(g, xid)?;
                        let a = split_activation_graph(g, y, Activation::Relu)?;
                        g.sum(a)
                    },
                    &x,
                    1e-5,
                )?;
                worst = worst.max(err);
            }
            Ok(worst)
        }),
    );
    add(
        "block: depth-aware embedding",
        BLOCK_TOL,
        Box::new(move || {
            let mut worst = 0.0f64;
            for round in 0..CHECK_ROUNDS {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 21 ^ (round as u64) << 8);
                let mut store = ParamStore::new();
                let block = DaeBlock::new(
                    &mut store,
                    "dae",
                    4,
                    1,
                    4,
                    DaeMixingKind::Quaternion,
                    AxisAssignment::LidarOnI,
                    rng.gen(),
                );
                // randomize the zero-initialized ups so the whole path carries gradient
                let up_img = store.find("dae.up_img.w").expect("up_img exists");
                *store.get_mut(up_img) = uniform_tensor(&[4, 4], 0.4, &mut rng);
                let up_depth = store.find("dae.up_depth.w").expect("up_depth exists");
                *store.get_mut(up_depth) = uniform_tensor(&[1, 4], 0.4, &mut rng);
                let depth = rand_tensor(&[1, 9, 9], &mut rng);
                let x = rand_tensor(&[4, 6, 6], &mut rng);
                let err = finite_diff_check(
                    |g, xid| {
                        store.bind(g);
                        let d = g.constant(depth.clone());
                        let (enh, next) = block.forward(g, xid, d)?;
                        let a = g.sum(enh)?;
                        let b = g.sum(next)?;
                        g.add(a, b)
                    },
                    &x,
                    1e-5,
                )?;
                worst = worst.max(err);
            }
            Ok(worst)
        }),
    );
    add(
        "block: geometry-aware embedding",
        BLOCK_TOL,
        Box::new(move || {
            let mut worst = 0.0f64;
            for round in 0..CHECK_ROUNDS {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 22 ^ (round as u64) << 8);
                let mut store = ParamStore::new();
                let block = GaeBlock::new(&mut store, "gae", 8, 4, 4, rng.gen());
                let up = store.find("gae.up.w").expect("up exists");
                *store.get_mut(up) = uniform_tensor(&[8, 4], 0.4, &mut rng);
                let geo = rand_tensor(&[4, 10, 10], &mut rng);
                let x = rand_tensor(&[8, 10, 10], &mut rng);
                let err = finite_diff_check(
                    |g, xid| {
                        store.bind(g);
                        let c = g.constant(geo.clone());
                        let (q_out, c_geo) = block.forward(g, xid, c)?;
                        let a = g.sum(q_out)?;
                        let b = g.sum(c_geo)?;
                        g.add(a, b)
                    },
                    &x,
                    1e-5,
                )?;
                worst = worst.max(err);
            }
            Ok(worst)
        }),
    );
    add(
        "block: detection head",
        BLOCK_TOL,
        Box::new(move || {
            let mut worst = 0.0f64;
            for round in 0..CHECK_ROUNDS {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 23 ^ (round as u64) << 8);
                let mut store = ParamStore::new();
                let hm = Conv1x1Layer::random(&mut store, "hm", 6, 1, &mut rng);
                let sz = Conv1x1Layer::random(&mut store, "sz", 6, 2, &mut rng);
                let x = rand_tensor(&[6, 5, 5], &mut rng);
                let mut target = Tensor::zeros(&[1, 5, 5]);
                target.data_mut()[7] = 1.0;
                let err = finite_diff_check(
                    |g, xid| {
                        store.bind(g);
                        let logits = hm.forward(g, xid)?;
                        let focal = g.focal_loss(logits, &target, 2.0, 4.0)?;
                        let sizes = sz.forward(g, xid)?;
                        let st = Tensor::full(&[2, 5, 5], 3.0);
                        let l1 = g.masked_l1(sizes, &st, std::sync::Arc::new(vec![7]))?;
                        let l1w = g.scale(l1, 0.5)?;
                        g.add(focal, l1w)
                    },
                    &x,
                    1e-5,
                )?;
                worst = worst.max(err);
            }
            Ok(worst)
        }),
    );
    add(
        "full: detector loss",
        FULL_LOSS_TOL,
        Box::new(move || {
            let mut cfg = RunConfig::fast_profile();
            cfg.image_h = 16;
            cfg.image_w = 24;
            cfg.backbone_channels = [4, 6, 8];
            cfg.c_q = 8;
            cfg.bev_grid = 8;
            cfg.c_dae = 4;
            cfg.c_gae = 8;
            cfg.cam_fx = 20.0;
            cfg.cam_fy = 20.0;
            let mut worst = 0.0f64;
            for round in 0..2 {
                let model_seed = seed ^ 24 ^ (round as u64) << 8;
                let model = Detector::new(cfg.detector_config(), cfg.chain_config(), &cfg.camera(), model_seed)?;
                let bundle = prepare_scene(&cfg, 2 * round as u64)?;
                let inputs = bundle.inputs(true);
                let grid = model.grid();
                // a random weight slice: the first encoder conv kernel
                let target = model.store.find("encoder.l0.w").expect("encoder weight");
                let w0 = model.store.get(target).clone();
                let err = finite_diff_check(
                    |g, wid| {
                        model.store.bind_with_override(g, target, wid);
                        let out = model.forward_bound(g, &inputs)?;
                        detection_loss(g, &out, &bundle.gt, &grid, None)
                    },
                    &w0,
                    1e-5,
                )?;
                worst = worst.max(err);
            }
            Ok(worst)
        }),
    );
    items
}

/// Runs the standard suite; the CLI exposes this as `gradcheck`.
pub fn gradcheck_all(seed: u64) -> Result<CheckReport> {
    run_checks(&standard_checks(seed))
}
