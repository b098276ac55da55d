//! Experiment configuration: a line-based `key = value` file with `[section]`
//! headers and `#` comments, a canonical key/value form that both the config
//! hash and the resolved manifest derive from, and typo-friendly errors.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::detect::DetectorConfig;
use crate::fusion::{AxisAssignment, ChainConfig, FusionMode, QuaFaPlacement};
use crate::lidar::{CameraModel, VoxelSpec};
use crate::scene::{LidarParams, SceneSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Train,
    Eval,
    Ablate,
    Gradcheck,
    Datagen,
}

impl RunMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(RunMode::Train),
            "eval" => Ok(RunMode::Eval),
            "ablate" => Ok(RunMode::Ablate),
            "gradcheck" => Ok(RunMode::Gradcheck),
            "datagen" => Ok(RunMode::Datagen),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RunMode::Train => "train",
            RunMode::Eval => "eval",
            RunMode::Ablate => "ablate",
            RunMode::Gradcheck => "gradcheck",
            RunMode::Datagen => "datagen",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Components,
    Framework,
    QuaternionAxis,
    QuafaDepth,
    Dims,
    Robustness,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "components" => Ok(AblationAxis::Components),
            "framework" => Ok(AblationAxis::Framework),
            "quaternion_axis" => Ok(AblationAxis::QuaternionAxis),
            "quafa_depth" => Ok(AblationAxis::QuafaDepth),
            "dims" => Ok(AblationAxis::Dims),
            "robustness" => Ok(AblationAxis::Robustness),
            other => Err(Error::Config(format!(
                "unknown ablation axis `{other}` (components|framework|quaternion_axis|quafa_depth|dims|robustness)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::Components => "components",
            AblationAxis::Framework => "framework",
            AblationAxis::QuaternionAxis => "quaternion_axis",
            AblationAxis::QuafaDepth => "quafa_depth",
            AblationAxis::Dims => "dims",
            AblationAxis::Robustness => "robustness",
        }
    }
}

/// Full experiment description. Defaults follow the reference configuration:
/// progressive fusion, every component enabled, quaternion mixing at the
/// first backbone stage, LiDAR on the imaginary axis, hidden widths 8 / 128.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // run
    pub mode: RunMode,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub lidar_present: bool,
    pub log_every: usize,
    pub out_dir: PathBuf,
    pub data_dir: Option<PathBuf>,
    pub ablation_axis: AblationAxis,
    // model
    pub fusion_mode: FusionMode,
    pub dae: bool,
    pub gae_enc: bool,
    pub gae_dec: bool,
    pub qua_fa: QuaFaPlacement,
    pub axis: AxisAssignment,
    pub c_dae: usize,
    pub c_gae: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub backbone_channels: [usize; 3],
    pub c_q: usize,
    pub bev_grid: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub aux_depth: bool,
    // train
    pub lr: f64,
    pub momentum: f64,
    pub grad_clip: f64,
    /// Camera-only steps whose weights a fused model inherits before its
    /// own training stage; 0 trains fused models from scratch.
    pub pretrain_steps: usize,
    // data
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub voxel: (f64, f64, f64),
    pub match_radius: f64,
    pub n_boxes: (usize, usize),
    pub box_w: (f64, f64),
    pub box_l: (f64, f64),
    pub box_h: (f64, f64),
    pub place_x: (f64, f64),
    pub place_y: (f64, f64),
    pub cam_fx: f64,
    pub cam_fy: f64,
    pub cam_height: f64,
    pub lidar_azimuth: usize,
    pub lidar_elevation: usize,
    pub elevation_range: (f64, f64),
    pub lidar_range: f64,
    pub lidar_dropout: f64,
    pub lidar_sigma: f64,
    pub sensor_height: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: RunMode::Train,
            seeds: vec![0],
            steps: 500,
            train_scenes: 32,
            eval_scenes: 64,
            lidar_present: true,
            log_every: 50,
            out_dir: PathBuf::from("out"),
            data_dir: None,
            ablation_axis: AblationAxis::Framework,
            fusion_mode: FusionMode::Progressive,
            dae: true,
            gae_enc: true,
            gae_dec: true,
            qua_fa: QuaFaPlacement::FirstLayer,
            axis: AxisAssignment::LidarOnI,
            c_dae: 8,
            c_gae: 128,
            image_h: 64,
            image_w: 96,
            backbone_channels: [16, 32, 64],
            c_q: 64,
            bev_grid: 48,
            enc_layers: 2,
            dec_layers: 2,
            aux_depth: false,
            lr: 1e-2,
            momentum: 0.9,
            grad_clip: 5.0,
            pretrain_steps: 500,
            x_range: (-51.2, 51.2),
            y_range: (-51.2, 51.2),
            z_range: (-5.0, 3.0),
            voxel: (0.23, 0.23, 8.0),
            match_radius: 2.0,
            n_boxes: (2, 4),
            box_w: (1.6, 3.2),
            box_l: (1.8, 3.6),
            box_h: (1.2, 2.2),
            place_x: (5.0, 14.0),
            place_y: (-7.0, 7.0),
            cam_fx: 80.0,
            cam_fy: 80.0,
            cam_height: 1.4,
            lidar_azimuth: 256,
            lidar_elevation: 12,
            elevation_range: (-0.42, 0.08),
            lidar_range: 45.0,
            lidar_dropout: 0.08,
            lidar_sigma: 0.02,
            sensor_height: 1.7,
        }
    }
}

const KNOWN_KEYS: &[&str] = &[
    "mode",
    "seeds",
    "steps",
    "train_scenes",
    "eval_scenes",
    "lidar_present",
    "log_every",
    "out",
    "data_dir",
    "axis_of_ablation",
    "fusion_mode",
    "dae",
    "gae_enc",
    "gae_dec",
    "qua_fa",
    "axis",
    "c_dae",
    "c_gae",
    "image_h",
    "image_w",
    "backbone_channels",
    "c_q",
    "bev_grid",
    "enc_layers",
    "dec_layers",
    "aux_depth",
    "lr",
    "momentum",
    "grad_clip",
    "pretrain_steps",
    "x_range",
    "y_range",
    "z_range",
    "voxel",
    "match_radius",
    "n_boxes",
    "box_w",
    "box_l",
    "box_h",
    "place_x",
    "place_y",
    "cam_fx",
    "cam_fy",
    "cam_height",
    "lidar_azimuth",
    "lidar_elevation",
    "elevation_range",
    "lidar_range",
    "lidar_dropout",
    "lidar_sigma",
    "sensor_height",
];

const SECTIONS: &[&str] = &["run", "model", "train", "data"];

fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Closest known configuration key, for typo hints.
pub fn nearest_key(unknown: &str) -> &'static str {
    KNOWN_KEYS
        .iter()
        .min_by_key(|k| levenshtein(unknown, k))
        .copied()
        .unwrap_or("mode")
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>().map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{v}`")))
}

fn parse_pair_f64(key: &str, v: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = v.split_whitespace().collect();
    if parts.len() != 2 {
        return Err(Error::Config(format!("key `{key}` wants two numbers, got `{v}`")));
    }
    Ok((parse_num(key, parts[0])?, parse_num(key, parts[1])?))
}

fn parse_pair_usize(key: &str, v: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = v.split_whitespace().collect();
    if parts.len() != 2 {
        return Err(Error::Config(format!("key `{key}` wants two integers, got `{v}`")));
    }
    Ok((parse_num(key, parts[0])?, parse_num(key, parts[1])?))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        other => Err(Error::Config(format!("key `{key}`: expected a boolean, got `{other}`"))),
    }
}

impl RunConfig {
    /// Parses a config file over the defaults.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let text = fs::read_to_string(&path)?;
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(section) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                if !SECTIONS.contains(&section.trim()) {
                    return Err(Error::Config(format!(
                        "line {}: unknown section `[{}]` (run|model|train|data)",
                        ln + 1,
                        section.trim()
                    )));
                }
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: `{line}` is not key = value", ln + 1)));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Applies one key/value pair. CLI flags funnel through here too, so
    /// they override file values by arriving later.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "mode" => self.mode = RunMode::parse(value)?,
            "seeds" => {
                self.seeds = value
                    .split_whitespace()
                    .map(|v| parse_num::<u64>(key, v))
                    .collect::<Result<_>>()?;
                if self.seeds.is_empty() {
                    return Err(Error::Config("seeds list is empty".into()));
                }
            }
            "steps" => self.steps = parse_num(key, value)?,
            "train_scenes" => self.train_scenes = parse_num(key, value)?,
            "eval_scenes" => self.eval_scenes = parse_num(key, value)?,
            "lidar_present" => self.lidar_present = parse_bool(key, value)?,
            "log_every" => self.log_every = parse_num::<usize>(key, value)?.max(1),
            "out" => self.out_dir = PathBuf::from(value),
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "axis_of_ablation" => self.ablation_axis = AblationAxis::parse(value)?,
            "fusion_mode" => self.fusion_mode = FusionMode::parse(value)?,
            "dae" => self.dae = parse_bool(key, value)?,
            "gae_enc" => self.gae_enc = parse_bool(key, value)?,
            "gae_dec" => self.gae_dec = parse_bool(key, value)?,
            "qua_fa" => self.qua_fa = QuaFaPlacement::parse(value)?,
            "axis" => self.axis = AxisAssignment::parse(value)?,
            "c_dae" => self.c_dae = parse_num(key, value)?,
            "c_gae" => self.c_gae = parse_num(key, value)?,
            "image_h" => self.image_h = parse_num(key, value)?,
            "image_w" => self.image_w = parse_num(key, value)?,
            "backbone_channels" => {
                let parts: Vec<&str> = value.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(Error::Config(format!("backbone_channels wants three integers, got `{value}`")));
                }
                for (slot, p) in self.backbone_channels.iter_mut().zip(parts) {
                    *slot = parse_num(key, p)?;
                }
            }
            "c_q" => self.c_q = parse_num(key, value)?,
            "bev_grid" => self.bev_grid = parse_num(key, value)?,
            "enc_layers" => self.enc_layers = parse_num(key, value)?,
            "dec_layers" => self.dec_layers = parse_num(key, value)?,
            "aux_depth" => self.aux_depth = parse_bool(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "momentum" => self.momentum = parse_num(key, value)?,
            "grad_clip" => self.grad_clip = parse_num(key, value)?,
            "pretrain_steps" => self.pretrain_steps = parse_num(key, value)?,
            "x_range" => self.x_range = parse_pair_f64(key, value)?,
            "y_range" => self.y_range = parse_pair_f64(key, value)?,
            "z_range" => self.z_range = parse_pair_f64(key, value)?,
            "voxel" => {
                let parts: Vec<&str> = value.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(Error::Config(format!("voxel wants three numbers, got `{value}`")));
                }
                self.voxel = (parse_num(key, parts[0])?, parse_num(key, parts[1])?, parse_num(key, parts[2])?);
            }
            "match_radius" => self.match_radius = parse_num(key, value)?,
            "n_boxes" => self.n_boxes = parse_pair_usize(key, value)?,
            "box_w" => self.box_w = parse_pair_f64(key, value)?,
            "box_l" => self.box_l = parse_pair_f64(key, value)?,
            "box_h" => self.box_h = parse_pair_f64(key, value)?,
            "place_x" => self.place_x = parse_pair_f64(key, value)?,
            "place_y" => self.place_y = parse_pair_f64(key, value)?,
            "cam_fx" => self.cam_fx = parse_num(key, value)?,
            "cam_fy" => self.cam_fy = parse_num(key, value)?,
            "cam_height" => self.cam_height = parse_num(key, value)?,
            "lidar_azimuth" => self.lidar_azimuth = parse_num(key, value)?,
            "lidar_elevation" => self.lidar_elevation = parse_num(key, value)?,
            "elevation_range" => self.elevation_range = parse_pair_f64(key, value)?,
            "lidar_range" => self.lidar_range = parse_num(key, value)?,
            "lidar_dropout" => self.lidar_dropout = parse_num(key, value)?,
            "lidar_sigma" => self.lidar_sigma = parse_num(key, value)?,
            "sensor_height" => self.sensor_height = parse_num(key, value)?,
            unknown => {
                return Err(Error::UnknownKey { key: unknown.to_string(), nearest: nearest_key(unknown).to_string() })
            }
        }
        Ok(())
    }

    /// Canonical key/value pairs of the semantically meaningful fields, in a
    /// fixed order. The hash and the resolved manifest both derive from this,
    /// so the hash is stable under file reordering by construction. Run
    /// bookkeeping (mode, output paths, log cadence) is excluded.
    pub fn canonical_pairs(&self) -> Vec<(String, String)> {
        let pf = |(a, b): (f64, f64)| format!("{a} {b}");
        let pu = |(a, b): (usize, usize)| format!("{a} {b}");
        let mut pairs: Vec<(String, String)> = vec![
            ("seeds".into(), self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" ")),
            ("steps".into(), self.steps.to_string()),
            ("train_scenes".into(), self.train_scenes.to_string()),
            ("eval_scenes".into(), self.eval_scenes.to_string()),
            ("lidar_present".into(), self.lidar_present.to_string()),
            ("fusion_mode".into(), self.fusion_mode.name().into()),
            ("dae".into(), self.dae.to_string()),
            ("gae_enc".into(), self.gae_enc.to_string()),
            ("gae_dec".into(), self.gae_dec.to_string()),
            ("qua_fa".into(), self.qua_fa.name()),
            ("axis".into(), self.axis.name().into()),
            ("c_dae".into(), self.c_dae.to_string()),
            ("c_gae".into(), self.c_gae.to_string()),
            ("image_h".into(), self.image_h.to_string()),
            ("image_w".into(), self.image_w.to_string()),
            (
                "backbone_channels".into(),
                self.backbone_channels.iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
            ),
            ("c_q".into(), self.c_q.to_string()),
            ("bev_grid".into(), self.bev_grid.to_string()),
            ("enc_layers".into(), self.enc_layers.to_string()),
            ("dec_layers".into(), self.dec_layers.to_string()),
            ("aux_depth".into(), self.aux_depth.to_string()),
            ("lr".into(), self.lr.to_string()),
            ("momentum".into(), self.momentum.to_string()),
            ("grad_clip".into(), self.grad_clip.to_string()),
            ("pretrain_steps".into(), self.pretrain_steps.to_string()),
            ("x_range".into(), pf(self.x_range)),
            ("y_range".into(), pf(self.y_range)),
            ("z_range".into(), pf(self.z_range)),
            ("voxel".into(), format!("{} {} {}", self.voxel.0, self.voxel.1, self.voxel.2)),
            ("match_radius".into(), self.match_radius.to_string()),
            ("n_boxes".into(), pu(self.n_boxes)),
            ("box_w".into(), pf(self.box_w)),
            ("box_l".into(), pf(self.box_l)),
            ("box_h".into(), pf(self.box_h)),
            ("place_x".into(), pf(self.place_x)),
            ("place_y".into(), pf(self.place_y)),
            ("cam_fx".into(), self.cam_fx.to_string()),
            ("cam_fy".into(), self.cam_fy.to_string()),
            ("cam_height".into(), self.cam_height.to_string()),
            ("lidar_azimuth".into(), self.lidar_azimuth.to_string()),
            ("lidar_elevation".into(), self.lidar_elevation.to_string()),
            ("elevation_range".into(), pf(self.elevation_range)),
            ("lidar_range".into(), self.lidar_range.to_string()),
            ("lidar_dropout".into(), self.lidar_dropout.to_string()),
            ("lidar_sigma".into(), self.lidar_sigma.to_string()),
            ("sensor_height".into(), self.sensor_height.to_string()),
        ];
        pairs.sort();
        pairs
    }

    /// First 16 hex digits of the sha-256 over the canonical pairs.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (k, v) in self.canonical_pairs() {
            hasher.update(k.as_bytes());
            hasher.update(b"=");
            hasher.update(v.as_bytes());
            hasher.update(b"\n");
        }
        let digest = hasher.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Resolved configuration as JSON for the run manifest.
    pub fn manifest_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        map.insert("mode".into(), self.mode.name().into());
        map.insert("out".into(), self.out_dir.display().to_string().into());
        if let Some(d) = &self.data_dir {
            map.insert("data_dir".into(), d.display().to_string().into());
        }
        map.insert("config_hash".into(), self.hash().into());
        for (k, v) in self.canonical_pairs() {
            map.insert(k, v.into());
        }
        serde_json::Value::Object(map)
    }

    // ---- typed views ----------------------------------------------------

    pub fn voxel_spec(&self) -> VoxelSpec {
        VoxelSpec { x_range: self.x_range, y_range: self.y_range, z_range: self.z_range, voxel: self.voxel }
    }

    pub fn camera(&self) -> CameraModel {
        CameraModel::forward_facing(self.cam_fx, self.cam_fy, self.image_w, self.image_h, self.cam_height)
    }

    pub fn detector_config(&self) -> DetectorConfig {
        DetectorConfig {
            image_h: self.image_h,
            image_w: self.image_w,
            backbone_channels: self.backbone_channels,
            c_q: self.c_q,
            bev_grid: self.bev_grid,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            voxel: self.voxel_spec(),
            match_radius: self.match_radius,
            aux_depth: self.aux_depth,
            head_prior: 0.1,
        }
    }

    pub fn chain_config(&self) -> ChainConfig {
        ChainConfig {
            mode: self.fusion_mode,
            dae: self.dae,
            gae_enc: self.gae_enc,
            gae_dec: self.gae_dec,
            quafa: self.qua_fa,
            axis: self.axis,
            hidden_dae: self.c_dae,
            hidden_gae: self.c_gae,
        }
    }

    pub fn scene_spec(&self, seed: u64) -> SceneSpec {
        SceneSpec {
            seed,
            n_boxes: self.n_boxes,
            size_w: self.box_w,
            size_l: self.box_l,
            size_h: self.box_h,
            placement_x: self.place_x,
            placement_y: self.place_y,
            lidar: LidarParams {
                n_azimuth: self.lidar_azimuth,
                n_elevation: self.lidar_elevation,
                elevation_range: self.elevation_range,
                max_range: self.lidar_range,
                dropout: self.lidar_dropout,
                noise_sigma: self.lidar_sigma,
                sensor_height: self.sensor_height,
            },
            camera: self.camera(),
        }
    }

    /// Desk-scale profile: the same structure at reduced widths and
    /// resolutions, sized so the trend experiments finish in minutes on a
    /// laptop CPU. Used by the acceptance suite and the example configs.
    pub fn fast_profile() -> Self {
        RunConfig {
            steps: 1000,
            pretrain_steps: 1000,
            train_scenes: 128,
            eval_scenes: 64,
            image_h: 32,
            image_w: 48,
            backbone_channels: [8, 16, 32],
            c_q: 32,
            bev_grid: 16,
            c_gae: 32,
            x_range: (-16.0, 16.0),
            y_range: (-16.0, 16.0),
            z_range: (-1.0, 4.0),
            voxel: (0.25, 0.25, 5.0),
            cam_fx: 40.0,
            cam_fy: 40.0,
            lidar_azimuth: 224,
            lidar_elevation: 10,
            lidar_dropout: 0.1,
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_cfg(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn defaults_match_reference_configuration() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.fusion_mode, FusionMode::Progressive);
        assert!(cfg.dae && cfg.gae_enc && cfg.gae_dec);
        assert_eq!(cfg.qua_fa, QuaFaPlacement::FirstLayer);
        assert_eq!(cfg.axis, AxisAssignment::LidarOnI);
        assert_eq!((cfg.c_dae, cfg.c_gae), (8, 128));
    }

    #[test]
    fn parses_sections_comments_and_overrides() {
        let f = write_cfg(
            "# experiment\n\
             [run]\n\
             mode = ablate\n\
             seeds = 1 2 3  # three seeds\n\
             steps = 250\n\
             [model]\n\
             fusion_mode = separate\n\
             qua_fa = depth 2\n\
             c_gae = 32\n\
             [data]\n\
             x_range = -16 16\n\
             voxel = 0.25 0.25 5\n",
        );
        let cfg = RunConfig::from_file(f.path()).unwrap();
        assert_eq!(cfg.mode, RunMode::Ablate);
        assert_eq!(cfg.seeds, vec![1, 2, 3]);
        assert_eq!(cfg.steps, 250);
        assert_eq!(cfg.fusion_mode, FusionMode::Separate);
        assert_eq!(cfg.qua_fa, QuaFaPlacement::Depth(2));
        assert_eq!(cfg.c_gae, 32);
        assert_eq!(cfg.x_range, (-16.0, 16.0));
        assert_eq!(cfg.voxel, (0.25, 0.25, 5.0));
        // untouched keys keep defaults
        assert_eq!(cfg.c_dae, 8);
    }

    #[test]
    fn unknown_key_names_nearest_match() {
        let f = write_cfg("fusion_mod = separate\n");
        match RunConfig::from_file(f.path()) {
            Err(Error::UnknownKey { key, nearest }) => {
                assert_eq!(key, "fusion_mod");
                assert_eq!(nearest, "fusion_mode");
            }
            other => panic!("expected UnknownKey, got {other:?}"),
        }
        assert_eq!(nearest_key("sedes"), "seeds");
        assert_eq!(nearest_key("bev_gird"), "bev_grid");
    }

    #[test]
    fn bad_section_and_malformed_lines_error() {
        let f = write_cfg("[nope]\n");
        assert!(matches!(RunConfig::from_file(f.path()), Err(Error::Config(_))));
        let f2 = write_cfg("just some words\n");
        assert!(RunConfig::from_file(f2.path()).is_err());
    }

    #[test]
    fn hash_is_stable_under_reordering_and_sections() {
        let a = write_cfg("steps = 777\nc_gae = 64\nlidar_dropout = 0.1\n");
        let b = write_cfg("[data]\nlidar_dropout = 0.1\n[model]\nc_gae = 64\n[run]\nsteps = 777\n");
        let ca = RunConfig::from_file(a.path()).unwrap();
        let cb = RunConfig::from_file(b.path()).unwrap();
        assert_eq!(ca.hash(), cb.hash());
    }

    #[test]
    fn hash_tracks_semantic_fields_only() {
        let base = RunConfig::default();
        let mut semantic = base.clone();
        semantic.c_dae = 16;
        assert_ne!(base.hash(), semantic.hash());
        let mut bookkeeping = base.clone();
        bookkeeping.out_dir = PathBuf::from("/somewhere/else");
        bookkeeping.mode = RunMode::Eval;
        bookkeeping.log_every = 7;
        assert_eq!(base.hash(), bookkeeping.hash());
    }

    #[test]
    fn manifest_carries_resolved_values_and_hash() {
        let cfg = RunConfig::fast_profile();
        let m = cfg.manifest_json();
        assert_eq!(m["bev_grid"], "16");
        assert_eq!(m["qua_fa"], "first_layer");
        assert_eq!(m["config_hash"], cfg.hash());
    }

    #[test]
    fn cli_style_set_overrides_file_values() {
        let f = write_cfg("lidar_present = true\nseeds = 5 6\n");
        let mut cfg = RunConfig::from_file(f.path()).unwrap();
        cfg.set("lidar_present", "false").unwrap(); // --no-lidar
        cfg.set("seeds", "9").unwrap(); // --seed 9
        assert!(!cfg.lidar_present);
        assert_eq!(cfg.seeds, vec![9]);
    }
}
