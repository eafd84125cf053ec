//! Flat run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use splatrecon::losses::LossWeights;
use splatrecon::meshing::{DepthSource, TsdfConfig};
use splatrecon::nets::NetConfig;
use splatrecon::pipeline::{LoopConfig, LoopVariant, ReconstructConfig, RefineConfig, Stage1Config, Stage2Config};
use splatrecon::renderer::RenderSettings;
use splatrecon::splat_model::DecoderConfig;
use splatrecon::{Error, Result};

/// Every tunable of the command-line tools. Loss weights are ordered
/// (color, depth, occupancy, normal, distortion).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub threads: usize,
    pub scenes_dir: PathBuf,
    pub checkpoints_dir: PathBuf,
    pub out_dir: PathBuf,
    pub voxel_edge: f64,
    pub splats_per_voxel: usize,
    pub feature_width: usize,
    pub decoder_hidden: usize,
    pub channels: [usize; 4],
    pub time_embed: usize,
    pub residual_blocks: usize,
    pub dense_budget: usize,
    pub timesteps: usize,
    pub densify_base: usize,
    pub views_per_accum: usize,
    pub stage1_steps: u64,
    pub stage1_lr: f64,
    pub stage1_views_per_step: usize,
    pub stage1_weights: [f64; 5],
    pub stage2_steps: u64,
    pub stage2_lr: f64,
    pub stage2_views_per_step: usize,
    pub stage2_weights: [f64; 5],
    pub checkpoint_every: u64,
    pub refine_steps: usize,
    pub refine_lr_center: f64,
    pub refine_lr_scale: f64,
    pub refine_lr_rotation: f64,
    pub refine_lr_opacity: f64,
    pub refine_lr_color: f64,
    pub tsdf_voxel: f64,
    pub tsdf_truncation: f64,
    pub tsdf_min_alpha: f64,
    pub tsdf_max_cells: usize,
    pub render_near: f64,
    pub render_cutoff: f64,
    pub render_min_alpha: f64,
    pub render_t_min: f64,
    pub depth_source: DepthSource,
    pub use_initializer: bool,
    pub use_densifier: bool,
}

/// One line of documentation per key, in display order.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("preset", "default set: \"reference\" (full-size networks) or \"desk\" (small networks, CPU budget)"),
    ("seed", "seed for every random choice"),
    ("threads", "worker threads; 0 uses all hardware threads"),
    ("scenes_dir", "scene directory, or a directory of scene directories"),
    ("checkpoints_dir", "checkpoint directory"),
    ("out_dir", "output directory"),
    ("voxel_edge", "finest voxel edge v_d in meters"),
    ("splats_per_voxel", "splats decoded per voxel v_g"),
    ("feature_width", "latent feature width per voxel"),
    ("decoder_hidden", "decoder hidden width"),
    ("channels", "network channels at levels 0..3"),
    ("time_embed", "timestep embedding width"),
    ("residual_blocks", "residual blocks per level"),
    ("dense_budget", "largest dense bottleneck grid in cells"),
    ("timesteps", "loop timesteps T"),
    ("densify_base", "densification budget s; n(t) = s / 2^t"),
    ("views_per_accum", "views per gradient accumulation; 0 uses all"),
    ("stage1_steps", "initializer training steps"),
    ("stage1_lr", "initializer learning rate"),
    ("stage1_views_per_step", "views per initializer step"),
    ("stage1_weights", "initializer loss weights"),
    ("stage2_steps", "densifier/optimizer training steps"),
    ("stage2_lr", "densifier/optimizer learning rate"),
    ("stage2_views_per_step", "views per densifier/optimizer step and timestep"),
    ("stage2_weights", "densifier/optimizer loss weights"),
    ("checkpoint_every", "training steps between checkpoints"),
    ("refine_steps", "gradient-descent refinement steps after the loop"),
    ("refine_lr_center", "refinement learning rate of centers, times the scene extent"),
    ("refine_lr_scale", "refinement learning rate of log-scales"),
    ("refine_lr_rotation", "refinement learning rate of rotations"),
    ("refine_lr_opacity", "refinement learning rate of opacity logits"),
    ("refine_lr_color", "refinement learning rate of colors"),
    ("tsdf_voxel", "TSDF voxel size in meters"),
    ("tsdf_truncation", "TSDF truncation distance in meters"),
    ("tsdf_min_alpha", "rendered alpha below which a pixel is not fused"),
    ("tsdf_max_cells", "largest TSDF volume in cells"),
    ("render_near", "near plane in meters"),
    ("render_cutoff", "splat footprint cutoff in standard deviations"),
    ("render_min_alpha", "fragments below this alpha are skipped"),
    ("render_t_min", "compositing stops below this transmittance"),
    ("depth_source", "evaluated depth: \"splats\" or \"mesh\""),
    ("use_initializer", "start the loop from the initializer instead of the SfM voxels"),
    ("use_densifier", "run the densifier inside the loop"),
];

fn weights(w: LossWeights) -> [f64; 5] {
    [w.color, w.depth, w.occupancy, w.normal, w.distortion]
}

fn to_weights(w: [f64; 5]) -> LossWeights {
    LossWeights {
        color: w[0],
        depth: w[1],
        occupancy: w[2],
        normal: w[3],
        distortion: w[4],
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl RunConfig {
    /// Full-size defaults.
    pub fn reference() -> Self {
        let net = NetConfig::default();
        let dec = DecoderConfig::default();
        let looping = LoopConfig::default();
        let s1 = Stage1Config::default();
        let s2 = Stage2Config::default();
        let refine = RefineConfig::default();
        let tsdf = TsdfConfig::default();
        let render = RenderSettings::default();
        Self {
            preset: "reference".into(),
            seed: 0,
            threads: 0,
            scenes_dir: "scenes".into(),
            checkpoints_dir: "checkpoints".into(),
            out_dir: "out".into(),
            voxel_edge: dec.voxel_edge,
            splats_per_voxel: dec.splats_per_voxel,
            feature_width: dec.feature_width,
            decoder_hidden: dec.hidden,
            channels: net.channels,
            time_embed: net.time_embed,
            residual_blocks: net.residual_blocks,
            dense_budget: net.dense_budget,
            timesteps: looping.timesteps,
            densify_base: looping.densify_base,
            views_per_accum: looping.views_per_accum,
            stage1_steps: s1.steps,
            stage1_lr: s1.lr,
            stage1_views_per_step: s1.views_per_step,
            stage1_weights: weights(s1.weights),
            stage2_steps: s2.steps,
            stage2_lr: s2.lr,
            stage2_views_per_step: s2.views_per_step,
            stage2_weights: weights(s2.weights),
            checkpoint_every: 100,
            refine_steps: refine.steps,
            refine_lr_center: refine.lr_center,
            refine_lr_scale: refine.lr_scale,
            refine_lr_rotation: refine.lr_rotation,
            refine_lr_opacity: refine.lr_opacity,
            refine_lr_color: refine.lr_color,
            tsdf_voxel: tsdf.voxel,
            tsdf_truncation: tsdf.truncation,
            tsdf_min_alpha: tsdf.min_alpha,
            tsdf_max_cells: tsdf.max_cells,
            render_near: render.near,
            render_cutoff: render.cutoff,
            render_min_alpha: render.min_alpha,
            render_t_min: render.t_min,
            depth_source: DepthSource::Splats,
            use_initializer: true,
            use_densifier: true,
        }
    }

    /// Small networks and budgets that train on a laptop CPU.
    pub fn desk() -> Self {
        let net = NetConfig::desk();
        let looping = LoopConfig::desk();
        Self {
            preset: "desk".into(),
            feature_width: net.feature_width,
            decoder_hidden: 64,
            channels: net.channels,
            densify_base: looping.densify_base,
            views_per_accum: looping.views_per_accum,
            stage1_lr: Stage1Config::desk().lr,
            stage2_lr: Stage2Config::desk().lr,
            checkpoint_every: 10,
            ..Self::reference()
        }
    }

    fn preset(name: &str) -> Result<Self> {
        match name {
            "reference" => Ok(Self::reference()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Validation(format!("unknown preset {other:?}"))),
        }
    }

    /// Builds a config from an optional TOML file and `key=value` overrides.
    /// Overrides win over the file, the file wins over the preset defaults.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|_| Error::MissingAsset(p.to_path_buf()))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Parse { what: p.display().to_string(), msg: e.to_string() })?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Validation(format!("override {o:?} is not key=value")))?;
            table.insert(k.trim().to_string(), parse_value(v.trim()));
        }
        let preset = match table.get("preset") {
            Some(toml::Value::String(s)) => s.clone(),
            Some(_) => return Err(Error::Validation("preset must be a string".into())),
            None => "reference".into(),
        };
        let mut merged = toml::Table::try_from(Self::preset(&preset)?)
            .map_err(|e| Error::Validation(e.to_string()))?;
        for (k, v) in table {
            if !merged.contains_key(&k) {
                return Err(Error::Validation(format!("unknown config key {k:?}")));
            }
            merged.insert(k, v);
        }
        let cfg: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Validation(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.net().validate()?;
        self.looping().validate()?;
        if !(self.voxel_edge.is_finite() && self.voxel_edge > 0.0) {
            return Err(Error::Validation("voxel_edge must be positive".into()));
        }
        if self.splats_per_voxel == 0 || self.decoder_hidden == 0 {
            return Err(Error::Validation("decoder sizes must be positive".into()));
        }
        if self.stage1_views_per_step == 0 || self.stage2_views_per_step == 0 {
            return Err(Error::Validation("views per step must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Validation("checkpoint_every must be positive".into()));
        }
        if !(self.tsdf_voxel > 0.0 && self.tsdf_truncation > 0.0) {
            return Err(Error::Validation("TSDF sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn net(&self) -> NetConfig {
        NetConfig {
            channels: self.channels,
            feature_width: self.feature_width,
            timesteps: self.timesteps,
            time_embed: self.time_embed,
            residual_blocks: self.residual_blocks,
            dense_budget: self.dense_budget,
            seed: self.seed,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            feature_width: self.feature_width,
            hidden: self.decoder_hidden,
            splats_per_voxel: self.splats_per_voxel,
            voxel_edge: self.voxel_edge,
        }
    }

    pub fn looping(&self) -> LoopConfig {
        LoopConfig {
            timesteps: self.timesteps,
            densify_base: self.densify_base,
            views_per_accum: self.views_per_accum,
            seed: self.seed,
        }
    }

    pub fn stage1(&self) -> Stage1Config {
        Stage1Config {
            steps: self.stage1_steps,
            lr: self.stage1_lr,
            views_per_step: self.stage1_views_per_step,
            weights: to_weights(self.stage1_weights),
            seed: self.seed,
        }
    }

    pub fn stage2(&self) -> Stage2Config {
        Stage2Config {
            steps: self.stage2_steps,
            lr: self.stage2_lr,
            views_per_step: self.stage2_views_per_step,
            weights: to_weights(self.stage2_weights),
            looping: self.looping(),
            seed: self.seed,
        }
    }

    pub fn render(&self) -> RenderSettings {
        RenderSettings {
            near: self.render_near,
            cutoff: self.render_cutoff,
            min_alpha: self.render_min_alpha,
            t_min: self.render_t_min,
        }
    }

    pub fn reconstruct(&self) -> ReconstructConfig {
        ReconstructConfig {
            looping: self.looping(),
            refine: RefineConfig {
                steps: self.refine_steps,
                lr_center: self.refine_lr_center,
                lr_scale: self.refine_lr_scale,
                lr_rotation: self.refine_lr_rotation,
                lr_opacity: self.refine_lr_opacity,
                lr_color: self.refine_lr_color,
                seed: self.seed,
            },
            tsdf: TsdfConfig {
                voxel: self.tsdf_voxel,
                truncation: self.tsdf_truncation,
                min_alpha: self.tsdf_min_alpha,
                max_cells: self.tsdf_max_cells,
            },
            render: self.render(),
            depth_source: self.depth_source,
            variant: LoopVariant {
                initializer: self.use_initializer,
                densifier: self.use_densifier,
            },
        }
    }

    /// The config as TOML, for run records.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Help text listing every key with its reference and desk defaults.
    pub fn key_help() -> String {
        let reference = toml::Table::try_from(Self::reference()).expect("config serializes");
        let desk = toml::Table::try_from(Self::desk()).expect("config serializes");
        let mut out = String::from("CONFIG KEYS (set in --config FILE or with --set key=value):\n");
        for (key, doc) in KEY_DOCS {
            let r = &reference[*key];
            let d = &desk[*key];
            let default = if r == d {
                format!("default {r}")
            } else {
                format!("default {r}, desk {d}")
            };
            out.push_str(&format!("  {key:<24}{doc} [{default}]\n"));
        }
        out
    }
}

/// Parses an override value as TOML, falling back to a bare string.
fn parse_value(v: &str) -> toml::Value {
    format!("v = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()))
}
