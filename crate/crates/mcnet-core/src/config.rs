//! Run configuration: a human-readable `key = value` file shared by every
//! CLI subcommand, with environment-variable overrides (`MCNET_<KEY>`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fixedpoint::SolverConfig;
use crate::measurement::OperatorKind;
use crate::tensor::PaddingMode;

/// Every knob of the pipeline. Fields mirror the config-file keys one to one
/// (lower_snake_case keys, `#` comments, `key = value` lines).
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub scale: usize,
    pub epsilon: f64,
    pub operator: String,
    pub boundary: String,
    pub shave: Option<usize>,

    pub hr_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub external_w_dir: Option<PathBuf>,
    pub denoiser_ckpt: Option<PathBuf>,
    pub model_ckpt: Option<PathBuf>,

    pub denoiser_width: usize,
    pub denoiser_depth: usize,
    pub sn_target: f64,
    pub sn_iters_init: usize,
    pub sn_iters_step: usize,

    pub patch_size: usize,
    pub patch_stride: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub loss: String,

    pub augment: bool,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub noise_grid: Vec<f64>,
    pub beta_grid: Vec<f64>,
    pub rho: f64,

    pub forward_iters: usize,
    pub forward_tol: f64,
    pub backward_iters: usize,
    pub backward_tol: f64,
    pub anderson_memory: usize,
    pub anderson_ridge: f64,
    pub anderson_mixing: f64,
    pub stagnation_window: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scale: 3,
            epsilon: 0.0,
            operator: "box".into(),
            boundary: "circular".into(),
            shave: None,
            hr_dir: None,
            val_dir: None,
            data_dir: None,
            out_dir: None,
            external_w_dir: None,
            denoiser_ckpt: None,
            model_ckpt: None,
            denoiser_width: 64,
            denoiser_depth: 6,
            sn_target: 0.98,
            sn_iters_init: 30,
            sn_iters_step: 5,
            patch_size: 48,
            patch_stride: 24,
            batch_size: 16,
            epochs: 40,
            lr: 1e-4,
            lr_drop_epoch: 30,
            lr_drop_factor: 0.1,
            loss: "mse".into(),
            augment: false,
            pretrain_epochs: 12,
            pretrain_lr: 1e-3,
            noise_grid: vec![2.0, 5.0, 10.0, 15.0],
            beta_grid: vec![0.1, 0.5, 1.0, 2.0, 5.0, 10.0],
            rho: 1.0,
            forward_iters: 200,
            forward_tol: 1e-6,
            backward_iters: 80,
            backward_tol: 1e-6,
            anderson_memory: 5,
            anderson_ridge: 1e-4,
            anderson_mixing: 1.0,
            stagnation_window: 50,
        }
    }
}

pub const ENV_PREFIX: &str = "MCNET_";

impl RunConfig {
    /// Parse a config file, then apply `MCNET_<KEY>` environment overrides.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut cfg = Self::default();
        cfg.apply_pairs(parse_pairs(&text)?)?;
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_str_no_env(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_pairs(parse_pairs(text)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_env(&mut self) -> Result<()> {
        let mut pairs = BTreeMap::new();
        for (key, value) in std::env::vars() {
            if let Some(stripped) = key.strip_prefix(ENV_PREFIX) {
                pairs.insert(stripped.to_ascii_lowercase(), value);
            }
        }
        self.apply_pairs(pairs)
    }

    fn apply_pairs(&mut self, pairs: BTreeMap<String, String>) -> Result<()> {
        for (key, value) in pairs {
            self.set(&key, &value)?;
        }
        Ok(())
    }

    /// Set one key from its textual value. Unknown keys are errors so config
    /// typos surface immediately.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "scale" => self.scale = parse(key, v)?,
            "epsilon" => self.epsilon = parse(key, v)?,
            "operator" => self.operator = v.to_string(),
            "boundary" => self.boundary = v.to_string(),
            "shave" => self.shave = Some(parse(key, v)?),
            "hr_dir" => self.hr_dir = Some(PathBuf::from(v)),
            "val_dir" => self.val_dir = Some(PathBuf::from(v)),
            "data_dir" => self.data_dir = Some(PathBuf::from(v)),
            "out_dir" => self.out_dir = Some(PathBuf::from(v)),
            "external_w_dir" => self.external_w_dir = Some(PathBuf::from(v)),
            "denoiser_ckpt" => self.denoiser_ckpt = Some(PathBuf::from(v)),
            "model_ckpt" => self.model_ckpt = Some(PathBuf::from(v)),
            "denoiser_width" => self.denoiser_width = parse(key, v)?,
            "denoiser_depth" => self.denoiser_depth = parse(key, v)?,
            "sn_target" => self.sn_target = parse(key, v)?,
            "sn_iters_init" => self.sn_iters_init = parse(key, v)?,
            "sn_iters_step" => self.sn_iters_step = parse(key, v)?,
            "patch_size" => self.patch_size = parse(key, v)?,
            "patch_stride" => self.patch_stride = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lr_drop_epoch" => self.lr_drop_epoch = parse(key, v)?,
            "lr_drop_factor" => self.lr_drop_factor = parse(key, v)?,
            "loss" => self.loss = v.to_string(),
            "augment" => {
                self.augment = match v {
                    "0" | "false" | "off" => false,
                    "1" | "true" | "on" => true,
                    other => {
                        return Err(Error::Config(format!(
                            "bad value `{other}` for key `augment`"
                        )))
                    }
                }
            }
            "pretrain_epochs" => self.pretrain_epochs = parse(key, v)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, v)?,
            "noise_grid" => self.noise_grid = parse_list(key, v)?,
            "beta_grid" => self.beta_grid = parse_list(key, v)?,
            "rho" => self.rho = parse(key, v)?,
            "forward_iters" => self.forward_iters = parse(key, v)?,
            "forward_tol" => self.forward_tol = parse(key, v)?,
            "backward_iters" => self.backward_iters = parse(key, v)?,
            "backward_tol" => self.backward_tol = parse(key, v)?,
            "anderson_memory" => self.anderson_memory = parse(key, v)?,
            "anderson_ridge" => self.anderson_ridge = parse(key, v)?,
            "anderson_mixing" => self.anderson_mixing = parse(key, v)?,
            "stagnation_window" => self.stagnation_window = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if ![2, 3, 4].contains(&self.scale) {
            return Err(Error::Config(format!(
                "scale must be 2, 3, or 4 (got {})",
                self.scale
            )));
        }
        if self.epsilon < 0.0 {
            return Err(Error::Config("epsilon must be >= 0".into()));
        }
        if !["box", "bicubic"].contains(&self.operator.as_str()) {
            return Err(Error::Config(format!(
                "operator must be `box` or `bicubic` (got `{}`)",
                self.operator
            )));
        }
        let boundary = PaddingMode::parse(&self.boundary)?;
        if boundary == PaddingMode::Zero {
            return Err(Error::Config(
                "boundary must be circular or replicate".into(),
            ));
        }
        if !["mse", "l1"].contains(&self.loss.as_str()) {
            return Err(Error::Config("loss must be `mse` or `l1`".into()));
        }
        if !self.patch_size.is_multiple_of(self.scale) {
            return Err(Error::Config(format!(
                "patch_size {} must be divisible by scale {}",
                self.patch_size, self.scale
            )));
        }
        self.solver_forward().validate()?;
        self.solver_backward().validate()
    }

    pub fn operator_kind(&self) -> OperatorKind<f64> {
        match self.operator.as_str() {
            "bicubic" => OperatorKind::bicubic(self.scale),
            _ => OperatorKind::BoxDownsample { scale: self.scale },
        }
    }

    pub fn boundary_mode(&self) -> PaddingMode {
        PaddingMode::parse(&self.boundary).unwrap_or(PaddingMode::Circular)
    }

    pub fn solver_forward(&self) -> SolverConfig {
        SolverConfig {
            max_iters: self.forward_iters,
            tol: self.forward_tol,
            anderson_memory: self.anderson_memory,
            anderson_ridge: self.anderson_ridge,
            anderson_mixing: self.anderson_mixing,
            stagnation_window: self.stagnation_window,
        }
    }

    pub fn solver_backward(&self) -> SolverConfig {
        SolverConfig {
            max_iters: self.backward_iters,
            tol: self.backward_tol,
            anderson_memory: self.anderson_memory,
            anderson_ridge: self.anderson_ridge,
            anderson_mixing: self.anderson_mixing,
            stagnation_window: self.stagnation_window,
        }
    }

    /// Border shave for metrics: the scale factor unless overridden.
    pub fn shave_pixels(&self) -> usize {
        self.shave.unwrap_or(self.scale)
    }

    /// Noise grid in pixel units (the file stores 0-255 levels).
    pub fn noise_sigmas(&self) -> Vec<f64> {
        self.noise_grid.iter().map(|v| v / 255.0).collect()
    }

    /// Operator description embedded in manifests and reports:
    /// kind, scale, taps, boundary, epsilon.
    pub fn operator_spec_string(&self) -> String {
        match self.operator_kind() {
            OperatorKind::BoxDownsample { scale } => format!(
                "kind=box scale={scale} boundary={} epsilon={}",
                self.boundary, self.epsilon
            ),
            OperatorKind::BlurDownsample {
                scale,
                taps,
                anchor,
            } => {
                let taps_str: Vec<String> = taps.iter().map(|t| format!("{t:.12}")).collect();
                format!(
                    "kind=bicubic scale={scale} anchor={anchor} taps={} boundary={} epsilon={}",
                    taps_str.join(","),
                    self.boundary,
                    self.epsilon
                )
            }
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for key `{key}`")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut pairs = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected `key = value`, got `{raw}`",
                lineno + 1
            )));
        };
        pairs.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(pairs)
}
