//! Line-oriented `key=value` run configuration with section dots
//! (`model.dim=64`). Precedence is handled by the caller: defaults, then a
//! config file, then command-line overrides. The resolved configuration is
//! echoed into every output artifact.

use std::path::Path;

use crate::degrade::DegradationConfig;
use crate::error::{Error, Result};
use crate::flowmodel::ModelConfig;
use crate::matching::MatchConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub degrade: DegradationConfig,
    pub matching: MatchConfig,
    pub tile: usize,
    pub tile_step: usize,
    /// Super-resolution factor (LR to output).
    pub scale: usize,
    pub threads: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            degrade: DegradationConfig::default(),
            matching: MatchConfig::default(),
            tile: 1024,
            tile_step: 256,
            scale: 4,
            threads: 0,
            seed: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad value for {key}: {value}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        other => Err(Error::InvalidConfig(format!(
            "bad boolean for {key}: {other}"
        ))),
    }
}

impl RunConfig {
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        match key {
            "model.image_size" => self.model.image_size = parse(key, value)?,
            "model.patch" => self.model.patch = parse(key, value)?,
            "model.channels" => self.model.channels = parse(key, value)?,
            "model.dim" => self.model.dim = parse(key, value)?,
            "model.heads" => self.model.heads = parse(key, value)?,
            "model.layers" => self.model.layers = parse(key, value)?,
            "model.ref_layers" => self.model.ref_layers = parse(key, value)?,
            "model.kscale" => self.model.kscale = parse(key, value)?,
            "model.sample_steps" => self.model.sample_steps = parse(key, value)?,
            "train.stage" => self.train.stage = parse(key, value)?,
            "train.steps" => self.train.steps = parse(key, value)?,
            "train.batch" => self.train.batch = parse(key, value)?,
            "train.learning_rate" => self.train.learning_rate = parse(key, value)?,
            "train.warmup_steps" => self.train.warmup_steps = parse(key, value)?,
            "train.grad_clip" => self.train.grad_clip = parse(key, value)?,
            "train.seed" => self.train.seed = parse(key, value)?,
            "train.max_train_samples" => {
                self.train.max_train_samples = Some(parse(key, value)?)
            }
            "train.augment.flip" => self.train.augment.flip = parse_bool(key, value)?,
            "train.augment.crop" => self.train.augment.crop = parse_bool(key, value)?,
            "train.augment.color_jitter" => {
                self.train.augment.color_jitter = parse_bool(key, value)?
            }
            "train.augment.homography" => {
                self.train.augment.homography = parse_bool(key, value)?
            }
            "degrade.blur_sigma_min" => self.degrade.blur_sigma_range.0 = parse(key, value)?,
            "degrade.blur_sigma_max" => self.degrade.blur_sigma_range.1 = parse(key, value)?,
            "degrade.down_scale" => self.degrade.down_scale = parse(key, value)?,
            "degrade.noise_sigma_min" => self.degrade.noise_sigma_range.0 = parse(key, value)?,
            "degrade.noise_sigma_max" => self.degrade.noise_sigma_range.1 = parse(key, value)?,
            "degrade.quality_min" => self.degrade.compress_quality_range.0 = parse(key, value)?,
            "degrade.quality_max" => self.degrade.compress_quality_range.1 = parse(key, value)?,
            "degrade.second_order" => self.degrade.second_order = parse_bool(key, value)?,
            "degrade.seed" => self.degrade.seed = parse(key, value)?,
            "match.working_size" => self.matching.working_size = parse(key, value)?,
            "match.patch" => self.matching.patch = parse(key, value)?,
            "match.search_radius" => self.matching.search_radius = parse(key, value)?,
            "match.certainty_floor" => self.matching.certainty_floor = parse(key, value)?,
            "match.stride" => self.matching.stride = parse(key, value)?,
            "tile" => self.tile = parse(key, value)?,
            "tile_step" => self.tile_step = parse(key, value)?,
            "scale" => self.scale = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            other => {
                return Err(Error::InvalidConfig(format!("unknown key {other}")));
            }
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("{}:{}: expected key=value", path.display(), ln + 1))
            })?;
            self.apply_kv(key, value)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.degrade.validate()?;
        self.matching.validate()?;
        if self.tile < 1 || self.tile_step < 1 || self.tile_step > self.tile {
            return Err(Error::InvalidConfig("bad tile geometry".into()));
        }
        if self.scale < 1 {
            return Err(Error::InvalidConfig("scale must be >= 1".into()));
        }
        Ok(())
    }

    /// Full echo of the resolved configuration.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.model.to_kv());
        out.push_str(&self.train.to_kv());
        out.push_str(&self.degrade.to_kv());
        out.push_str(&format!(
            "match.working_size={}\nmatch.patch={}\nmatch.search_radius={}\n\
             match.certainty_floor={}\nmatch.stride={}\n",
            self.matching.working_size,
            self.matching.patch,
            self.matching.search_radius,
            self.matching.certainty_floor,
            self.matching.stride
        ));
        out.push_str(&format!(
            "tile={}\ntile_step={}\nscale={}\nthreads={}\nseed={}\n",
            self.tile, self.tile_step, self.scale, self.threads, self.seed
        ));
        out
    }
}
