//! Flat `key = value` experiment configuration with `model.`, `train.`,
//! `eval.` and `data.` sections. Unknown keys are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::checkpoint::sha256_hex;
use crate::error::{Error, Result};
use crate::harness::corpus::synth_dataset;
use crate::imaging::{Dataset, GeometrySpec};
use crate::network::ModelConfig;
use crate::noise::{NoisePool, NoiseSpec};
use crate::training::{LossWeights, Schedule, TrainConfig};

/// Where images come from: a directory tree or the procedural generator.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic { seed: u64 },
    Dir(PathBuf),
}

impl DataSource {
    fn render(&self) -> String {
        match self {
            DataSource::Synthetic { seed } => format!("synthetic:{seed}"),
            DataSource::Dir(p) => p.display().to_string(),
        }
    }

    fn parse(s: &str) -> Result<Self> {
        if s == "synthetic" {
            return Ok(DataSource::Synthetic { seed: 0 });
        }
        if let Some(seed) = s.strip_prefix("synthetic:") {
            let seed = seed
                .parse()
                .map_err(|_| Error::Config(format!("bad synthetic seed in {s:?}")))?;
            return Ok(DataSource::Synthetic { seed });
        }
        Ok(DataSource::Dir(PathBuf::from(s)))
    }

    /// Loads `count` images at the given size; directory sources are
    /// shuffled with `seed`.
    pub fn load(&self, count: usize, height: i64, width: i64, seed: u64) -> Result<Dataset> {
        match self {
            DataSource::Synthetic { seed: s } => synth_dataset(count, height, width, *s),
            DataSource::Dir(dir) => Dataset::load(dir, height, width, count, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval_noises: Vec<NoiseSpec>,
    pub strength: f64,
    pub strength_grid: Vec<f64>,
    pub quality_grid: Vec<u32>,
    /// When set, schedule and pool comparisons rescale each model's residual
    /// to this PSNR before measuring BER.
    pub target_psnr: Option<f64>,
    pub eval_batch: usize,
    pub eval_seed: u64,
    pub train_data: DataSource,
    pub test_data: DataSource,
    pub train_count: usize,
    pub test_count: usize,
    /// Images split off the training set for OEDS model selection.
    pub validation_count: usize,
}

impl Default for ExperimentConfig {
    /// The desk-scale profile: 1,000 training images at 128x128, L = 64,
    /// 30 epochs, 200 held-out images.
    fn default() -> Self {
        let geometry = GeometrySpec::new(128, 128, 64).expect("valid default geometry");
        ExperimentConfig {
            model: ModelConfig::new(geometry),
            train: TrainConfig { epochs: 30, ..TrainConfig::default() },
            eval_noises: vec![
                NoiseSpec::Identity,
                NoiseSpec::Cropout { p: 0.3 },
                NoiseSpec::Dropout { p: 0.3 },
                NoiseSpec::Crop { p: 0.035 },
                NoiseSpec::Gaussian { sigma: 2.0 },
                NoiseSpec::RealJpeg { quality: 50 },
            ],
            strength: 1.0,
            strength_grid: vec![0.6, 1.0, 1.4, 2.0],
            quality_grid: vec![90, 70, 50, 30, 10],
            target_psnr: None,
            eval_batch: 16,
            eval_seed: 0,
            train_data: DataSource::Synthetic { seed: 1 },
            test_data: DataSource::Synthetic { seed: 2 },
            train_count: 1000,
            test_count: 200,
            validation_count: 100,
        }
    }
}

const KEYS: &[&str] = &[
    "model.height",
    "model.width",
    "model.message_len",
    "model.depth",
    "model.channels",
    "model.message_channels",
    "model.se_blocks_enc",
    "model.se_blocks_dec",
    "model.se_reduction",
    "model.diffusion",
    "model.disc_layers",
    "train.schedule",
    "train.pool",
    "train.lr",
    "train.batch",
    "train.epochs",
    "train.seed",
    "train.stage_split",
    "train.strength",
    "train.lambda_e",
    "train.lambda_d",
    "train.lambda_a",
    "eval.noises",
    "eval.strength",
    "eval.strength_grid",
    "eval.quality_grid",
    "eval.target_psnr",
    "eval.batch",
    "eval.seed",
    "data.train",
    "data.test",
    "data.train_count",
    "data.test_count",
    "data.validation_count",
];

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {raw:?}")))
}

fn list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| value(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Splits `key = value` lines, dropping blanks and `#` comments.
fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if !KEYS.contains(&k.as_str()) {
            return Err(Error::Config(format!("line {}: unknown key {k:?}", i + 1)));
        }
        if out.insert(k.clone(), v).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
        }
    }
    Ok(out)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(parse_pairs(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides on top of this configuration.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut pairs = parse_pairs(&self.to_text())?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let k = k.trim();
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
            pairs.insert(k.to_string(), v.trim().to_string());
        }
        Self::from_pairs(pairs)
    }

    fn from_pairs(mut pairs: BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut take = |k: &str| pairs.remove(k);

        let height = take("model.height").map(|v| value("model.height", &v)).transpose()?.unwrap_or(128);
        let width = take("model.width").map(|v| value("model.width", &v)).transpose()?.unwrap_or(height);
        let len = take("model.message_len").map(|v| value("model.message_len", &v)).transpose()?.unwrap_or(64);
        let depth: Option<u32> = take("model.depth").map(|v| value("model.depth", &v)).transpose()?;
        let geometry = match depth {
            Some(d) => GeometrySpec::with_depth(height, width, len, d),
            None => GeometrySpec::new(height, width, len),
        }
        .map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.geometry = geometry;
        let m = &mut cfg.model;
        macro_rules! set {
            ($key:literal, $field:expr) => {
                if let Some(v) = take($key) {
                    $field = value($key, &v)?;
                }
            };
        }
        set!("model.channels", m.channels);
        set!("model.message_channels", m.message_channels);
        set!("model.se_blocks_enc", m.se_blocks_enc);
        set!("model.se_blocks_dec", m.se_blocks_dec);
        set!("model.se_reduction", m.se_reduction);
        set!("model.diffusion", m.diffusion);
        set!("model.disc_layers", m.disc_layers);
        m.validate().map_err(|e| Error::Config(e.to_string()))?;

        let t = &mut cfg.train;
        set!("train.schedule", t.schedule);
        set!("train.lr", t.lr);
        set!("train.batch", t.batch);
        set!("train.epochs", t.epochs);
        set!("train.seed", t.seed);
        set!("train.strength", t.strength_train);
        let mut weights = LossWeights::default();
        set!("train.lambda_e", weights.lambda_e);
        set!("train.lambda_d", weights.lambda_d);
        set!("train.lambda_a", weights.lambda_a);
        t.weights = weights;
        let pool = take("train.pool");
        t.pool = match (&pool, t.schedule) {
            (Some(p), _) => p.parse::<NoisePool>()?,
            (None, Schedule::Mbrs) => NoisePool::mbrs_default(),
            (None, Schedule::Oeds) => NoisePool::single(NoiseSpec::JpegMask)?,
            (None, Schedule::Tsr | Schedule::TsrS) => NoisePool::single(NoiseSpec::RealJpeg { quality: 50 })?,
        };
        t.stage_split = take("train.stage_split").map(|v| value("train.stage_split", &v)).transpose()?;
        if matches!(t.schedule, Schedule::Tsr | Schedule::TsrS) && t.stage_split.is_none() {
            return Err(Error::Config(format!("schedule {} requires train.stage_split", t.schedule)));
        }
        t.validate()?;

        if let Some(v) = take("eval.noises") {
            cfg.eval_noises = list("eval.noises", &v)?;
        }
        set!("eval.strength", cfg.strength);
        if let Some(v) = take("eval.strength_grid") {
            cfg.strength_grid = list("eval.strength_grid", &v)?;
        }
        if let Some(v) = take("eval.quality_grid") {
            cfg.quality_grid = list("eval.quality_grid", &v)?;
        }
        cfg.target_psnr = take("eval.target_psnr").map(|v| value("eval.target_psnr", &v)).transpose()?;
        set!("eval.batch", cfg.eval_batch);
        set!("eval.seed", cfg.eval_seed);
        if let Some(v) = take("data.train") {
            cfg.train_data = DataSource::parse(&v)?;
        }
        if let Some(v) = take("data.test") {
            cfg.test_data = DataSource::parse(&v)?;
        }
        set!("data.train_count", cfg.train_count);
        set!("data.test_count", cfg.test_count);
        set!("data.validation_count", cfg.validation_count);
        debug_assert!(pairs.is_empty(), "unhandled keys {pairs:?}");
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate()?;
        for n in &self.eval_noises {
            n.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if !(self.strength >= 0.0 && self.strength.is_finite()) {
            return Err(Error::Config(format!("eval.strength {} must be >= 0", self.strength)));
        }
        if self.strength_grid.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::Config("eval.strength_grid values must be >= 0".into()));
        }
        for q in &self.quality_grid {
            crate::jpeg::check_quality(*q).map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.eval_batch == 0 || self.train_count == 0 || self.test_count == 0 {
            return Err(Error::Config("eval.batch and data counts must be >= 1".into()));
        }
        if self.train.schedule == Schedule::Oeds && self.validation_count >= self.train_count {
            return Err(Error::Config("data.validation_count must be below data.train_count".into()));
        }
        Ok(())
    }

    /// Canonical text; parsing it reproduces this configuration.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let g = &m.geometry;
        let t = &self.train;
        let mut lines = vec![
            format!("model.height = {}", g.height),
            format!("model.width = {}", g.width),
            format!("model.message_len = {}", g.message_len),
            format!("model.channels = {}", m.channels),
            format!("model.message_channels = {}", m.message_channels),
            format!("model.se_blocks_enc = {}", m.se_blocks_enc),
            format!("model.se_blocks_dec = {}", m.se_blocks_dec),
            format!("model.se_reduction = {}", m.se_reduction),
            format!("model.diffusion = {}", m.diffusion),
            format!("model.disc_layers = {}", m.disc_layers),
            format!("train.schedule = {}", t.schedule),
            format!("train.pool = {}", t.pool),
            format!("train.lr = {:?}", t.lr),
            format!("train.batch = {}", t.batch),
            format!("train.epochs = {}", t.epochs),
            format!("train.seed = {}", t.seed),
            format!("train.strength = {:?}", t.strength_train),
            format!("train.lambda_e = {:?}", t.weights.lambda_e),
            format!("train.lambda_d = {:?}", t.weights.lambda_d),
            format!("train.lambda_a = {:?}", t.weights.lambda_a),
            format!("eval.noises = {}", join(&self.eval_noises)),
            format!("eval.strength = {:?}", self.strength),
            format!(
                "eval.strength_grid = {}",
                self.strength_grid.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>().join(",")
            ),
            format!("eval.quality_grid = {}", join(&self.quality_grid)),
            format!("eval.batch = {}", self.eval_batch),
            format!("eval.seed = {}", self.eval_seed),
            format!("data.train = {}", self.train_data.render()),
            format!("data.test = {}", self.test_data.render()),
            format!("data.train_count = {}", self.train_count),
            format!("data.test_count = {}", self.test_count),
            format!("data.validation_count = {}", self.validation_count),
        ];
        // depth is implied by H, W and L unless L differs from the grid size
        if g.grid_len() != g.message_len {
            lines.push(format!("model.depth = {}", g.depth));
        }
        if let Some(s) = t.stage_split {
            lines.push(format!("train.stage_split = {s}"));
        }
        if let Some(p) = self.target_psnr {
            lines.push(format!("eval.target_psnr = {p:?}"));
        }
        lines.sort();
        lines.join("\n") + "\n"
    }

    /// SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }

    /// Overrides both the training and the evaluation seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.eval_seed = seed;
        self
    }

    pub fn load_train(&self) -> Result<Dataset> {
        let g = &self.model.geometry;
        self.train_data.load(self.train_count, g.height, g.width, self.train.seed)
    }

    pub fn load_test(&self) -> Result<Dataset> {
        let g = &self.model.geometry;
        self.test_data.load(self.test_count, g.height, g.width, self.eval_seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_the_reference_setup() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg.train.batch, 16);
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.train.schedule, Schedule::Mbrs);
        assert_eq!(cfg.train.pool, NoisePool::mbrs_default());
        assert_eq!(cfg.train.weights, LossWeights { lambda_e: 1.0, lambda_d: 10.0, lambda_a: 1e-4 });
        assert_eq!(cfg.model.geometry.depth, 4);
        assert_eq!((cfg.train_count, cfg.test_count, cfg.train.epochs), (1000, 200, 30));
    }

    #[test]
    fn canonical_text_round_trips() {
        let text = "model.height = 32\nmodel.message_len = 16\nmodel.channels = 16\nmodel.message_channels = 16\n\
                    model.se_reduction = 4\ntrain.schedule = tsr\ntrain.stage_split = 3\ntrain.epochs = 6\n\
                    eval.target_psnr = 33.0 # matched quality\ndata.train = synthetic:5\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.train.stage_split, Some(3));
        assert_eq!(cfg.train.pool.to_string(), "jpeg:50");
        let again = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
        assert_ne!(cfg.clone().with_seed(9).hash(), cfg.hash());
    }

    #[test]
    fn validation_errors() {
        let err = |t: &str| matches!(ExperimentConfig::parse(t), Err(Error::Config(_)));
        assert!(err("train.schedule = tsr\n"));
        assert!(err("train.schedule = tsr_s\n"));
        assert!(err("model.chanels = 8\n"));
        assert!(err("train.batch = 0\n"));
        assert!(err("train.lr = fast\n"));
        assert!(err("train.batch = 4\ntrain.batch = 5\n"));
        assert!(err("just a line\n"));
        assert!(err("model.message_len = 63\n"));
        assert!(err("train.schedule = oeds\ntrain.pool = jpegmask,identity\n"));
        assert!(err("eval.quality_grid = 0\n"));
        assert!(!err("train.schedule = oeds\n"));
    }

    #[test]
    fn overrides() {
        let cfg = ExperimentConfig::default();
        let o = cfg.with_overrides(&["train.epochs=2".into(), "model.diffusion=true".into()]).unwrap();
        assert_eq!(o.train.epochs, 2);
        assert!(o.model.diffusion);
        assert!(cfg.with_overrides(&["nope=1".into()]).is_err());
    }
}
