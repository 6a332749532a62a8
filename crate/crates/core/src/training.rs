//! Losses, the adversarial update, Adam, and the four training schedules.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::Tensor;

use crate::error::{Error, Result};
use crate::imaging::{ber, psnr, ssim, Dataset, MetricsReport};
use crate::network::{apply_strength, MessageBatch, ModelConfig, ParamGroup, StrengthFactor, Watermarker};
use crate::noise::{apply_noise, mbrs_sample, NoisePool, NoiseSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_e: f64,
    pub lambda_d: f64,
    pub lambda_a: f64,
}

impl LossWeights {
    pub fn new(lambda_e: f64, lambda_d: f64, lambda_a: f64) -> Result<Self> {
        let w = LossWeights { lambda_e, lambda_d, lambda_a };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_e", self.lambda_e), ("lambda_d", self.lambda_d), ("lambda_a", self.lambda_a)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_e: 1.0, lambda_d: 10.0, lambda_a: 1e-4 }
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.size() != b.size() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.size(), b.size())));
    }
    Ok(())
}

/// Mean squared error between cover and encoded images.
pub fn loss_encoder_image(co: &Tensor, en: &Tensor) -> Result<Tensor> {
    check_same(co, en, "image loss")?;
    Ok(en.mse_loss(co, tch::Reduction::Mean))
}

/// Mean squared error between `{0,1}` targets and raw decoder outputs.
pub fn loss_decoder(bits: &Tensor, logits: &Tensor) -> Result<Tensor> {
    check_same(bits, logits, "decoder loss")?;
    Ok(logits.mse_loss(&bits.to_kind(logits.kind()), tch::Reduction::Mean))
}

/// Adversary and encoder adversarial terms from discriminator logits, with
/// label 1 for encoded images: `L_A = BCE(A(en), 1) + BCE(A(co), 0)` and
/// `L_E2 = BCE(A(en), 0)`, averaged over the batch.
pub fn loss_adversarial(logits_en: &Tensor, logits_co: &Tensor) -> Result<(Tensor, Tensor)> {
    check_same(logits_en, logits_co, "adversarial loss")?;
    let k = logits_en.kind();
    let l_a = (-logits_en).softplus().mean(k) + logits_co.softplus().mean(k);
    let l_e2 = logits_en.softplus().mean(k);
    Ok((l_a, l_e2))
}

/// The same terms from probabilities in `[0, 1]`, with `ln 0` clamped to
/// -100 as in common BCE implementations.
pub fn loss_adversarial_prob(a_en: f64, a_co: f64) -> (f64, f64) {
    let ln = |p: f64| p.ln().max(-100.0);
    (-ln(a_en) - ln(1.0 - a_co), -ln(1.0 - a_en))
}

pub fn total_loss(weights: &LossWeights, l_e1: &Tensor, l_d: &Tensor, l_e2: &Tensor, step: u64) -> Result<Tensor> {
    for (name, t) in [("L_E1", l_e1), ("L_D", l_d), ("L_E2", l_e2)] {
        let v = t.double_value(&[]);
        if !v.is_finite() {
            return Err(Error::NumericAbort { step, detail: format!("{name} = {v}") });
        }
    }
    Ok(l_e1 * weights.lambda_e + l_d * weights.lambda_d + l_e2 * weights.lambda_a)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    Mbrs,
    Oeds,
    Tsr,
    TsrS,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::Mbrs => "mbrs",
            Schedule::Oeds => "oeds",
            Schedule::Tsr => "tsr",
            Schedule::TsrS => "tsr_s",
        })
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "mbrs" => Ok(Schedule::Mbrs),
            "oeds" => Ok(Schedule::Oeds),
            "tsr" => Ok(Schedule::Tsr),
            "tsr_s" => Ok(Schedule::TsrS),
            other => Err(Error::Config(format!("unknown schedule {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: Schedule,
    /// MBRS: sampled per step. OEDS: the single simulated layer. TSR family:
    /// the single real-JPEG layer of stage two.
    pub pool: NoisePool,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// First epoch of stage two (TSR family); `None` means half the epochs.
    pub stage_split: Option<usize>,
    pub strength_train: f64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: Schedule::Mbrs,
            pool: NoisePool::mbrs_default(),
            lr: 1e-3,
            batch: 16,
            epochs: 100,
            seed: 0,
            stage_split: None,
            strength_train: 1.0,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be > 0", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        StrengthFactor::new(self.strength_train).map_err(|e| Error::Config(e.to_string()))?;
        self.weights.validate()?;
        match self.schedule {
            Schedule::Mbrs => {}
            Schedule::Oeds => {
                if self.pool.len() != 1 || !self.pool.entries()[0].is_differentiable() {
                    return Err(Error::Config(format!(
                        "oeds needs a single differentiable noise layer, got pool {}",
                        self.pool
                    )));
                }
            }
            Schedule::Tsr | Schedule::TsrS => {
                if self.pool.len() != 1 || !matches!(self.pool.entries()[0], NoiseSpec::RealJpeg { .. }) {
                    return Err(Error::Config(format!(
                        "{} needs a single real jpeg layer for stage two, got pool {}",
                        self.schedule, self.pool
                    )));
                }
                let split = self.effective_stage_split();
                if split == 0 || split >= self.epochs {
                    return Err(Error::Config(format!(
                        "stage_split {split} must lie in 1..{}",
                        self.epochs
                    )));
                }
            }
        }
        if self.stage_split.is_some() && !matches!(self.schedule, Schedule::Tsr | Schedule::TsrS) {
            return Err(Error::Config(format!("stage_split is meaningless for {}", self.schedule)));
        }
        Ok(())
    }

    pub fn effective_stage_split(&self) -> usize {
        self.stage_split.unwrap_or(self.epochs / 2)
    }

    /// Whether `epoch` (0-based) belongs to the decoder-only stage.
    pub fn in_stage_two(&self, epoch: usize) -> bool {
        matches!(self.schedule, Schedule::Tsr | Schedule::TsrS) && epoch >= self.effective_stage_split()
    }
}

/// Adam over named parameters with per-parameter step counts.
#[derive(Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: BTreeMap<String, AdamSlot>,
}

#[derive(Debug)]
pub struct AdamSlot {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, state: BTreeMap::new() }
    }

    /// Updates every parameter that has a gradient.
    pub fn step(&mut self, params: &[(String, Tensor)]) {
        tch::no_grad(|| {
            for (name, p) in params {
                let g = p.grad();
                if !g.defined() {
                    continue;
                }
                let slot = self.state.entry(name.clone()).or_insert_with(|| AdamSlot {
                    m: p.zeros_like(),
                    v: p.zeros_like(),
                    step: 0,
                });
                slot.step += 1;
                let t = slot.step as i32;
                let _ = slot.m.g_mul_scalar_(self.beta1).g_add_(&(&g * (1.0 - self.beta1)));
                let _ = slot.v.g_mul_scalar_(self.beta2).g_add_(&(&g * &g * (1.0 - self.beta2)));
                let bc1 = 1.0 - self.beta1.powi(t);
                let bc2 = 1.0 - self.beta2.powi(t);
                let denom = (&slot.v / bc2).sqrt() + self.eps;
                let update = (&slot.m / bc1) / denom * self.lr;
                let _ = p.shallow_clone().g_sub_(&update);
            }
        });
    }

    pub fn slots(&self) -> &BTreeMap<String, AdamSlot> {
        &self.state
    }

    pub fn insert_slot(&mut self, name: String, slot: AdamSlot) {
        self.state.insert(name, slot);
    }
}

fn zero_grads(params: &[(String, Tensor)]) {
    for (_, p) in params {
        let mut p = p.shallow_clone();
        p.zero_grad();
    }
}

/// Per-step losses and diagnostics; one line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    pub noise: String,
    pub l_e1: f64,
    pub l_d: f64,
    pub l_a: f64,
    pub l_e2: f64,
    pub total: f64,
    pub ber: f64,
}

impl StepMetrics {
    pub const HEADER: &'static str = "step\tepoch\tnoise\tl_e1\tl_d\tl_a\tl_e2\ttotal\tber";

    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.8e}\t{:.8e}\t{:.8e}\t{:.8e}\t{:.8e}\t{:.6}",
            self.step, self.epoch, self.noise, self.l_e1, self.l_d, self.l_a, self.l_e2, self.total, self.ber
        )
    }
}

/// Gradients recorded by an instrumented step.
#[derive(Debug, Default)]
pub struct StepTrace {
    /// `d(lambda_D L_D)/d theta_E`, zero where the graph is disconnected.
    pub decoder_grad_encoder: Vec<(String, Tensor)>,
}

/// Rng streams: data order, messages and noise are drawn independently.
pub const STREAM_DATA: u64 = 1;
pub const STREAM_MESSAGE: u64 = 2;
pub const STREAM_NOISE: u64 = 3;

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Model, optimizers, counters and rng streams of one training run.
#[derive(Debug)]
pub struct Trainer {
    pub model: Watermarker,
    pub cfg: TrainConfig,
    pub(crate) opt_main: Adam,
    pub(crate) opt_adv: Adam,
    pub(crate) step: u64,
    pub(crate) epoch: usize,
    pub(crate) data_rng: ChaCha8Rng,
    pub(crate) msg_rng: ChaCha8Rng,
    pub(crate) noise_rng: ChaCha8Rng,
    pub(crate) noise_counts: BTreeMap<String, u64>,
    /// Record the decoder-loss gradient on the encoder at the next steps.
    pub instrument: bool,
    pub last_trace: Option<StepTrace>,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Watermarker::new(model_cfg, cfg.seed)?;
        Ok(Self::with_model(model, cfg))
    }

    pub fn with_model(model: Watermarker, cfg: TrainConfig) -> Self {
        Trainer {
            model,
            opt_main: Adam::new(cfg.lr),
            opt_adv: Adam::new(cfg.lr),
            step: 0,
            epoch: 0,
            data_rng: stream(cfg.seed, STREAM_DATA),
            msg_rng: stream(cfg.seed, STREAM_MESSAGE),
            noise_rng: stream(cfg.seed, STREAM_NOISE),
            noise_counts: BTreeMap::new(),
            instrument: false,
            last_trace: None,
            cfg,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Steps taken under each noise layer.
    pub fn noise_counts(&self) -> &BTreeMap<String, u64> {
        &self.noise_counts
    }

    pub fn optimizers(&self) -> (&Adam, &Adam) {
        (&self.opt_main, &self.opt_adv)
    }

    /// Noise layer for the next step under the configured schedule.
    pub fn next_noise(&mut self) -> NoiseSpec {
        let stage_two = self.cfg.in_stage_two(self.epoch);
        match self.cfg.schedule {
            Schedule::Mbrs => *mbrs_sample(&self.cfg.pool, &mut self.noise_rng),
            Schedule::Oeds => self.cfg.pool.entries()[0],
            Schedule::Tsr | Schedule::TsrS if stage_two => self.cfg.pool.entries()[0],
            Schedule::Tsr => NoiseSpec::Identity,
            Schedule::TsrS => NoiseSpec::JpegMask,
        }
    }

    fn main_params(&self, stage_two: bool) -> Vec<(String, Tensor)> {
        let groups: &[ParamGroup] = if stage_two {
            &[ParamGroup::Decoder]
        } else {
            &[ParamGroup::Message, ParamGroup::Encoder, ParamGroup::Decoder]
        };
        groups.iter().flat_map(|g| self.model.group_parameters(*g)).collect()
    }

    /// One mini-batch under the schedule's noise choice.
    pub fn train_step(&mut self, co: &Tensor) -> Result<StepMetrics> {
        let noise = self.next_noise();
        self.train_step_with(co, noise)
    }

    /// One mini-batch under a given noise layer: adversary update on the
    /// detached encoder output, then the message processor, encoder and
    /// decoder update (decoder only in the second TSR stage).
    pub fn train_step_with(&mut self, co: &Tensor, noise: NoiseSpec) -> Result<StepMetrics> {
        let b = co.size().first().copied().unwrap_or(0);
        if b == 0 {
            return Err(Error::Dataset("empty mini-batch".into()));
        }
        let stage_two = self.cfg.in_stage_two(self.epoch);
        let step = self.step;
        let weights = self.cfg.weights;
        let geometry = *self.model.geometry();
        let co = co.to_kind(self.model.kind());
        let message = MessageBatch::random(b, geometry.message_len, &mut self.msg_rng);
        let bits = message.bits.to_kind(self.model.kind());
        let strength = StrengthFactor::new(self.cfg.strength_train)?;

        let en = if stage_two {
            tch::no_grad(|| self.model.encode(&co, &bits, false))?
        } else {
            self.model.encode(&co, &bits, true)?
        };
        let en_s = apply_strength(&co, &en, strength)?;
        let no = apply_noise(&noise, &en_s, Some(&co), &mut self.noise_rng)?;

        let adv_params = self.model.group_parameters(ParamGroup::Adversary);
        let use_adversary = weights.lambda_a > 0.0 && !stage_two;
        let l_a_value = if use_adversary {
            zero_grads(&adv_params);
            let z_en = self.model.discriminate_logits(&en.detach(), true)?;
            let z_co = self.model.discriminate_logits(&co, true)?;
            let (l_a, _) = loss_adversarial(&z_en, &z_co)?;
            let v = l_a.double_value(&[]);
            if !v.is_finite() {
                return Err(Error::NumericAbort { step, detail: format!("L_A = {v}") });
            }
            l_a.backward();
            self.opt_adv.step(&adv_params);
            v
        } else {
            0.0
        };

        let main = self.main_params(stage_two);
        zero_grads(&main);
        let logits = self.model.decode(&no, true)?;
        let l_e1 = loss_encoder_image(&co, &en)?;
        let l_d = loss_decoder(&bits, &logits)?;
        let l_e2 = if use_adversary {
            let z = self.model.discriminate_logits(&en, true)?;
            z.softplus().mean(z.kind())
        } else {
            Tensor::zeros([], (l_d.kind(), l_d.device()))
        };
        let total = if stage_two {
            total_loss(&LossWeights { lambda_e: 0.0, lambda_a: 0.0, ..weights }, &l_e1, &l_d, &l_e2, step)?
        } else {
            total_loss(&weights, &l_e1, &l_d, &l_e2, step)?
        };

        if self.instrument {
            let enc = self.model.group_parameters(ParamGroup::Encoder);
            let inputs: Vec<&Tensor> = enc.iter().map(|(_, t)| t).collect();
            let grads = Tensor::run_backward(&[&l_d * weights.lambda_d], &inputs, true, false);
            let decoder_grad_encoder = enc
                .iter()
                .zip(grads)
                .map(|((n, p), g)| (n.clone(), if g.defined() { g } else { p.zeros_like() }))
                .collect();
            self.last_trace = Some(StepTrace { decoder_grad_encoder });
        }

        total.backward();
        self.opt_main.step(&main);
        zero_grads(&adv_params);

        let metrics = StepMetrics {
            step,
            epoch: self.epoch,
            noise: noise.to_string(),
            l_e1: l_e1.double_value(&[]),
            l_d: l_d.double_value(&[]),
            l_a: l_a_value,
            l_e2: l_e2.double_value(&[]),
            total: total.double_value(&[]),
            ber: ber(&bits, &logits.detach())?,
        };
        *self.noise_counts.entry(noise.to_string()).or_insert(0) += 1;
        self.step += 1;
        Ok(metrics)
    }

    /// One pass over `data` in seeded order; advances the epoch counter.
    pub fn train_epoch(&mut self, data: &Dataset, log: &mut dyn FnMut(&StepMetrics) -> Result<()>) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Dataset("empty training set".into()));
        }
        let batches = data.epoch_batches(self.cfg.batch, &mut self.data_rng);
        for idx in batches {
            let m = self.train_step(&data.batch(&idx))?;
            log(&m)?;
        }
        self.epoch += 1;
        Ok(())
    }
}

/// BER of decoding after `noise`, with PSNR and SSIM of the strength-scaled
/// encoded images against the covers. Encoded images are clamped to the
/// valid range as they would be on export. Runs in evaluation mode.
pub fn evaluate_noise(
    model: &Watermarker,
    images: &Tensor,
    noise: &NoiseSpec,
    strength: StrengthFactor,
    batch: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let n = images.size()[0];
    if n == 0 {
        return Err(Error::Dataset("no evaluation images".into()));
    }
    let mut msg_rng = stream(seed, STREAM_MESSAGE);
    let mut noise_rng = stream(seed, STREAM_NOISE);
    let l = model.geometry().message_len;
    let (mut errors, mut bits_total) = (0.0, 0.0);
    let (mut cos, mut ens) = (Vec::new(), Vec::new());
    tch::no_grad(|| -> Result<()> {
        let mut start = 0;
        while start < n {
            let len = (batch as i64).min(n - start);
            let co = images.narrow(0, start, len).to_kind(model.kind());
            let m = MessageBatch::random(len, l, &mut msg_rng);
            let bits = m.bits.to_kind(model.kind());
            let en = model.encode(&co, &bits, false)?;
            let en_s = apply_strength(&co, &en, strength)?.clamp(-1.0, 1.0);
            let no = apply_noise(noise, &en_s, Some(&co), &mut noise_rng)?;
            let logits = model.decode(&no, false)?;
            errors += ber(&bits, &logits)? * (len * l) as f64;
            bits_total += (len * l) as f64;
            cos.push(co);
            ens.push(en_s);
            start += len;
        }
        Ok(())
    })?;
    let co = Tensor::cat(&cos, 0);
    let en = Tensor::cat(&ens, 0);
    Ok(MetricsReport { ber: errors / bits_total, psnr: psnr(&co, &en)?, ssim: ssim(&co, &en)? })
}

/// Result of a full schedule run.
#[derive(Debug)]
pub struct ScheduleOutcome {
    pub trainer: Trainer,
    pub log: Vec<StepMetrics>,
    /// Per-epoch checkpoint files, when an output directory was given.
    pub checkpoints: Vec<PathBuf>,
    /// OEDS: validation BER per epoch and the epoch that was kept.
    pub validation_ber: Vec<f64>,
    pub selected_epoch: Option<usize>,
}

/// Trains under `cfg.schedule`. OEDS needs `validation` and keeps the epoch
/// with the lowest real-JPEG BER on it; all other schedules return the final
/// state. With `out`, a checkpoint is written after every epoch and the
/// metrics log goes to `metrics.tsv`.
pub fn run_schedule(
    cfg: &TrainConfig,
    model_cfg: ModelConfig,
    train: &Dataset,
    validation: Option<&Dataset>,
    out: Option<&Path>,
) -> Result<ScheduleOutcome> {
    cfg.validate()?;
    let validation = match (cfg.schedule, validation) {
        (Schedule::Oeds, None) => {
            return Err(Error::Config("oeds needs a validation set for model selection".into()))
        }
        (_, v) => v,
    };
    let mut trainer = Trainer::new(model_cfg, cfg.clone())?;
    let mut log_file = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.tsv");
            let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{}", StepMetrics::HEADER).map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut validation_ber = Vec::new();
    let mut best: Option<(f64, usize, Vec<u8>)> = None;
    let select_quality = match cfg.schedule {
        Schedule::Oeds => Some(50),
        _ => None,
    };

    for epoch in 0..cfg.epochs {
        trainer.train_epoch(train, &mut |m| {
            if let Some((f, path)) = log_file.as_mut() {
                writeln!(f, "{}", m.to_line()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            log.push(m.clone());
            Ok(())
        })?;
        let last = log.last().cloned();
        info!(
            "{} epoch {}/{} step {} loss {:.5} ber {:.4}",
            cfg.schedule,
            epoch + 1,
            cfg.epochs,
            trainer.step,
            last.as_ref().map_or(f64::NAN, |m| m.total),
            last.as_ref().map_or(f64::NAN, |m| m.ber)
        );
        if let Some(dir) = out {
            let path = dir.join(format!("epoch_{:03}.ckpt", epoch + 1));
            crate::checkpoint::save(&trainer, &path)?;
            checkpoints.push(path);
        }
        if let (Some(q), Some(val)) = (select_quality, validation) {
            let report = evaluate_noise(
                &trainer.model,
                val.images(),
                &NoiseSpec::RealJpeg { quality: q },
                StrengthFactor::new(1.0)?,
                cfg.batch,
                cfg.seed,
            )?;
            validation_ber.push(report.ber);
            if best.as_ref().is_none_or(|(b, _, _)| report.ber < *b) {
                best = Some((report.ber, epoch, crate::checkpoint::to_bytes(&trainer)?));
            }
        }
    }

    let mut selected_epoch = None;
    if let Some((_, epoch, bytes)) = best {
        trainer = crate::checkpoint::from_bytes(&bytes)?;
        selected_epoch = Some(epoch);
    }
    if let Some(dir) = out {
        let path = dir.join("final.ckpt");
        crate::checkpoint::save(&trainer, &path)?;
        checkpoints.push(path);
    }
    Ok(ScheduleOutcome { trainer, log, checkpoints, validation_ber, selected_epoch })
}
