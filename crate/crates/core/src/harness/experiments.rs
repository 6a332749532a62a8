//! Experiment pipelines: evaluation, strength sweep, pool ablation,
//! schedule comparison, residual export, embed/extract and diffusion
//! analysis.

use std::path::{Path, PathBuf};

use image::{Luma, RgbImage};
use log::warn;
use tch::{Kind, Tensor};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::report::{fixed, pct, Table};
use crate::imaging::{
    quantize_u8, rgb_image_to_tensor, tensor_to_rgb_image, to_f32_vec, Dataset, MetricsReport,
};
use crate::network::{apply_strength, StrengthFactor, Watermarker};
use crate::noise::{NoisePool, NoiseSpec};
use crate::training::{evaluate_noise, run_schedule, Schedule, TrainConfig};

/// Hashes attached to every report.
#[derive(Debug, Clone, Default)]
pub struct Provenance {
    pub config_hash: Option<String>,
    pub checkpoint_hash: Option<String>,
}

impl Provenance {
    fn stamp(&self, table: &mut Table) {
        if let Some(h) = &self.config_hash {
            table.provenance("config_sha256", h.clone());
        }
        if let Some(h) = &self.checkpoint_hash {
            table.provenance("checkpoint_sha256", h.clone());
        }
    }
}

/// One row per noise layer: BER after the layer, and PSNR/SSIM of the
/// encoded images.
pub fn evaluate_table(
    model: &Watermarker,
    images: &Tensor,
    noises: &[NoiseSpec],
    strength: StrengthFactor,
    batch: usize,
    seed: u64,
    provenance: &Provenance,
) -> Result<(Table, Vec<MetricsReport>)> {
    let mut table = Table::new(format!("evaluation at S={:?}", strength.value()), &["noise", "ber", "psnr", "ssim"]);
    let mut reports = Vec::new();
    for noise in noises {
        let r = evaluate_noise(model, images, noise, strength, batch, seed)?;
        table.push(vec![noise.to_string(), pct(r.ber), fixed(r.psnr, 2), fixed(r.ssim, 4)]);
        reports.push(r);
    }
    provenance.stamp(&mut table);
    Ok((table, reports))
}

/// Strength giving the target PSNR on `images`. PSNR falls by
/// `20 log10 S`; a few corrections absorb the effect of clamping.
pub fn strength_for_psnr(
    model: &Watermarker,
    images: &Tensor,
    target: f64,
    batch: usize,
    seed: u64,
) -> Result<StrengthFactor> {
    let mut s = 1.0;
    for _ in 0..4 {
        let p = evaluate_noise(model, images, &NoiseSpec::Identity, StrengthFactor::new(s)?, batch, seed)?.psnr;
        if !p.is_finite() {
            break;
        }
        s *= 10f64.powf((p - target) / 20.0);
    }
    StrengthFactor::new(s)
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub table: Table,
    pub strengths: Vec<f64>,
    pub qualities: Vec<u32>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    /// `ber[i][j]` at strength `i` and quality `j`.
    pub ber: Vec<Vec<f64>>,
}

/// Slack when checking that BER does not rise with the strength factor.
pub const STRENGTH_BER_SLACK: f64 = 0.005;
/// Slack when checking that BER does not rise with the JPEG quality.
pub const QUALITY_BER_SLACK: f64 = 0.01;

impl SweepResult {
    pub fn psnr_strictly_decreasing(&self) -> bool {
        self.psnr.windows(2).all(|w| w[1] < w[0])
    }

    pub fn ssim_strictly_decreasing(&self) -> bool {
        self.ssim.windows(2).all(|w| w[1] < w[0])
    }

    /// For each quality, BER along increasing strength never rises by more
    /// than [`STRENGTH_BER_SLACK`].
    pub fn ber_nonincreasing_in_strength(&self) -> bool {
        (0..self.qualities.len())
            .all(|j| self.ber.windows(2).all(|w| w[1][j] <= w[0][j] + STRENGTH_BER_SLACK))
    }

    /// For each strength, BER along increasing quality never rises by more
    /// than [`QUALITY_BER_SLACK`].
    pub fn ber_nonincreasing_in_quality(&self) -> bool {
        self.ber.iter().all(|row| row.windows(2).all(|w| w[1] <= w[0] + QUALITY_BER_SLACK))
    }
}

/// BER under real JPEG for every (strength, quality) pair, plus PSNR/SSIM
/// per strength. Grids are sorted ascending.
pub fn sweep_strength(
    model: &Watermarker,
    images: &Tensor,
    strength_grid: &[f64],
    quality_grid: &[u32],
    batch: usize,
    seed: u64,
    provenance: &Provenance,
) -> Result<SweepResult> {
    if strength_grid.is_empty() || quality_grid.is_empty() {
        return Err(Error::Parameter("strength and quality grids must be non-empty".into()));
    }
    let mut strengths = strength_grid.to_vec();
    strengths.sort_by(f64::total_cmp);
    let mut qualities = quality_grid.to_vec();
    qualities.sort_unstable();
    let mut columns = vec!["S".to_string(), "psnr".into(), "ssim".into()];
    columns.extend(qualities.iter().map(|q| format!("ber_q{q}")));
    let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
    let mut table = Table::new("strength sweep (BER under real JPEG)", &cols);
    let (mut psnr, mut ssim, mut ber) = (Vec::new(), Vec::new(), Vec::new());
    for &s in &strengths {
        let sf = StrengthFactor::new(s)?;
        let base = evaluate_noise(model, images, &NoiseSpec::Identity, sf, batch, seed)?;
        let row: Vec<f64> = qualities
            .iter()
            .map(|&q| Ok(evaluate_noise(model, images, &NoiseSpec::RealJpeg { quality: q }, sf, batch, seed)?.ber))
            .collect::<Result<_>>()?;
        let mut cells = vec![format!("{s:?}"), fixed(base.psnr, 2), fixed(base.ssim, 4)];
        cells.extend(row.iter().map(|b| pct(*b)));
        table.push(cells);
        psnr.push(base.psnr);
        ssim.push(base.ssim);
        ber.push(row);
    }
    let result = SweepResult { table, strengths, qualities, psnr, ssim, ber };
    let mut table = result.table.clone();
    table.note(format!("psnr strictly decreasing in S: {}", result.psnr_strictly_decreasing()));
    table.note(format!("ssim strictly decreasing in S: {}", result.ssim_strictly_decreasing()));
    table.note(format!(
        "ber non-increasing in S (slack {}): {}",
        pct(STRENGTH_BER_SLACK),
        result.ber_nonincreasing_in_strength()
    ));
    table.note(format!(
        "ber non-increasing in Q (slack {}): {}",
        pct(QUALITY_BER_SLACK),
        result.ber_nonincreasing_in_quality()
    ));
    provenance.stamp(&mut table);
    Ok(SweepResult { table, ..result })
}

/// Trains one model under `cfg` and returns it with the checkpoint bytes.
pub fn train_model(cfg: &ExperimentConfig, train: &Dataset, validation: Option<&Dataset>, out: Option<&Path>) -> Result<(Watermarker, Vec<u8>)> {
    let outcome = run_schedule(&cfg.train, cfg.model, train, validation, out)?;
    let bytes = checkpoint::to_bytes(&outcome.trainer)?;
    Ok((outcome.trainer.model, bytes))
}

/// The five noise combinations of the pool ablation, mask-only first and
/// the full pool last.
pub fn ablation_pools() -> Vec<NoisePool> {
    let mask = NoiseSpec::JpegMask;
    let real = NoiseSpec::RealJpeg { quality: 50 };
    let id = NoiseSpec::Identity;
    [vec![mask], vec![mask, id], vec![real, id], vec![mask, real], vec![mask, real, id]]
        .into_iter()
        .map(|e| NoisePool::uniform(e).expect("valid pool"))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolScores {
    pub strength: f64,
    pub psnr: f64,
    pub ber_real: f64,
    pub ber_mask: f64,
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub table: Table,
    pub rows: Vec<(NoisePool, std::result::Result<PoolScores, String>)>,
}

/// Strength used for comparisons: matched PSNR when configured, otherwise
/// the configured evaluation strength.
fn comparison_strength(cfg: &ExperimentConfig, model: &Watermarker, test: &Tensor) -> Result<StrengthFactor> {
    match cfg.target_psnr {
        Some(t) => strength_for_psnr(model, test, t, cfg.eval_batch, cfg.eval_seed),
        None => StrengthFactor::new(cfg.strength),
    }
}

fn score_pool(cfg: &ExperimentConfig, train: &Dataset, test: &Tensor, out: Option<&Path>) -> Result<PoolScores> {
    let (model, _) = train_model(cfg, train, None, out)?;
    let s = comparison_strength(cfg, &model, test)?;
    let eval = |n: NoiseSpec| evaluate_noise(&model, test, &n, s, cfg.eval_batch, cfg.eval_seed);
    let real = eval(NoiseSpec::RealJpeg { quality: 50 })?;
    let mask = eval(NoiseSpec::JpegMask)?;
    Ok(PoolScores { strength: s.value(), psnr: real.psnr, ber_real: real.ber, ber_mask: mask.ber })
}

/// Trains one MBRS model per pool with identical seeds and budgets and
/// reports BER under real JPEG (Q=50) and under JPEG-Mask. A failing run
/// yields an error row; the other rows are still produced.
pub fn ablate_pools(
    base: &ExperimentConfig,
    pools: &[NoisePool],
    train: &Dataset,
    test: &Tensor,
    out: Option<&Path>,
) -> Result<AblationResult> {
    let mut table = Table::new(
        "noise pool ablation",
        &["pool", "S", "psnr", "ber_jpeg50", "ber_jpegmask", "status"],
    );
    let mut rows = Vec::new();
    for (i, pool) in pools.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.train = TrainConfig { schedule: Schedule::Mbrs, pool: pool.clone(), stage_split: None, ..base.train.clone() };
        let dir = out.map(|d| d.join(format!("pool_{i}")));
        let result = cfg.validate().and_then(|_| score_pool(&cfg, train, test, dir.as_deref()));
        match &result {
            Ok(s) => table.push(vec![
                pool.to_string(),
                fixed(s.strength, 4),
                fixed(s.psnr, 2),
                pct(s.ber_real),
                pct(s.ber_mask),
                "ok".into(),
            ]),
            Err(e) => {
                warn!("pool {pool} failed: {e}");
                table.push(vec![pool.to_string(), "-".into(), "-".into(), "-".into(), "-".into(), format!("error: {e}")]);
            }
        }
        rows.push((pool.clone(), result.map_err(|e| e.to_string())));
    }
    Provenance { config_hash: Some(base.hash()), checkpoint_hash: None }.stamp(&mut table);
    Ok(AblationResult { table, rows })
}

/// Training configuration of `schedule` derived from a base MBRS setup:
/// OEDS trains on JPEG-Mask alone, the TSR family uses real JPEG (Q=50) in
/// stage two.
pub fn schedule_config(base: &ExperimentConfig, schedule: Schedule) -> ExperimentConfig {
    let mut cfg = base.clone();
    let real = NoiseSpec::RealJpeg { quality: 50 };
    let (pool, split) = match schedule {
        Schedule::Mbrs => (base.train.pool.clone(), None),
        Schedule::Oeds => (NoisePool::single(NoiseSpec::JpegMask).expect("valid"), None),
        Schedule::Tsr | Schedule::TsrS => (
            NoisePool::single(real).expect("valid"),
            Some(base.train.stage_split.unwrap_or(base.train.epochs / 2)),
        ),
    };
    cfg.train = TrainConfig { schedule, pool, stage_split: split, ..base.train.clone() };
    cfg
}

#[derive(Debug, Clone)]
pub struct ComparisonResult {
    pub table: Table,
    pub qualities: Vec<u32>,
    /// Per schedule: strength used and BER per quality.
    pub rows: Vec<(Schedule, f64, Vec<f64>)>,
    /// TSR family: whether everything but the decoder was unchanged across
    /// stage two (checked from per-epoch checkpoints when written).
    pub frozen_checks: Vec<(Schedule, bool)>,
}

fn stage_two_frozen(dir: &Path, split: usize, epochs: usize) -> Result<bool> {
    let load = |e: usize| checkpoint::load(&dir.join(format!("epoch_{e:03}.ckpt")));
    let (a, b) = (load(split)?, load(epochs)?);
    let keep = |t: &crate::training::Trainer| -> Vec<(String, Tensor)> {
        t.model.named_variables().into_iter().filter(|(n, _)| !n.starts_with("dec.")).collect()
    };
    Ok(keep(&a).iter().zip(keep(&b)).all(|((n1, x), (n2, y))| *n1 == n2 && x.equal(&y)))
}

/// Trains all four schedules with the same data, seed and epoch budget and
/// reports BER under real JPEG at every quality in the grid.
pub fn compare_schedules(
    base: &ExperimentConfig,
    train: &Dataset,
    validation: &Dataset,
    test: &Tensor,
    out: Option<&Path>,
) -> Result<ComparisonResult> {
    let mut qualities = base.quality_grid.clone();
    qualities.sort_unstable_by(|a, b| b.cmp(a));
    let mut columns = vec!["schedule".to_string(), "S".into()];
    columns.extend(qualities.iter().map(|q| format!("ber_q{q}")));
    let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
    let mut table = Table::new("schedule comparison (BER under real JPEG)", &cols);
    let mut rows = Vec::new();
    let mut frozen_checks = Vec::new();
    for schedule in [Schedule::Oeds, Schedule::Tsr, Schedule::TsrS, Schedule::Mbrs] {
        let cfg = schedule_config(base, schedule);
        let dir = out.map(|d| d.join(schedule.to_string()));
        let (model, _) = train_model(&cfg, train, Some(validation), dir.as_deref())?;
        if let (Some(dir), Some(split)) = (&dir, cfg.train.stage_split) {
            frozen_checks.push((schedule, stage_two_frozen(dir, split, cfg.train.epochs)?));
        }
        let s = comparison_strength(&cfg, &model, test)?;
        let bers: Vec<f64> = qualities
            .iter()
            .map(|&q| Ok(evaluate_noise(&model, test, &NoiseSpec::RealJpeg { quality: q }, s, cfg.eval_batch, cfg.eval_seed)?.ber))
            .collect::<Result<_>>()?;
        let mut cells = vec![schedule.to_string(), fixed(s.value(), 4)];
        cells.extend(bers.iter().map(|b| pct(*b)));
        table.push(cells);
        rows.push((schedule, s.value(), bers));
    }
    for (s, ok) in &frozen_checks {
        table.note(format!("{s} stage-two non-decoder variables unchanged: {ok}"));
    }
    Provenance { config_hash: Some(base.hash()), checkpoint_hash: None }.stamp(&mut table);
    Ok(ComparisonResult { table, qualities, rows, frozen_checks })
}

/// `(R - min R) / (max R - min R) * 255` over all samples, as bytes. A
/// constant residual maps to zeros and reports `true`.
pub fn normalize_residual(r: &[f32]) -> (Vec<u8>, bool) {
    let lo = r.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = r.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if r.is_empty() || hi <= lo {
        return (vec![0; r.len()], true);
    }
    let scale = 255.0 / (hi - lo) as f64;
    (r.iter().map(|&v| (((v - lo) as f64) * scale).round().clamp(0.0, 255.0) as u8).collect(), false)
}

#[derive(Debug, Clone, Default)]
pub struct ResidualExport {
    pub files: Vec<PathBuf>,
    /// Indices of images whose residual was identically zero.
    pub degenerate: Vec<usize>,
}

/// Writes cover, encoded image, residual `|I_en - I_co|` (in 8-bit units)
/// and its min-max normalization for each image.
pub fn export_residuals(
    model: &Watermarker,
    images: &Tensor,
    strength: StrengthFactor,
    seed: u64,
    dir: &Path,
) -> Result<ResidualExport> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = images.size()[0];
    let l = model.geometry().message_len;
    let mut rng = crate::training::stream(seed, crate::training::STREAM_MESSAGE);
    let mut export = ResidualExport::default();
    for i in 0..n {
        let co = images.narrow(0, i, 1).to_kind(model.kind());
        let bits = crate::network::MessageBatch::random(1, l, &mut rng).bits;
        let en = tch::no_grad(|| model.encode(&co, &bits, false))?;
        let en = apply_strength(&co, &en, strength)?.clamp(-1.0, 1.0);
        let co8 = tensor_to_rgb_image(&co.get(0))?;
        let en8 = tensor_to_rgb_image(&en.get(0))?;
        // residual of the exported 8-bit images, averaged over channels
        let (w, h) = co8.dimensions();
        let r: Vec<f32> = co8
            .pixels()
            .zip(en8.pixels())
            .map(|(a, b)| (0..3).map(|c| (a[c] as f32 - b[c] as f32).abs()).sum::<f32>() / 3.0)
            .collect();
        let (rm, degenerate) = normalize_residual(&r);
        if degenerate {
            warn!("image {i}: residual is constant, normalized residual set to zero");
            export.degenerate.push(i as usize);
        }
        let r_img = image::ImageBuffer::from_fn(w, h, |x, y| Luma([r[(y * w + x) as usize].round().min(255.0) as u8]));
        let rm_img = image::ImageBuffer::from_fn(w, h, |x, y| Luma([rm[(y * w + x) as usize]]));
        for (name, save) in [
            (format!("cover_{i:03}.png"), Box::new(|p: &Path| co8.save(p)) as Box<dyn Fn(&Path) -> image::ImageResult<()>>),
            (format!("encoded_{i:03}.png"), Box::new(|p: &Path| en8.save(p))),
            (format!("residual_{i:03}.png"), Box::new(|p: &Path| r_img.save(p))),
            (format!("residual_norm_{i:03}.png"), Box::new(|p: &Path| rm_img.save(p))),
        ] {
            let path = dir.join(name);
            save(&path)?;
            export.files.push(path);
        }
    }
    Ok(export)
}

/// Parses `ceil(L/4)` hex digits into `L` bits, most significant first.
/// Padding bits past `L` must be zero.
pub fn hex_to_bits(hex: &str, len: usize) -> Result<Vec<bool>> {
    let digits = len.div_ceil(4);
    let hex = hex.trim().trim_start_matches("0x");
    if hex.len() != digits {
        return Err(Error::Parameter(format!(
            "message needs {digits} hex digits for {len} bits, got {}",
            hex.len()
        )));
    }
    let mut bits = Vec::with_capacity(digits * 4);
    for c in hex.chars() {
        let v = c.to_digit(16).ok_or_else(|| Error::Parameter(format!("invalid hex digit {c:?}")))?;
        bits.extend((0..4).rev().map(|k| (v >> k) & 1 == 1));
    }
    if bits[len..].iter().any(|b| *b) {
        return Err(Error::Parameter("padding bits beyond the message length must be zero".into()));
    }
    bits.truncate(len);
    Ok(bits)
}

pub fn bits_to_hex(bits: &[bool]) -> String {
    bits.chunks(4)
        .map(|c| {
            let v = c.iter().enumerate().fold(0u32, |acc, (k, b)| acc | ((*b as u32) << (3 - k)));
            std::char::from_digit(v, 16).expect("nibble")
        })
        .collect()
}

/// Embeds `bits` into `cover` (resized to the model geometry) and returns
/// the 8-bit encoded image.
pub fn embed(model: &Watermarker, cover: &RgbImage, bits: &[bool], strength: StrengthFactor) -> Result<RgbImage> {
    let g = *model.geometry();
    if bits.len() as i64 != g.message_len {
        return Err(Error::Parameter(format!("{} bits for a {}-bit model", bits.len(), g.message_len)));
    }
    let fitted = crate::imaging::fit_image(cover, g.height as u32, g.width as u32);
    let co = rgb_image_to_tensor(&fitted).unsqueeze(0).to_kind(model.kind());
    let m: Vec<f32> = bits.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect();
    let m = Tensor::from_slice(&m).view([1, g.message_len]);
    let en = tch::no_grad(|| model.encode(&co, &m, false))?;
    let en = apply_strength(&co, &en, strength)?.clamp(-1.0, 1.0);
    tensor_to_rgb_image(&en.get(0))
}

/// Decodes bits from an image that already has the model's size.
pub fn extract(model: &Watermarker, image: &RgbImage) -> Result<Vec<bool>> {
    let g = *model.geometry();
    let (w, h) = image.dimensions();
    if h as i64 != g.height || w as i64 != g.width {
        return Err(Error::Geometry(format!("image is {w}x{h}, model expects {}x{}", g.width, g.height)));
    }
    let t = rgb_image_to_tensor(image).unsqueeze(0).to_kind(model.kind());
    let logits = tch::no_grad(|| model.decode(&t, false))?;
    Ok(to_f32_vec(&logits).iter().map(|v| *v > 0.5).collect())
}

/// Writes `image` as JPEG at `quality` with the crate's codec.
pub fn save_jpeg(image: &RgbImage, quality: u32, path: &Path) -> Result<()> {
    let (w, h) = image.dimensions();
    let bytes = crate::jpeg::encode_jpeg(image.as_raw(), w as u16, h as u16, quality)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct DiffusionResult {
    pub table: Table,
    pub support_plain: f64,
    pub support_diffused: f64,
    pub crop_ber_plain: f64,
    pub crop_ber_diffused: f64,
}

/// Mean one-bit residual support over `images` for `bit`.
pub fn mean_support(model: &Watermarker, images: &Tensor, bit: usize, threshold: f64) -> Result<f64> {
    let (fraction, _) = model.one_bit_residual_support(&images.to_kind(model.kind()), bit, threshold)?;
    Ok(fraction)
}

/// Compares a model without and with the diffusion layers: one-bit
/// residual support on `support_images` and BER under crop on
/// `crop_images`.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_analysis(
    plain: &Watermarker,
    diffused: &Watermarker,
    support_images: &Tensor,
    crop_images: &Tensor,
    threshold: f64,
    crop_p: f64,
    batch: usize,
    seed: u64,
    provenance: &Provenance,
) -> Result<DiffusionResult> {
    let support = |m: &Watermarker| -> Result<f64> {
        let l = m.geometry().message_len as usize;
        let bits = [0, l / 2, l - 1];
        let total = bits.iter().map(|&b| mean_support(m, support_images, b, threshold)).sum::<Result<f64>>()?;
        Ok(total / bits.len() as f64)
    };
    let crop = NoiseSpec::Crop { p: crop_p };
    let one = StrengthFactor::new(1.0)?;
    let support_plain = support(plain)?;
    let support_diffused = support(diffused)?;
    let crop_ber_plain = evaluate_noise(plain, crop_images, &crop, one, batch, seed)?.ber;
    let crop_ber_diffused = evaluate_noise(diffused, crop_images, &crop, one, batch, seed)?.ber;
    let mut table = Table::new("diffusion analysis", &["model", "bit_support", &format!("ber_crop{crop_p:?}")]);
    table.push(vec!["plain".into(), fixed(support_plain, 4), pct(crop_ber_plain)]);
    table.push(vec!["diffusion".into(), fixed(support_diffused, 4), pct(crop_ber_diffused)]);
    table.note(format!(
        "support threshold {threshold:?} (normalized units), bits first/middle/last, {} images; crop BER on {} images",
        support_images.size()[0],
        crop_images.size()[0]
    ));
    provenance.stamp(&mut table);
    Ok(DiffusionResult { table, support_plain, support_diffused, crop_ber_plain, crop_ber_diffused })
}

/// Ensures images and model share a geometry.
pub fn check_dataset(model: &Watermarker, data: &Dataset) -> Result<()> {
    model.geometry().check_images(data.images())
}

/// BER between two bit strings.
pub fn bit_errors(a: &[bool], b: &[bool]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count() + a.len().abs_diff(b.len())
}

/// Encoded image quantized to 8 bits and back, as the decoder would see a
/// lossless file.
pub fn through_png(img: &Tensor) -> Result<Tensor> {
    let q: Vec<f32> = to_f32_vec(img).iter().map(|v| crate::imaging::normalize_u8(quantize_u8(*v))).collect();
    Ok(Tensor::from_slice(&q).view(img.size().as_slice()).to_kind(Kind::Float))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::corpus::synth_dataset;
    use crate::imaging::GeometrySpec;
    use crate::network::ModelConfig;

    fn tiny() -> Watermarker {
        let mut cfg = ModelConfig::new(GeometrySpec::new(16, 16, 16).unwrap());
        cfg.channels = 8;
        cfg.message_channels = 8;
        cfg.se_reduction = 4;
        cfg.se_blocks_enc = 1;
        cfg.se_blocks_dec = 1;
        cfg.disc_layers = 1;
        Watermarker::new(cfg, 1).unwrap()
    }

    #[test]
    fn hex_arithmetic() {
        let bits = hex_to_bits("deadbeefdeadbeef", 64).unwrap();
        assert_eq!(bits.len(), 64);
        assert_eq!(bits_to_hex(&bits), "deadbeefdeadbeef");
        assert!(hex_to_bits("deadbeef", 64).is_err());
        assert!(hex_to_bits("zz", 8).is_err());
        assert_eq!(hex_to_bits("a", 3).unwrap(), vec![true, false, true]);
        assert!(hex_to_bits("f", 3).is_err());
        assert_eq!(hex_to_bits("e", 3).unwrap(), vec![true, true, true]);
        assert_eq!(bits_to_hex(&[true, true, true]), "e");
    }

    #[test]
    fn residual_normalization() {
        let (v, degenerate) = normalize_residual(&[1.0, 3.0, 2.0]);
        assert_eq!(v, vec![0, 255, 128]);
        assert!(!degenerate);
        let (z, degenerate) = normalize_residual(&[0.5; 4]);
        assert_eq!(z, vec![0; 4]);
        assert!(degenerate);
    }

    #[test]
    fn export_with_zero_strength_is_degenerate() {
        let model = tiny();
        let data = synth_dataset(2, 16, 16, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ex = export_residuals(&model, data.images(), StrengthFactor::new(0.0).unwrap(), 0, dir.path()).unwrap();
        assert_eq!(ex.degenerate, vec![0, 1]);
        assert_eq!(ex.files.len(), 8);
        let ex = export_residuals(&model, data.images(), StrengthFactor::new(1.0).unwrap(), 0, dir.path()).unwrap();
        assert!(ex.degenerate.is_empty());
        let rm = image::open(dir.path().join("residual_norm_000.png")).unwrap().to_luma8();
        let (lo, hi) = rm.pixels().fold((255u8, 0u8), |(lo, hi), p| (lo.min(p[0]), hi.max(p[0])));
        assert_eq!((lo, hi), (0, 255));
    }

    #[test]
    fn extract_is_total_and_checks_size() {
        let model = tiny();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let noise = crate::harness::corpus::synth_image(16, 16, &mut rng);
        assert_eq!(extract(&model, &noise).unwrap().len(), 16);
        let big = RgbImage::new(32, 16);
        assert!(matches!(extract(&model, &big), Err(Error::Geometry(_))));
        let cover = crate::harness::corpus::synth_image(40, 30, &mut rng);
        assert!(embed(&model, &cover, &[true; 3], StrengthFactor::new(1.0).unwrap()).is_err());
        let out = embed(&model, &cover, &[true; 16], StrengthFactor::new(1.0).unwrap()).unwrap();
        assert_eq!(out.dimensions(), (16, 16));
    }

    #[test]
    fn sweep_rejects_empty_grids() {
        let model = tiny();
        let data = synth_dataset(2, 16, 16, 0).unwrap();
        let p = Provenance::default();
        assert!(sweep_strength(&model, data.images(), &[], &[50], 2, 0, &p).is_err());
        assert!(sweep_strength(&model, data.images(), &[1.0], &[], 2, 0, &p).is_err());
    }

    #[test]
    fn zero_strength_row_is_unwatermarked() {
        let model = tiny();
        let data = synth_dataset(4, 16, 16, 0).unwrap();
        let r = sweep_strength(&model, data.images(), &[0.0, 1.0], &[50], 4, 0, &Provenance::default()).unwrap();
        assert_eq!(r.psnr[0], f64::INFINITY);
        assert!(r.ber[0][0] > 0.2 && r.ber[0][0] < 0.8);
    }

    use rand::SeedableRng;

    proptest::proptest! {
        #[test]
        fn hex_round_trip(bits in proptest::collection::vec(proptest::bool::ANY, 1..80)) {
            let hex = bits_to_hex(&bits);
            proptest::prop_assert_eq!(hex.len(), bits.len().div_ceil(4));
            proptest::prop_assert_eq!(hex_to_bits(&hex, bits.len()).unwrap(), bits);
        }
    }
}
