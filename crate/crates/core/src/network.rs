//! Message processor, encoder, decoder and adversary built from
//! squeeze-and-excitation residual blocks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::nn::{self, Module, ModuleT};
use tch::{Device, Kind, Tensor};

use crate::error::{Error, Result};
use crate::imaging::GeometrySpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Feature channels of encoder, decoder and adversary.
    pub channels: i64,
    /// Channels of the expanded message feature map.
    pub message_channels: i64,
    pub se_blocks_enc: usize,
    pub se_blocks_dec: usize,
    pub se_reduction: i64,
    /// Fully connected message diffusion in front of the processor and
    /// behind the decoder.
    pub diffusion: bool,
    pub disc_layers: usize,
    pub geometry: GeometrySpec,
}

impl ModelConfig {
    pub fn new(geometry: GeometrySpec) -> Self {
        ModelConfig {
            channels: 64,
            message_channels: 64,
            se_blocks_enc: 4,
            se_blocks_dec: 4,
            se_reduction: 16,
            diffusion: false,
            disc_layers: 3,
            geometry,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 1 || self.message_channels < 1 {
            return Err(Error::Config("channel counts must be at least 1".into()));
        }
        if self.se_reduction < 1 || self.channels % self.se_reduction != 0 {
            return Err(Error::Config(format!(
                "se_reduction {} must divide channels {}",
                self.se_reduction, self.channels
            )));
        }
        if self.message_channels % self.se_reduction != 0 {
            return Err(Error::Config(format!(
                "se_reduction {} must divide message channels {}",
                self.se_reduction, self.message_channels
            )));
        }
        if self.disc_layers == 0 {
            return Err(Error::Config("adversary needs at least one layer".into()));
        }
        let g = self.geometry;
        if !g.is_consistent() {
            return Err(Error::Geometry(format!("inconsistent geometry {g:?}")));
        }
        if !self.diffusion && g.grid_len() != g.message_len {
            return Err(Error::Geometry(format!(
                "without diffusion L={} must equal the grid size {}",
                g.message_len,
                g.grid_len()
            )));
        }
        Ok(())
    }

    /// SE blocks after the transposed-convolution stages of the processor.
    pub fn processor_se_blocks(&self) -> usize {
        self.se_blocks_enc.saturating_sub(self.geometry.depth as usize).max(1)
    }

    /// Stride-1 SE blocks after the decoder's downsampling stages.
    pub fn decoder_keep_blocks(&self) -> usize {
        self.se_blocks_dec.saturating_sub(self.geometry.depth as usize)
    }
}

/// Watermark strength `S` in `I_co + S (I_en - I_co)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrengthFactor(f64);

impl StrengthFactor {
    pub fn new(s: f64) -> Result<Self> {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(Error::Parameter(format!("strength factor {s} must be >= 0")));
        }
        Ok(StrengthFactor(s))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn apply_strength(co: &Tensor, en: &Tensor, strength: StrengthFactor) -> Result<Tensor> {
    if co.size() != en.size() {
        return Err(Error::Shape(format!("cover {:?} vs encoded {:?}", co.size(), en.size())));
    }
    Ok(co + (en - co) * strength.value())
}

/// Binary payloads and, after decoding, the raw decoder outputs.
#[derive(Debug)]
pub struct MessageBatch {
    pub bits: Tensor,
    pub logits: Option<Tensor>,
}

impl MessageBatch {
    pub fn new(bits: Tensor) -> Result<Self> {
        let size = bits.size();
        if size.len() != 2 {
            return Err(Error::Shape(format!("messages must be [B, L], got {size:?}")));
        }
        let binary = bits.eq(0.0).logical_or(&bits.eq(1.0)).all();
        if !bool::try_from(binary).unwrap_or(false) {
            return Err(Error::Contract("message bits must be 0 or 1".into()));
        }
        Ok(MessageBatch { bits, logits: None })
    }

    /// Independent fair coin per bit.
    pub fn random(batch: i64, len: i64, rng: &mut impl Rng) -> Self {
        let v: Vec<f32> = (0..batch * len).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect();
        MessageBatch { bits: Tensor::from_slice(&v).view([batch, len]), logits: None }
    }

    pub fn len(&self) -> i64 {
        self.bits.size()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self) -> i64 {
        self.bits.size()[0]
    }
}

fn conv_cfg(stride: i64, padding: i64) -> nn::ConvConfig {
    nn::ConvConfig { stride, padding, ws_init: nn::Init::Const(0.0), bs_init: nn::Init::Const(0.0), ..Default::default() }
}

fn linear_cfg() -> nn::LinearConfig {
    nn::LinearConfig { ws_init: nn::Init::Const(0.0), bs_init: Some(nn::Init::Const(0.0)), bias: true }
}

#[derive(Debug)]
struct ConvBnRelu {
    conv: nn::Conv2D,
    bn: nn::BatchNorm,
}

impl ConvBnRelu {
    fn new(p: nn::Path, cin: i64, cout: i64, kernel: i64, stride: i64) -> Self {
        ConvBnRelu {
            conv: nn::conv2d(&p / "conv", cin, cout, kernel, conv_cfg(stride, kernel / 2)),
            bn: nn::batch_norm2d(&p / "bn", cout, Default::default()),
        }
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Tensor {
        self.bn.forward_t(&self.conv.forward(x), train).relu()
    }
}

/// Residual block: two 3x3 conv-BN-ReLU layers whose output is rescaled per
/// channel by a squeeze-and-excitation gate, then added to the (projected)
/// input.
#[derive(Debug)]
pub struct SeBlock {
    body1: ConvBnRelu,
    body2: ConvBnRelu,
    squeeze: nn::Linear,
    excite: nn::Linear,
    shortcut: Option<(nn::Conv2D, nn::BatchNorm)>,
}

impl SeBlock {
    pub fn new(p: nn::Path, cin: i64, cout: i64, stride: i64, reduction: i64) -> Self {
        let hidden = (cout / reduction).max(1);
        let shortcut = (cin != cout || stride != 1).then(|| {
            (
                nn::conv2d(&p / "short" / "conv", cin, cout, 1, conv_cfg(stride, 0)),
                nn::batch_norm2d(&p / "short" / "bn", cout, Default::default()),
            )
        });
        SeBlock {
            body1: ConvBnRelu::new(&p / "body1", cin, cout, 3, stride),
            body2: ConvBnRelu::new(&p / "body2", cout, cout, 3, 1),
            squeeze: nn::linear(&p / "squeeze", cout, hidden, linear_cfg()),
            excite: nn::linear(&p / "excite", hidden, cout, linear_cfg()),
            shortcut,
        }
    }

    fn body(&self, x: &Tensor, train: bool) -> Tensor {
        self.body2.forward_t(&self.body1.forward_t(x, train), train)
    }

    fn gate(&self, features: &Tensor) -> Tensor {
        let pooled = features.mean_dim([2, 3].as_slice(), false, features.kind());
        self.excite.forward(&self.squeeze.forward(&pooled).relu()).sigmoid()
    }

    /// Per-channel attention weights `[B, C]` for input `x`.
    pub fn gates(&self, x: &Tensor, train: bool) -> Tensor {
        self.gate(&self.body(x, train))
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Tensor {
        let y = self.body(x, train);
        let g = self.gate(&y);
        let size = g.size();
        let scaled = &y * g.view([size[0], size[1], 1, 1]);
        let residual = match &self.shortcut {
            Some((conv, bn)) => bn.forward_t(&conv.forward(x), train),
            None => x.shallow_clone(),
        };
        scaled + residual
    }
}

fn run_blocks(blocks: &[SeBlock], x: Tensor, train: bool) -> Tensor {
    blocks.iter().fold(x, |h, b| b.forward_t(&h, train))
}

#[derive(Debug)]
struct MessageProcessor {
    diffusion: Option<nn::Linear>,
    pre: ConvBnRelu,
    expand: Vec<(nn::ConvTranspose2D, nn::BatchNorm)>,
    blocks: Vec<SeBlock>,
}

impl MessageProcessor {
    fn new(p: nn::Path, cfg: &ModelConfig) -> Self {
        let g = cfg.geometry;
        let cm = cfg.message_channels;
        let diffusion = cfg
            .diffusion
            .then(|| nn::linear(&p / "diffusion", g.message_len, g.grid_len(), linear_cfg()));
        let expand = (0..g.depth)
            .map(|i| {
                let q = &p / format!("expand{i}");
                let tcfg = nn::ConvTransposeConfig {
                    stride: 2,
                    padding: 1,
                    output_padding: 1,
                    ws_init: nn::Init::Const(0.0),
                    bs_init: nn::Init::Const(0.0),
                    ..Default::default()
                };
                (nn::conv_transpose2d(&q / "conv", cm, cm, 3, tcfg), nn::batch_norm2d(&q / "bn", cm, Default::default()))
            })
            .collect();
        let blocks = (0..cfg.processor_se_blocks())
            .map(|i| SeBlock::new(&p / format!("se{i}"), cm, cm, 1, cfg.se_reduction))
            .collect();
        MessageProcessor { diffusion, pre: ConvBnRelu::new(&p / "pre", 1, cm, 3, 1), expand, blocks }
    }

    fn forward_t(&self, bits: &Tensor, g: &GeometrySpec, train: bool) -> Tensor {
        let b = bits.size()[0];
        let grid = match &self.diffusion {
            Some(fc) => fc.forward(bits),
            None => bits.shallow_clone(),
        };
        let mut h = self.pre.forward_t(&grid.reshape([b, 1, g.grid_h, g.grid_w]), train);
        for (conv, bn) in &self.expand {
            h = bn.forward_t(&conv.forward(&h), train).relu();
        }
        run_blocks(&self.blocks, h, train)
    }
}

#[derive(Debug)]
struct EncoderNet {
    pre: ConvBnRelu,
    blocks: Vec<SeBlock>,
    fuse: ConvBnRelu,
    out: nn::Conv2D,
}

impl EncoderNet {
    fn new(p: nn::Path, cfg: &ModelConfig) -> Self {
        let c = cfg.channels;
        EncoderNet {
            pre: ConvBnRelu::new(&p / "pre", 3, c, 3, 1),
            blocks: (0..cfg.se_blocks_enc)
                .map(|i| SeBlock::new(&p / format!("se{i}"), c, c, 1, cfg.se_reduction))
                .collect(),
            fuse: ConvBnRelu::new(&p / "fuse", c + cfg.message_channels, c, 3, 1),
            out: nn::conv2d(&p / "out", c + 3, 3, 1, conv_cfg(1, 0)),
        }
    }

    fn forward_t(&self, co: &Tensor, message_features: &Tensor, train: bool) -> Tensor {
        let feats = run_blocks(&self.blocks, self.pre.forward_t(co, train), train);
        let fused = self.fuse.forward_t(&Tensor::cat(&[feats, message_features.shallow_clone()], 1), train);
        self.out.forward(&Tensor::cat(&[fused, co.shallow_clone()], 1))
    }
}

#[derive(Debug)]
struct DecoderNet {
    pre: ConvBnRelu,
    down: Vec<SeBlock>,
    keep: Vec<SeBlock>,
    out: nn::Conv2D,
    diffusion: Option<nn::Linear>,
}

impl DecoderNet {
    fn new(p: nn::Path, cfg: &ModelConfig) -> Self {
        let c = cfg.channels;
        let g = cfg.geometry;
        DecoderNet {
            pre: ConvBnRelu::new(&p / "pre", 3, c, 3, 1),
            down: (0..g.depth)
                .map(|i| SeBlock::new(&p / format!("down{i}"), c, c, 2, cfg.se_reduction))
                .collect(),
            keep: (0..cfg.decoder_keep_blocks())
                .map(|i| SeBlock::new(&p / format!("se{i}"), c, c, 1, cfg.se_reduction))
                .collect(),
            out: nn::conv2d(&p / "out", c, 1, 3, conv_cfg(1, 1)),
            diffusion: cfg
                .diffusion
                .then(|| nn::linear(&p / "diffusion", g.grid_len(), g.message_len, linear_cfg())),
        }
    }

    fn forward_t(&self, no: &Tensor, train: bool) -> Tensor {
        let h = run_blocks(&self.down, self.pre.forward_t(no, train), train);
        let h = run_blocks(&self.keep, h, train);
        let flat = self.out.forward(&h).flatten(1, -1);
        match &self.diffusion {
            Some(fc) => fc.forward(&flat),
            None => flat,
        }
    }
}

#[derive(Debug)]
struct Adversary {
    layers: Vec<ConvBnRelu>,
    fc: nn::Linear,
}

impl Adversary {
    fn new(p: nn::Path, cfg: &ModelConfig) -> Self {
        let c = cfg.channels;
        let layers = (0..cfg.disc_layers)
            .map(|i| ConvBnRelu::new(&p / format!("conv{i}"), if i == 0 { 3 } else { c }, c, 3, 1))
            .collect();
        Adversary { layers, fc: nn::linear(&p / "fc", c, 1, linear_cfg()) }
    }

    fn logits(&self, img: &Tensor, train: bool) -> Tensor {
        let h = self.layers.iter().fold(img.shallow_clone(), |h, l| l.forward_t(&h, train));
        let pooled = h.mean_dim([2, 3].as_slice(), false, h.kind());
        self.fc.forward(&pooled).squeeze_dim(1)
    }
}

/// Parameter groups updated by separate optimizers or frozen by schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Message,
    Encoder,
    Decoder,
    Adversary,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] =
        [ParamGroup::Message, ParamGroup::Encoder, ParamGroup::Decoder, ParamGroup::Adversary];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Message => "mp",
            ParamGroup::Encoder => "enc",
            ParamGroup::Decoder => "dec",
            ParamGroup::Adversary => "adv",
        }
    }

    pub fn of(name: &str) -> Option<ParamGroup> {
        let head = name.split('.').next()?;
        Self::ALL.into_iter().find(|g| g.prefix() == head)
    }
}

/// The full model: message processor, encoder, decoder and adversary, with
/// all variables held in one store under group prefixes.
#[derive(Debug)]
pub struct Watermarker {
    vs: nn::VarStore,
    cfg: ModelConfig,
    processor: MessageProcessor,
    encoder: EncoderNet,
    decoder: DecoderNet,
    adversary: Adversary,
}

impl Watermarker {
    /// Builds the model and initializes every variable from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let vs = nn::VarStore::new(Device::Cpu);
        let root = vs.root();
        let model = Watermarker {
            processor: MessageProcessor::new(&root / "mp", &cfg),
            encoder: EncoderNet::new(&root / "enc", &cfg),
            decoder: DecoderNet::new(&root / "dec", &cfg),
            adversary: Adversary::new(&root / "adv", &cfg),
            vs,
            cfg,
        };
        model.initialize(seed);
        Ok(model)
    }

    /// Uniform `+-1/sqrt(fan_in)` for weights and biases, unit scale and
    /// zero shift for batch norm; variables are visited in name order.
    fn initialize(&self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vars = self.vs.variables();
        let mut names: Vec<&String> = vars.keys().collect();
        names.sort();
        tch::no_grad(|| {
            for name in names {
                let mut var = vars[name].shallow_clone();
                let size = var.size();
                let is_bn = name.contains(".bn.");
                let leaf = name.rsplit('.').next().unwrap_or("");
                let value = match (is_bn, leaf) {
                    (true, "weight") | (true, "running_var") => Tensor::ones(size.as_slice(), (var.kind(), Device::Cpu)),
                    (true, _) => Tensor::zeros(size.as_slice(), (var.kind(), Device::Cpu)),
                    (false, _) => {
                        let weight_name = format!("{}.weight", &name[..name.len() - leaf.len() - 1]);
                        let wsize = vars.get(&weight_name).map(|w| w.size()).unwrap_or_else(|| size.clone());
                        let fan_in: i64 = wsize.iter().skip(1).product::<i64>().max(1);
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        let n: i64 = size.iter().product();
                        let v: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect();
                        Tensor::from_slice(&v).view(size.as_slice()).to_kind(var.kind())
                    }
                };
                var.copy_(&value);
            }
        });
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn geometry(&self) -> &GeometrySpec {
        &self.cfg.geometry
    }

    pub fn var_store(&self) -> &nn::VarStore {
        &self.vs
    }

    pub fn var_store_mut(&mut self) -> &mut nn::VarStore {
        &mut self.vs
    }

    /// Trainable variables of one group, sorted by name.
    pub fn group_parameters(&self, group: ParamGroup) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .vs
            .variables()
            .into_iter()
            .filter(|(name, t)| t.requires_grad() && ParamGroup::of(name) == Some(group))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Every variable, trainable or not, sorted by name.
    pub fn named_variables(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self.vs.variables().into_iter().collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn kind(&self) -> Kind {
        self.vs
            .variables()
            .values()
            .next()
            .map(|t| t.kind())
            .unwrap_or(Kind::Float)
    }

    fn check_bits(&self, bits: &Tensor) -> Result<()> {
        let size = bits.size();
        if size.len() != 2 || size[1] != self.cfg.geometry.message_len {
            return Err(Error::Geometry(format!(
                "messages {size:?} do not match L={}",
                self.cfg.geometry.message_len
            )));
        }
        Ok(())
    }

    /// Message feature map `[B, C', H, W]`.
    pub fn message_features(&self, bits: &Tensor, train: bool) -> Result<Tensor> {
        self.check_bits(bits)?;
        Ok(self.processor.forward_t(&bits.to_kind(self.kind()), &self.cfg.geometry, train))
    }

    /// Encoded image `[B, 3, H, W]`; not clamped.
    pub fn encode(&self, co: &Tensor, bits: &Tensor, train: bool) -> Result<Tensor> {
        self.cfg.geometry.check_images(co)?;
        if bits.size()[0] != co.size()[0] {
            return Err(Error::Shape(format!("{} messages for {} images", bits.size()[0], co.size()[0])));
        }
        let feats = self.message_features(bits, train)?;
        Ok(self.encoder.forward_t(co, &feats, train))
    }

    /// Raw decoder outputs `[B, L]`; bits are read by thresholding at 0.5.
    pub fn decode(&self, no: &Tensor, train: bool) -> Result<Tensor> {
        self.cfg.geometry.check_images(no)?;
        Ok(self.decoder.forward_t(no, train))
    }

    pub fn discriminate_logits(&self, img: &Tensor, train: bool) -> Result<Tensor> {
        self.cfg.geometry.check_images(img)?;
        Ok(self.adversary.logits(img, train))
    }

    /// Probability `[B]` that each image carries a watermark.
    pub fn discriminate(&self, img: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.discriminate_logits(img, train)?.sigmoid())
    }

    /// Encoder SE blocks, exposed for inspection.
    pub fn encoder_blocks(&self) -> &[SeBlock] {
        &self.encoder.blocks
    }

    /// Fraction of pixels whose largest per-channel change exceeds
    /// `threshold` when bit `bit_index` of an all-zero message is set, and the
    /// `[B, H, W]` change map.
    pub fn one_bit_residual_support(&self, co: &Tensor, bit_index: usize, threshold: f64) -> Result<(f64, Tensor)> {
        let g = self.cfg.geometry;
        if bit_index as i64 >= g.message_len {
            return Err(Error::Parameter(format!("bit {bit_index} outside message of {}", g.message_len)));
        }
        let b = co.size()[0];
        let zeros = Tensor::zeros([b, g.message_len], (Kind::Float, Device::Cpu));
        let one = zeros.copy();
        tch::no_grad(|| {
            let _ = one.narrow(1, bit_index as i64, 1).fill_(1.0);
        });
        let (e0, e1) = tch::no_grad(|| -> Result<(Tensor, Tensor)> {
            Ok((self.encode(co, &zeros, false)?, self.encode(co, &one, false)?))
        })?;
        let diff = (e0 - e1).abs().amax([1].as_slice(), false);
        let fraction = diff.gt(threshold).to_kind(Kind::Double).mean(Kind::Double).double_value(&[]);
        Ok((fraction, diff))
    }

    /// Copies every variable's values from `other`, which must share the
    /// configuration.
    pub fn load_from(&mut self, other: &Watermarker) -> Result<()> {
        if self.cfg != other.cfg {
            return Err(Error::Contract("model configurations differ".into()));
        }
        self.vs.copy(&other.vs)?;
        Ok(())
    }
}

/// Support threshold for residual maps: 1% of the normalized range.
pub const RESIDUAL_SUPPORT_THRESHOLD: f64 = 0.02;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{to_f64_vec, uniform_tensor};

    fn small_config(h: i64, w: i64, l: i64) -> ModelConfig {
        let mut cfg = ModelConfig::new(GeometrySpec::new(h, w, l).unwrap());
        cfg.channels = 8;
        cfg.message_channels = 8;
        cfg.se_reduction = 4;
        cfg
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn shape_contracts_over_geometries() {
        for (h, w, l) in [(128, 128, 64), (256, 256, 256), (400, 400, 625)] {
            let mut cfg = small_config(h, w, l);
            cfg.channels = 4;
            cfg.message_channels = 4;
            cfg.se_reduction = 2;
            cfg.se_blocks_enc = 1;
            cfg.disc_layers = 1;
            let model = Watermarker::new(cfg, 1).unwrap();
            let co = uniform_tensor(&[1, 3, h, w], &mut rng(0));
            let m = MessageBatch::random(1, l, &mut rng(1));
            tch::no_grad(|| {
                assert_eq!(model.message_features(&m.bits, false).unwrap().size(), vec![1, 4, h, w]);
                let en = model.encode(&co, &m.bits, false).unwrap();
                assert_eq!(en.size(), vec![1, 3, h, w]);
                assert_eq!(model.decode(&en, false).unwrap().size(), vec![1, l]);
                let p = model.discriminate(&en, false).unwrap();
                assert_eq!(p.size(), vec![1]);
            });
        }
    }

    #[test]
    fn se_block_shape_and_gates() {
        let vs = nn::VarStore::new(Device::Cpu);
        let block = SeBlock::new(vs.root() / "b", 8, 8, 1, 4);
        let x = uniform_tensor(&[2, 8, 8, 8], &mut rng(2));
        assert_eq!(block.forward_t(&x, true).size(), x.size());
        let g = to_f64_vec(&block.gates(&x, true));
        assert!(g.iter().all(|&v| v > 0.0 && v < 1.0));
        // zero excitation weights give sigmoid(0) everywhere
        tch::no_grad(|| {
            let _ = block.excite.ws.shallow_clone().zero_();
            if let Some(bs) = &block.excite.bs {
                let _ = bs.shallow_clone().zero_();
            }
        });
        let g = to_f64_vec(&block.gates(&x, true));
        assert!(g.iter().all(|&v| (v - 0.5).abs() < 1e-7));
        let down = SeBlock::new(vs.root() / "d", 8, 16, 2, 4);
        assert_eq!(down.forward_t(&x, true).size(), vec![2, 16, 4, 4]);
    }

    #[test]
    fn diffusion_decouples_message_length() {
        let mut cfg = small_config(32, 32, 16);
        cfg.geometry = GeometrySpec::with_depth(32, 32, 30, 2).unwrap();
        assert!(cfg.validate().is_err());
        cfg.diffusion = true;
        let model = Watermarker::new(cfg, 2).unwrap();
        let co = uniform_tensor(&[2, 3, 32, 32], &mut rng(10));
        let m = MessageBatch::random(2, 30, &mut rng(11));
        let out = tch::no_grad(|| model.decode(&model.encode(&co, &m.bits, false).unwrap(), false).unwrap());
        assert_eq!(out.size(), vec![2, 30]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config(32, 32, 16);
        cfg.se_reduction = 3;
        assert!(Watermarker::new(cfg, 0).is_err());
        let mut cfg = small_config(32, 32, 16);
        cfg.geometry.depth = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn deterministic_init_and_eval() {
        let cfg = small_config(32, 32, 16);
        let a = Watermarker::new(cfg, 7).unwrap();
        let b = Watermarker::new(cfg, 7).unwrap();
        let c = Watermarker::new(cfg, 8).unwrap();
        let co = uniform_tensor(&[2, 3, 32, 32], &mut rng(3));
        let m = MessageBatch::random(2, 16, &mut rng(4));
        let (ea, eb, ec) = tch::no_grad(|| {
            (
                a.encode(&co, &m.bits, false).unwrap(),
                b.encode(&co, &m.bits, false).unwrap(),
                c.encode(&co, &m.bits, false).unwrap(),
            )
        });
        assert!(ea.equal(&eb));
        assert!(!ea.equal(&ec));
        let again = tch::no_grad(|| a.encode(&co, &m.bits, false).unwrap());
        assert!(ea.equal(&again));
        let da = tch::no_grad(|| a.decode(&ea, false).unwrap());
        let da2 = tch::no_grad(|| a.decode(&ea, false).unwrap());
        assert!(da.equal(&da2));
    }

    #[test]
    fn different_messages_give_different_features() {
        let model = Watermarker::new(small_config(32, 32, 16), 3).unwrap();
        let m1 = MessageBatch::random(1, 16, &mut rng(5));
        let m2 = MessageBatch::new(1.0 - &m1.bits).unwrap();
        let (f1, f2) = tch::no_grad(|| {
            (model.message_features(&m1.bits, false).unwrap(), model.message_features(&m2.bits, false).unwrap())
        });
        assert!(!f1.equal(&f2));
    }

    #[test]
    fn strength_identities() {
        let co = uniform_tensor(&[1, 3, 8, 8], &mut rng(6)).to_kind(Kind::Double);
        let en = uniform_tensor(&[1, 3, 8, 8], &mut rng(7)).to_kind(Kind::Double);
        let s = |v| StrengthFactor::new(v).unwrap();
        assert!(apply_strength(&co, &en, s(1.0)).unwrap().equal(&en));
        assert!(apply_strength(&co, &en, s(0.0)).unwrap().equal(&co));
        let sum = apply_strength(&co, &en, s(0.3)).unwrap() + apply_strength(&co, &en, s(0.9)).unwrap() - &co;
        let direct = apply_strength(&co, &en, s(1.2)).unwrap();
        assert!(to_f64_vec(&(sum - direct).abs()).iter().all(|&d| d < 1e-6));
        assert!(StrengthFactor::new(-0.1).is_err());
        let mut last = f64::INFINITY;
        for v in [0.2, 0.6, 1.0, 1.4, 2.0] {
            let p = crate::imaging::psnr(&co, &apply_strength(&co, &en, s(v)).unwrap()).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn message_batch_validation() {
        assert!(MessageBatch::new(Tensor::from_slice(&[0.0f32, 0.5]).view([1, 2])).is_err());
        assert!(MessageBatch::new(Tensor::from_slice(&[0.0f32, 1.0]).view([2])).is_err());
        assert!(MessageBatch::new(Tensor::from_slice(&[0.0f32, 1.0]).view([1, 2])).is_ok());
    }

    #[test]
    fn untrained_discriminator_is_uncommitted() {
        let model = Watermarker::new(small_config(32, 32, 16), 11).unwrap();
        let img = uniform_tensor(&[4, 3, 32, 32], &mut rng(8));
        let p = to_f64_vec(&tch::no_grad(|| model.discriminate(&img, false).unwrap()));
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(p.iter().all(|&v| (0.3..0.7).contains(&v)), "{p:?}");
    }

    #[test]
    fn one_bit_support_edge_cases() {
        let model = Watermarker::new(small_config(32, 32, 16), 12).unwrap();
        let co = uniform_tensor(&[1, 3, 32, 32], &mut rng(9));
        assert!(model.one_bit_residual_support(&co, 16, 0.02).is_err());
        let (frac, diff) = model.one_bit_residual_support(&co, 3, 0.02).unwrap();
        assert!((0.0..=1.0).contains(&frac));
        assert_eq!(diff.size(), vec![1, 32, 32]);
    }

    #[test]
    fn groups_partition_parameters() {
        let model = Watermarker::new(small_config(32, 32, 16), 0).unwrap();
        let total = model.var_store().trainable_variables().len();
        let grouped: usize = ParamGroup::ALL.iter().map(|g| model.group_parameters(*g).len()).sum();
        assert_eq!(total, grouped);
        assert!(ParamGroup::ALL.iter().all(|g| !model.group_parameters(*g).is_empty()));
    }
}
