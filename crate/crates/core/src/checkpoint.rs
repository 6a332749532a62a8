//! Versioned checkpoint container: magic, version, JSON header, raw tensors.
//!
//! Layout: `MBRSCKPT`, u32 LE version, u64 LE header length, header JSON,
//! then every tensor's little-endian values back to back at the offsets the
//! header lists.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tch::{Device, Kind, Tensor};

use crate::error::{Error, Result};
use crate::network::{ModelConfig, Watermarker};
use crate::training::{Adam, AdamSlot, TrainConfig, Trainer};

pub const MAGIC: &[u8; 8] = b"MBRSCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Checkpoint(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| Error::Checkpoint(format!("rng position: {e}")))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdamHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: String,
    shape: Vec<i64>,
    offset: u64,
    bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    step: u64,
    epoch: usize,
    rng_data: RngState,
    rng_message: RngState,
    rng_noise: RngState,
    noise_counts: BTreeMap<String, u64>,
    adam_main: AdamHeader,
    adam_adv: AdamHeader,
    tensors: Vec<TensorEntry>,
}

fn kind_tag(kind: Kind) -> Result<&'static str> {
    match kind {
        Kind::Float => Ok("f32"),
        Kind::Double => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported tensor kind {other:?}"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.detach().to_device(Device::Cpu).contiguous().flatten(0, -1);
    match t.kind() {
        Kind::Float => {
            let v = Vec::<f32>::try_from(&flat)?;
            Ok(v.iter().flat_map(|x| x.to_le_bytes()).collect())
        }
        Kind::Double => {
            let v = Vec::<f64>::try_from(&flat)?;
            Ok(v.iter().flat_map(|x| x.to_le_bytes()).collect())
        }
        other => Err(Error::Checkpoint(format!("unsupported tensor kind {other:?}"))),
    }
}

fn tensor_from_bytes(entry: &TensorEntry, data: &[u8]) -> Result<Tensor> {
    let n: i64 = entry.shape.iter().product();
    let t = match entry.kind.as_str() {
        "f32" => {
            if data.len() as i64 != 4 * n {
                return Err(Error::Checkpoint(format!("{}: byte count mismatch", entry.name)));
            }
            let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_slice(&v)
        }
        "f64" => {
            if data.len() as i64 != 8 * n {
                return Err(Error::Checkpoint(format!("{}: byte count mismatch", entry.name)));
            }
            let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_slice(&v)
        }
        other => return Err(Error::Checkpoint(format!("{}: unknown kind {other}", entry.name))),
    };
    Ok(t.view(entry.shape.as_slice()))
}

fn adam_header(opt: &Adam) -> AdamHeader {
    AdamHeader {
        lr: opt.lr,
        beta1: opt.beta1,
        beta2: opt.beta2,
        eps: opt.eps,
        steps: opt.slots().iter().map(|(k, s)| (k.clone(), s.step)).collect(),
    }
}

/// Serializes the full training state.
pub fn to_bytes(trainer: &Trainer) -> Result<Vec<u8>> {
    let mut named: Vec<(String, Tensor)> = trainer
        .model
        .named_variables()
        .into_iter()
        .map(|(n, t)| (format!("model/{n}"), t))
        .collect();
    let (main, adv) = trainer.optimizers();
    for (label, opt) in [("adam_main", main), ("adam_adv", adv)] {
        for (name, slot) in opt.slots() {
            named.push((format!("{label}/{name}/m"), slot.m.shallow_clone()));
            named.push((format!("{label}/{name}/v"), slot.v.shallow_clone()));
        }
    }
    let mut data = Vec::new();
    let mut tensors = Vec::with_capacity(named.len());
    for (name, t) in &named {
        let bytes = tensor_bytes(t)?;
        tensors.push(TensorEntry {
            name: name.clone(),
            kind: kind_tag(t.kind())?.to_string(),
            shape: t.size(),
            offset: data.len() as u64,
            bytes: bytes.len() as u64,
        });
        data.extend_from_slice(&bytes);
    }
    let header = Header {
        model: *trainer.model.config(),
        train: trainer.cfg.clone(),
        step: trainer.step,
        epoch: trainer.epoch,
        rng_data: RngState::capture(&trainer.data_rng),
        rng_message: RngState::capture(&trainer.msg_rng),
        rng_noise: RngState::capture(&trainer.noise_rng),
        noise_counts: trainer.noise_counts.clone(),
        adam_main: adam_header(main),
        adam_adv: adam_header(adv),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

fn parse(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let json = bytes
        .get(20..20 + len)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    Ok((header, &bytes[20 + len..]))
}

fn read_tensors(header: &Header, data: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for entry in &header.tensors {
        let start = entry.offset as usize;
        let end = start + entry.bytes as usize;
        let slice = data
            .get(start..end)
            .ok_or_else(|| Error::Checkpoint(format!("{}: truncated data", entry.name)))?;
        out.insert(entry.name.clone(), tensor_from_bytes(entry, slice)?);
    }
    Ok(out)
}

fn restore_adam(h: &AdamHeader, label: &str, tensors: &BTreeMap<String, Tensor>) -> Result<Adam> {
    let mut opt = Adam::new(h.lr);
    opt.beta1 = h.beta1;
    opt.beta2 = h.beta2;
    opt.eps = h.eps;
    for (name, step) in &h.steps {
        let get = |part: &str| {
            tensors
                .get(&format!("{label}/{name}/{part}"))
                .map(|t| t.shallow_clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state for {name}")))
        };
        opt.insert_slot(name.clone(), AdamSlot { m: get("m")?, v: get("v")?, step: *step });
    }
    Ok(opt)
}

/// Restores the exact training state, including optimizer moments and rng
/// positions.
pub fn from_bytes(bytes: &[u8]) -> Result<Trainer> {
    let (header, data) = parse(bytes)?;
    let tensors = read_tensors(&header, data)?;
    let model = Watermarker::new(header.model, header.train.seed)?;
    let vars = model.named_variables();
    let expected: usize = header.tensors.iter().filter(|e| e.name.starts_with("model/")).count();
    if expected != vars.len() {
        return Err(Error::Checkpoint(format!("{expected} stored variables, model has {}", vars.len())));
    }
    tch::no_grad(|| -> Result<()> {
        for (name, var) in &vars {
            let stored = tensors
                .get(&format!("model/{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing variable {name}")))?;
            if stored.size() != var.size() {
                return Err(Error::Checkpoint(format!("{name}: shape {:?} vs {:?}", stored.size(), var.size())));
            }
            let mut var = var.shallow_clone();
            if var.kind() != stored.kind() {
                var.set_data(&var.to_kind(stored.kind()));
            }
            var.copy_(stored);
        }
        Ok(())
    })?;
    let mut trainer = Trainer::with_model(model, header.train.clone());
    trainer.opt_main = restore_adam(&header.adam_main, "adam_main", &tensors)?;
    trainer.opt_adv = restore_adam(&header.adam_adv, "adam_adv", &tensors)?;
    trainer.step = header.step;
    trainer.epoch = header.epoch;
    trainer.data_rng = header.rng_data.restore()?;
    trainer.msg_rng = header.rng_message.restore()?;
    trainer.noise_rng = header.rng_noise.restore()?;
    trainer.noise_counts = header.noise_counts;
    Ok(trainer)
}

/// Model configuration stored in a checkpoint, without loading tensors.
pub fn read_model_config(bytes: &[u8]) -> Result<ModelConfig> {
    Ok(parse(bytes)?.0.model)
}

pub fn save(trainer: &Trainer, path: &Path) -> Result<()> {
    let bytes = to_bytes(trainer)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Trainer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{uniform_tensor, Dataset, GeometrySpec};
    use crate::noise::NoisePool;
    use crate::training::Schedule;

    fn trainer() -> Trainer {
        let mut m = ModelConfig::new(GeometrySpec::new(16, 16, 16).unwrap());
        m.channels = 8;
        m.message_channels = 8;
        m.se_reduction = 4;
        m.se_blocks_enc = 1;
        m.se_blocks_dec = 1;
        m.disc_layers = 1;
        let cfg = TrainConfig {
            schedule: Schedule::Mbrs,
            pool: NoisePool::mbrs_default(),
            batch: 4,
            epochs: 3,
            seed: 21,
            ..TrainConfig::default()
        };
        Trainer::new(m, cfg).unwrap()
    }

    fn data() -> Dataset {
        Dataset::from_tensor(uniform_tensor(&[8, 3, 16, 16], &mut ChaCha8Rng::seed_from_u64(4))).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact_and_resumes_identically() {
        let data = data();
        let mut a = trainer();
        a.train_epoch(&data, &mut |_| Ok(())).unwrap();
        let bytes = to_bytes(&a).unwrap();
        let mut b = from_bytes(&bytes).unwrap();
        assert_eq!(to_bytes(&b).unwrap(), bytes);
        assert_eq!(b.step_count(), a.step_count());

        let mut la = Vec::new();
        let mut lb = Vec::new();
        a.train_epoch(&data, &mut |m| {
            la.push(m.to_line());
            Ok(())
        })
        .unwrap();
        b.train_epoch(&data, &mut |m| {
            lb.push(m.to_line());
            Ok(())
        })
        .unwrap();
        assert_eq!(la, lb);
        assert_eq!(to_bytes(&a).unwrap(), to_bytes(&b).unwrap());
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let t = trainer();
        save(&t, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(to_bytes(&load(&path).unwrap()).unwrap(), bytes);
        assert_eq!(read_model_config(&bytes).unwrap(), *t.model.config());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(from_bytes(&bad), Err(Error::Checkpoint(_))));
        assert!(from_bytes(&bytes[..bytes.len() - 4]).is_err());
        assert_eq!(sha256_hex(&bytes).len(), 64);
    }
}
