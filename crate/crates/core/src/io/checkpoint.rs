//! PVUC: model parameters, optionally with optimizer state.
//!
//! ```text
//! magic "PVUC" | version u16 = 1 | stage u8 (0 pretrain, 1 finetune)
//! | flags u8 (bit0 optimizer state) | digest [32] | step u64
//! | param count u32
//! | per param: name len u16, name utf-8, rank u8, dims u32 * rank, f32 * numel
//! | if optimizer: adam step u64, then m and v per param (f32 * numel each)
//! | loss count u32, f64 * count
//! | crc32 of all preceding bytes
//! ```

use sha2::{Digest, Sha256};

use super::bytes::{check_crc, Reader, Writer};
use super::{hex, IoError};
use crate::model::{ModelConfig, PvuModel, Stage};
use crate::tensornet::{AdamWState, ParamStore, Tensor};
use crate::train::TrainState;

const FORMAT: &str = "PVUC";
const MAGIC: &[u8; 4] = b"PVUC";
const VERSION: u16 = 1;
const MAX_RANK: u8 = 8;

/// SHA-256 of the configuration fields that decide the backbone's
/// parameter shapes. Pretraining and fine-tuning checkpoints of one
/// backbone share it.
pub fn model_digest(cfg: &ModelConfig) -> [u8; 32] {
    Sha256::digest(cfg.backbone_signature().as_bytes()).into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub digest: [u8; 32],
    pub step: usize,
    pub params: ParamStore<f32>,
    pub opt: Option<AdamWState<f32>>,
    pub losses: Vec<f64>,
}

impl Checkpoint {
    pub fn from_state(model: &PvuModel, st: &TrainState, with_optimizer: bool) -> Self {
        Self {
            stage: model.stage(),
            digest: model_digest(model.config()),
            step: st.step,
            params: st.params.clone(),
            opt: with_optimizer.then(|| st.opt.clone()),
            losses: st.losses.clone(),
        }
    }

    /// Training state to resume from; a checkpoint without optimizer state
    /// restarts the moments at zero.
    pub fn into_state(self) -> TrainState {
        let opt = self.opt.unwrap_or_else(|| AdamWState::new(&self.params));
        TrainState {
            params: self.params,
            opt,
            step: self.step,
            losses: self.losses,
        }
    }

    /// Checks that the checkpoint was written for `cfg`'s backbone.
    pub fn verify(&self, cfg: &ModelConfig) -> Result<(), IoError> {
        let expected = model_digest(cfg);
        if expected != self.digest {
            return Err(IoError::DigestMismatch {
                expected: hex(&expected),
                found: hex(&self.digest),
            });
        }
        Ok(())
    }
}

fn payload(w: &mut Writer, t: &Tensor<f32>) {
    for v in t.data() {
        w.f32(*v);
    }
}

pub fn encode_checkpoint(c: &Checkpoint) -> Result<Vec<u8>, IoError> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u16(VERSION);
    w.u8(match c.stage {
        Stage::Pretrain => 0,
        Stage::Finetune => 1,
    });
    w.u8(u8::from(c.opt.is_some()));
    w.bytes(&c.digest);
    w.u64(c.step as u64);
    w.u32(u32::try_from(c.params.len()).map_err(|_| IoError::Unencodable("too many parameters".into()))?);
    for (_, name, t) in c.params.iter() {
        let len = u16::try_from(name.len()).map_err(|_| IoError::Unencodable(format!("name too long: {name}")))?;
        if t.shape().len() > MAX_RANK as usize {
            return Err(IoError::Unencodable(format!("{name} has rank {}", t.shape().len())));
        }
        w.u16(len);
        w.bytes(name.as_bytes());
        w.u8(t.shape().len() as u8);
        for d in t.shape() {
            w.u32(u32::try_from(*d).map_err(|_| IoError::Unencodable(format!("{name} dimension {d}")))?);
        }
        payload(&mut w, t);
    }
    if let Some(opt) = &c.opt {
        if opt.m.len() != c.params.len() || opt.v.len() != c.params.len() {
            return Err(IoError::Unencodable("optimizer state does not match the parameters".into()));
        }
        w.u64(opt.step);
        for ((_, name, p), (m, v)) in c.params.iter().zip(opt.m.iter().zip(&opt.v)) {
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(IoError::Unencodable(format!("optimizer moments of {name} have the wrong shape")));
            }
            payload(&mut w, m);
            payload(&mut w, v);
        }
    }
    w.u32(u32::try_from(c.losses.len()).map_err(|_| IoError::Unencodable("too many losses".into()))?);
    for l in &c.losses {
        w.f64(*l);
    }
    Ok(w.finish())
}

fn read_tensor(r: &mut Reader, shape: &[usize]) -> Result<Tensor<f32>, IoError> {
    let numel: usize = shape.iter().product();
    let raw = r.take(numel.checked_mul(4).ok_or_else(|| r.malformed("tensor too large"))?)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data).map_err(|e| r.malformed(e.to_string()))
}

pub fn decode_checkpoint(data: &[u8]) -> Result<Checkpoint, IoError> {
    let mut r = Reader::new(FORMAT, data);
    r.magic(MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(IoError::UnsupportedVersion { format: FORMAT, version });
    }
    let body = check_crc(FORMAT, data)?;
    let mut r = Reader::new(FORMAT, body.get(6..).unwrap_or_default());
    let stage = match r.u8()? {
        0 => Stage::Pretrain,
        1 => Stage::Finetune,
        s => return Err(r.malformed(format!("stage tag {s}"))),
    };
    let flags = r.u8()?;
    if flags & !1 != 0 {
        return Err(IoError::UnknownFlags {
            format: FORMAT,
            flags: flags as u16,
        });
    }
    let mut digest = [0u8; 32];
    digest.copy_from_slice(r.take(32)?);
    let step = usize::try_from(r.u64()?).map_err(|_| r.malformed("step overflows"))?;
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| r.malformed("parameter name is not utf-8"))?;
        let rank = r.u8()?;
        if rank > MAX_RANK {
            return Err(r.malformed(format!("{name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        if shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d)).is_none() {
            return Err(r.malformed(format!("{name} shape {shape:?} overflows")));
        }
        let t = read_tensor(&mut r, &shape)?;
        params.add(name, t).map_err(|e| r.malformed(e.to_string()))?;
    }
    let opt = if flags & 1 != 0 {
        let adam_step = r.u64()?;
        let (mut m, mut v) = (Vec::with_capacity(params.len()), Vec::with_capacity(params.len()));
        for (_, _, p) in params.iter() {
            m.push(read_tensor(&mut r, p.shape())?);
            v.push(read_tensor(&mut r, p.shape())?);
        }
        Some(AdamWState { step: adam_step, m, v })
    } else {
        None
    };
    let n_losses = r.u32()? as usize;
    if n_losses.saturating_mul(8) > r.remaining() {
        return Err(r.malformed(format!("{n_losses} losses do not fit the remaining bytes")));
    }
    let losses = (0..n_losses).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
    if r.remaining() != 0 {
        return Err(IoError::TrailingBytes {
            format: FORMAT,
            extra: r.remaining(),
        });
    }
    Ok(Checkpoint {
        stage,
        digest,
        step,
        params,
        opt,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn sample() -> (PvuModel, Checkpoint) {
        let model = PvuModel::new(&ModelConfig::micro(), Stage::Pretrain).unwrap();
        let mut st = TrainState::new(model.init_params(3).unwrap());
        st.step = 17;
        st.opt.step = 17;
        st.opt.m[0].data_mut()[0] = 0.25;
        st.losses = vec![1.5, f64::MIN_POSITIVE, 0.125];
        let c = Checkpoint::from_state(&model, &st, true);
        (model, c)
    }

    #[test]
    fn round_trip_with_and_without_optimizer() {
        let (model, c) = sample();
        let bytes = encode_checkpoint(&c).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, c);
        back.verify(model.config()).unwrap();
        let lean = Checkpoint { opt: None, ..c };
        let b2 = encode_checkpoint(&lean).unwrap();
        assert!(b2.len() < bytes.len());
        let st = decode_checkpoint(&b2).unwrap().into_state();
        assert_eq!(st.opt.step, 0);
        assert_eq!(st.params, lean.params);
    }

    #[test]
    fn digest_guards_the_backbone() {
        let (_, c) = sample();
        let mut other = ModelConfig::micro();
        other.dim = 10;
        assert!(matches!(c.verify(&other), Err(IoError::DigestMismatch { .. })));
        let mut same_backbone = ModelConfig::micro();
        same_backbone.frames = 5;
        c.verify(&same_backbone).unwrap();
    }

    #[test]
    fn corruption_is_reported() {
        let (_, c) = sample();
        let bytes = encode_checkpoint(&c).unwrap();
        let mut b = bytes.clone();
        b[3] = b'X';
        assert!(matches!(decode_checkpoint(&b), Err(IoError::BadMagic { .. })));
        let mut b = bytes.clone();
        b[40] ^= 0x10;
        assert!(matches!(decode_checkpoint(&b), Err(IoError::Checksum { .. })));
        assert!(decode_checkpoint(&bytes[..bytes.len() / 2]).is_err());
    }
}
