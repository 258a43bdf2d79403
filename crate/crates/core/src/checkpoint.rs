//! Versioned single-file checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `CDDSACKP` |
//! | 4     | format version (`u32`) |
//! | 8     | header length `L` (`u64`) |
//! | L     | UTF-8 JSON [`CheckpointHeader`] |
//! | ...   | every parameter in header order as `f64`, then, if present, the Adam first and second moments in the same order |
//! | 32    | SHA-256 of everything above |

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use cddsa_autograd::{Adam, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CddsaError, Result};
use crate::model::{CddsaNet, ModelConfig};

pub const MAGIC: &[u8; 8] = b"CDDSACKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    /// Training settings as free-form JSON so that older readers still load.
    pub train: serde_json::Value,
    pub epoch: usize,
    /// Seeds that produced the run: model init, training stream, data.
    pub seeds: Vec<u64>,
    pub tensors: Vec<TensorEntry>,
    pub adam: Option<AdamState>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub net: CddsaNet<T>,
    pub adam: Option<Adam<T>>,
    pub epoch: usize,
    pub seeds: Vec<u64>,
    pub train: serde_json::Value,
}

fn ck_err(msg: impl Into<String>) -> CddsaError {
    CddsaError::Checkpoint(msg.into())
}

pub fn encode<T: Scalar>(ck: &Checkpoint<T>) -> Result<Vec<u8>> {
    let store = &ck.net.store;
    let tensors = store
        .iter()
        .map(|(_, p)| TensorEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), trainable: p.trainable })
        .collect();
    let adam = ck.adam.as_ref().map(|a| AdamState { lr: a.lr, beta1: a.beta1, beta2: a.beta2, eps: a.eps, step: a.step });
    let header = CheckpointHeader {
        model: ck.net.config.clone(),
        train: ck.train.clone(),
        epoch: ck.epoch,
        seeds: ck.seeds.clone(),
        tensors,
        adam,
    };
    let json = serde_json::to_vec(&header).map_err(|e| ck_err(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.write_u32::<LittleEndian>(FORMAT_VERSION).expect("vec write");
    buf.write_u64::<LittleEndian>(json.len() as u64).expect("vec write");
    buf.extend_from_slice(&json);
    let mut put = |t: &Tensor<T>| {
        for &v in t.data() {
            buf.write_f64::<LittleEndian>(v.as_f64()).expect("vec write");
        }
    };
    for (_, p) in store.iter() {
        put(&p.value);
    }
    if let Some(a) = &ck.adam {
        a.first.iter().for_each(&mut put);
        a.second.iter().for_each(&mut put);
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < MAGIC.len() + 12 + 32 {
        return Err(ck_err("file too short"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(ck_err("checksum mismatch"));
    }
    let mut r = Cursor::new(body);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| ck_err(e.to_string()))?;
    if &magic != MAGIC {
        return Err(ck_err("not a checkpoint file"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|e| ck_err(e.to_string()))?;
    if version != FORMAT_VERSION {
        return Err(ck_err(format!("unsupported format version {version}")));
    }
    let len = r.read_u64::<LittleEndian>().map_err(|e| ck_err(e.to_string()))? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| ck_err("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&json).map_err(|e| ck_err(format!("bad header: {e}")))?;

    let mut net = CddsaNet::<T>::new(header.model.clone(), 0)?;
    if net.store.len() != header.tensors.len() {
        return Err(ck_err(format!("expected {} tensors, header lists {}", net.store.len(), header.tensors.len())));
    }
    let mut read_tensor = |shape: &[usize]| -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(T::of(r.read_f64::<LittleEndian>().map_err(|_| ck_err("truncated tensor data"))?));
        }
        Ok(Tensor::from_vec(shape, data)?)
    };
    let ids: Vec<_> = net.store.iter().map(|(id, p)| (id, p.name.clone(), p.value.shape().to_vec())).collect();
    for ((id, name, shape), entry) in ids.iter().zip(&header.tensors) {
        if *name != entry.name || *shape != entry.shape {
            return Err(ck_err(format!("tensor {} {:?} does not match model tensor {name} {shape:?}", entry.name, entry.shape)));
        }
        let t = read_tensor(shape)?;
        net.store.set(*id, t)?;
    }
    let adam = match &header.adam {
        None => None,
        Some(s) => {
            let mut a = Adam::new(&net.store, s.lr);
            (a.beta1, a.beta2, a.eps, a.step) = (s.beta1, s.beta2, s.eps, s.step);
            for (i, (_, _, shape)) in ids.iter().enumerate() {
                a.first[i] = read_tensor(shape)?;
            }
            for (i, (_, _, shape)) in ids.iter().enumerate() {
                a.second[i] = read_tensor(shape)?;
            }
            Some(a)
        }
    };
    if r.position() as usize != body.len() {
        return Err(ck_err("trailing bytes after tensor data"));
    }
    Ok(Checkpoint { net, adam, epoch: header.epoch, seeds: header.seeds, train: header.train })
}

pub fn save<T: Scalar>(ck: &Checkpoint<T>, path: &Path) -> Result<()> {
    let bytes = encode(ck)?;
    fs::write(path, bytes).map_err(|e| CddsaError::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| CddsaError::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            anatomy_channels: 4,
            style_dim: 4,
            unet_channels: vec![4, 4, 4, 4, 4],
            style_channels: vec![4],
            decoder_channels: vec![4, 4, 4],
            segmentor_hidden: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_with_optimizer() {
        let net = CddsaNet::<f32>::new(tiny(), 3).unwrap();
        let mut adam = Adam::new(&net.store, 1e-3);
        adam.step = 7;
        adam.first[0].data_mut()[0] = 0.25;
        let ck = Checkpoint { net, adam: Some(adam), epoch: 5, seeds: vec![1, 2, 3], train: serde_json::json!({"mode": "cddsa"}) };
        let back: Checkpoint<f32> = decode(&encode(&ck).unwrap()).unwrap();
        assert_eq!(back.epoch, 5);
        assert_eq!(back.seeds, vec![1, 2, 3]);
        assert_eq!(back.net.config, ck.net.config);
        for ((_, a), (_, b)) in back.net.store.iter().zip(ck.net.store.iter()) {
            assert_eq!(a.value, b.value);
        }
        let a = back.adam.unwrap();
        assert_eq!((a.step, a.first[0].data()[0]), (7, 0.25));
    }

    #[test]
    fn corruption_detected() {
        let net = CddsaNet::<f64>::new(tiny(), 3).unwrap();
        let ck = Checkpoint { net, adam: None, epoch: 0, seeds: vec![], train: serde_json::Value::Null };
        let mut bytes = encode(&ck).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(decode::<f64>(&bytes), Err(CddsaError::Checkpoint(_))));
        assert!(decode::<f64>(b"short").is_err());
    }
}
