//! Single-file checkpoints: magic bytes, a little-endian u64 header length,
//! a JSON header, then every array as little-endian f64 in header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState, Stores};
use crate::optim::{AdamW, AdamWConfig, Slot};
use crate::params::StoreId;

pub const MAGIC: &[u8; 8] = b"DFNDCKP1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayInfo {
    pub group: String,
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentInfo {
    pub store: StoreId,
    pub index: usize,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    pub vocab_size: usize,
    pub lambda_threshold: f64,
    pub model: ModelConfig,
    pub vocab: Vec<String>,
    /// Optimizer steps completed when saved.
    pub step: usize,
    pub optimizer: Option<AdamWConfig>,
    /// Slot-vector length of each store the optimizer has touched.
    pub slot_lengths: Vec<(StoreId, usize)>,
    pub moments: Vec<MomentInfo>,
    pub arrays: Vec<ArrayInfo>,
}

impl Header {
    /// Errors when `cfg` disagrees with the recorded dimensions.
    pub fn check_compatible(&self, cfg: &ModelConfig) -> Result<()> {
        let e = &cfg.encoder;
        let pairs = [
            ("model_dim", self.model_dim, e.model_dim),
            ("num_layers", self.num_layers, e.num_layers),
            ("num_heads", self.num_heads, e.num_heads),
            ("patch_size", self.patch_size, e.patch_size),
        ];
        for (k, ckpt, want) in pairs {
            if ckpt != want {
                return Err(Error::Config(format!("checkpoint has {k} = {ckpt} but the configuration asks for {want}")));
            }
        }
        Ok(())
    }
}

pub struct Checkpoint {
    pub header: Header,
    pub model: ModelState,
    pub opt: Option<AdamW>,
}

fn group_name(id: StoreId) -> &'static str {
    id.name()
}

pub fn save(path: &Path, model: &ModelState, step: usize, opt: Option<&AdamW>) -> Result<()> {
    let mut arrays = Vec::new();
    let mut data: Vec<&Array2<f64>> = Vec::new();
    for id in Stores::ALL {
        for e in model.stores.get(id).expect("model store").entries() {
            arrays.push(ArrayInfo { group: group_name(id).into(), name: e.name.clone(), rows: e.value.nrows(), cols: e.value.ncols() });
            data.push(&e.value);
        }
    }
    let mut moments = Vec::new();
    let mut slot_lengths = Vec::new();
    if let Some(opt) = opt {
        for (&id, slots) in &opt.slots {
            slot_lengths.push((id, slots.len()));
            for (index, slot) in slots.iter().enumerate() {
                if let Some(s) = slot {
                    moments.push(MomentInfo { store: id, index, count: s.count });
                    for (kind, a) in [("m", &s.m), ("v", &s.v)] {
                        arrays.push(ArrayInfo {
                            group: format!("adam.{kind}.{}", id.name()),
                            name: index.to_string(),
                            rows: a.nrows(),
                            cols: a.ncols(),
                        });
                        data.push(a);
                    }
                }
            }
        }
    }
    let e = &model.cfg.encoder;
    let header = Header {
        model_dim: e.model_dim,
        num_layers: e.num_layers,
        num_heads: e.num_heads,
        patch_size: e.patch_size,
        vocab_size: e.vocab_size,
        lambda_threshold: model.cfg.sampler.lambda_threshold,
        model: model.cfg,
        vocab: model.vocab.tokens.clone(),
        step,
        optimizer: opt.map(|o| o.cfg),
        slot_lengths,
        moments,
        arrays,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + 8 * data.iter().map(|a| a.len()).sum::<usize>());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for a in data {
        for v in a.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp)?.write_all(&buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn corrupt(path: &Path, what: &str) -> Error {
    Error::Data(format!("checkpoint {}: {what}", path.display()))
}

fn open(path: &Path) -> Result<(Header, Vec<u8>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open checkpoint {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt(path, "not a checkpoint file (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..end]).map_err(|e| corrupt(path, &format!("bad header: {e}")))?;
    Ok((header, bytes.split_off(end)))
}

pub fn read_header(path: &Path) -> Result<Header> {
    open(path).map(|(h, _)| h)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let (header, body) = open(path)?;
    let expected: usize = header.arrays.iter().map(|a| a.rows * a.cols * 8).sum();
    if body.len() != expected {
        return Err(corrupt(path, &format!("{} data bytes, header describes {expected}", body.len())));
    }
    let mut model = ModelState::skeleton(header.model, Vocab::from_tokens(header.vocab.clone()))?;
    if model.cfg.encoder.vocab_size != header.vocab_size {
        return Err(corrupt(path, "vocab_size disagrees with the stored vocabulary"));
    }
    let mut values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut infos = header.arrays.iter();
    for id in Stores::ALL {
        let store = model.stores.get_mut(id).expect("model store");
        for e in store.entries_mut() {
            let info = infos.next().ok_or_else(|| corrupt(path, "fewer arrays than the model layout"))?;
            if info.group != group_name(id) || info.name != e.name || (info.rows, info.cols) != e.value.dim() {
                return Err(corrupt(
                    path,
                    &format!("array {}.{} {}×{} does not match layout entry {}.{} {:?}", info.group, info.name, info.rows, info.cols, id.name(), e.name, e.value.dim()),
                ));
            }
            for v in e.value.iter_mut() {
                *v = values.next().expect("length checked");
            }
        }
    }
    let opt = match header.optimizer {
        None => None,
        Some(cfg) => {
            let mut opt = AdamW::new(cfg);
            for &(id, n) in &header.slot_lengths {
                opt.slots.insert(id, vec![None; n]);
            }
            for m in &header.moments {
                let mut take = || -> Result<Array2<f64>> {
                    let info = infos.next().ok_or_else(|| corrupt(path, "missing optimizer moments"))?;
                    let v: Vec<f64> = values.by_ref().take(info.rows * info.cols).collect();
                    Array2::from_shape_vec((info.rows, info.cols), v).map_err(|e| corrupt(path, &e.to_string()))
                };
                let (mm, vv) = (take()?, take()?);
                let slots = opt.slots.entry(m.store).or_default();
                if slots.len() <= m.index {
                    slots.resize(m.index + 1, None);
                }
                slots[m.index] = Some(Slot { m: mm, v: vv, count: m.count });
            }
            Some(opt)
        }
    };
    Ok(Checkpoint { header, model, opt })
}
