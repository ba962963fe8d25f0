//! Single-file checkpoints.
//!
//! Layout: the magic `LSTN1`, a u64 LE manifest length, the JSON manifest,
//! the prompt pool (when present) as `P, d, d′` u64 headers followed by key
//! and value data, then named blocks. A block is a u64 name length, the
//! UTF-8 name, a u64 rank, rank u64 dims and the row-major f64 LE data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::pool::PromptPool;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"LSTN1";

const POOL_KEYS: &str = "pool.keys";
const POOL_VALUES: &str = "pool.values";
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub train: u64,
    pub backbone: u64,
    pub prototypes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub vocab: usize,
    pub d_model: usize,
    pub layers: usize,
    pub feature_dim: usize,
    pub pool_size: usize,
    pub prompt_slots: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub strategy: String,
    pub dims: Dims,
    pub seeds: Seeds,
    /// Optimizer steps completed.
    pub step: usize,
    pub adam_step: u64,
    pub has_pool: bool,
    pub config: TrainConfig,
}

/// Everything needed to evaluate or resume a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: usize,
    pub store: ParamStore,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        let cfg = self.config.model_config();
        cfg.validate()?;
        Ok(Model {
            cfg,
            vocab: self.config.vocab(),
            store: self.store.clone(),
        })
    }

    fn manifest(&self) -> Manifest {
        let c = &self.config;
        Manifest {
            strategy: c.effective_strategy().to_string(),
            dims: Dims {
                vocab: c.vocab().size(),
                d_model: c.model.d_model,
                layers: c.model.layers,
                feature_dim: c.data.feature_dim,
                pool_size: c.pool_size,
                prompt_slots: c.prompt_slots(),
            },
            seeds: Seeds {
                train: c.seed,
                backbone: c.backbone.seed,
                prototypes: c.data.proto_seed,
            },
            step: self.step,
            adam_step: self.adam.step,
            has_pool: self.store.contains(POOL_KEYS) && self.store.contains(POOL_VALUES),
            config: c.clone(),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let manifest = self.manifest();
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        if manifest.has_pool {
            let pool = PromptPool::from_parts(
                self.store.get(POOL_KEYS)?.clone(),
                self.store.get(POOL_VALUES)?.clone(),
            )?;
            pool.write_to(w).map_err(io)?;
        }
        let mut blocks: Vec<(String, &[usize], &[f64])> = Vec::new();
        for (name, t) in self.store.iter() {
            if manifest.has_pool && (name == POOL_KEYS || name == POOL_VALUES) {
                continue;
            }
            blocks.push((name.to_string(), t.shape(), t.data()));
        }
        let shapes: IndexMap<&str, &[usize]> = self.store.iter().map(|(n, t)| (n, t.shape())).collect();
        for (name, (m, v)) in &self.adam.moments {
            let shape = shapes
                .get(name.as_str())
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter {name}")))?;
            blocks.push((format!("{ADAM_M}{name}"), shape, m));
            blocks.push((format!("{ADAM_V}{name}"), shape, v));
        }
        w.write_all(&(blocks.len() as u64).to_le_bytes()).map_err(io)?;
        for (name, shape, data) in blocks {
            write_block(w, &name, shape, data).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 5];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let len = read_u64(r)? as usize;
        if len > 1 << 26 {
            return Err(Error::Checkpoint(format!("manifest length {len} is implausible")));
        }
        let mut json = vec![0u8; len];
        read_exact(r, &mut json)?;
        let manifest: Manifest =
            serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        let mut store = ParamStore::new();
        if manifest.has_pool {
            let (k, v) = PromptPool::read_from(r)?.into_parts();
            store.insert(POOL_KEYS, k);
            store.insert(POOL_VALUES, v);
        }
        let n = read_u64(r)?;
        let mut m_blocks = IndexMap::new();
        let mut v_blocks = IndexMap::new();
        for _ in 0..n {
            let (name, t) = read_block(r)?;
            if let Some(p) = name.strip_prefix(ADAM_M) {
                m_blocks.insert(p.to_string(), t.into_data());
            } else if let Some(p) = name.strip_prefix(ADAM_V) {
                v_blocks.insert(p.to_string(), t.into_data());
            } else {
                store.insert(name, t);
            }
        }
        let mut moments = IndexMap::new();
        for (name, m) in m_blocks {
            let v = v_blocks
                .shift_remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing second moment for {name}")))?;
            moments.insert(name, (m, v));
        }
        if let Some(name) = v_blocks.keys().next() {
            return Err(Error::Checkpoint(format!("missing first moment for {name}")));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| Error::Checkpoint(e.to_string()))? != 0 {
            return Err(Error::Checkpoint("trailing bytes after last block".into()));
        }
        manifest.config.validate()?;
        Ok(Self {
            config: manifest.config,
            step: manifest.step,
            store,
            adam: AdamState {
                step: manifest.adam_step,
                moments,
            },
        })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        {
            let f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = BufWriter::new(f);
            self.write_to(&mut w)?;
            w.flush().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(f))
    }
}

/// Writes a bare block file (magic, block count, blocks) holding a store.
pub fn save_store(store: &ParamStore, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    {
        let f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(f);
        let io = |e| Error::io(&tmp, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&0u64.to_le_bytes()).map_err(io)?;
        w.write_all(&(store.len() as u64).to_le_bytes()).map_err(io)?;
        for (name, t) in store.iter() {
            write_block(&mut w, name, t.shape(), t.data()).map_err(io)?;
        }
        w.flush().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_store(path: &Path) -> Result<ParamStore> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut magic = [0u8; 5];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC || read_u64(&mut r)? != 0 {
        return Err(Error::Checkpoint(format!("{} is not a parameter file", path.display())));
    }
    let n = read_u64(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let (name, t) = read_block(&mut r)?;
        store.insert(name, t);
    }
    Ok(store)
}

fn write_block<W: Write>(w: &mut W, name: &str, shape: &[usize], data: &[f64]) -> std::io::Result<()> {
    w.write_all(&(name.len() as u64).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(shape.len() as u64).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for x in data {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_block<R: Read>(r: &mut R) -> Result<(String, Tensor)> {
    let len = read_u64(r)? as usize;
    if len > 4096 {
        return Err(Error::Checkpoint(format!("block name length {len} is implausible")));
    }
    let mut name = vec![0u8; len];
    read_exact(r, &mut name)?;
    let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("block name is not UTF-8".into()))?;
    let rank = read_u64(r)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Checkpoint(format!("block {name}: rank {rank} unsupported")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(r)? as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n <= 1 << 30)
        .ok_or_else(|| Error::Checkpoint(format!("block {name}: shape {shape:?} too large")))?;
    let mut bytes = vec![0u8; numel * 8];
    read_exact(r, &mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("block {name}: {e}")))?;
    Ok((name, t))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let config = TrainConfig::smoke();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let backbone = config.lm_config().init_backbone(&mut rng);
        let model = Model::new(config.model_config(), config.vocab(), backbone, 5).unwrap();
        let mut moments = IndexMap::new();
        let t = model.store.get("adapter.w_q").unwrap();
        moments.insert(
            "adapter.w_q".to_string(),
            (vec![0.5; t.numel()], vec![0.25; t.numel()]),
        );
        Checkpoint {
            config,
            step: 17,
            store: model.store,
            adam: AdamState { step: 17, moments },
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..5], b"LSTN1");
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let ck = sample();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read_from(&mut bad.as_slice()), Err(Error::Checkpoint(_))));
        let cut = &buf[..buf.len() - 3];
        assert!(Checkpoint::read_from(&mut &cut[..]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(Checkpoint::read_from(&mut extra.as_slice()).is_err());
    }

    #[test]
    fn store_file_round_trip() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("backbone.bin");
        save_store(&ck.store, &path).unwrap();
        assert_eq!(load_store(&path).unwrap(), ck.store);
        let ck_path = dir.path().join("a/b/run.ckpt");
        ck.save(&ck_path).unwrap();
        assert_eq!(Checkpoint::load(&ck_path).unwrap(), ck);
    }
}
