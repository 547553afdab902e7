//! Checkpoint directory: `manifest.json` plus one raw little-endian section
//! file per parameter group family and one for the optimizer moments.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{hex, TrainConfig};
use super::model::PgSeg;
use super::train::EpochLog;
use crate::autodiff::Real;
use crate::error::{ensure, Error, Result};
use crate::nn::{AdamW, ParamGroup, ParamStore};

pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT_VERSION: u32 = 1;
const SECTIONS: [&str; 4] = ["backbone", "adapters", "decoder", "optimizer"];

pub fn section_of(group: ParamGroup) -> &'static str {
    match group {
        ParamGroup::Backbone => "backbone",
        ParamGroup::Adapter => "adapters",
        _ => "decoder",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub trainable: bool,
    pub section: String,
    /// Element offset inside the section file.
    pub offset: usize,
    /// Element offset of `(m, v)` in the optimizer section, if updated.
    pub moments: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dtype: String,
    pub config: TrainConfig,
    pub config_hash: String,
    pub step: u64,
    pub epoch: usize,
    pub lambda_step: Option<f64>,
    pub trainable_params: usize,
    pub tensors: Vec<TensorEntry>,
    /// SHA-256 of each section file.
    pub digests: BTreeMap<String, String>,
    pub history: Vec<EpochLog>,
}

/// Everything needed to continue training or run inference.
pub struct Checkpoint<T: Real> {
    pub config: TrainConfig,
    pub model: PgSeg,
    pub store: ParamStore<T>,
    pub optimizer: AdamW<T>,
    pub epoch: usize,
    pub history: Vec<EpochLog>,
}

fn push<T: Real>(buf: &mut Vec<u8>, a: &ArrayD<T>) {
    a.iter().for_each(|&v| v.write_le(buf));
}

pub fn save<T: Real>(
    dir: &Path,
    config: &TrainConfig,
    model: &PgSeg,
    store: &ParamStore<T>,
    optimizer: &AdamW<T>,
    epoch: usize,
    history: &[EpochLog],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bufs: BTreeMap<&str, Vec<u8>> = SECTIONS.iter().map(|s| (*s, Vec::new())).collect();
    let mut tensors = Vec::with_capacity(store.len());
    for (id, p) in store.iter() {
        let section = section_of(p.group);
        let buf = bufs.get_mut(section).expect("section");
        let offset = buf.len() / T::BYTES;
        push(buf, &p.value);
        let moments = optimizer.moments(id).map(|(m, v)| {
            let opt = bufs.get_mut("optimizer").expect("section");
            let at = opt.len() / T::BYTES;
            push(opt, m);
            push(opt, v);
            at
        });
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            group: p.group,
            trainable: p.trainable,
            section: section.into(),
            offset,
            moments,
        });
    }
    let mut digests = BTreeMap::new();
    for (name, bytes) in &bufs {
        let path = dir.join(format!("{name}.bin"));
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        digests.insert(name.to_string(), hex(&Sha256::digest(bytes)));
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        dtype: T::DTYPE.into(),
        config: config.clone(),
        config_hash: config.hash(),
        step: optimizer.step,
        epoch,
        lambda_step: model.refiner.as_ref().map(|r| r.lambda(store).as_f64()),
        trainable_params: store.trainable_count(),
        tensors,
        digests,
        history: history.to_vec(),
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::load(&path, e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| Error::load(&path, format!("bad manifest: {e}")))
}

pub fn exists(dir: &Path) -> bool {
    dir.join(MANIFEST).is_file()
}

fn read_array<T: Real>(bytes: &[u8], offset: usize, shape: &[usize], path: &Path) -> Result<ArrayD<T>> {
    let n: usize = shape.iter().product();
    let (start, end) = (offset * T::BYTES, (offset + n) * T::BYTES);
    ensure!(end <= bytes.len(), Error::load(path, format!("section too short for tensor at element {offset}")));
    let data = bytes[start..end].chunks_exact(T::BYTES).map(T::read_le).collect();
    Ok(ArrayD::from_shape_vec(IxDyn(shape), data).expect("length checked"))
}

pub fn load<T: Real>(dir: &Path) -> Result<Checkpoint<T>> {
    let manifest = read_manifest(dir)?;
    let mpath = dir.join(MANIFEST);
    ensure!(
        manifest.version == CHECKPOINT_VERSION,
        Error::load(&mpath, format!("unsupported checkpoint version {}", manifest.version))
    );
    ensure!(
        manifest.dtype == T::DTYPE,
        Error::load(&mpath, format!("checkpoint holds {} values, loader wants {}", manifest.dtype, T::DTYPE))
    );
    manifest.config.validate()?;
    ensure!(
        manifest.config.hash() == manifest.config_hash,
        Error::load(&mpath, "config hash does not match the stored config")
    );
    let mut bufs = BTreeMap::new();
    for name in SECTIONS {
        let path = dir.join(format!("{name}.bin"));
        let bytes = fs::read(&path).map_err(|e| Error::load(&path, e.to_string()))?;
        ensure!(
            manifest.digests.get(name) == Some(&hex(&Sha256::digest(&bytes))),
            Error::load(&path, "section digest mismatch")
        );
        bufs.insert(name, (path, bytes));
    }
    let cfg = &manifest.config;
    let placeholder = Array1::from_elem(cfg.model.text_dim, 1.0);
    let (model, mut store) = PgSeg::new::<T>(&cfg.model, cfg.ablation, &placeholder, cfg.seed)?;
    ensure!(
        store.len() == manifest.tensors.len(),
        Error::load(&mpath, format!("manifest has {} tensors, model has {}", manifest.tensors.len(), store.len()))
    );
    let mut optimizer = AdamW::new(cfg.optimizer.clone(), store.len());
    optimizer.step = manifest.step;
    for entry in &manifest.tensors {
        let id = store.find(&entry.name).ok_or_else(|| Error::load(&mpath, format!("unknown tensor {}", entry.name)))?;
        ensure!(
            store.value(id).shape() == entry.shape.as_slice(),
            Error::load(&mpath, format!("{}: shape {:?} vs model {:?}", entry.name, entry.shape, store.value(id).shape()))
        );
        let (path, bytes) = bufs.get(entry.section.as_str()).ok_or_else(|| Error::load(&mpath, "unknown section"))?;
        *store.value_mut(id) = read_array(bytes, entry.offset, &entry.shape, path)?;
        if let Some(at) = entry.moments {
            let (opath, obytes) = &bufs["optimizer"];
            let n: usize = entry.shape.iter().product();
            let m = read_array(obytes, at, &entry.shape, opath)?;
            let v = read_array(obytes, at + n, &entry.shape, opath)?;
            optimizer.set_moments(id, m, v);
        }
    }
    Ok(Checkpoint {
        config: manifest.config,
        model,
        store,
        optimizer,
        epoch: manifest.epoch,
        history: manifest.history,
    })
}
