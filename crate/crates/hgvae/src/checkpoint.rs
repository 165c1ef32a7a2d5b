//! Versioned binary checkpoint container, shared by both model kinds.
//!
//! Layout (integers little-endian):
//!   magic "HGV1" | version u32 | kind u8 (0 hierarchical, 1 baseline) |
//!   config_len u32 | config key=value text |
//!   param_count u32 | per parameter:
//!     name_len u32 | name | rank u32 | dims u32.. | values f64 LE
//!
//! Loading rebuilds the model skeleton from the embedded config, then
//! fills every parameter by name; missing or extra names are errors.
//! Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::baseline::{BaselineConfig, BaselineVae};
use crate::config::{model_config_from_kv, model_config_to_kv, KvMap};
use crate::error::{Error, Result};
use crate::model::{HgVae, ModelConfig};
use crate::tensor::{ParamStore, Real, Tensor};

const MAGIC: [u8; 4] = *b"HGV1";
const VERSION: u32 = 1;

/// Either trained model, as stored in a checkpoint.
pub enum Checkpoint {
    Hierarchical(HgVae),
    Baseline(BaselineVae),
}

impl Checkpoint {
    pub fn store(&self) -> &ParamStore {
        match self {
            Checkpoint::Hierarchical(m) => m.store(),
            Checkpoint::Baseline(m) => m.store(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            Checkpoint::Hierarchical(m) => m.parameter_count(),
            Checkpoint::Baseline(m) => m.parameter_count(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Checkpoint::Hierarchical(_) => "hgvae",
            Checkpoint::Baseline(_) => "vae-baseline",
        }
    }

    pub fn config_text(&self) -> String {
        match self {
            Checkpoint::Hierarchical(m) => model_config_to_kv(m.config()).to_text(),
            Checkpoint::Baseline(m) => m.config().to_kv().to_text(),
        }
    }
}

fn write_store(w: &mut impl Write, store: &ParamStore) -> Result<()> {
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let value = store.value(id);
        w.write_all(&(value.shape().len() as u32).to_le_bytes())?;
        for &d in value.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in value.data() {
            w.write_all(&(v as f64).to_le_bytes())?;
        }
    }
    Ok(())
}

fn save_parts(path: &Path, kind: u8, config_text: &str, store: &ParamStore) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[kind])?;
    let cb = config_text.as_bytes();
    w.write_all(&(cb.len() as u32).to_le_bytes())?;
    w.write_all(cb)?;
    write_store(&mut w, store)?;
    w.flush()?;
    Ok(())
}

/// Save a hierarchical model without taking ownership.
pub fn save_hgvae(path: &Path, model: &HgVae) -> Result<()> {
    save_parts(
        path,
        0,
        &model_config_to_kv(model.config()).to_text(),
        model.store(),
    )
}

/// Save a baseline model without taking ownership.
pub fn save_baseline(path: &Path, model: &BaselineVae) -> Result<()> {
    save_parts(path, 1, &model.config().to_kv().to_text(), model.store())
}

pub fn save(path: &Path, model: &Checkpoint) -> Result<()> {
    match model {
        Checkpoint::Hierarchical(m) => save_hgvae(path, m),
        Checkpoint::Baseline(m) => save_baseline(path, m),
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated(what.to_string())
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_store_into(r: &mut impl Read, store: &mut ParamStore) -> Result<()> {
    let count = read_u32(r, "parameter count")? as usize;
    if count != store.len() {
        return Err(Error::Parse(format!(
            "checkpoint holds {count} parameters but the config implies {}",
            store.len()
        )));
    }
    let mut seen = vec![false; store.len()];
    for _ in 0..count {
        let name_len = read_u32(r, "parameter name length")? as usize;
        let mut name = vec![0u8; name_len];
        read_exact(r, &mut name, "parameter name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Parse("checkpoint: non-utf8 parameter name".into()))?;
        let rank = read_u32(r, "parameter rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r, "parameter dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut buf = vec![0u8; numel * 8];
        read_exact(r, &mut buf, &format!("values of `{name}`"))?;
        let data: Vec<Real> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Real)
            .collect();
        let id = store
            .lookup(&name)
            .ok_or_else(|| Error::Parse(format!("checkpoint names unknown parameter `{name}`")))?;
        if store.value(id).shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "checkpoint load",
                lhs: shape,
                rhs: store.value(id).shape().to_vec(),
            });
        }
        *store.value_mut(id) = Tensor::new(shape, data)?;
        seen[id.index()] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Parse(format!(
            "checkpoint does not cover parameter `{}`",
            store.name(crate::tensor::ParamId(missing))
        )));
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::BadVersion {
            expected: VERSION,
            found: version,
        });
    }
    let mut kind = [0u8; 1];
    read_exact(&mut r, &mut kind, "model kind")?;
    let config_len = read_u32(&mut r, "config length")? as usize;
    let mut cfg_bytes = vec![0u8; config_len];
    read_exact(&mut r, &mut cfg_bytes, "config text")?;
    let cfg_text = String::from_utf8(cfg_bytes)
        .map_err(|_| Error::Parse("checkpoint: non-utf8 config".into()))?;
    let kv = KvMap::parse(&cfg_text)?;
    let mut model = match kind[0] {
        0 => {
            let cfg: ModelConfig = model_config_from_kv(&kv)?;
            Checkpoint::Hierarchical(HgVae::init(cfg, 0)?)
        }
        1 => {
            let cfg = BaselineConfig::from_kv(&kv)?;
            Checkpoint::Baseline(BaselineVae::init(cfg, 0)?)
        }
        other => {
            return Err(Error::Parse(format!(
                "checkpoint: unknown model kind {other}"
            )))
        }
    };
    match &mut model {
        Checkpoint::Hierarchical(m) => read_store_into(&mut r, m.store_mut())?,
        Checkpoint::Baseline(m) => read_store_into(&mut r, m.store_mut())?,
    }
    Ok(model)
}
