//! Checkpoint directories: `manifest.txt` (`key=value` lines) next to
//! `params.bin`, a sequence of little-endian records
//! `name_len u32 | name | rank u32 | dims u32×rank | f32×∏dims`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{M3pt, ModelShape};
use crate::params::{ParamStore, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const PARAMS_FILE: &str = "params.bin";

/// Versions of the modules whose parameter layout a checkpoint depends on.
pub const MODULE_VERSIONS: [(&str, u32); 4] = [("encoders", 1), ("tif", 1), ("matcher", 1), ("die", 1)];

pub type Manifest = BTreeMap<String, String>;

/// Manifest entries shared by every checkpoint kind.
pub fn base_manifest(kind: &str, config: &ModelConfig, shape: ModelShape, step: u64) -> Manifest {
    let mut m = config.to_manifest();
    m.insert("format_version".into(), FORMAT_VERSION.to_string());
    m.insert("kind".into(), kind.into());
    for (module, v) in MODULE_VERSIONS {
        m.insert(format!("module.{module}"), v.to_string());
    }
    m.insert("step".into(), step.to_string());
    m.insert("shape.token_vocab_size".into(), shape.token_vocab_size.to_string());
    m.insert("shape.grid_size".into(), shape.grid_size.to_string());
    m.insert("shape.channels".into(), shape.channels.to_string());
    m
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let mut out = String::new();
    for (k, v) in manifest {
        if k.contains('=') || k.contains('\n') || v.contains('\n') {
            return Err(Error::Checkpoint(format!("manifest entry {k} not representable")));
        }
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut m = Manifest::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: "expected key=value".into(),
        })?;
        m.insert(k.to_string(), v.to_string());
    }
    Ok(m)
}

fn manifest_get<'a>(m: &'a Manifest, key: &str) -> Result<&'a str> {
    m.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("manifest lacks {key}")))
}

fn manifest_num<T: std::str::FromStr>(m: &Manifest, key: &str) -> Result<T> {
    manifest_get(m, key)?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("manifest value for {key} is not a number")))
}

/// Checks the format and module versions and the checkpoint kind.
pub fn check_versions(m: &Manifest, kind: &str) -> Result<()> {
    let version: u32 = manifest_num(m, "format_version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    for (module, v) in MODULE_VERSIONS {
        let found: u32 = manifest_num(m, &format!("module.{module}"))?;
        if found != v {
            return Err(Error::Checkpoint(format!(
                "module {module} version {found}, expected {v}"
            )));
        }
    }
    let found = manifest_get(m, "kind")?;
    if found != kind {
        return Err(Error::Checkpoint(format!("checkpoint kind {found}, expected {kind}")));
    }
    Ok(())
}

pub fn shape_from_manifest(m: &Manifest) -> Result<ModelShape> {
    Ok(ModelShape {
        token_vocab_size: manifest_num(m, "shape.token_vocab_size")?,
        grid_size: manifest_num(m, "shape.grid_size")?,
        channels: manifest_num(m, "shape.channels")?,
    })
}

pub fn step_from_manifest(m: &Manifest) -> Result<u64> {
    manifest_num(m, "step")
}

pub fn encode_params(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(store.num_scalars() * 4 + store.len() * 32);
    for (_, p) in store.iter() {
        out.extend((p.name.len() as u32).to_le_bytes());
        out.extend(p.name.as_bytes());
        out.extend(2u32.to_le_bytes());
        out.extend((p.value.nrows() as u32).to_le_bytes());
        out.extend((p.value.ncols() as u32).to_le_bytes());
        for &x in p.value.iter() {
            out.extend((x as f32).to_le_bytes());
        }
    }
    out
}

/// One decoded `params.bin` record.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<Vec<ParamRecord>> {
    let corrupt = |what: &str, at: usize| Error::Checkpoint(format!("corrupt header: {what} at byte {at}"));
    let mut cur = Cursor { bytes, pos: 0 };
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let at = cur.pos;
        let len = cur.u32().ok_or_else(|| corrupt("name length", at))? as usize;
        let name = cur.take(len).ok_or_else(|| corrupt("name", at))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| corrupt("non-UTF-8 name", at))?;
        let rank = cur.u32().ok_or_else(|| corrupt("rank", at))? as usize;
        if rank > 8 {
            return Err(corrupt("rank", at));
        }
        let dims = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| corrupt("dims", at))?;
        let count: usize = dims.iter().product();
        let available = (bytes.len() - cur.pos) / 4;
        if available < count {
            return Err(Error::ShapeMismatch {
                what: format!("{name} payload"),
                expected: dims,
                found: vec![available],
            });
        }
        let payload = cur.take(count * 4).expect("length checked");
        let values = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        out.push(ParamRecord { name, dims, values });
    }
    Ok(out)
}

/// Overwrites every parameter of `store` from `records`, which must name
/// each parameter exactly once with the same shape.
pub fn apply_records(store: &mut ParamStore, records: Vec<ParamRecord>) -> Result<()> {
    if records.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "{} parameter records, model has {}",
            records.len(),
            store.len()
        )));
    }
    for rec in records {
        let id = store
            .id(&rec.name)
            .ok_or_else(|| Error::UnknownParam(rec.name.clone()))?;
        let current = store.get(id);
        let expected = vec![current.nrows(), current.ncols()];
        if rec.dims != expected {
            return Err(Error::ShapeMismatch {
                what: rec.name,
                expected,
                found: rec.dims,
            });
        }
        let value = Tensor::from_shape_vec((expected[0], expected[1]), rec.values.iter().map(|&x| x as f64).collect())
            .expect("shape checked");
        store.set(id, value)?;
    }
    Ok(())
}

pub fn save_store(dir: &Path, manifest: &Manifest, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_manifest(&dir.join(MANIFEST_FILE), manifest)?;
    let path = dir.join(PARAMS_FILE);
    fs::write(&path, encode_params(store)).map_err(|e| Error::io(&path, e))
}

pub fn load_store_into(dir: &Path, store: &mut ParamStore) -> Result<()> {
    let path = dir.join(PARAMS_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    apply_records(store, decode_params(&bytes)?)
}

pub const M3PT_KIND: &str = "m3pt";

pub fn save_checkpoint(model: &M3pt, dir: &Path, step: u64) -> Result<()> {
    let manifest = base_manifest(M3PT_KIND, &model.config, model.shape, step);
    save_store(dir, &manifest, &model.store)
}

/// Rebuilds the model described by the manifest and fills in its
/// parameters. Returns the model and the recorded step count.
pub fn load_checkpoint(dir: &Path) -> Result<(M3pt, u64)> {
    let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
    check_versions(&manifest, M3PT_KIND)?;
    let config = ModelConfig::from_manifest(&manifest)?;
    let shape = shape_from_manifest(&manifest)?;
    let mut model = M3pt::new(config, shape)?;
    load_store_into(dir, &mut model.store)?;
    Ok((model, step_from_manifest(&manifest)?))
}
