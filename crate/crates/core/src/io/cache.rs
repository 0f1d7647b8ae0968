use std::path::Path;

use crate::encoder::KvPrefix;
use crate::error::{Error, Result};
use crate::io::container::TensorContainer;
use crate::regcache::{DeletionRule, Provenance, RegisterCache};

pub const CACHE_FORMAT: &str = "register_cache";
pub const CACHE_VERSION: &str = "1";

/// Serializes a register cache: one key and one value tensor per block plus metadata.
pub fn save_register_cache(cache: &RegisterCache<f32>) -> Result<Vec<u8>> {
    cache
        .validate()
        .map_err(|e| Error::Format(format!("cannot serialize register cache: {e}")))?;
    let mut c = TensorContainer::new();
    let (start, end) = cache.insertion_range();
    let meta = &mut c.metadata;
    meta.insert("format".into(), CACHE_FORMAT.into());
    meta.insert("version".into(), CACHE_VERSION.into());
    meta.insert("tau".into(), cache.prefix.tau.to_string());
    meta.insert("insertion_start".into(), start.to_string());
    meta.insert("insertion_end".into(), end.to_string());
    meta.insert("deletion.block".into(), cache.deletion.block.to_string());
    meta.insert("deletion.k_tilde".into(), cache.deletion.k_tilde.to_string());
    meta.insert("deletion.protect_cls".into(), cache.deletion.protect_cls.to_string());
    meta.insert("provenance.image_id".into(), cache.provenance.image_id.clone());
    meta.insert(
        "provenance.token_index".into(),
        cache.provenance.token_index.to_string(),
    );
    meta.insert("provenance.l_q".into(), cache.provenance.l_q.to_string());
    for (i, (k, v)) in cache.prefix.kv.iter().enumerate() {
        let b = start + i;
        c.insert(format!("kv.{b}.k"), k.clone());
        c.insert(format!("kv.{b}.v"), v.clone());
    }
    Ok(c.to_bytes())
}

pub fn load_register_cache(bytes: &[u8]) -> Result<RegisterCache<f32>> {
    let c = TensorContainer::from_bytes(bytes)?;
    let get = |key: &str| {
        c.metadata
            .get(key)
            .ok_or_else(|| Error::Format(format!("register cache missing metadata {key}")))
    };
    let num = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| Error::Format(format!("metadata {key} is not an integer")))
    };
    if get("format")? != CACHE_FORMAT {
        return Err(Error::Format("not a register cache".into()));
    }
    let version = get("version")?;
    if version != CACHE_VERSION {
        return Err(Error::Format(format!(
            "register cache version {version}, expected {CACHE_VERSION}"
        )));
    }
    let (start, end) = (num("insertion_start")?, num("insertion_end")?);
    if end < start {
        return Err(Error::Format(format!("empty insertion range {start}..={end}")));
    }
    let mut kv = Vec::new();
    for b in start..=end {
        let k = c.get(&format!("kv.{b}.k"));
        let v = c.get(&format!("kv.{b}.v"));
        match (k, v) {
            (Some(k), Some(v)) => kv.push((k.clone(), v.clone())),
            _ => return Err(Error::Format(format!("missing key/value tensors for block {b}"))),
        }
    }
    if c.len() != 2 * kv.len() {
        return Err(Error::Format("tensors outside the insertion range".into()));
    }
    let protect_cls = match get("deletion.protect_cls")?.as_str() {
        "true" => true,
        "false" => false,
        other => return Err(Error::Format(format!("bad protect_cls {other:?}"))),
    };
    let cache = RegisterCache {
        prefix: KvPrefix {
            start_block: start,
            kv,
            tau: num("tau")?,
        },
        deletion: DeletionRule {
            block: num("deletion.block")?,
            k_tilde: num("deletion.k_tilde")?,
            protect_cls,
        },
        provenance: Provenance {
            image_id: get("provenance.image_id")?.clone(),
            token_index: num("provenance.token_index")?,
            l_q: get("provenance.l_q")?
                .parse()
                .map_err(|e: Error| Error::Format(e.to_string()))?,
        },
    };
    cache
        .validate()
        .map_err(|e| Error::Format(format!("inconsistent register cache: {e}")))?;
    Ok(cache)
}

pub fn write_register_cache(cache: &RegisterCache<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, save_register_cache(cache)?).map_err(|e| Error::io(path, e))
}

pub fn read_register_cache(path: impl AsRef<Path>) -> Result<RegisterCache<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_register_cache(&bytes)
}
