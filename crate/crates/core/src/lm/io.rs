//! Weights file format: config header, named-tensor manifest, f32 blob.
//!
//! Tied parameters occupy a single store slot, so they serialize once and the
//! aliasing survives a round trip by construction (the wiring is rebuilt from
//! the config, not from the file).

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::format;
use crate::scalar::Scalar;

use super::{LmConfig, LmWeights, ModelKind};

const MAGIC: &[u8; 4] = b"VRLM";
const VERSION: u16 = 1;

pub fn save_weights<S: Scalar>(w: &LmWeights<S>, path: &Path) -> Result<()> {
    let mut body: Vec<u8> = Vec::new();
    body.extend_from_slice(MAGIC);
    body.write_u16::<LittleEndian>(VERSION)?;
    body.write_u8(match w.kind {
        ModelKind::Ar => 0,
        ModelKind::Nar => 1,
    })?;
    let c = &w.config;
    body.write_u32::<LittleEndian>(c.layers as u32)?;
    body.write_u32::<LittleEndian>(c.heads as u32)?;
    body.write_u32::<LittleEndian>(c.dim as u32)?;
    body.write_u32::<LittleEndian>(c.ffn_dim as u32)?;
    body.write_f32::<LittleEndian>(c.dropout as f32)?;
    body.write_u32::<LittleEndian>(c.max_seq as u32)?;
    body.write_u32::<LittleEndian>(c.acoustic_k as u32)?;
    body.write_u16::<LittleEndian>(c.phoneme_vocab)?;

    let ids: Vec<_> = w.store.ids().collect();
    body.write_u32::<LittleEndian>(ids.len() as u32)?;
    let mut offset = 0u64;
    for &id in &ids {
        let t = w.store.value(id);
        let name = w.store.name(id).as_bytes();
        body.write_u16::<LittleEndian>(name.len() as u16)?;
        body.extend_from_slice(name);
        body.write_u32::<LittleEndian>(t.rows as u32)?;
        body.write_u32::<LittleEndian>(t.cols as u32)?;
        body.write_u64::<LittleEndian>(offset)?;
        offset += (t.data.len() * 4) as u64;
    }
    body.write_u64::<LittleEndian>(offset)?;
    for &id in &ids {
        for &v in &w.store.value(id).data {
            body.write_f32::<LittleEndian>(v.as_f32())?;
        }
    }
    std::fs::write(path, format::seal(body))?;
    Ok(())
}

pub fn load_weights<S: Scalar>(path: &Path, expect_kind: ModelKind) -> Result<LmWeights<S>> {
    let bytes = std::fs::read(path).map_err(|e| {
        Error::Load(format!("cannot read weights file {}: {e}", path.display()))
    })?;
    let (body, _hash_ok) = format::unseal(&bytes, "weights file")?;
    let mut r = Cursor::new(body.as_slice());
    format::expect_magic(&mut r, MAGIC, "weights file")?;
    let version = r.read_u16::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Format(format!("weights version {version} unsupported")));
    }
    let kind = match r.read_u8()? {
        0 => ModelKind::Ar,
        1 => ModelKind::Nar,
        k => return Err(Error::Format(format!("unknown model kind byte {k}"))),
    };
    if kind != expect_kind {
        return Err(Error::Load(format!(
            "weights file holds a {kind:?} model, expected {expect_kind:?}"
        )));
    }
    let config = LmConfig {
        layers: r.read_u32::<LittleEndian>()? as usize,
        heads: r.read_u32::<LittleEndian>()? as usize,
        dim: r.read_u32::<LittleEndian>()? as usize,
        ffn_dim: r.read_u32::<LittleEndian>()? as usize,
        dropout: r.read_f32::<LittleEndian>()? as f64,
        max_seq: r.read_u32::<LittleEndian>()? as usize,
        acoustic_k: r.read_u32::<LittleEndian>()? as usize,
        phoneme_vocab: r.read_u16::<LittleEndian>()?,
    };
    let mut w = match kind {
        ModelKind::Ar => LmWeights::<S>::new_ar(config, 0)?,
        ModelKind::Nar => LmWeights::<S>::new_nar(config, 0)?,
    };

    let count = r.read_u32::<LittleEndian>()? as usize;
    if count != w.store.len() {
        return Err(Error::Format(format!(
            "weights manifest has {count} tensors, model defines {}",
            w.store.len()
        )));
    }
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.read_u16::<LittleEndian>()? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("non-utf8 tensor name".into()))?;
        let rows = r.read_u32::<LittleEndian>()? as usize;
        let cols = r.read_u32::<LittleEndian>()? as usize;
        let offset = r.read_u64::<LittleEndian>()? as usize;
        manifest.push((name, rows, cols, offset));
    }
    let blob_len = r.read_u64::<LittleEndian>()? as usize;
    let mut blob = vec![0u8; blob_len];
    r.read_exact(&mut blob)
        .map_err(|_| Error::Format("weights blob truncated".into()))?;

    for (id, (name, rows, cols, offset)) in w.store.ids().collect::<Vec<_>>().into_iter().zip(manifest) {
        let expect_name = w.store.name(id).to_string();
        let t = w.store.value_mut(id);
        if name != expect_name || t.rows != rows || t.cols != cols {
            return Err(Error::Format(format!(
                "tensor {name} ({rows}x{cols}) does not match model slot {expect_name} ({}x{})",
                t.rows, t.cols
            )));
        }
        let mut cur = Cursor::new(&blob[offset..offset + rows * cols * 4]);
        for v in t.data.iter_mut() {
            *v = S::from_f32(cur.read_f32::<LittleEndian>()?);
        }
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> LmConfig {
        LmConfig {
            layers: 1,
            heads: 2,
            dim: 8,
            ffn_dim: 16,
            dropout: 0.0,
            max_seq: 32,
            acoustic_k: 4,
            phoneme_vocab: 4,
        }
    }

    #[test]
    fn weights_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vrlm");
        let w = LmWeights::<f32>::new_ar(tiny_config(), 5).unwrap();
        save_weights(&w, &path).unwrap();
        let back = load_weights::<f32>(&path, ModelKind::Ar).unwrap();
        assert_eq!(back.config, w.config);
        for id in w.store.ids() {
            assert_eq!(back.store.value(id).data, w.store.value(id).data);
        }
    }

    #[test]
    fn kind_mismatch_is_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vrlm");
        let w = LmWeights::<f32>::new_nar(tiny_config(), 5).unwrap();
        save_weights(&w, &path).unwrap();
        match load_weights::<f32>(&path, ModelKind::Ar) {
            Err(Error::Load(_)) => {}
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn nar_tying_survives_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vrlm");
        let w = LmWeights::<f32>::new_nar(tiny_config(), 5).unwrap();
        save_weights(&w, &path).unwrap();
        let mut back = load_weights::<f32>(&path, ModelKind::Nar).unwrap();
        let nar = back.nar().unwrap().clone();
        back.store.value_mut(nar.heads[0]).row_mut(0)[0] = 42.0;
        assert_eq!(back.store.value(nar.acoustic_embs[2]).row(0)[0], 42.0);
    }
}
