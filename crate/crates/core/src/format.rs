//! Shared helpers for the binary artifact formats.
//!
//! Every binary artifact ends with a trailing little-endian u64 FNV-1a hash of
//! all preceding bytes. Loaders verify it and warn (stderr) on mismatch rather
//! than failing, so a hand-edited file still loads but announces itself.

use std::io::Read;

use crate::error::{Error, Result};

pub const FNV_OFFSET: u64 = 0xcbf29ce484222325;
pub const FNV_PRIME: u64 = 0x100000001b3;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Append the integrity hash to a fully serialized artifact body.
pub fn seal(mut body: Vec<u8>) -> Vec<u8> {
    let h = fnv1a(&body);
    body.extend_from_slice(&h.to_le_bytes());
    body
}

/// Split an artifact into (body, stored hash), verifying length.
pub fn unseal(bytes: &[u8], what: &str) -> Result<(Vec<u8>, bool)> {
    if bytes.len() < 8 {
        return Err(Error::Format(format!("{what}: file too short")));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let ok = fnv1a(body) == stored;
    if !ok {
        eprintln!("warning: {what}: stored config hash does not match contents");
    }
    Ok((body.to_vec(), ok))
}

pub fn expect_magic(r: &mut impl Read, magic: &[u8; 4], what: &str) -> Result<()> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format(format!("{what}: missing magic")))?;
    if &buf != magic {
        return Err(Error::Format(format!(
            "{what}: bad magic {:?} (expected {:?})",
            buf, magic
        )));
    }
    Ok(())
}
