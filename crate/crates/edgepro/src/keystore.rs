//! Key persistence. Keys serialize to a canonical little-endian byte layout
//! and are stored at rest sealed with a passphrase: Argon2id derives a
//! 256-bit key that encrypts the serialized bytes under XChaCha20-Poly1305.
//!
//! Sealed file layout:
//! `"EPKY" | version u16 | salt[16] | m_cost u32 | t_cost u32 | p_cost u32 |
//! nonce[24] | ct_len u64 | ciphertext+tag`

use std::collections::BTreeMap;
use std::path::Path;

use argon2::{Algorithm, Argon2, Params, Version};
use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{XChaCha20Poly1305, XNonce};
use rand::rngs::OsRng;
use rand::RngCore;

use crate::error::{Error, Result};
use crate::lock::{AuthorizationKey, LayerKey};
use crate::network::Cursor;

const KEY_MAGIC: &[u8; 4] = b"EPKY";
const KEY_VERSION: u16 = 1;
const SALT_LEN: usize = 16;
const NONCE_LEN: usize = 24;

/// Argon2id cost ceilings accepted when opening a sealed file, so a
/// corrupted or hostile header cannot demand unbounded work.
const MAX_M_COST_KIB: u32 = 262_144;
const MAX_T_COST: u32 = 64;
const MAX_P_COST: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KdfParams {
    pub m_cost_kib: u32,
    pub t_cost: u32,
    pub p_cost: u32,
}

impl Default for KdfParams {
    fn default() -> Self {
        KdfParams {
            m_cost_kib: 19_456,
            t_cost: 2,
            p_cost: 1,
        }
    }
}

/// Canonical plaintext encoding of a key. Deterministic: the same key always
/// produces the same bytes.
pub fn serialize_key(key: &AuthorizationKey) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&KEY_VERSION.to_le_bytes());
    buf.extend_from_slice(&key.rho_percent.to_le_bytes());
    buf.extend_from_slice(&key.value_range.0.to_le_bytes());
    buf.extend_from_slice(&key.value_range.1.to_le_bytes());
    buf.extend_from_slice(&key.gamma_range.0.to_le_bytes());
    buf.extend_from_slice(&key.gamma_range.1.to_le_bytes());
    buf.extend_from_slice(&key.seed.to_le_bytes());
    buf.extend_from_slice(&(key.layers.len() as u32).to_le_bytes());
    for layer in &key.layers {
        buf.extend_from_slice(&layer.scale_factor.to_le_bytes());
        buf.extend_from_slice(&(layer.locking_values.len() as u32).to_le_bytes());
        for (&idx, &v) in &layer.locking_values {
            buf.extend_from_slice(&(idx as u32).to_le_bytes());
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

/// Parses the canonical encoding. `origin` names the source in errors.
pub fn deserialize_key(bytes: &[u8], origin: &str) -> Result<AuthorizationKey> {
    let mut cur = Cursor::new(bytes);
    let fmt = |cur: &Cursor, detail: String| Error::Format {
        path: origin.to_string(),
        offset: cur.pos(),
        detail,
    };
    let version = cur.u16().map_err(|e| fmt(&cur, e))?;
    if version != KEY_VERSION {
        return Err(Error::Format {
            path: origin.to_string(),
            offset: 0,
            detail: format!("unsupported key version {version}"),
        });
    }
    let rho_percent = cur.f64().map_err(|e| fmt(&cur, e))?;
    let value_range = (
        cur.f64().map_err(|e| fmt(&cur, e))?,
        cur.f64().map_err(|e| fmt(&cur, e))?,
    );
    let gamma_range = (
        cur.f64().map_err(|e| fmt(&cur, e))?,
        cur.f64().map_err(|e| fmt(&cur, e))?,
    );
    let seed = cur.u64().map_err(|e| fmt(&cur, e))?;
    let layer_count = cur.u32().map_err(|e| fmt(&cur, e))? as usize;
    if layer_count > 65_536 {
        return Err(fmt(&cur, format!("implausible layer count {layer_count}")));
    }
    let mut layers = Vec::with_capacity(layer_count);
    for li in 0..layer_count {
        let scale_factor = cur.f64().map_err(|e| fmt(&cur, e))?;
        if !(scale_factor.is_finite() && scale_factor > 0.0) {
            return Err(fmt(
                &cur,
                format!("layer {li} scale factor {scale_factor} is not positive"),
            ));
        }
        let n = cur.u32().map_err(|e| fmt(&cur, e))? as usize;
        let mut locking_values = BTreeMap::new();
        let mut prev: Option<usize> = None;
        for _ in 0..n {
            let idx = cur.u32().map_err(|e| fmt(&cur, e))? as usize;
            let v = cur.f64().map_err(|e| fmt(&cur, e))?;
            if !v.is_finite() {
                return Err(fmt(&cur, format!("layer {li} neuron {idx} value {v}")));
            }
            if prev.is_some_and(|p| idx <= p) {
                return Err(fmt(
                    &cur,
                    format!("layer {li} indices not strictly ascending at {idx}"),
                ));
            }
            prev = Some(idx);
            locking_values.insert(idx, v);
        }
        layers.push(LayerKey {
            locking_values,
            scale_factor,
        });
    }
    if cur.remaining() != 0 {
        return Err(fmt(&cur, format!("{} trailing bytes", cur.remaining())));
    }
    Ok(AuthorizationKey {
        layers,
        rho_percent,
        value_range,
        gamma_range,
        seed,
    })
}

/// Encrypts a key under a passphrase with a fresh random salt and nonce.
pub fn seal_key(key: &AuthorizationKey, passphrase: &str, kdf: &KdfParams) -> Result<Vec<u8>> {
    let mut salt = [0u8; SALT_LEN];
    let mut nonce = [0u8; NONCE_LEN];
    OsRng.fill_bytes(&mut salt);
    OsRng.fill_bytes(&mut nonce);
    let cipher_key = derive(passphrase, &salt, kdf)?;
    let cipher = XChaCha20Poly1305::new((&cipher_key).into());
    let ct = cipher
        .encrypt(XNonce::from_slice(&nonce), serialize_key(key).as_slice())
        .map_err(|_| Error::Auth("sealing failed".into()))?;
    let mut out = Vec::with_capacity(4 + 2 + SALT_LEN + 12 + NONCE_LEN + 8 + ct.len());
    out.extend_from_slice(KEY_MAGIC);
    out.extend_from_slice(&KEY_VERSION.to_le_bytes());
    out.extend_from_slice(&salt);
    out.extend_from_slice(&kdf.m_cost_kib.to_le_bytes());
    out.extend_from_slice(&kdf.t_cost.to_le_bytes());
    out.extend_from_slice(&kdf.p_cost.to_le_bytes());
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&(ct.len() as u64).to_le_bytes());
    out.extend_from_slice(&ct);
    Ok(out)
}

/// Decrypts a sealed key file. A wrong passphrase and a corrupted ciphertext
/// are indistinguishable by design; both surface as an authentication error
/// that reveals nothing about the plaintext.
pub fn open_key(bytes: &[u8], passphrase: &str, origin: &str) -> Result<AuthorizationKey> {
    let mut cur = Cursor::new(bytes);
    let fmt = |cur: &Cursor, detail: String| Error::Format {
        path: origin.to_string(),
        offset: cur.pos(),
        detail,
    };
    let magic = cur.take(4).map_err(|e| fmt(&cur, e))?;
    if magic != KEY_MAGIC {
        return Err(Error::Format {
            path: origin.to_string(),
            offset: 0,
            detail: format!("bad magic {magic:02x?}"),
        });
    }
    let version = cur.u16().map_err(|e| fmt(&cur, e))?;
    if version != KEY_VERSION {
        return Err(Error::Format {
            path: origin.to_string(),
            offset: 4,
            detail: format!("unsupported key file version {version}"),
        });
    }
    let salt: [u8; SALT_LEN] = cur.take(SALT_LEN).map_err(|e| fmt(&cur, e))?.try_into().unwrap();
    let cost_offset = cur.pos();
    let kdf = KdfParams {
        m_cost_kib: cur.u32().map_err(|e| fmt(&cur, e))?,
        t_cost: cur.u32().map_err(|e| fmt(&cur, e))?,
        p_cost: cur.u32().map_err(|e| fmt(&cur, e))?,
    };
    if kdf.m_cost_kib > MAX_M_COST_KIB || kdf.t_cost > MAX_T_COST || kdf.p_cost > MAX_P_COST {
        return Err(Error::Format {
            path: origin.to_string(),
            offset: cost_offset,
            detail: format!(
                "declared KDF costs m={} KiB t={} p={} exceed ceilings",
                kdf.m_cost_kib, kdf.t_cost, kdf.p_cost
            ),
        });
    }
    let nonce: [u8; NONCE_LEN] = cur.take(NONCE_LEN).map_err(|e| fmt(&cur, e))?.try_into().unwrap();
    let ct_len = cur.u64().map_err(|e| fmt(&cur, e))? as usize;
    if ct_len != cur.remaining() {
        return Err(fmt(
            &cur,
            format!("ciphertext length {} but {} bytes follow", ct_len, cur.remaining()),
        ));
    }
    let ct = cur.take(ct_len).map_err(|e| fmt(&cur, e))?;
    let cipher_key = derive(passphrase, &salt, &kdf)?;
    let cipher = XChaCha20Poly1305::new((&cipher_key).into());
    let pt = cipher
        .decrypt(XNonce::from_slice(&nonce), ct)
        .map_err(|_| Error::Auth("passphrase mismatch or key file corrupted".into()))?;
    deserialize_key(&pt, origin)
}

pub fn save_key(
    path: &Path,
    key: &AuthorizationKey,
    passphrase: &str,
    kdf: &KdfParams,
) -> Result<()> {
    std::fs::write(path, seal_key(key, passphrase, kdf)?)?;
    Ok(())
}

pub fn load_key(path: &Path, passphrase: &str) -> Result<AuthorizationKey> {
    let bytes = std::fs::read(path)?;
    open_key(&bytes, passphrase, &path.display().to_string())
}

fn derive(passphrase: &str, salt: &[u8; SALT_LEN], kdf: &KdfParams) -> Result<[u8; 32]> {
    let params = Params::new(kdf.m_cost_kib, kdf.t_cost, kdf.p_cost, Some(32))
        .map_err(|e| Error::InvalidParam(format!("KDF parameters rejected: {e}")))?;
    let argon = Argon2::new(Algorithm::Argon2id, Version::V0x13, params);
    let mut out = [0u8; 32];
    argon
        .hash_password_into(passphrase.as_bytes(), salt, &mut out)
        .map_err(|e| Error::InvalidParam(format!("key derivation failed: {e}")))?;
    Ok(out)
}
