//! Versioned binary checkpoint container.
//!
//! Layout: magic, format version, epoch, dev accuracy, RNG state, parameter
//! manifest (name, dtype, shape) with raw little-endian payloads, and a
//! trailing SHA-256 over everything before it. Writes are atomic
//! (temp file + rename). Round-trips are bit-exact.

use crate::error::{Error, Result};
use crate::params::{Param, ParamStore};
use crate::tensor::{DType, Scalar};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 8] = b"ILOASRCK";
const VERSION: u32 = 1;

/// Training RNG position: master seed plus the epoch the run would enter
/// next. Together with the config these reproduce any later epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<F> {
    pub epoch: u64,
    pub dev_accuracy: f64,
    pub rng: RngState,
    pub params: BTreeMap<String, Param<F>>,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn from_store(
        store: &ParamStore<F>,
        epoch: u64,
        dev_accuracy: f64,
        rng: RngState,
    ) -> Self {
        Checkpoint {
            epoch,
            dev_accuracy,
            rng,
            params: store
                .iter()
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.dev_accuracy.to_bits().to_le_bytes());
        out.extend_from_slice(&self.rng.seed.to_le_bytes());
        out.extend_from_slice(&self.rng.next_epoch.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in &self.params {
            let nb = name.as_bytes();
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(F::DTYPE.tag());
            out.push(p.shape.len() as u8);
            for &d in &p.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &p.data {
                v.write_le(&mut out);
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let fail = |msg: &str| Error::Checkpoint(msg.to_string());
        if buf.len() < MAGIC.len() + 4 + 32 {
            return Err(fail("file too short"));
        }
        let (body, digest) = buf.split_at(buf.len() - 32);
        let expect = Sha256::digest(body);
        if digest != expect.as_slice() {
            return Err(fail("checksum mismatch"));
        }
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
            if *off + n > body.len() {
                return Err(Error::Checkpoint("truncated".into()));
            }
            let s = &body[*off..*off + n];
            *off += n;
            Ok(s)
        };
        if take(&mut off, 8)? != MAGIC {
            return Err(fail("bad magic"));
        }
        let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let epoch = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
        let dev_accuracy =
            f64::from_bits(u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()));
        let seed = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
        let next_epoch = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
        let n_params = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let mut params = BTreeMap::new();
        for _ in 0..n_params {
            let name_len =
                u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut off, name_len)?.to_vec())
                .map_err(|_| fail("bad parameter name"))?;
            let dtype = DType::from_tag(take(&mut off, 1)?[0]).ok_or_else(|| fail("bad dtype"))?;
            if dtype != F::DTYPE {
                return Err(fail(&format!(
                    "dtype mismatch: file holds {dtype:?}, loader expects {:?}",
                    F::DTYPE
                )));
            }
            let ndim = take(&mut off, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let w = dtype.byte_width();
            let raw = take(&mut off, numel * w)?;
            let data: Vec<F> = raw.chunks_exact(w).map(F::read_le).collect();
            params.insert(name, Param { data, shape });
        }
        if off != body.len() {
            return Err(fail("trailing bytes"));
        }
        Ok(Checkpoint {
            epoch,
            dev_accuracy,
            rng: RngState { seed, next_epoch },
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::decode(&buf)
    }

    /// Copy values into a parameter store. Every checkpointed name must
    /// exist in the store with a matching shape; store-only names (for
    /// example an extra head the checkpointed model lacked) keep their
    /// initialization.
    pub fn load_into(&self, store: &mut ParamStore<F>) -> Result<()> {
        for (name, p) in &self.params {
            let dst = store.get_mut(name).map_err(|_| {
                Error::Checkpoint(format!("checkpoint parameter {name} unknown to this model"))
            })?;
            if dst.shape != p.shape {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: {:?} vs {:?}",
                    dst.shape, p.shape
                )));
            }
            dst.data = p.data.clone();
        }
        Ok(())
    }
}

/// Element-wise mean of the best `k` checkpoints by dev accuracy (ties to
/// the later epoch). Fewer than `k` available uses all with a notice.
/// Accumulation in f64; selection is internal, so the input order never
/// matters.
pub fn average_checkpoints<F: Scalar>(
    checkpoints: &[Checkpoint<F>],
    k: usize,
) -> Result<BTreeMap<String, Param<F>>> {
    if checkpoints.is_empty() {
        return Err(Error::contract("average_checkpoints: no checkpoints"));
    }
    let mut order: Vec<&Checkpoint<F>> = checkpoints.iter().collect();
    order.sort_by(|a, b| {
        b.dev_accuracy
            .partial_cmp(&a.dev_accuracy)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(b.epoch.cmp(&a.epoch))
    });
    if order.len() < k {
        log::info!(
            "averaging over {} checkpoints (requested best {k})",
            order.len()
        );
    }
    let chosen = &order[..k.min(order.len())];
    let first = chosen[0];
    let inv = 1.0 / chosen.len() as f64;
    let mut out = BTreeMap::new();
    for (name, p0) in &first.params {
        let mut acc = vec![0.0f64; p0.data.len()];
        for c in chosen {
            let p = c.params.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint missing parameter {name}"))
            })?;
            if p.shape != p0.shape {
                return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
            }
            for (a, v) in acc.iter_mut().zip(&p.data) {
                *a += v.as_f64();
            }
        }
        let data: Vec<F> = acc.iter().map(|&a| F::from_f64(a * inv)).collect();
        out.insert(
            name.clone(),
            Param {
                data,
                shape: p0.shape.clone(),
            },
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    fn store_with(seed: u64) -> ParamStore<f32> {
        let mut s = ParamStore::new(seed);
        s.register("a.w", &[3, 2], Init::GlorotUniform { fan_in: 3, fan_out: 2 })
            .unwrap();
        s.register("b", &[4], Init::GlorotUniform { fan_in: 2, fan_out: 2 })
            .unwrap();
        s
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let store = store_with(9);
        let ck = Checkpoint::from_store(&store, 7, 0.625, RngState { seed: 9, next_epoch: 8 });
        let bytes = ck.encode();
        let back = Checkpoint::<f32>::decode(&bytes).unwrap();
        assert_eq!(back.epoch, 7);
        assert_eq!(back.dev_accuracy.to_bits(), 0.625f64.to_bits());
        assert_eq!(back.rng, ck.rng);
        for (name, p) in &ck.params {
            let q = &back.params[name];
            assert_eq!(q.shape, p.shape);
            let a: Vec<u32> = p.data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = q.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        // and the encoding itself is stable
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let store = store_with(9);
        let ck = Checkpoint::from_store(&store, 1, 0.0, RngState { seed: 9, next_epoch: 2 });
        let mut bytes = ck.encode();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            Checkpoint::<f32>::decode(&bytes),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn dtype_mismatch_is_detected() {
        let store = store_with(9);
        let ck = Checkpoint::from_store(&store, 1, 0.0, RngState { seed: 9, next_epoch: 2 });
        let bytes = ck.encode();
        assert!(matches!(
            Checkpoint::<f64>::decode(&bytes),
            Err(Error::Checkpoint(_))
        ));
    }

    fn ck_of(value: f32, epoch: u64, acc: f64) -> Checkpoint<f32> {
        let mut store = ParamStore::new(0);
        store.register("p", &[3], Init::Zeros).unwrap();
        store.get_mut("p").unwrap().data = vec![value; 3];
        Checkpoint::from_store(&store, epoch, acc, RngState { seed: 0, next_epoch: epoch + 1 })
    }

    #[test]
    fn averaging_identical_checkpoints_is_identity() {
        let cks: Vec<_> = (0..5).map(|e| ck_of(0.1, e, 0.5)).collect();
        let avg = average_checkpoints(&cks, 5).unwrap();
        for &v in &avg["p"].data {
            assert_eq!(v.to_bits(), 0.1f32.to_bits());
        }
    }

    #[test]
    fn averaging_zero_and_two_gives_one() {
        let cks = vec![ck_of(0.0, 0, 0.5), ck_of(2.0, 1, 0.5)];
        let avg = average_checkpoints(&cks, 2).unwrap();
        assert_eq!(avg["p"].data, vec![1.0f32; 3]);
    }

    #[test]
    fn averaging_selects_best_by_accuracy_then_epoch() {
        let cks = vec![
            ck_of(1.0, 0, 0.9),
            ck_of(2.0, 1, 0.8),
            ck_of(4.0, 2, 0.9),
            ck_of(100.0, 3, 0.1),
        ];
        // best 2: acc 0.9 at epochs 2 and 0 -> mean of 4 and 1
        let avg = average_checkpoints(&cks, 2).unwrap();
        assert_eq!(avg["p"].data, vec![2.5f32; 3]);
    }

    #[test]
    fn averaging_is_input_order_invariant() {
        let a = vec![ck_of(1.0, 0, 0.3), ck_of(2.0, 1, 0.7), ck_of(3.0, 2, 0.5)];
        let mut b = a.clone();
        b.reverse();
        let x = average_checkpoints(&a, 2).unwrap();
        let y = average_checkpoints(&b, 2).unwrap();
        let xb: Vec<u32> = x["p"].data.iter().map(|v| v.to_bits()).collect();
        let yb: Vec<u32> = y["p"].data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(xb, yb);
    }

    #[test]
    fn fewer_than_k_uses_all() {
        let cks = vec![ck_of(0.0, 0, 0.5), ck_of(2.0, 1, 0.5)];
        let avg = average_checkpoints(&cks, 5).unwrap();
        assert_eq!(avg["p"].data, vec![1.0f32; 3]);
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e1.ckpt");
        let store = store_with(3);
        let ck = Checkpoint::from_store(&store, 1, 0.25, RngState { seed: 3, next_epoch: 2 });
        ck.save(&path).unwrap();
        assert!(!path.with_extension("tmp").exists());
        let back = Checkpoint::<f32>::load(&path).unwrap();
        assert_eq!(back.encode(), ck.encode());
    }
}
