//! Binary checkpoint format: magic bytes, format version, a config JSON
//! blob (carrying stage configuration and latent-normalization statistics),
//! then named parameter blocks as 32-bit little-endian floats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{NumericsError, Result, Tensor};

const MAGIC: &[u8; 4] = b"UFCP";
const VERSION: u32 = 1;

fn io_err(context: &str, e: std::io::Error) -> NumericsError {
    NumericsError::InvalidArgument { context: context.to_string(), detail: e.to_string() }
}

/// Writes every parameter in the store (frozen ones included) plus the
/// caller's config JSON.
pub fn save<S: Scalar>(path: &Path, config_json: &str, store: &ParamStore<S>) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err("checkpoint::save", e))?;
    let mut w = BufWriter::new(file);
    let mut put = |buf: &[u8]| w.write_all(buf).map_err(|e| io_err("checkpoint::save", e));
    put(MAGIC)?;
    put(&VERSION.to_le_bytes())?;
    let cfg = config_json.as_bytes();
    put(&(cfg.len() as u64).to_le_bytes())?;
    put(cfg)?;
    put(&(store.len() as u64).to_le_bytes())?;
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).as_bytes();
        put(&(name.len() as u64).to_le_bytes())?;
        put(name)?;
        let t = store.get(id);
        put(&(t.shape().len() as u64).to_le_bytes())?;
        for &d in t.shape() {
            put(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            put(&(v.to_f64_c() as f32).to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| io_err("checkpoint::save", e))
}

pub struct Loaded {
    pub config_json: String,
    pub blocks: Vec<(String, Tensor<f32>)>,
}

pub fn load(path: &Path) -> Result<Loaded> {
    let file = File::open(path)
        .map_err(|e| io_err(&format!("checkpoint::load {}", path.display()), e))?;
    let mut r = BufReader::new(file);
    let bad = |detail: &str| NumericsError::InvalidArgument {
        context: format!("checkpoint::load {}", path.display()),
        detail: detail.to_string(),
    };
    let mut read_exact = |n: usize| -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf).map_err(|e| io_err("checkpoint::load", e))?;
        Ok(buf)
    };
    let magic = read_exact(4)?;
    if magic != MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let ver = u32::from_le_bytes(read_exact(4)?.try_into().unwrap());
    if ver != VERSION {
        return Err(bad(&format!("unsupported version {ver}")));
    }
    let read_u64 = |bytes: Vec<u8>| u64::from_le_bytes(bytes.try_into().unwrap()) as usize;
    let cfg_len = read_u64(read_exact(8)?);
    let config_json = String::from_utf8(read_exact(cfg_len)?).map_err(|_| bad("config not utf-8"))?;
    let n_blocks = read_u64(read_exact(8)?);
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let name_len = read_u64(read_exact(8)?);
        let name = String::from_utf8(read_exact(name_len)?).map_err(|_| bad("name not utf-8"))?;
        let ndim = read_u64(read_exact(8)?);
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(read_exact(8)?));
        }
        let len: usize = shape.iter().product();
        let raw = read_exact(len * 4)?;
        let mut data = Vec::with_capacity(len);
        for c in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes(c.try_into().unwrap()));
        }
        blocks.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(Loaded { config_json, blocks })
}

/// Copies loaded blocks into a store built with the same registration
/// layout; every block must match a parameter by name and shape, and every
/// parameter must be covered.
pub fn apply<S: Scalar>(loaded: &Loaded, store: &mut ParamStore<S>) -> Result<()> {
    let mut seen = 0usize;
    for (name, t) in &loaded.blocks {
        let id = store.find(name).ok_or_else(|| NumericsError::InvalidArgument {
            context: "checkpoint::apply".into(),
            detail: format!("store has no parameter named {name}"),
        })?;
        if store.get(id).shape() != t.shape() {
            return Err(NumericsError::ShapeMismatch {
                context: "checkpoint::apply".into(),
                detail: format!("{name}: {:?} vs {:?}", store.get(id).shape(), t.shape()),
            });
        }
        store.set(id, t.cast::<S>());
        seen += 1;
    }
    if seen != store.len() {
        return Err(NumericsError::InvalidArgument {
            context: "checkpoint::apply".into(),
            detail: format!("checkpoint covers {seen} of {} parameters", store.len()),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn temp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("uniflow-ckpt-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn toy_store(seed: u64) -> ParamStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        store.register("a.w", Tensor::randn(&[3, 4], 1.0, &mut rng));
        store.register("a.b", Tensor::randn(&[4], 1.0, &mut rng));
        store.register("frozen.k", Tensor::randn(&[2, 2], 1.0, &mut rng));
        store.freeze_prefix("frozen.");
        store
    }

    #[test]
    fn round_trip_preserves_values_and_config() {
        let store = toy_store(3);
        let path = temp("rt.ckpt");
        save(&path, r#"{"lambda":0.5}"#, &store).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.config_json, r#"{"lambda":0.5}"#);
        assert_eq!(loaded.blocks.len(), 3);
        let mut store2 = toy_store(99);
        apply(&loaded, &mut store2).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let diff = store.get(id).max_abs_diff(store2.get(store2.find(store.name(id)).unwrap()));
            assert!(diff < 1e-7);
        }
        assert_eq!(store.hash_prefix(""), store2.hash_prefix(""));
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let store = toy_store(4);
        let path = temp("bad.ckpt");
        save(&path, "{}", &store).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(load(&path).is_err());
    }

    #[test]
    fn shape_mismatch_on_apply_is_rejected() {
        let store = toy_store(5);
        let path = temp("shape.ckpt");
        save(&path, "{}", &store).unwrap();
        let loaded = load(&path).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut other: ParamStore<f32> = ParamStore::new();
        other.register("a.w", Tensor::randn(&[4, 3], 1.0, &mut rng));
        other.register("a.b", Tensor::randn(&[4], 1.0, &mut rng));
        other.register("frozen.k", Tensor::randn(&[2, 2], 1.0, &mut rng));
        assert!(apply(&loaded, &mut other).is_err());
    }

    #[test]
    fn missing_parameter_coverage_is_rejected() {
        let store = toy_store(6);
        let path = temp("cover.ckpt");
        save(&path, "{}", &store).unwrap();
        let loaded = load(&path).unwrap();
        let mut bigger = toy_store(7);
        bigger.register("extra.w", Tensor::zeros(&[1]));
        assert!(apply(&loaded, &mut bigger).is_err());
    }
}
