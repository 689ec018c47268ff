//! Checkpoints: a flat archive of named parameter tensors with shape
//! headers (little-endian f64) preceded by a plain-text config record.
//! Round trips are bit-exact for the default f64 pipeline.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use photon_core::blocks::BlockConfig;
use photon_core::model::{FlatParams, HierarchyConfig, ModelParams};
use photon_core::tensor::{Element, Tensor};

use crate::CliError;

const MAGIC: &[u8; 4] = b"PHKP";

/// What a checkpoint file contains.
pub enum LoadedModel<E> {
    Hierarchy {
        cfg: HierarchyConfig,
        params: ModelParams<Tensor<E>>,
    },
    Flat {
        cfg: BlockConfig,
        vocab: usize,
        params: FlatParams<Tensor<E>>,
    },
}

fn write_tensors<E: Element>(
    w: &mut impl Write,
    named: &BTreeMap<String, Tensor<E>>,
) -> std::io::Result<()> {
    w.write_all(&(named.len() as u32).to_le_bytes())?;
    for (name, t) in named {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u16).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&[t.shape().len() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

fn collect<E: Element>(visit: impl FnOnce(&mut dyn FnMut(String, &Tensor<E>))) -> BTreeMap<String, Tensor<E>> {
    let mut map = BTreeMap::new();
    visit(&mut |name, t| {
        map.insert(name, t.clone());
    });
    map
}

fn write_header(w: &mut impl Write, config_record: &str) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&1u16.to_le_bytes())?;
    let cb = config_record.as_bytes();
    w.write_all(&(cb.len() as u32).to_le_bytes())?;
    w.write_all(cb)?;
    Ok(())
}

pub fn save_hierarchy<E: Element>(
    path: &Path,
    cfg: &HierarchyConfig,
    params: &ModelParams<Tensor<E>>,
) -> Result<(), CliError> {
    let record = format!(
        "kind=photon\nconfig={}\n",
        serde_json::to_string(cfg).expect("config serializes")
    );
    let f = std::fs::File::create(path).map_err(CliError::Io)?;
    let mut w = std::io::BufWriter::new(f);
    write_header(&mut w, &record).map_err(CliError::Io)?;
    let named = collect(|f| params.visit(f));
    write_tensors(&mut w, &named).map_err(CliError::Io)
}

pub fn save_flat<E: Element>(
    path: &Path,
    params: &FlatParams<Tensor<E>>,
) -> Result<(), CliError> {
    let record = format!(
        "kind=flat\nconfig={}\nvocab={}\n",
        serde_json::to_string(&params.stack.cfg).expect("config serializes"),
        params.vocab_size()
    );
    let f = std::fs::File::create(path).map_err(CliError::Io)?;
    let mut w = std::io::BufWriter::new(f);
    write_header(&mut w, &record).map_err(CliError::Io)?;
    let named = collect(|f| params.visit(f));
    write_tensors(&mut w, &named).map_err(CliError::Io)
}

fn read_exact_vec(r: &mut impl Read, n: usize) -> Result<Vec<u8>, CliError> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(CliError::Io)?;
    Ok(buf)
}

fn read_tensors<E: Element>(r: &mut impl Read) -> Result<BTreeMap<String, Tensor<E>>, CliError> {
    let n = u32::from_le_bytes(read_exact_vec(r, 4)?.try_into().unwrap()) as usize;
    let mut map = BTreeMap::new();
    for _ in 0..n {
        let name_len = u16::from_le_bytes(read_exact_vec(r, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(read_exact_vec(r, name_len)?)
            .map_err(|_| CliError::Config("checkpoint tensor name is not UTF-8".into()))?;
        let rank = read_exact_vec(r, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(read_exact_vec(r, 8)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = read_exact_vec(r, numel * 8)?;
        let mut data = Vec::with_capacity(numel);
        for c in raw.chunks_exact(8) {
            data.push(E::from_f64(f64::from_le_bytes(c.try_into().unwrap())));
        }
        let t = Tensor::new(shape, data)
            .map_err(|e| CliError::Config(format!("checkpoint tensor {name}: {e}")))?;
        map.insert(name, t);
    }
    Ok(map)
}

fn fill_from_map<E: Element>(
    mut visit_mut: impl FnMut(&mut dyn FnMut(String, &mut Tensor<E>)),
    mut map: BTreeMap<String, Tensor<E>>,
) -> Result<(), CliError> {
    let mut missing = Vec::new();
    let mut shape_err = None;
    visit_mut(&mut |name, t| {
        match map.remove(&name) {
            Some(loaded) => {
                if loaded.shape() != t.shape() {
                    shape_err = Some(format!(
                        "tensor {name}: checkpoint shape {:?} vs model {:?}",
                        loaded.shape(),
                        t.shape()
                    ));
                } else {
                    *t = loaded;
                }
            }
            None => missing.push(name),
        }
    });
    if let Some(e) = shape_err {
        return Err(CliError::Config(e));
    }
    if !missing.is_empty() {
        return Err(CliError::Config(format!(
            "checkpoint is missing tensors: {missing:?}"
        )));
    }
    if !map.is_empty() {
        let extra: Vec<&String> = map.keys().collect();
        return Err(CliError::Config(format!(
            "checkpoint has unknown tensors: {extra:?}"
        )));
    }
    Ok(())
}

pub fn load<E: Element>(path: &Path) -> Result<LoadedModel<E>, CliError> {
    let f = std::fs::File::open(path)
        .map_err(|e| CliError::Config(format!("cannot open checkpoint {}: {e}", path.display())))?;
    let mut r = std::io::BufReader::new(f);
    let magic = read_exact_vec(&mut r, 4)?;
    if magic != MAGIC {
        return Err(CliError::Config("not a checkpoint file (bad magic)".into()));
    }
    let version = u16::from_le_bytes(read_exact_vec(&mut r, 2)?.try_into().unwrap());
    if version != 1 {
        return Err(CliError::Config(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let rec_len = u32::from_le_bytes(read_exact_vec(&mut r, 4)?.try_into().unwrap()) as usize;
    let record = String::from_utf8(read_exact_vec(&mut r, rec_len)?)
        .map_err(|_| CliError::Config("checkpoint config record is not UTF-8".into()))?;
    let mut kind = None;
    let mut config_json = None;
    let mut vocab = None;
    for line in record.lines() {
        if let Some((k, v)) = line.split_once('=') {
            match k {
                "kind" => kind = Some(v.to_string()),
                "config" => config_json = Some(v.to_string()),
                "vocab" => vocab = v.parse::<usize>().ok(),
                _ => {}
            }
        }
    }
    let kind = kind.ok_or_else(|| CliError::Config("checkpoint record lacks kind".into()))?;
    let cfg_json =
        config_json.ok_or_else(|| CliError::Config("checkpoint record lacks config".into()))?;
    let tensors = read_tensors::<E>(&mut r)?;
    match kind.as_str() {
        "photon" => {
            let cfg: HierarchyConfig = serde_json::from_str(&cfg_json)
                .map_err(|e| CliError::Config(format!("bad checkpoint config: {e}")))?;
            cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
            let mut rng = photon_core::seeded_rng(0);
            let mut params = ModelParams::init(&cfg, 0.0, &mut rng)
                .map_err(|e| CliError::Config(e.to_string()))?;
            fill_from_map(|f| params.visit_mut(f), tensors)?;
            Ok(LoadedModel::Hierarchy { cfg, params })
        }
        "flat" => {
            let cfg: BlockConfig = serde_json::from_str(&cfg_json)
                .map_err(|e| CliError::Config(format!("bad checkpoint config: {e}")))?;
            let vocab =
                vocab.ok_or_else(|| CliError::Config("flat checkpoint lacks vocab".into()))?;
            let mut rng = photon_core::seeded_rng(0);
            let mut params = FlatParams::init(cfg, vocab, 0.0, &mut rng)
                .map_err(|e| CliError::Config(e.to_string()))?;
            fill_from_map(|f| params.visit_mut(f), tensors)?;
            Ok(LoadedModel::Flat { cfg, vocab, params })
        }
        other => Err(CliError::Config(format!("unknown checkpoint kind {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use photon_core::model::HierarchyConfig;

    #[test]
    fn hierarchy_roundtrip_is_bit_exact() {
        let cfg = HierarchyConfig::toy(&[2, 2], &[8, 16, 16], 1, 2, 17);
        let mut rng = photon_core::seeded_rng(5);
        let params = ModelParams::<Tensor<f64>>::init(&cfg, 0.3, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.phk");
        save_hierarchy(&path, &cfg, &params).unwrap();
        match load::<f64>(&path).unwrap() {
            LoadedModel::Hierarchy { cfg: c2, params: p2 } => {
                assert_eq!(cfg, c2);
                let a = super::collect(|f| params.visit(f));
                let b = super::collect(|f| p2.visit(f));
                assert_eq!(a.len(), b.len());
                for (name, t) in &a {
                    let u = &b[name];
                    assert_eq!(t.shape(), u.shape());
                    for (x, y) in t.data().iter().zip(u.data()) {
                        assert_eq!(x.to_bits(), y.to_bits(), "{name}");
                    }
                }
            }
            _ => panic!("wrong kind"),
        }
    }

    #[test]
    fn flat_roundtrip_and_kind_detection() {
        let cfg = BlockConfig {
            hidden_dim: 8,
            intermediate_dim: 16,
            n_layers: 1,
            n_heads: 2,
            head_dim: 4,
        };
        let mut rng = photon_core::seeded_rng(6);
        let params = FlatParams::<Tensor<f64>>::init(cfg, 17, 0.3, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flat.phk");
        save_flat(&path, &params).unwrap();
        match load::<f64>(&path).unwrap() {
            LoadedModel::Flat { vocab, params: p2, .. } => {
                assert_eq!(vocab, 17);
                assert_eq!(p2.head.data(), params.head.data());
            }
            _ => panic!("wrong kind"),
        }
    }

    #[test]
    fn truncated_file_is_a_clean_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.phk");
        std::fs::write(&path, b"PHKP\x01\x00").unwrap();
        assert!(load::<f64>(&path).is_err());
    }
}
