//! Plain-text configuration: `key=value` lines with dotted keys, overridden
//! by repeated `--set key=value` flags. Unknown keys fail fast with the
//! offending key name.

use std::collections::BTreeMap;
use std::path::Path;

use photon_core::blocks::BlockConfig;
use photon_core::model::{Dissimilarity, HierarchyConfig};
use photon_core::tensor::DType;

use crate::CliError;

#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    map: BTreeMap<String, String>,
}

fn known_key(key: &str) -> bool {
    const EXACT: &[&str] = &[
        "model.kind",
        "model.dtype",
        "model.vocab",
        "model.levels",
        "model.dec_embed_dim",
        "model.heads",
        "model.enc_layers",
        "model.dec_layers",
        "model.intermediate_mult",
        "model.dissimilarity",
        "model.flat_dim",
        "model.flat_layers",
        "model.flat_heads",
        "train.steps",
        "train.batch",
        "train.context",
        "train.seed",
        "train.lr",
        "train.warmup",
        "train.alpha",
        "train.beta",
        "train.checkpoint_every",
        "train.stop_below_nll",
        "train.corpus",
        "train.out_dir",
        "train.init_std",
        "eval.checkpoint",
        "eval.corpus",
        "eval.context",
        "eval.max_windows",
        "gen.checkpoint",
        "gen.prompt",
        "gen.tokens",
        "gen.temperature",
        "gen.seed",
        "gen.max_context",
        "bench.regime",
        "bench.pf_prompt",
        "bench.pf_gen",
        "bench.de_prompt",
        "bench.de_gen",
        "bench.paper_lengths",
        "bench.out_csv",
        "bench.out_json",
        "bench.seed",
    ];
    if EXACT.contains(&key) {
        return true;
    }
    for prefix in ["model.chunk.", "model.conv_width.", "model.dim."] {
        if let Some(rest) = key.strip_prefix(prefix) {
            return rest.parse::<usize>().is_ok();
        }
    }
    false
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<RawConfig, CliError> {
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {}: expected key=value, got {line:?}", lineno + 1))
            })?;
            let key = key.trim();
            if !known_key(key) {
                return Err(CliError::Config(format!("unknown config key {key:?}")));
            }
            map.insert(key.to_string(), value.trim().to_string());
        }
        Ok(RawConfig { map })
    }

    pub fn from_file(path: &Path) -> Result<RawConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Flags override file values.
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<(), CliError> {
        for s in sets {
            let (key, value) = s
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {s:?}")))?;
            let key = key.trim();
            if !known_key(key) {
                return Err(CliError::Config(format!("unknown config key {key:?}")));
            }
            self.map.insert(key.to_string(), value.trim().to_string());
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    fn parse_with<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse::<T>()
                .map_err(|_| CliError::Config(format!("bad value for {key}: {v:?}"))),
        }
    }

    pub fn usize(&self, key: &str, default: usize) -> Result<usize, CliError> {
        self.parse_with(key, default)
    }

    pub fn u64(&self, key: &str, default: u64) -> Result<u64, CliError> {
        self.parse_with(key, default)
    }

    pub fn f64(&self, key: &str, default: f64) -> Result<f64, CliError> {
        self.parse_with(key, default)
    }

    pub fn bool(&self, key: &str, default: bool) -> Result<bool, CliError> {
        self.parse_with(key, default)
    }

    pub fn str_or(&self, key: &str, default: &str) -> String {
        self.map
            .get(key)
            .cloned()
            .unwrap_or_else(|| default.to_string())
    }

    pub fn required(&self, key: &str) -> Result<&str, CliError> {
        self.get(key)
            .ok_or_else(|| CliError::Config(format!("missing required config key {key}")))
    }

    /// Resolved snapshot, one sorted key=value per line.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn dtype(&self) -> Result<DType, CliError> {
        match self.str_or("model.dtype", "f64").as_str() {
            "f64" => Ok(DType::F64),
            "f32" => Ok(DType::F32),
            other => Err(CliError::Config(format!(
                "model.dtype must be f64 or f32, got {other:?}"
            ))),
        }
    }
}

/// The model a command operates on.
#[derive(Debug, Clone)]
pub enum ModelSpec {
    Hierarchy(HierarchyConfig),
    Flat { cfg: BlockConfig, vocab: usize },
}

impl ModelSpec {
    pub fn context_multiple(&self) -> usize {
        match self {
            ModelSpec::Hierarchy(cfg) => cfg.chunk_product(),
            ModelSpec::Flat { .. } => 1,
        }
    }
}

/// Build the model description from config keys, with byte-level defaults
/// sized for quick desk runs.
pub fn model_spec(raw: &RawConfig) -> Result<ModelSpec, CliError> {
    let vocab = raw.usize("model.vocab", crate::corpus::BYTE_VOCAB)?;
    let heads = raw.usize("model.heads", 2)?;
    let mult = raw.usize("model.intermediate_mult", 2)?;
    match raw.str_or("model.kind", "photon").as_str() {
        "flat" => {
            let dim = raw.usize("model.flat_dim", 32)?;
            let layers = raw.usize("model.flat_layers", 2)?;
            let fheads = raw.usize("model.flat_heads", heads)?;
            let cfg = BlockConfig {
                hidden_dim: dim,
                intermediate_dim: mult * dim,
                n_layers: layers,
                n_heads: fheads,
                head_dim: dim / fheads.max(1),
            };
            cfg.validate().map_err(core_config)?;
            Ok(ModelSpec::Flat { cfg, vocab })
        }
        "photon" => {
            let levels = raw.usize("model.levels", 2)?;
            if levels == 0 {
                return Err(CliError::Config("model.levels must be ≥ 1".into()));
            }
            let mut chunk = Vec::with_capacity(levels);
            let mut conv = Vec::with_capacity(levels);
            for l in 1..=levels {
                chunk.push(raw.usize(&format!("model.chunk.{l}"), 4)?);
                conv.push(raw.usize(&format!("model.conv_width.{l}"), 2)?);
            }
            let d0 = raw.usize("model.dim.0", 8)?;
            let mut dims = vec![d0];
            for l in 1..=levels {
                let default = if l == 1 { chunk[0] * d0 } else { dims[l - 1] };
                dims.push(raw.usize(&format!("model.dim.{l}"), default)?);
            }
            let dec_embed = raw.usize("model.dec_embed_dim", dims[1])?;
            let enc_layers = raw.usize("model.enc_layers", 1)?;
            let dec_layers = raw.usize("model.dec_layers", 1)?;
            let dissim = match raw.str_or("model.dissimilarity", "mse").as_str() {
                "mse" => Dissimilarity::Mse,
                "cosine" => Dissimilarity::Cosine,
                other => {
                    return Err(CliError::Config(format!(
                        "model.dissimilarity must be mse or cosine, got {other:?}"
                    )))
                }
            };
            let stack = |d: usize, layers: usize| BlockConfig {
                hidden_dim: d,
                intermediate_dim: mult * d,
                n_layers: layers,
                n_heads: heads,
                head_dim: d / heads.max(1),
            };
            let cfg = HierarchyConfig {
                levels,
                chunk,
                conv_width: conv,
                dims: dims.clone(),
                dec_embed_dim: dec_embed,
                vocab_size: vocab,
                bos_id: crate::corpus::BOS,
                pad_id: crate::corpus::PAD,
                enc: (1..=levels).map(|l| stack(dims[l], enc_layers)).collect(),
                dec: (1..=levels)
                    .map(|l| {
                        stack(
                            if l == 1 { dec_embed } else { dims[l - 1] },
                            dec_layers,
                        )
                    })
                    .collect(),
                dissimilarity: dissim,
            };
            cfg.validate().map_err(core_config)?;
            Ok(ModelSpec::Hierarchy(cfg))
        }
        other => Err(CliError::Config(format!(
            "model.kind must be photon or flat, got {other:?}"
        ))),
    }
}

fn core_config(e: photon_core::Error) -> CliError {
    CliError::Config(e.to_string())
}
