//! Exact accounting of attention compute, KV storage, and KV read traffic
//! for the hierarchy against a flat baseline.
//!
//! Everything here is integer or rational arithmetic derived from the chunk
//! grid alone; none of it touches tensors. The instrumented inference
//! engine must reproduce these numbers exactly, which is the artifact's
//! central check.
//!
//! Counting conventions (shared with the ledger):
//! - a cache entry is one key+value pair for one position in one layer;
//!   counts are per layer-stream (all layers of a stack behave alike);
//! - attention pairs count evaluated (query, key) pairs including the query
//!   itself, but queries on conditioning rows are not charged;
//! - reads count previously stored entries per query (self excluded), which
//!   makes the totals independent of batching granularity.

use serde::Serialize;

use crate::model::HierarchyConfig;
use crate::{Error, Result};

/// Chunk grid of a hierarchy, the only inputs the cost model needs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostConfig {
    pub chunk: Vec<usize>,
    pub conv_width: Vec<usize>,
}

impl CostConfig {
    pub fn new(chunk: Vec<usize>, conv_width: Vec<usize>) -> Result<Self> {
        if chunk.is_empty() || chunk.len() != conv_width.len() {
            return Err(Error::Config(
                "cost config needs equal, non-empty chunk and converter lists".into(),
            ));
        }
        if chunk.iter().any(|&c| c == 0) {
            return Err(Error::Config("chunk lengths must be ≥ 1".into()));
        }
        Ok(CostConfig { chunk, conv_width })
    }

    pub fn levels(&self) -> usize {
        self.chunk.len()
    }

    /// C_{≤l} with C_{≤0} = 1.
    pub fn coarsening(&self, l: usize) -> usize {
        self.chunk[..l].iter().product()
    }

    fn units(&self, t: usize, l: usize) -> Result<usize> {
        let c = self.coarsening(l);
        if t % c != 0 {
            return Err(Error::ChunkDivisibility {
                len: t,
                chunk_product: c,
            });
        }
        Ok(t / c)
    }
}

impl From<&HierarchyConfig> for CostConfig {
    fn from(cfg: &HierarchyConfig) -> Self {
        CostConfig {
            chunk: cfg.chunk.clone(),
            conv_width: cfg.conv_width.clone(),
        }
    }
}

/// Reduced non-negative fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Rational {
    pub num: u64,
    pub den: u64,
}

impl Rational {
    pub fn new(num: u64, den: u64) -> Self {
        assert!(den != 0);
        let g = gcd(num.max(1), den);
        Rational {
            num: num / g,
            den: den / g,
        }
    }

    pub fn zero() -> Self {
        Rational { num: 0, den: 1 }
    }

    pub fn add(self, other: Rational) -> Rational {
        Rational::new(
            self.num * other.den + other.num * self.den,
            self.den * other.den,
        )
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Exact integer value, if the fraction is integral.
    pub fn as_integer(self) -> Option<u64> {
        (self.den == 1).then_some(self.num)
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a.max(1)
}

fn causal_pairs(m: u64) -> u64 {
    m * (m + 1) / 2
}

fn batched_reads(m: u64) -> u64 {
    m * m.saturating_sub(1) / 2
}

/// Per-chunk local decode pairs: Σ_{j=1..C} (R + j), generation slots only.
fn local_session_pairs(r: u64, c: u64) -> u64 {
    c * r + c * (c + 1) / 2
}

/// Per-chunk local decode reads: conditioning prefill plus slot steps,
/// R(R−1)/2 + Σ_{j=1..C} (R + j − 1).
fn local_session_reads(r: u64, c: u64) -> u64 {
    batched_reads(r) + c * r + c * c.saturating_sub(1) / 2
}

/// Prefill cost of one level.
#[derive(Debug, Clone, Serialize)]
pub struct LevelPrefill {
    pub level: usize,
    /// Units on this level's timeline, M_l = T / C_{≤l}.
    pub m: u64,
    /// The quadratic term M_l² the coarsened prefill replaces T² with.
    pub m_squared: u64,
    /// Exact causal pair count of the level's encoder, M(M+1)/2.
    pub global_pairs: u64,
    /// Batched-prefill reads of the encoder, M(M−1)/2.
    pub global_reads: u64,
    /// Local decode pairs over the level's M_l teacher-forced sessions.
    pub local_pairs: u64,
    /// Local decode reads over those sessions.
    pub local_reads: u64,
}

/// Exact prefill compute for a prompt of `t` tokens.
#[derive(Debug, Clone, Serialize)]
pub struct PrefillCost {
    pub t: usize,
    pub per_level: Vec<LevelPrefill>,
    pub global_pairs_total: u64,
    pub local_pairs_total: u64,
    pub pairs_total: u64,
    /// Flat baseline causal pairs, T(T+1)/2.
    pub flat_pairs: u64,
}

pub fn prefill_compute(t: usize, cfg: &CostConfig) -> Result<PrefillCost> {
    let mut per_level = Vec::with_capacity(cfg.levels());
    for l in 1..=cfg.levels() {
        let m = cfg.units(t, l)? as u64;
        let r = cfg.conv_width[l - 1] as u64;
        let c = cfg.chunk[l - 1] as u64;
        per_level.push(LevelPrefill {
            level: l,
            m,
            m_squared: m * m,
            global_pairs: causal_pairs(m),
            global_reads: batched_reads(m),
            local_pairs: m * local_session_pairs(r, c),
            local_reads: m * local_session_reads(r, c),
        });
    }
    let global_pairs_total = per_level.iter().map(|l| l.global_pairs).sum();
    let local_pairs_total = per_level.iter().map(|l| l.local_pairs).sum();
    Ok(PrefillCost {
        t,
        per_level,
        global_pairs_total,
        local_pairs_total,
        pairs_total: global_pairs_total + local_pairs_total,
        flat_pairs: causal_pairs(t as u64),
    })
}

/// Global KV storage after prefill, in entries per layer-stream.
#[derive(Debug, Clone, Serialize)]
pub struct KvStorage {
    pub t: usize,
    /// Encoder entries per level, T / C_{≤l}.
    pub per_level: Vec<u64>,
    pub global_total: u64,
    /// Peak local cache bound per level, R_l + C_l (one active chunk).
    pub local_bound_per_level: Vec<u64>,
    /// Flat baseline, T entries.
    pub flat: u64,
}

pub fn kv_storage(t: usize, cfg: &CostConfig) -> Result<KvStorage> {
    let mut per_level = Vec::with_capacity(cfg.levels());
    for l in 1..=cfg.levels() {
        per_level.push(cfg.units(t, l)? as u64);
    }
    let local_bound_per_level = (1..=cfg.levels())
        .map(|l| (cfg.conv_width[l - 1] + cfg.chunk[l - 1]) as u64)
        .collect();
    Ok(KvStorage {
        t,
        global_total: per_level.iter().sum(),
        per_level,
        local_bound_per_level,
        flat: t as u64,
    })
}

/// Asymptotic per-token read rates at a context of `t` tokens.
#[derive(Debug, Clone, Serialize)]
pub struct AmortizedReads {
    pub t: usize,
    /// Σ_l T / C²_{≤l}, entries per generated token.
    pub global_per_token: Rational,
    pub global_per_level: Vec<Rational>,
    /// Σ_l (R_l + C_l) / C_{≤(l−1)}, with C_{≤0} = 1.
    pub local_per_token: Rational,
    pub local_per_level: Vec<Rational>,
    /// Flat baseline reads ≈ T per token.
    pub flat_per_token: u64,
}

pub fn amortized_reads(t: usize, cfg: &CostConfig) -> Result<AmortizedReads> {
    cfg.units(t, cfg.levels())?;
    let mut global_per_level = Vec::with_capacity(cfg.levels());
    let mut local_per_level = Vec::with_capacity(cfg.levels());
    let mut global = Rational::zero();
    let mut local = Rational::zero();
    for l in 1..=cfg.levels() {
        let cl = cfg.coarsening(l) as u64;
        let g = Rational::new(t as u64, cl * cl);
        global = global.add(g);
        global_per_level.push(g);
        let span = (cfg.conv_width[l - 1] + cfg.chunk[l - 1]) as u64;
        let lo = Rational::new(span, cfg.coarsening(l - 1) as u64);
        local = local.add(lo);
        local_per_level.push(lo);
    }
    Ok(AmortizedReads {
        t,
        global_per_token: global,
        global_per_level,
        local_per_token: local,
        local_per_level,
        flat_per_token: t as u64,
    })
}

/// Exact per-step decode traffic for generating `n_tokens` after a prefix,
/// produced by simulating the generation schedule's timing rules:
/// encoder appends run eagerly when a chunk commits; decoder sessions open
/// lazily when their first output is needed; upper decoders advance one
/// slot per newly committed unit.
#[derive(Debug, Clone, Serialize)]
pub struct DecodeSchedule {
    pub prefix: usize,
    pub n_tokens: usize,
    /// Encoder reads/appends/pairs per level during decode.
    pub enc_reads: Vec<u64>,
    pub enc_appends: Vec<u64>,
    pub enc_pairs: Vec<u64>,
    /// Local decoder reads/pairs/slot-steps per level during decode.
    pub dec_reads: Vec<u64>,
    pub dec_pairs: Vec<u64>,
    pub dec_steps: Vec<u64>,
    pub global_reads_total: u64,
    pub local_reads_total: u64,
    /// Flat baseline: Σ_k (prefix + k − 1) reads over n steps.
    pub flat_reads_total: u64,
}

struct Sim<'c> {
    cfg: &'c CostConfig,
    /// Committed units per level 0..=L (level 0 = tokens).
    units: Vec<usize>,
    /// Units of level k awaiting the level-(k+1) chunker.
    pending: Vec<usize>,
    /// X̂^(l−1) rows produced by the level-l decoder (level index 0 counts
    /// tokens pushed through the bottom decoder).
    produced: Vec<usize>,
    enc_reads: Vec<u64>,
    enc_appends: Vec<u64>,
    enc_pairs: Vec<u64>,
    dec_reads: Vec<u64>,
    dec_pairs: Vec<u64>,
    dec_steps: Vec<u64>,
}

impl<'c> Sim<'c> {
    fn after_prefill(cfg: &'c CostConfig, prefix: usize) -> Self {
        let levels = cfg.levels();
        let mut units = vec![0usize; levels + 1];
        units[0] = prefix;
        for l in 1..=levels {
            units[l] = prefix / cfg.coarsening(l);
        }
        let pending = (0..levels).map(|k| units[k] % cfg.chunk[k]).collect();
        // Prefill teacher-forces every complete chunk at every level and
        // additionally advances each upper decoder to the high-water demand
        // of the sessions below it (a ragged boundary at any level leaves
        // the decoder above partially into its next session).
        let mut produced = vec![0usize; levels + 1];
        produced[1] = prefix;
        let mut needed = if prefix % cfg.chunk[0] != 0 {
            units[1]
        } else {
            units[1].saturating_sub(1)
        };
        for l in 2..=levels {
            let base = units[l] * cfg.chunk[l - 1];
            produced[l] = base.max(needed);
            needed = if produced[l] == 0 {
                0
            } else {
                produced[l].div_ceil(cfg.chunk[l - 1]) - 1
            };
        }
        Sim {
            cfg,
            units,
            pending,
            produced,
            enc_reads: vec![0; levels],
            enc_appends: vec![0; levels],
            enc_pairs: vec![0; levels],
            dec_reads: vec![0; levels],
            dec_pairs: vec![0; levels],
            dec_steps: vec![0; levels],
        }
    }

    /// Make X̂^(level−1) available through `target` units by advancing the
    /// level-`level` decoder. Above the top level the latents are encoder
    /// states and need no work.
    fn ensure_latent(&mut self, level: usize, target: usize) {
        if level > self.cfg.levels() {
            return;
        }
        while self.produced[level] < target {
            let c = self.cfg.chunk[level - 1];
            let r = self.cfg.conv_width[level - 1] as u64;
            let slot = self.produced[level] % c;
            if slot == 0 {
                let chunks_before = self.produced[level] / c;
                self.ensure_latent(level + 1, chunks_before);
                // Conditioning prefill onto a fresh cache.
                self.dec_reads[level - 1] += batched_reads(r);
            }
            self.dec_reads[level - 1] += r + slot as u64;
            self.dec_pairs[level - 1] += r + slot as u64 + 1;
            self.dec_steps[level - 1] += 1;
            self.produced[level] += 1;
        }
    }

    /// Eager encoder cascade when a unit at level `k` commits.
    fn commit_unit(&mut self) {
        let mut k = 0;
        loop {
            self.units[k] += 1;
            if k >= self.cfg.levels() {
                break;
            }
            self.pending[k] += 1;
            if self.pending[k] < self.cfg.chunk[k] {
                break;
            }
            // Chunk complete: one encoder append at level k+1.
            let len_before = self.units[k + 1] as u64;
            self.enc_reads[k] += len_before;
            self.enc_pairs[k] += len_before + 1;
            self.enc_appends[k] += 1;
            self.pending[k] = 0;
            k += 1;
        }
    }

    fn generate_token(&mut self) {
        let c1 = self.cfg.chunk[0];
        let r1 = self.cfg.conv_width[0] as u64;
        let slot = self.produced[1] % c1;
        if slot == 0 {
            let chunks_before = self.produced[1] / c1;
            self.ensure_latent(2, chunks_before);
            self.dec_reads[0] += batched_reads(r1);
        }
        self.dec_reads[0] += r1 + slot as u64;
        self.dec_pairs[0] += r1 + slot as u64 + 1;
        self.dec_steps[0] += 1;
        self.produced[1] += 1;
        self.commit_unit();
    }
}

pub fn decode_schedule(prefix: usize, n_tokens: usize, cfg: &CostConfig) -> Result<DecodeSchedule> {
    let mut sim = Sim::after_prefill(cfg, prefix);
    for _ in 0..n_tokens {
        sim.generate_token();
    }
    let global_reads_total = sim.enc_reads.iter().sum();
    let local_reads_total = sim.dec_reads.iter().sum();
    let p = prefix as u64;
    let n = n_tokens as u64;
    let flat_reads_total = n * p + n * n.saturating_sub(1) / 2;
    Ok(DecodeSchedule {
        prefix,
        n_tokens,
        enc_reads: sim.enc_reads,
        enc_appends: sim.enc_appends,
        enc_pairs: sim.enc_pairs,
        dec_reads: sim.dec_reads,
        dec_pairs: sim.dec_pairs,
        dec_steps: sim.dec_steps,
        global_reads_total,
        local_reads_total,
        flat_reads_total,
    })
}

/// Entry-to-scalar multiplier: one cached position of one layer-stream holds
/// layers × 2 × width scalars (bytes follow from the scalar size).
pub fn scalar_multiplier(n_layers: usize, width: usize) -> u64 {
    n_layers as u64 * 2 * width as u64
}

/// Everything about one (T, config) point, serializable as JSON and a CSV
/// row for sweep aggregation.
#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub t: usize,
    pub config: CostConfig,
    pub prefill: PrefillCost,
    pub storage: KvStorage,
    pub reads: AmortizedReads,
}

impl CostReport {
    pub fn build(t: usize, cfg: &CostConfig) -> Result<CostReport> {
        Ok(CostReport {
            t,
            config: cfg.clone(),
            prefill: prefill_compute(t, cfg)?,
            storage: kv_storage(t, cfg)?,
            reads: amortized_reads(t, cfg)?,
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("report serializes")
    }

    pub fn csv_header() -> &'static str {
        "t,chunks,conv_widths,prefill_global_pairs,prefill_local_pairs,prefill_pairs_total,flat_prefill_pairs,global_kv_entries,flat_kv_entries,global_reads_per_token,local_reads_per_token,flat_reads_per_token"
    }

    pub fn csv_row(&self) -> String {
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join("x")
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.t,
            join(&self.config.chunk),
            join(&self.config.conv_width),
            self.prefill.global_pairs_total,
            self.prefill.local_pairs_total,
            self.prefill.pairs_total,
            self.prefill.flat_pairs,
            self.storage.global_total,
            self.storage.flat,
            self.reads.global_per_token.value(),
            self.reads.local_per_token.value(),
            self.reads.flat_per_token,
        )
    }
}
