//! Instrumented generation: hierarchical prefill, chunk-parallel decode with
//! per-level KV caches, a flat-scanning baseline, and a ledger that counts
//! every cache entry stored and read.
//!
//! Schedule. Prefill runs the encoder bottom-up over all complete chunks,
//! then the decoder top-down over the same chunks (teacher-forced on
//! committed states), leaving every stream's reconstruction ready for the
//! first generated token. During decode the bottom session emits one token
//! per step inside its current chunk; when a chunk commits, the encoders
//! append eagerly up the hierarchy, and upper decoders advance lazily, one
//! slot per newly needed conditioning latent. A decoder at level l emits
//! X̂^(l−1) for unit h after consuming the encoder state of unit h−1, so its
//! outputs are available exactly when the level below opens a session.
//!
//! The ledger counts in per-layer-stream units, instrumented on the first
//! layer of each stack (layers are homogeneous); conventions match the cost
//! model, which must agree with these counters integer for integer.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::blocks::{AttnProbe, KVCache};
use crate::model::{FlatParams, HierarchyConfig, ModelParams};
use crate::tensor::{ops, Element, Tensor};
use crate::{Error, Result};

/// Counters for one attention stack, in per-layer-stream units.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StackStats {
    pub n_layers: usize,
    pub width: usize,
    pub kv_entries_written: u64,
    pub kv_entries_peak: u64,
    pub kv_entries_read: u64,
    pub attention_pairs: u64,
    pub max_read_span: u64,
}

impl StackStats {
    /// Scalar volume of the reads: entries × layers × 2 × width.
    pub fn kv_scalar_reads(&self) -> u64 {
        self.kv_entries_read * crate::cost::scalar_multiplier(self.n_layers, self.width)
    }
}

/// Session-local traffic ledger: per-stack counters plus emitted tokens.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrafficLedger {
    stacks: BTreeMap<String, StackStats>,
    pub tokens_emitted: u64,
}

impl TrafficLedger {
    pub fn register(&mut self, name: &str, n_layers: usize, width: usize) {
        self.stacks.entry(name.to_string()).or_insert(StackStats {
            n_layers,
            width,
            ..Default::default()
        });
    }

    fn absorb_probe(&mut self, name: &str, probe: &AttnProbe) {
        let s = self.stacks.get_mut(name).expect("stack registered");
        s.attention_pairs += probe.pairs;
        s.kv_entries_read += probe.reads;
        s.max_read_span = s.max_read_span.max(probe.max_read_span);
    }

    fn record_append(&mut self, name: &str, added: u64, len_after: usize) {
        let s = self.stacks.get_mut(name).expect("stack registered");
        s.kv_entries_written += added;
        s.kv_entries_peak = s.kv_entries_peak.max(len_after as u64);
    }

    pub fn stack(&self, name: &str) -> Option<&StackStats> {
        self.stacks.get(name)
    }

    pub fn stacks(&self) -> impl Iterator<Item = (&String, &StackStats)> {
        self.stacks.iter()
    }

    /// Sum of a counter over stacks whose name starts with `prefix`.
    pub fn sum_by_prefix(&self, prefix: &str, f: impl Fn(&StackStats) -> u64) -> u64 {
        self.stacks
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, s)| f(s))
            .sum()
    }

    /// Peak global (encoder-side) cache entries per layer-stream.
    pub fn global_entries_peak(&self) -> u64 {
        self.sum_by_prefix("enc.", |s| s.kv_entries_peak)
    }

    /// Cumulative global (encoder-side) entry reads.
    pub fn global_entries_read(&self) -> u64 {
        self.sum_by_prefix("enc.", |s| s.kv_entries_read)
    }

    /// Cumulative local (decoder-side) entry reads.
    pub fn local_entries_read(&self) -> u64 {
        self.sum_by_prefix("dec.", |s| s.kv_entries_read)
    }

    /// Counter delta since `earlier`. Peaks and spans keep their later
    /// values; cumulative counters subtract.
    pub fn delta_since(&self, earlier: &TrafficLedger) -> TrafficLedger {
        let mut out = self.clone();
        for (name, s) in out.stacks.iter_mut() {
            if let Some(e) = earlier.stacks.get(name) {
                s.kv_entries_written -= e.kv_entries_written;
                s.kv_entries_read -= e.kv_entries_read;
                s.attention_pairs -= e.attention_pairs;
            }
        }
        out.tokens_emitted -= earlier.tokens_emitted;
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        let stacks: Vec<serde_json::Value> = self
            .stacks
            .iter()
            .map(|(name, s)| {
                json!({
                    "name": name,
                    "kv_entries_peak": s.kv_entries_peak,
                    "kv_scalar_reads": s.kv_scalar_reads(),
                    "attention_pairs": s.attention_pairs,
                    "kv_entries_read": s.kv_entries_read,
                    "kv_entries_written": s.kv_entries_written,
                    "max_read_span": s.max_read_span,
                    "n_layers": s.n_layers,
                    "width": s.width,
                })
            })
            .collect();
        json!({ "stacks": stacks, "tokens_emitted": self.tokens_emitted })
    }
}

/// Token picker. Greedy takes the lowest-id argmax; temperature sampling is
/// seeded and deterministic.
pub enum Sampler {
    Greedy,
    Temperature { temp: f64, rng: ChaCha8Rng },
}

impl Sampler {
    pub fn greedy() -> Self {
        Sampler::Greedy
    }

    pub fn temperature(temp: f64, seed: u64) -> Self {
        Sampler::Temperature {
            temp,
            rng: crate::seeded_rng(seed),
        }
    }

    pub fn pick<E: Element>(&mut self, logits: &Tensor<E>) -> Result<u32> {
        if !logits.is_finite() {
            return Err(Error::NonFiniteLogits);
        }
        let row = logits.data();
        match self {
            Sampler::Greedy => {
                let mut best = 0usize;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                Ok(best as u32)
            }
            Sampler::Temperature { temp, rng } => {
                let t = temp.max(1e-6);
                let scaled: Vec<f64> = row.iter().map(|v| v.as_f64() / t).collect();
                let mx = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scaled.iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                let mut u = rand::Rng::gen_range(rng, 0.0..1.0) * z;
                for (i, e) in exps.iter().enumerate() {
                    u -= e;
                    if u <= 0.0 {
                        return Ok(i as u32);
                    }
                }
                Ok((row.len() - 1) as u32)
            }
        }
    }
}

fn enc_name(level: usize) -> String {
    format!("enc.l{level}")
}

fn dec_name(level: usize) -> String {
    format!("dec.l{level}")
}

/// One local decoder's live state: a per-chunk cache plus the stream of
/// reconstructions it has produced so far.
struct DecState<E> {
    cache: KVCache<E>,
    produced: usize,
    outputs: Vec<Tensor<E>>,
}

/// Incremental generation session over a frozen hierarchy.
pub struct PhotonSession<'m, E: Element> {
    cfg: &'m HierarchyConfig,
    params: &'m ModelParams<Tensor<E>>,
    max_context: usize,
    committed: Vec<u32>,
    enc_caches: Vec<KVCache<E>>,
    /// X^(l) rows per level, index l−1.
    enc_outputs: Vec<Vec<Tensor<E>>>,
    /// Level-k unit rows awaiting the level-(k+1) chunker, index k.
    pending: Vec<Vec<Tensor<E>>>,
    dec: Vec<DecState<E>>,
    ledger: TrafficLedger,
}

impl<'m, E: Element> PhotonSession<'m, E> {
    pub fn new(
        cfg: &'m HierarchyConfig,
        params: &'m ModelParams<Tensor<E>>,
        max_context: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut ledger = TrafficLedger::default();
        let levels = cfg.levels;
        let mut enc_caches = Vec::with_capacity(levels);
        let mut dec = Vec::with_capacity(levels);
        for lv in 1..=levels {
            let e = &cfg.enc[lv - 1];
            ledger.register(&enc_name(lv), e.n_layers, e.hidden_dim);
            enc_caches.push(params.enc_stacks[lv - 1].fresh_cache(None));
            let d = &cfg.dec[lv - 1];
            ledger.register(&dec_name(lv), d.n_layers, d.hidden_dim);
            let span = cfg.conv_width[lv - 1] + cfg.chunk[lv - 1];
            dec.push(DecState {
                cache: params.dec_stacks[lv - 1].fresh_cache(Some(span)),
                produced: 0,
                outputs: Vec::new(),
            });
        }
        Ok(PhotonSession {
            cfg,
            params,
            max_context,
            committed: Vec::new(),
            enc_caches,
            enc_outputs: vec![Vec::new(); levels],
            pending: vec![Vec::new(); levels],
            dec,
            ledger,
        })
    }

    pub fn ledger(&self) -> &TrafficLedger {
        &self.ledger
    }

    pub fn committed(&self) -> &[u32] {
        &self.committed
    }

    /// Logical encoder cache length at a level (entries per layer).
    pub fn enc_cache_len(&self, level: usize) -> usize {
        self.enc_caches[level - 1].len()
    }

    /// Units buffered below level `level`'s chunker.
    pub fn pending_units(&self, level: usize) -> usize {
        self.pending[level - 1].len()
    }

    fn embed_row(&self, table: &Tensor<E>, id: u32) -> Result<Tensor<E>> {
        ops::gather_rows(table, &[id as usize])
    }

    fn chunker_value(&self, level: usize, concat: &Tensor<E>) -> Result<Tensor<E>> {
        match &self.params.chunkers[level - 1] {
            None => Ok(concat.clone()),
            Some(ch) => {
                let n1 = ops::rmsnorm(concat, &ch.gain_in, crate::RMSNORM_EPS)?;
                let proj = ops::matmul(&n1, &ch.w, false, false)?;
                ops::rmsnorm(&proj, &ch.gain_out, crate::RMSNORM_EPS)
            }
        }
    }

    fn converter_value(&self, level: usize, latent: &Tensor<E>) -> Result<Tensor<E>> {
        let conv = &self.params.converters[level - 1];
        let flat = ops::add(&ops::matmul(latent, &conv.w, false, false)?, &conv.b)?;
        flat.reshape(vec![
            self.cfg.conv_width[level - 1],
            self.cfg.dec_width(level - 1),
        ])
    }

    /// Conditioning latent X̂^(level)_h: the learned start latent at h = 0,
    /// the encoder state at the top level, the decoder stream otherwise.
    fn latent_row(&mut self, level: usize, h: usize) -> Result<Tensor<E>> {
        if h == 0 {
            return Ok(self.params.start_latents[level - 1].clone());
        }
        if level == self.cfg.levels {
            return Ok(self.enc_outputs[level - 1][h - 1].clone());
        }
        self.advance_dec(level + 1, h)?;
        Ok(self.dec[level].outputs[h - 1].clone())
    }

    /// Open the level-`level` decoder session for chunk `g`: fresh cache,
    /// converter prefill of the conditioning rows.
    fn open_session(&mut self, level: usize, g: usize) -> Result<()> {
        let latent = self.latent_row(level, g - 1)?;
        let u = self.converter_value(level, &latent)?;
        let r = self.cfg.conv_width[level - 1];
        let span = r + self.cfg.chunk[level - 1];
        self.dec[level - 1].cache = self.params.dec_stacks[level - 1].fresh_cache(Some(span));
        let mut probe = AttnProbe::skipping(r);
        let name = dec_name(level);
        self.params.dec_stacks[level - 1].forward_cached(
            &u,
            &mut self.dec[level - 1].cache,
            Some(&mut probe),
        )?;
        self.ledger.absorb_probe(&name, &probe);
        self.ledger
            .record_append(&name, r as u64, self.dec[level - 1].cache.len());
        Ok(())
    }

    /// One teacher-forced slot step of the level-`level` decoder, emitting
    /// the reconstruction of the next unit.
    fn dec_slot_step(&mut self, level: usize, teacher: &Tensor<E>) -> Result<Tensor<E>> {
        let name = dec_name(level);
        let mut probe = AttnProbe::default();
        let out = self.params.dec_stacks[level - 1].forward_cached(
            teacher,
            &mut self.dec[level - 1].cache,
            Some(&mut probe),
        )?;
        self.ledger.absorb_probe(&name, &probe);
        self.ledger
            .record_append(&name, 1, self.dec[level - 1].cache.len());
        Ok(out)
    }

    /// Advance the level-`level` decoder until it has produced X̂^(level−1)
    /// through unit `target`. Teachers are committed encoder states, which
    /// the schedule guarantees exist by the time they are needed.
    fn advance_dec(&mut self, level: usize, target: usize) -> Result<()> {
        if level > self.cfg.levels {
            return Ok(());
        }
        let c = self.cfg.chunk[level - 1];
        while self.dec[level - 1].produced < target {
            let produced = self.dec[level - 1].produced;
            let slot = produced % c;
            let g = produced / c + 1;
            if slot == 0 {
                self.open_session(level, g)?;
            }
            let teacher = if slot == 0 {
                self.params.boc_rows[level - 1]
                    .as_ref()
                    .expect("upper level has a begin-of-chunk row")
                    .clone()
            } else {
                self.enc_outputs[level - 2][(g - 1) * c + slot - 1].clone()
            };
            let out = self.dec_slot_step(level, &teacher)?;
            let st = &mut self.dec[level - 1];
            st.outputs.push(out);
            st.produced += 1;
        }
        Ok(())
    }

    /// Eager encoder cascade after a token commit: every completed chunk
    /// appends one latent at the level above.
    fn cascade_encoders(&mut self) -> Result<()> {
        let mut k = 0;
        while k < self.cfg.levels && self.pending[k].len() == self.cfg.chunk[k] {
            let level = k + 1;
            let refs: Vec<&Tensor<E>> = self.pending[k].iter().collect();
            let concat = ops::concat_rows(&refs)?;
            let flat = concat.reshape(vec![1, concat.numel()])?;
            let a = self.chunker_value(level, &flat)?;
            let name = enc_name(level);
            let mut probe = AttnProbe::default();
            let x = self.params.enc_stacks[k].forward_cached(
                &a,
                &mut self.enc_caches[k],
                Some(&mut probe),
            )?;
            self.ledger.absorb_probe(&name, &probe);
            self.ledger
                .record_append(&name, 1, self.enc_caches[k].len());
            self.enc_outputs[k].push(x.clone());
            self.pending[k].clear();
            if level < self.cfg.levels {
                self.pending[level].push(x);
            }
            k += 1;
        }
        Ok(())
    }

    fn commit(&mut self, token: u32) -> Result<()> {
        self.committed.push(token);
        let row = self.embed_row(&self.params.enc_embed, token)?;
        self.pending[0].push(row);
        self.cascade_encoders()?;
        // Continuous invariant: entries per level = ⌊committed / C_{≤l}⌋.
        if cfg!(debug_assertions) {
            for lv in 1..=self.cfg.levels {
                debug_assert_eq!(
                    self.enc_caches[lv - 1].len(),
                    self.committed.len() / self.cfg.coarsening(lv),
                    "encoder cache length drifted at level {lv}"
                );
            }
        }
        Ok(())
    }

    /// Hierarchical prefill: batched encoder sweep bottom-up over complete
    /// chunks, batched decoder sweep top-down over the same chunks, then the
    /// ragged tail (if any) through the open bottom session.
    pub fn prefill(&mut self, prompt: &[u32]) -> Result<()> {
        if prompt.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        if prompt.len() > self.max_context {
            return Err(Error::PromptTooLong {
                len: prompt.len(),
                max: self.max_context,
            });
        }
        if !self.committed.is_empty() {
            return Err(Error::Config("session already prefilled".into()));
        }
        let t = prompt.len();
        let ids: Vec<usize> = prompt.iter().map(|&x| x as usize).collect();

        // Bottom-up: batched chunker + encoder per level over complete
        // chunks; the remainder units stay pending.
        let mut level_input = ops::gather_rows(&self.params.enc_embed, &ids)?;
        for lv in 1..=self.cfg.levels {
            let c = self.cfg.chunk[lv - 1];
            let rows = level_input.rows();
            let m = rows / c;
            let tail = rows % c;
            let mut next = Tensor::zeros(vec![0, self.cfg.dims[lv]]);
            if m > 0 {
                let head = ops::slice_rows(&level_input, 0, m * c)?;
                let concat = head.reshape(vec![m, c * self.cfg.dims[lv - 1]])?;
                let a = self.chunker_value(lv, &concat)?;
                let name = enc_name(lv);
                let mut probe = AttnProbe::default();
                let x = self.params.enc_stacks[lv - 1].forward_cached(
                    &a,
                    &mut self.enc_caches[lv - 1],
                    Some(&mut probe),
                )?;
                self.ledger.absorb_probe(&name, &probe);
                self.ledger
                    .record_append(&name, m as u64, self.enc_caches[lv - 1].len());
                for i in 0..m {
                    self.enc_outputs[lv - 1].push(ops::slice_rows(&x, i, 1)?);
                }
                next = x;
            }
            for i in 0..tail {
                self.pending[lv - 1].push(ops::slice_rows(&level_input, m * c + i, 1)?);
            }
            level_input = next;
            if level_input.rows() == 0 {
                break;
            }
        }

        // Top-down: teacher-forced decode sessions over committed chunks at
        // every level, coarsest first. Conditioning latents that reach into
        // a partially covered session above are produced lazily.
        self.committed = prompt.to_vec();
        for lv in (1..=self.cfg.levels).rev() {
            let c = self.cfg.chunk[lv - 1];
            let r = self.cfg.conv_width[lv - 1];
            let m_l = if lv == 1 {
                t / c
            } else {
                self.enc_outputs[lv - 2].len() / c
            };
            for g in 1..=m_l {
                let latent = self.latent_row(lv, g - 1)?;
                let u = self.converter_value(lv, &latent)?;
                let teacher = if lv == 1 {
                    let shifted: Vec<usize> = ((g - 1) * c..g * c)
                        .map(|p| {
                            if p == 0 {
                                self.cfg.bos_id as usize
                            } else {
                                ids[p - 1]
                            }
                        })
                        .collect();
                    ops::gather_rows(&self.params.dec_embed, &shifted)?
                } else {
                    let boc = self.params.boc_rows[lv - 1]
                        .as_ref()
                        .expect("upper level has a begin-of-chunk row");
                    let mut parts: Vec<&Tensor<E>> = vec![boc];
                    for u_idx in (g - 1) * c..g * c - 1 {
                        parts.push(&self.enc_outputs[lv - 2][u_idx]);
                    }
                    ops::concat_rows(&parts)?
                };
                let seq = ops::concat_rows(&[&u, &teacher])?;
                let name = dec_name(lv);
                let mut cache = self.params.dec_stacks[lv - 1].fresh_cache(Some(r + c));
                let mut probe = AttnProbe::skipping(r);
                let out = self.params.dec_stacks[lv - 1].forward_cached(
                    &seq,
                    &mut cache,
                    Some(&mut probe),
                )?;
                self.ledger.absorb_probe(&name, &probe);
                self.ledger.record_append(&name, (r + c) as u64, cache.len());
                if lv >= 2 {
                    // dec[lv−1] carries the level-lv decoder's state and its
                    // X̂^(lv−1) output stream.
                    for i in 0..c {
                        self.dec[lv - 1]
                            .outputs
                            .push(ops::slice_rows(&out, r + i, 1)?);
                    }
                    self.dec[lv - 1].produced += c;
                }
            }
            if lv == 1 {
                self.dec[0].produced = m_l * c;
            }
        }

        // Ragged tail: open the current bottom session and feed the pending
        // token slots (their outputs are predictions of known tokens).
        let tail = t % self.cfg.chunk[0];
        if tail > 0 {
            let g = t / self.cfg.chunk[0] + 1;
            self.open_session(1, g)?;
            let q0 = (g - 1) * self.cfg.chunk[0];
            let shifted: Vec<usize> = (q0..t)
                .map(|p| {
                    if p == 0 {
                        self.cfg.bos_id as usize
                    } else {
                        ids[p - 1]
                    }
                })
                .collect();
            let teacher = ops::gather_rows(&self.params.dec_embed, &shifted)?;
            let name = dec_name(1);
            let mut probe = AttnProbe::default();
            self.params.dec_stacks[0].forward_cached(
                &teacher,
                &mut self.dec[0].cache,
                Some(&mut probe),
            )?;
            self.ledger.absorb_probe(&name, &probe);
            self.ledger
                .record_append(&name, tail as u64, self.dec[0].cache.len());
            self.dec[0].produced += tail;
        }
        Ok(())
    }

    /// Emit `n` tokens. Returns the tokens and the decode-phase ledger
    /// delta.
    pub fn generate(
        &mut self,
        n: usize,
        sampler: &mut Sampler,
    ) -> Result<(Vec<u32>, TrafficLedger)> {
        if self.committed.is_empty() {
            return Err(Error::MissingState("session must be prefilled first"));
        }
        let before = self.ledger.clone();
        let c1 = self.cfg.chunk[0];
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            if self.committed.len() + 1 > self.max_context {
                return Err(Error::PromptTooLong {
                    len: self.committed.len() + 1,
                    max: self.max_context,
                });
            }
            let produced = self.dec[0].produced;
            if produced % c1 == 0 {
                self.open_session(1, produced / c1 + 1)?;
            }
            let last = *self.committed.last().expect("prefilled");
            let teacher = self.embed_row(&self.params.dec_embed, last)?;
            let h = self.dec_slot_step(1, &teacher)?;
            self.dec[0].produced += 1;
            let logits = ops::matmul(&h, &self.params.lm_head, false, false)?;
            let token = sampler.pick(&logits)?;
            self.commit(token)?;
            self.ledger.tokens_emitted += 1;
            out.push(token);
        }
        Ok((out, self.ledger.delta_since(&before)))
    }
}

/// Flat-scanning baseline session: one ever-growing cache, one stack.
pub struct FlatSession<'m, E: Element> {
    params: &'m FlatParams<Tensor<E>>,
    bos_id: u32,
    max_context: usize,
    committed: Vec<u32>,
    cache: KVCache<E>,
    ledger: TrafficLedger,
}

impl<'m, E: Element> FlatSession<'m, E> {
    pub fn new(params: &'m FlatParams<Tensor<E>>, bos_id: u32, max_context: usize) -> Self {
        let mut ledger = TrafficLedger::default();
        ledger.register(
            "flat",
            params.stack.cfg.n_layers,
            params.stack.cfg.hidden_dim,
        );
        FlatSession {
            params,
            bos_id,
            max_context,
            committed: Vec::new(),
            cache: params.stack.fresh_cache(None),
            ledger,
        }
    }

    pub fn ledger(&self) -> &TrafficLedger {
        &self.ledger
    }

    pub fn committed(&self) -> &[u32] {
        &self.committed
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    /// Feed the prompt: input row i carries token i−1 (BOS first), so the
    /// cache holds exactly T entries per layer afterwards.
    pub fn prefill(&mut self, prompt: &[u32]) -> Result<()> {
        if prompt.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        if prompt.len() > self.max_context {
            return Err(Error::PromptTooLong {
                len: prompt.len(),
                max: self.max_context,
            });
        }
        if !self.committed.is_empty() {
            return Err(Error::Config("session already prefilled".into()));
        }
        let shifted: Vec<usize> = (0..prompt.len())
            .map(|i| {
                if i == 0 {
                    self.bos_id as usize
                } else {
                    prompt[i - 1] as usize
                }
            })
            .collect();
        let x = ops::gather_rows(&self.params.embed, &shifted)?;
        let mut probe = AttnProbe::default();
        self.params
            .stack
            .forward_cached(&x, &mut self.cache, Some(&mut probe))?;
        self.ledger.absorb_probe("flat", &probe);
        self.ledger
            .record_append("flat", prompt.len() as u64, self.cache.len());
        self.committed = prompt.to_vec();
        Ok(())
    }

    /// One cached step: logits for the position after the committed prefix.
    pub fn step_logits(&mut self) -> Result<Tensor<E>> {
        let last = *self.committed.last().expect("prefilled");
        let x = ops::gather_rows(&self.params.embed, &[last as usize])?;
        let mut probe = AttnProbe::default();
        let h = self
            .params
            .stack
            .forward_cached(&x, &mut self.cache, Some(&mut probe))?;
        self.ledger.absorb_probe("flat", &probe);
        self.ledger.record_append("flat", 1, self.cache.len());
        ops::matmul(&h, &self.params.head, false, false)
    }

    /// Push a token chosen outside the session (scoring workflows).
    pub fn push_committed(&mut self, token: u32) {
        self.committed.push(token);
    }

    pub fn generate(
        &mut self,
        n: usize,
        sampler: &mut Sampler,
    ) -> Result<(Vec<u32>, TrafficLedger)> {
        if self.committed.is_empty() {
            return Err(Error::MissingState("session must be prefilled first"));
        }
        let before = self.ledger.clone();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            if self.committed.len() + 1 > self.max_context {
                return Err(Error::PromptTooLong {
                    len: self.committed.len() + 1,
                    max: self.max_context,
                });
            }
            let logits = self.step_logits()?;
            let token = sampler.pick(&logits)?;
            self.committed.push(token);
            self.ledger.tokens_emitted += 1;
            out.push(token);
        }
        Ok((out, self.ledger.delta_since(&before)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::BlockConfig;
    use crate::test_rng;

    fn toy_model() -> (HierarchyConfig, ModelParams<Tensor<f64>>) {
        let cfg = HierarchyConfig::toy(&[4, 4], &[4, 16, 16], 1, 2, 29);
        let mut rng = test_rng(70);
        let params = ModelParams::init(&cfg, 0.1, &mut rng).unwrap();
        (cfg, params)
    }

    #[test]
    fn prefill_fills_caches_per_level() {
        let (cfg, params) = toy_model();
        let mut s = PhotonSession::new(&cfg, &params, 4096).unwrap();
        let prompt: Vec<u32> = (0..64).map(|i| (i % 29) as u32).collect();
        s.prefill(&prompt).unwrap();
        assert_eq!(s.enc_cache_len(1), 16);
        assert_eq!(s.enc_cache_len(2), 4);
        assert_eq!(s.pending_units(1), 0);
        assert_eq!(s.ledger().global_entries_peak(), 20);
    }

    #[test]
    fn short_prompt_stays_pending() {
        let (cfg, params) = toy_model();
        let mut s = PhotonSession::new(&cfg, &params, 4096).unwrap();
        s.prefill(&[5, 6, 7]).unwrap();
        assert_eq!(s.enc_cache_len(1), 0);
        assert_eq!(s.enc_cache_len(2), 0);
        assert_eq!(s.pending_units(1), 3);
        assert_eq!(s.ledger().global_entries_peak(), 0);
    }

    #[test]
    fn prompt_too_long_is_an_error() {
        let (cfg, params) = toy_model();
        let mut s = PhotonSession::new(&cfg, &params, 16).unwrap();
        let prompt = vec![1u32; 17];
        assert!(matches!(
            s.prefill(&prompt),
            Err(Error::PromptTooLong { .. })
        ));
    }

    #[test]
    fn greedy_generation_is_deterministic() {
        let (cfg, params) = toy_model();
        let prompt: Vec<u32> = (0..16).map(|i| (i % 29) as u32).collect();
        let run = || {
            let mut s = PhotonSession::new(&cfg, &params, 4096).unwrap();
            s.prefill(&prompt).unwrap();
            let (toks, _) = s.generate(24, &mut Sampler::greedy()).unwrap();
            toks
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn temperature_sampling_is_seed_deterministic() {
        let (cfg, params) = toy_model();
        let prompt: Vec<u32> = (0..16).map(|i| (i % 29) as u32).collect();
        let run = |seed: u64| {
            let mut s = PhotonSession::new(&cfg, &params, 4096).unwrap();
            s.prefill(&prompt).unwrap();
            let (toks, _) = s
                .generate(16, &mut Sampler::temperature(0.9, seed))
                .unwrap();
            toks
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn generation_tracks_cache_growth_and_pending() {
        let (cfg, params) = toy_model();
        let mut s = PhotonSession::new(&cfg, &params, 4096).unwrap();
        let prompt: Vec<u32> = (0..18).map(|i| (i % 29) as u32).collect();
        s.prefill(&prompt).unwrap();
        assert_eq!(s.enc_cache_len(1), 4);
        assert_eq!(s.pending_units(1), 2);
        let (toks, _) = s.generate(6, &mut Sampler::greedy()).unwrap();
        assert_eq!(toks.len(), 6);
        // 24 committed tokens: 6 level-1 latents, 1 level-2 latent.
        assert_eq!(s.committed().len(), 24);
        assert_eq!(s.enc_cache_len(1), 6);
        assert_eq!(s.enc_cache_len(2), 1);
        // Continuous invariant: entries per level = ⌊committed/C_{≤l}⌋.
        for lv in 1..=2 {
            let c: usize = cfg.chunk[..lv].iter().product();
            assert_eq!(s.enc_cache_len(lv), 24 / c);
        }
    }

    #[test]
    fn local_cache_peak_is_bounded() {
        let (cfg, params) = toy_model();
        let mut s = PhotonSession::new(&cfg, &params, 4096).unwrap();
        let prompt: Vec<u32> = (0..32).map(|i| (i % 29) as u32).collect();
        s.prefill(&prompt).unwrap();
        s.generate(40, &mut Sampler::greedy()).unwrap();
        for lv in 1..=2 {
            let bound = (cfg.conv_width[lv - 1] + cfg.chunk[lv - 1]) as u64;
            let st = s.ledger().stack(&dec_name(lv)).unwrap();
            assert_eq!(st.kv_entries_peak, bound);
            assert!(st.max_read_span <= bound - 1);
        }
    }

    #[test]
    fn ledger_json_has_stable_fields() {
        let (cfg, params) = toy_model();
        let mut s = PhotonSession::new(&cfg, &params, 4096).unwrap();
        s.prefill(&[1, 2, 3, 4, 5]).unwrap();
        let j = s.ledger().to_json();
        let stacks = j["stacks"].as_array().unwrap();
        assert_eq!(stacks.len(), 4);
        for st in stacks {
            for key in [
                "name",
                "kv_entries_peak",
                "kv_scalar_reads",
                "attention_pairs",
            ] {
                assert!(st.get(key).is_some(), "missing {key}");
            }
        }
        assert!(j.get("tokens_emitted").is_some());
    }

    fn flat_model() -> FlatParams<Tensor<f64>> {
        let cfg = BlockConfig {
            hidden_dim: 8,
            intermediate_dim: 16,
            n_layers: 2,
            n_heads: 2,
            head_dim: 4,
        };
        let mut rng = test_rng(71);
        FlatParams::init(cfg, 29, 0.1, &mut rng).unwrap()
    }

    #[test]
    fn flat_cache_and_reads_follow_definition() {
        let params = flat_model();
        let mut s = FlatSession::new(&params, 1, 4096);
        let prompt: Vec<u32> = (0..10).map(|i| (i % 29) as u32).collect();
        s.prefill(&prompt).unwrap();
        assert_eq!(s.cache_len(), 10);
        let read_before = s.ledger().stack("flat").unwrap().kv_entries_read;
        let (_, delta) = s.generate(3, &mut Sampler::greedy()).unwrap();
        // Steps k = 1..3 read T+k−1 entries each.
        let expect: u64 = (10..13).sum();
        assert_eq!(delta.stack("flat").unwrap().kv_entries_read, expect);
        assert_eq!(
            s.ledger().stack("flat").unwrap().kv_entries_read,
            read_before + expect
        );
        assert_eq!(s.cache_len(), 13);
    }

    #[test]
    fn flat_incremental_matches_batched_forward() {
        use crate::model::flat_forward;
        use crate::tape::Tape;
        let params = flat_model();
        let tokens: Vec<u32> = (0..12).map(|i| (i * 5 % 29) as u32).collect();

        let tape = Tape::new();
        let bound = params.bind(&tape);
        let batched = tape.value(flat_forward(&tape, &bound, &tokens, 1).unwrap());

        let mut s = FlatSession::new(&params, 1, 4096);
        s.prefill(&tokens[..1]).unwrap();
        // Row i of the batched logits scores t_i; the incremental session
        // produces the same row just before committing token i.
        let mut worst = 0.0f64;
        for i in 1..tokens.len() {
            let logits = s.step_logits().unwrap();
            for (a, b) in logits.data().iter().zip(batched.row(i)) {
                worst = worst.max((a - b).abs());
            }
            s.push_committed(tokens[i]);
        }
        assert!(worst < 1e-10, "incremental vs batched diff {worst}");
    }

    #[test]
    fn generate_requires_prefill() {
        let (cfg, params) = toy_model();
        let mut s = PhotonSession::new(&cfg, &params, 64).unwrap();
        assert!(matches!(
            s.generate(1, &mut Sampler::greedy()),
            Err(Error::MissingState(_))
        ));
    }
}
