//! The hierarchical model: chunk indexing, bottom-up encoder levels,
//! top-down decoder levels with bounded local attention, and the batched
//! forward pass used for training and scoring.
//!
//! Level 0 is the token stream. Level l groups every `C_l` level-(l−1) units
//! into one chunk state, so level l carries `M_l = T / Π C_k` units. The
//! decoder walks back down: a converter expands the previous latent into
//! `R_l` conditioning rows and a local decoder reconstructs the chunk with
//! attention confined to those rows plus the chunk itself.

use serde::{Deserialize, Serialize};

use crate::blocks::{stack_forward_tape, BlockConfig, StackParams};
use crate::tape::{Tape, Var};
use crate::tensor::{CausalMask, Element, Tensor};
use crate::{Error, Result};

/// Dissimilarity used by the auxiliary losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dissimilarity {
    /// Sum of squared differences (normalized by the loss definitions).
    Mse,
    /// Per-row cosine distance, 1 − cos.
    Cosine,
}

/// Complete shape of a hierarchy. Single source of truth for all
/// level/chunk arithmetic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyConfig {
    /// Number of levels above the token stream.
    pub levels: usize,
    /// Chunk length per level, `chunk[l-1]` = C_l.
    pub chunk: Vec<usize>,
    /// Converter width per level, `conv_width[l-1]` = R_l.
    pub conv_width: Vec<usize>,
    /// Hidden dims per level, `dims[l]` = D_l; `dims[0]` is the encoder-side
    /// token embedding width.
    pub dims: Vec<usize>,
    /// Decoder-side token embedding width (the bottom decoder's width).
    pub dec_embed_dim: usize,
    pub vocab_size: usize,
    pub bos_id: u32,
    pub pad_id: u32,
    /// Context encoder stack per level.
    pub enc: Vec<BlockConfig>,
    /// Local decoder stack per level; the level-l decoder runs at the width
    /// of the stream it reconstructs.
    pub dec: Vec<BlockConfig>,
    pub dissimilarity: Dissimilarity,
}

impl HierarchyConfig {
    /// Small config with uniform stack shapes; used by tests and as a CLI
    /// starting point.
    pub fn toy(
        chunk: &[usize],
        dims: &[usize],
        n_layers: usize,
        n_heads: usize,
        vocab_size: usize,
    ) -> Self {
        let levels = chunk.len();
        assert_eq!(dims.len(), levels + 1);
        let dec_embed_dim = dims[0];
        let stack = |d: usize| BlockConfig {
            hidden_dim: d,
            intermediate_dim: 2 * d,
            n_layers,
            n_heads,
            head_dim: d / n_heads,
        };
        let cfg = HierarchyConfig {
            levels,
            chunk: chunk.to_vec(),
            conv_width: vec![2; levels],
            dims: dims.to_vec(),
            dec_embed_dim,
            vocab_size,
            bos_id: 1,
            pad_id: 0,
            enc: (1..=levels).map(|l| stack(dims[l])).collect(),
            dec: (1..=levels)
                .map(|l| stack(if l == 1 { dec_embed_dim } else { dims[l - 1] }))
                .collect(),
            dissimilarity: Dissimilarity::Mse,
        };
        cfg.validate().expect("toy config must be valid");
        cfg
    }

    pub fn with_conv_width(mut self, conv_width: &[usize]) -> Self {
        assert_eq!(conv_width.len(), self.levels);
        self.conv_width = conv_width.to_vec();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.levels;
        if l == 0 {
            return Err(Error::Config("levels must be ≥ 1".into()));
        }
        for (name, len) in [
            ("chunk", self.chunk.len()),
            ("conv_width", self.conv_width.len()),
            ("enc", self.enc.len()),
            ("dec", self.dec.len()),
        ] {
            if len != l {
                return Err(Error::Config(format!(
                    "{name} has {len} entries, expected {l}"
                )));
            }
        }
        if self.dims.len() != l + 1 {
            return Err(Error::Config(format!(
                "dims has {} entries, expected {}",
                self.dims.len(),
                l + 1
            )));
        }
        if self.chunk.iter().any(|&c| c == 0) || self.conv_width.iter().any(|&r| r == 0) {
            return Err(Error::Config("chunk lengths and converter widths must be ≥ 1".into()));
        }
        // Level-1 chunker is parameter-free concatenation.
        if self.chunk[0] * self.dims[0] != self.dims[1] {
            return Err(Error::Config(format!(
                "level-1 chunker is concatenation: C_1·D_0 = {}·{} must equal D_1 = {}",
                self.chunk[0], self.dims[0], self.dims[1]
            )));
        }
        for lv in 1..=l {
            let e = &self.enc[lv - 1];
            e.validate()?;
            if e.hidden_dim != self.dims[lv] {
                return Err(Error::Config(format!(
                    "enc level {lv} hidden {} != D_{lv} = {}",
                    e.hidden_dim, self.dims[lv]
                )));
            }
            let d = &self.dec[lv - 1];
            d.validate()?;
            if d.hidden_dim != self.dec_width(lv - 1) {
                return Err(Error::Config(format!(
                    "dec level {lv} hidden {} != decoder width {}",
                    d.hidden_dim,
                    self.dec_width(lv - 1)
                )));
            }
        }
        if self.bos_id as usize >= self.vocab_size || self.pad_id as usize >= self.vocab_size {
            return Err(Error::Config("reserved token ids outside vocabulary".into()));
        }
        Ok(())
    }

    /// Cumulative coarsening C_{≤l} = Π_{k≤l} C_k, with C_{≤0} = 1.
    pub fn coarsening(&self, l: usize) -> usize {
        self.chunk[..l].iter().product()
    }

    /// Π over all levels; contexts must be a multiple of this.
    pub fn chunk_product(&self) -> usize {
        self.coarsening(self.levels)
    }

    /// Units at level `l` for a context of `t` tokens (t must divide evenly).
    pub fn units_at(&self, t: usize, l: usize) -> Result<usize> {
        let c = self.coarsening(l);
        if t % c != 0 {
            return Err(Error::ChunkDivisibility {
                len: t,
                chunk_product: c,
            });
        }
        Ok(t / c)
    }

    /// Width of the stream the level-l decoder reconstructs (`k = l − 1`).
    pub fn dec_width(&self, k: usize) -> usize {
        if k == 0 {
            self.dec_embed_dim
        } else {
            self.dims[k]
        }
    }

    /// 1-based index set of the g-th level-l chunk within the level-(l−1)
    /// timeline: {(g−1)·C_l + 1, …, g·C_l}.
    pub fn chunk_indices(
        &self,
        t: usize,
        l: usize,
        g: usize,
    ) -> Result<std::ops::RangeInclusive<usize>> {
        let m_l = self.units_at(t, l)?;
        if g == 0 || g > m_l {
            return Err(Error::ChunkIndexOutOfRange { g, max: m_l });
        }
        let c = self.chunk[l - 1];
        Ok((g - 1) * c + 1..=g * c)
    }

    /// Right-pad with the pad token to a multiple of the chunk product.
    pub fn pad_to_multiple(&self, tokens: &[u32]) -> Vec<u32> {
        let p = self.chunk_product();
        let rem = tokens.len() % p;
        let mut out = tokens.to_vec();
        if rem != 0 {
            out.extend(std::iter::repeat(self.pad_id).take(p - rem));
        }
        out
    }
}

/// Chunker for levels ≥ 2: norm → bias-free projection → norm over the
/// concatenated chunk.
#[derive(Debug, Clone)]
pub struct ChunkerParams<P> {
    pub gain_in: P,
    pub w: P,
    pub gain_out: P,
}

/// Converter: one linear map expanding a latent into R_l conditioning rows.
#[derive(Debug, Clone)]
pub struct ConverterParams<P> {
    pub w: P,
    pub b: P,
}

/// All learnable parameters of a hierarchy.
#[derive(Debug, Clone)]
pub struct ModelParams<P> {
    pub enc_embed: P,
    /// Per level; level 1 is parameter-free concatenation.
    pub chunkers: Vec<Option<ChunkerParams<P>>>,
    pub enc_stacks: Vec<StackParams<P>>,
    /// Learned start latent per level, width D_l.
    pub start_latents: Vec<P>,
    pub converters: Vec<ConverterParams<P>>,
    /// Learned begin-of-chunk teacher row for levels ≥ 2.
    pub boc_rows: Vec<Option<P>>,
    pub dec_stacks: Vec<StackParams<P>>,
    pub dec_embed: P,
    pub lm_head: P,
}

impl<E: Element> ModelParams<Tensor<E>> {
    pub fn init(cfg: &HierarchyConfig, std: f64, rng: &mut impl rand::Rng) -> Result<Self> {
        cfg.validate()?;
        let l = cfg.levels;
        let mut chunkers = Vec::with_capacity(l);
        let mut enc_stacks = Vec::with_capacity(l);
        let mut start_latents = Vec::with_capacity(l);
        let mut converters = Vec::with_capacity(l);
        let mut boc_rows = Vec::with_capacity(l);
        let mut dec_stacks = Vec::with_capacity(l);
        for lv in 1..=l {
            let din = cfg.chunk[lv - 1] * cfg.dims[lv - 1];
            let dout = cfg.dims[lv];
            chunkers.push(if lv == 1 {
                None
            } else {
                Some(ChunkerParams {
                    gain_in: Tensor::ones(vec![din]),
                    w: Tensor::randn(vec![din, dout], std, rng),
                    gain_out: Tensor::ones(vec![dout]),
                })
            });
            enc_stacks.push(StackParams::init(cfg.enc[lv - 1], std, rng)?);
            start_latents.push(Tensor::randn(vec![1, cfg.dims[lv]], std, rng));
            let w = cfg.dec_width(lv - 1);
            let r = cfg.conv_width[lv - 1];
            converters.push(ConverterParams {
                w: Tensor::randn(vec![cfg.dims[lv], r * w], std, rng),
                b: Tensor::zeros(vec![1, r * w]),
            });
            boc_rows.push(if lv == 1 {
                None
            } else {
                Some(Tensor::randn(vec![1, w], std, rng))
            });
            dec_stacks.push(StackParams::init(cfg.dec[lv - 1], std, rng)?);
        }
        Ok(ModelParams {
            enc_embed: Tensor::randn(vec![cfg.vocab_size, cfg.dims[0]], std, rng),
            chunkers,
            enc_stacks,
            start_latents,
            converters,
            boc_rows,
            dec_stacks,
            dec_embed: Tensor::randn(vec![cfg.vocab_size, cfg.dec_embed_dim], std, rng),
            lm_head: Tensor::randn(vec![cfg.dec_embed_dim, cfg.vocab_size], std, rng),
        })
    }

    pub fn bind(&self, tape: &Tape<E>) -> ModelParams<Var> {
        ModelParams {
            enc_embed: tape.leaf(self.enc_embed.clone()),
            chunkers: self
                .chunkers
                .iter()
                .map(|c| {
                    c.as_ref().map(|c| ChunkerParams {
                        gain_in: tape.leaf(c.gain_in.clone()),
                        w: tape.leaf(c.w.clone()),
                        gain_out: tape.leaf(c.gain_out.clone()),
                    })
                })
                .collect(),
            enc_stacks: self.enc_stacks.iter().map(|s| s.bind(tape)).collect(),
            start_latents: self
                .start_latents
                .iter()
                .map(|t| tape.leaf(t.clone()))
                .collect(),
            converters: self
                .converters
                .iter()
                .map(|c| ConverterParams {
                    w: tape.leaf(c.w.clone()),
                    b: tape.leaf(c.b.clone()),
                })
                .collect(),
            boc_rows: self
                .boc_rows
                .iter()
                .map(|b| b.as_ref().map(|t| tape.leaf(t.clone())))
                .collect(),
            dec_stacks: self.dec_stacks.iter().map(|s| s.bind(tape)).collect(),
            dec_embed: tape.leaf(self.dec_embed.clone()),
            lm_head: tape.leaf(self.lm_head.clone()),
        }
    }

    /// Total learnable scalars, summed over the actual tensors.
    pub fn param_count(&self) -> u64 {
        let mut n = 0u64;
        self.visit(&mut |_, t| n += t.numel() as u64);
        n
    }
}

impl<P> ModelParams<P> {
    pub fn visit(&self, f: &mut dyn FnMut(String, &P)) {
        f("enc_embed".into(), &self.enc_embed);
        for (i, c) in self.chunkers.iter().enumerate() {
            if let Some(c) = c {
                let lv = i + 1;
                f(format!("enc.l{lv}.chunker.gain_in"), &c.gain_in);
                f(format!("enc.l{lv}.chunker.w"), &c.w);
                f(format!("enc.l{lv}.chunker.gain_out"), &c.gain_out);
            }
        }
        for (i, s) in self.enc_stacks.iter().enumerate() {
            s.visit(&format!("enc.l{}.stack", i + 1), f);
        }
        for (i, t) in self.start_latents.iter().enumerate() {
            f(format!("start.l{}", i + 1), t);
        }
        for (i, c) in self.converters.iter().enumerate() {
            let lv = i + 1;
            f(format!("dec.l{lv}.conv.w"), &c.w);
            f(format!("dec.l{lv}.conv.b"), &c.b);
        }
        for (i, b) in self.boc_rows.iter().enumerate() {
            if let Some(b) = b {
                f(format!("dec.l{}.boc", i + 1), b);
            }
        }
        for (i, s) in self.dec_stacks.iter().enumerate() {
            s.visit(&format!("dec.l{}.stack", i + 1), f);
        }
        f("dec_embed".into(), &self.dec_embed);
        f("lm_head".into(), &self.lm_head);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut P)) {
        f("enc_embed".into(), &mut self.enc_embed);
        for (i, c) in self.chunkers.iter_mut().enumerate() {
            if let Some(c) = c {
                let lv = i + 1;
                f(format!("enc.l{lv}.chunker.gain_in"), &mut c.gain_in);
                f(format!("enc.l{lv}.chunker.w"), &mut c.w);
                f(format!("enc.l{lv}.chunker.gain_out"), &mut c.gain_out);
            }
        }
        for (i, s) in self.enc_stacks.iter_mut().enumerate() {
            s.visit_mut(&format!("enc.l{}.stack", i + 1), f);
        }
        for (i, t) in self.start_latents.iter_mut().enumerate() {
            f(format!("start.l{}", i + 1), t);
        }
        for (i, c) in self.converters.iter_mut().enumerate() {
            let lv = i + 1;
            f(format!("dec.l{lv}.conv.w"), &mut c.w);
            f(format!("dec.l{lv}.conv.b"), &mut c.b);
        }
        for (i, b) in self.boc_rows.iter_mut().enumerate() {
            if let Some(b) = b {
                f(format!("dec.l{}.boc", i + 1), b);
            }
        }
        for (i, s) in self.dec_stacks.iter_mut().enumerate() {
            s.visit_mut(&format!("dec.l{}.stack", i + 1), f);
        }
        f("dec_embed".into(), &mut self.dec_embed);
        f("lm_head".into(), &mut self.lm_head);
    }
}

/// Flat decoder-only baseline: embedding, one stack, head. Shares the input
/// convention with the hierarchy (row i consumes t_{i−1}, scores t_i).
#[derive(Debug, Clone)]
pub struct FlatParams<P> {
    pub embed: P,
    pub stack: StackParams<P>,
    pub head: P,
}

impl<E: Element> FlatParams<Tensor<E>> {
    pub fn init(
        cfg: BlockConfig,
        vocab: usize,
        std: f64,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        Ok(FlatParams {
            embed: Tensor::randn(vec![vocab, cfg.hidden_dim], std, rng),
            stack: StackParams::init(cfg, std, rng)?,
            head: Tensor::randn(vec![cfg.hidden_dim, vocab], std, rng),
        })
    }

    pub fn bind(&self, tape: &Tape<E>) -> FlatParams<Var> {
        FlatParams {
            embed: tape.leaf(self.embed.clone()),
            stack: self.stack.bind(tape),
            head: tape.leaf(self.head.clone()),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.shape()[0]
    }

    pub fn param_count(&self) -> u64 {
        let mut n = 0u64;
        self.visit(&mut |_, t| n += t.numel() as u64);
        n
    }
}

impl<P> FlatParams<P> {
    pub fn visit(&self, f: &mut dyn FnMut(String, &P)) {
        f("embed".into(), &self.embed);
        self.stack.visit("stack", f);
        f("head".into(), &self.head);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut P)) {
        f("embed".into(), &mut self.embed);
        self.stack.visit_mut("stack", f);
        f("head".into(), &mut self.head);
    }
}

/// Batched forward of the flat baseline; logits row i scores t_i.
pub fn flat_forward<E: Element>(
    tape: &Tape<E>,
    params: &FlatParams<Var>,
    tokens: &[u32],
    bos_id: u32,
) -> Result<Var> {
    let shifted: Vec<usize> = (0..tokens.len())
        .map(|i| {
            if i == 0 {
                bos_id as usize
            } else {
                tokens[i - 1] as usize
            }
        })
        .collect();
    let x = tape.gather_rows(params.embed, shifted)?;
    let h = stack_forward_tape(tape, &params.stack, x, CausalMask::dense())?;
    tape.matmul(h, params.head)
}

/// Everything the batched forward produces, as tape handles: the per-level
/// aggregated chunks A, contextualized states X, the top-down
/// reconstructions, and the vocabulary logits.
pub struct ForwardStates {
    /// Row i scores t_i given t_{<i} (teacher row i carries t_{i−1}).
    pub logits: Var,
    /// Encoder-side token embeddings X^(0), [T×D_0].
    pub token_embeds: Var,
    /// A^(l), aggregated chunk inputs per level.
    pub agg: Vec<Var>,
    /// X^(l), contextualized states per level.
    pub enc_x: Vec<Var>,
    /// X̂^(k) for k = 0..L−1: the reconstruction of the level-k stream
    /// produced by the level-(k+1) decoder.
    pub rec: Vec<Var>,
}

/// Encoder sweep: returns (A^(l), X^(l)) per level.
pub fn encode_tape<E: Element>(
    tape: &Tape<E>,
    cfg: &HierarchyConfig,
    params: &ModelParams<Var>,
    token_embeds: Var,
) -> Result<(Vec<Var>, Vec<Var>)> {
    let t = tape.shape(token_embeds)[0];
    let mut agg = Vec::with_capacity(cfg.levels);
    let mut enc_x = Vec::with_capacity(cfg.levels);
    let mut prev = token_embeds;
    for lv in 1..=cfg.levels {
        let m = cfg.units_at(t, lv)?;
        let c = cfg.chunk[lv - 1];
        let din = c * cfg.dims[lv - 1];
        let cat = tape.reshape(prev, vec![m, din])?;
        let a = match &params.chunkers[lv - 1] {
            None => cat,
            Some(ch) => {
                let n1 = tape.rmsnorm(cat, ch.gain_in)?;
                let proj = tape.matmul(n1, ch.w)?;
                tape.rmsnorm(proj, ch.gain_out)?
            }
        };
        let x = stack_forward_tape(tape, &params.enc_stacks[lv - 1], a, CausalMask::dense())?;
        agg.push(a);
        enc_x.push(x);
        prev = x;
    }
    Ok((agg, enc_x))
}

/// Expand one latent row into the R_l conditioning rows.
fn convert_tape<E: Element>(
    tape: &Tape<E>,
    cfg: &HierarchyConfig,
    conv: &ConverterParams<Var>,
    lv: usize,
    latent: Var,
) -> Result<Var> {
    let r = cfg.conv_width[lv - 1];
    let w = cfg.dec_width(lv - 1);
    let flat = tape.add(tape.matmul(latent, conv.w)?, conv.b)?;
    tape.reshape(flat, vec![r, w])
}

/// Full batched forward: encoder hierarchy up, decoder hierarchy down,
/// vocabulary projection at the bottom.
pub fn model_forward<E: Element>(
    tape: &Tape<E>,
    cfg: &HierarchyConfig,
    params: &ModelParams<Var>,
    tokens: &[u32],
) -> Result<ForwardStates> {
    let t = tokens.len();
    cfg.units_at(t, cfg.levels)?;
    let ids: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();
    let token_embeds = tape.gather_rows(params.enc_embed, ids.clone())?;
    let (agg, enc_x) = encode_tape(tape, cfg, params, token_embeds)?;

    let mut rec: Vec<Option<Var>> = vec![None; cfg.levels];
    let mut above = enc_x[cfg.levels - 1]; // X̂^(L) := X^(L)
    for lv in (1..=cfg.levels).rev() {
        let m = cfg.units_at(t, lv)?;
        let c = cfg.chunk[lv - 1];
        let r = cfg.conv_width[lv - 1];
        // Teacher rows for the whole level-(l−1) timeline.
        let teacher_all = if lv == 1 {
            let shifted: Vec<usize> = (0..t)
                .map(|i| if i == 0 { cfg.bos_id as usize } else { ids[i - 1] })
                .collect();
            tape.gather_rows(params.dec_embed, shifted)?
        } else {
            enc_x[lv - 2]
        };
        let mut chunks = Vec::with_capacity(m);
        for g in 1..=m {
            let latent = if g == 1 {
                params.start_latents[lv - 1]
            } else {
                tape.slice_rows(above, g - 2, 1)?
            };
            let u = convert_tape(tape, cfg, &params.converters[lv - 1], lv, latent)?;
            let teacher = if lv == 1 {
                tape.slice_rows(teacher_all, (g - 1) * c, c)?
            } else {
                let boc = params.boc_rows[lv - 1].expect("upper level has a begin-of-chunk row");
                let body = tape.slice_rows(teacher_all, (g - 1) * c, c - 1)?;
                tape.concat_rows(&[boc, body])?
            };
            let seq = tape.concat_rows(&[u, teacher])?;
            let out = stack_forward_tape(tape, &params.dec_stacks[lv - 1], seq, CausalMask::dense())?;
            chunks.push(tape.slice_rows(out, r, c)?);
        }
        let xhat = tape.concat_rows(&chunks)?;
        rec[lv - 1] = Some(xhat);
        above = xhat;
    }
    let rec: Vec<Var> = rec.into_iter().map(|v| v.unwrap()).collect();
    let logits = tape.matmul(rec[0], params.lm_head)?;
    Ok(ForwardStates {
        logits,
        token_embeds,
        agg,
        enc_x,
        rec,
    })
}
