//! The training objective (next-token NLL plus recursive-reconstruction and
//! next-context regularizers), Adam with linear warmup, and a deterministic
//! training loop for both the hierarchy and the flat baseline.

use std::collections::BTreeMap;

use crate::model::{
    flat_forward, model_forward, Dissimilarity, FlatParams, ForwardStates, HierarchyConfig,
    ModelParams,
};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Element, Tensor};
use crate::{Error, Result};

/// Weights of the two auxiliary losses.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub const TOKEN_ONLY: LossWeights = LossWeights {
        alpha: 0.0,
        beta: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::NegativeLossWeight(self.alpha));
        }
        if self.beta < 0.0 {
            return Err(Error::NegativeLossWeight(self.beta));
        }
        Ok(())
    }
}

/// Scalar loss components of one forward pass, in nats.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LossBundle {
    /// Mean next-token NLL per predicted position.
    pub token_nll: f64,
    pub rec_loss: f64,
    pub context_loss: f64,
    /// token_nll + α·rec + β·context.
    pub total: f64,
    /// Summed NLL over predicted positions.
    pub token_nll_sum: f64,
    /// Number of positions contributing to the NLL.
    pub n_predicted: usize,
}

/// Next-token NLL over rows 1..T−1 of the logits (row i scores t_i given
/// t_{<i}; the first token has no conditioning transition). Rows whose
/// target is the pad token are masked out.
///
/// Returns (mean, sum, count).
pub fn token_nll<E: Element>(
    tape: &Tape<E>,
    logits: Var,
    tokens: &[u32],
    pad_id: u32,
) -> Result<(Var, Var, usize)> {
    let t = tokens.len();
    if t < 2 {
        return Err(Error::SequenceTooShort { need: 2, got: t });
    }
    let targets: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();
    let ce = tape.cross_entropy_rows(logits, targets)?;
    let mut mask = Tensor::zeros(vec![t]);
    let mut n = 0usize;
    for i in 1..t {
        if tokens[i] != pad_id {
            mask.data_mut()[i] = E::one();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::SequenceTooShort { need: 2, got: 1 });
    }
    let maskv = tape.constant(mask);
    let sum = tape.sum(tape.mul(ce, maskv)?)?;
    let mean = tape.scale(sum, 1.0 / n as f64)?;
    Ok((mean, sum, n))
}

fn dissim_sum<E: Element>(
    tape: &Tape<E>,
    kind: Dissimilarity,
    pred: Var,
    target_detached: Var,
) -> Result<Var> {
    match kind {
        Dissimilarity::Mse => {
            let d = tape.sub(pred, target_detached)?;
            tape.sum(tape.mul(d, d)?)
        }
        Dissimilarity::Cosine => {
            let c = tape.cosine_distance_rows(pred, target_detached)?;
            tape.sum(c)
        }
    }
}

/// Recursive reconstruction loss: align each top-down reconstruction with
/// the bottom-up stream it rebuilds. Targets are constants (no gradient).
///
/// For MSE the per-level dissimilarity is a sum of squared differences and
/// the whole sum is normalized by the total scalar count Σ_l M_l·C_l·W_{l−1};
/// for cosine it is normalized by the total row count.
///
/// The level-0 target is the encoder-side embedding when the decoder runs at
/// the same width; otherwise the decoder-side embedding of the same tokens.
pub fn reconstruction_loss<E: Element>(
    tape: &Tape<E>,
    cfg: &HierarchyConfig,
    params: &ModelParams<Var>,
    states: &ForwardStates,
    tokens: &[u32],
) -> Result<Var> {
    let t = tokens.len();
    let mut acc: Option<Var> = None;
    let mut norm = 0u64;
    for lv in 1..=cfg.levels {
        let pred = states.rec[lv - 1];
        let target = if lv == 1 {
            if cfg.dec_embed_dim == cfg.dims[0] {
                states.token_embeds
            } else {
                let ids: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();
                tape.gather_rows(params.dec_embed, ids)?
            }
        } else {
            states.enc_x[lv - 2]
        };
        let rows = cfg.units_at(t, lv - 1)? as u64;
        norm += match cfg.dissimilarity {
            Dissimilarity::Mse => rows * cfg.dec_width(lv - 1) as u64,
            Dissimilarity::Cosine => rows,
        };
        let det = tape.detach(target);
        let term = dissim_sum(tape, cfg.dissimilarity, pred, det)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    tape.scale(acc.expect("at least one level"), 1.0 / norm as f64)
}

/// Next-context loss: the causal encoder state at chunk g−1 predicts the
/// aggregate A_g. Levels with fewer than two chunks contribute zero.
/// Targets are constants (no gradient).
pub fn next_context_loss<E: Element>(
    tape: &Tape<E>,
    cfg: &HierarchyConfig,
    states: &ForwardStates,
    t: usize,
) -> Result<Var> {
    let mut acc = tape.constant(Tensor::scalar(E::zero()));
    for lv in 1..=cfg.levels {
        let m = cfg.units_at(t, lv)?;
        if m < 2 {
            continue;
        }
        let pred = tape.slice_rows(states.enc_x[lv - 1], 0, m - 1)?;
        let target = tape.detach(tape.slice_rows(states.agg[lv - 1], 1, m - 1)?);
        let term = dissim_sum(tape, cfg.dissimilarity, pred, target)?;
        let scaled = tape.scale(term, 1.0 / (m - 1) as f64)?;
        acc = tape.add(acc, scaled)?;
    }
    Ok(acc)
}

/// Weighted total over one batched forward. Zero-weight terms are still
/// evaluated for reporting but are never attached to the optimized total, so
/// with α = β = 0 the total and its gradients are the token NLL exactly.
pub fn total_loss<E: Element>(
    tape: &Tape<E>,
    cfg: &HierarchyConfig,
    params: &ModelParams<Var>,
    states: &ForwardStates,
    tokens: &[u32],
    weights: &LossWeights,
) -> Result<(Var, LossBundle)> {
    weights.validate()?;
    let (nll_mean, nll_sum, n) = token_nll(tape, states.logits, tokens, cfg.pad_id)?;
    let rec = reconstruction_loss(tape, cfg, params, states, tokens)?;
    let ctx = next_context_loss(tape, cfg, states, tokens.len())?;

    let mut total = nll_mean;
    if weights.alpha != 0.0 {
        total = tape.add(total, tape.scale(rec, weights.alpha)?)?;
    }
    if weights.beta != 0.0 {
        total = tape.add(total, tape.scale(ctx, weights.beta)?)?;
    }
    let bundle = LossBundle {
        token_nll: tape.value(nll_mean).item().as_f64(),
        rec_loss: tape.value(rec).item().as_f64(),
        context_loss: tape.value(ctx).item().as_f64(),
        total: tape.value(total).item().as_f64(),
        token_nll_sum: tape.value(nll_sum).item().as_f64(),
        n_predicted: n,
    };
    Ok((total, bundle))
}

/// Collect named gradients for bound parameters. Parameters the loss never
/// reached are omitted (treated as zero by the optimizer).
pub fn named_grads<E: Element, P>(
    grads: &Gradients<E>,
    bound: &P,
    visit: impl Fn(&P, &mut dyn FnMut(String, &Var)),
) -> BTreeMap<String, Tensor<E>> {
    let mut out = BTreeMap::new();
    visit(bound, &mut |name, var| {
        if let Some(g) = grads.get(*var) {
            out.insert(name, g.clone());
        }
    });
    out
}

/// L2 norm over a gradient map.
pub fn grad_norm<E: Element>(grads: &BTreeMap<String, Tensor<E>>) -> f64 {
    let mut acc = 0.0f64;
    for g in grads.values() {
        for &v in g.data() {
            let v = v.as_f64();
            acc += v * v;
        }
    }
    acc.sqrt()
}

fn add_scaled_into<E: Element>(
    acc: &mut BTreeMap<String, Tensor<E>>,
    part: &BTreeMap<String, Tensor<E>>,
    scale: f64,
) {
    let s = E::from_f64(scale);
    for (name, g) in part {
        match acc.get_mut(name) {
            Some(a) => {
                for (x, &y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x = *x + y * s;
                }
            }
            None => {
                acc.insert(name.clone(), g.map(|v| v * s));
            }
        }
    }
}

/// Adam with linear warmup to the peak rate, then constant.
#[derive(Debug, Clone)]
pub struct Adam<E> {
    pub lr: f64,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    m: BTreeMap<String, Tensor<E>>,
    v: BTreeMap<String, Tensor<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(lr: f64, warmup: usize) -> Self {
        Adam {
            lr,
            warmup,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Learning rate at a given step: 0 at step 0, peak at step = warmup.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup == 0 {
            self.lr
        } else {
            self.lr * (step as f64 / self.warmup as f64).min(1.0)
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update over every visited parameter. Missing gradients count as
    /// zero (moments still decay).
    pub fn step(
        &mut self,
        grads: &BTreeMap<String, Tensor<E>>,
        visit_mut: impl FnOnce(&mut dyn FnMut(String, &mut Tensor<E>)),
    ) {
        let lr = self.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let b1 = E::from_f64(self.beta1);
        let b2 = E::from_f64(self.beta2);
        let one = E::one();
        let eps = E::from_f64(self.eps);
        let bc1 = E::from_f64(1.0 - self.beta1.powi(t));
        let bc2 = E::from_f64(1.0 - self.beta2.powi(t));
        let lr_e = E::from_f64(lr);
        let m_map = &mut self.m;
        let v_map = &mut self.v;
        visit_mut(&mut |name, tensor| {
            let g = grads.get(&name);
            let shape = tensor.shape().to_vec();
            let m = m_map
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(shape.clone()));
            let v = v_map.entry(name).or_insert_with(|| Tensor::zeros(shape));
            for i in 0..tensor.numel() {
                let gi = g.map(|g| g.data()[i]).unwrap_or_else(E::zero);
                let mi = b1 * m.data()[i] + (one - b1) * gi;
                let vi = b2 * v.data()[i] + (one - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let upd = lr_e * mhat / (vhat.sqrt() + eps);
                tensor.data_mut()[i] = tensor.data()[i] - upd;
            }
        });
    }
}

/// Everything the loop logs about one step.
#[derive(Debug, Clone, serde::Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub bundle: LossBundle,
    pub grad_norm: f64,
    pub lr: f64,
}

impl StepMetrics {
    /// Tab-separated: step, token_nll, rec, context, total, grad_norm, lr.
    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.8}",
            self.step,
            self.bundle.token_nll,
            self.bundle.rec_loss,
            self.bundle.context_loss,
            self.bundle.total,
            self.grad_norm,
            self.lr
        )
    }
}

/// Loop hyperparameters. `context_len` must divide evenly into the model's
/// chunk grid.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub context_len: usize,
    pub seed: u64,
    pub lr: f64,
    pub warmup: usize,
    pub weights: LossWeights,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    /// Stop once the batch-mean token NLL drops below this value.
    pub stop_below_nll: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 1,
            context_len: 64,
            seed: 0,
            lr: 3e-4,
            warmup: 100,
            weights: LossWeights::TOKEN_ONLY,
            checkpoint_every: 0,
            stop_below_nll: None,
        }
    }
}

/// A model the loop can train: one window in, named gradients out.
pub trait TrainModel<E: Element> {
    fn forward_loss(
        &self,
        tokens: &[u32],
        weights: &LossWeights,
    ) -> Result<(BTreeMap<String, Tensor<E>>, LossBundle)>;
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<E>));
    /// Contexts must be a multiple of this.
    fn context_multiple(&self) -> usize;
}

/// The hierarchy and its configuration, bundled for training and sessions.
pub struct HierarchyModel<E> {
    pub cfg: HierarchyConfig,
    pub params: ModelParams<Tensor<E>>,
}

impl<E: Element> HierarchyModel<E> {
    pub fn init(cfg: HierarchyConfig, std: f64, seed: u64) -> Result<Self> {
        let mut rng = crate::seeded_rng(seed);
        let params = ModelParams::init(&cfg, std, &mut rng)?;
        Ok(HierarchyModel { cfg, params })
    }

    /// Mean NLL and predicted-position count over one window (no backward).
    pub fn score(&self, tokens: &[u32]) -> Result<(f64, usize)> {
        let tape: Tape<E> = Tape::new();
        let bound = self.params.bind(&tape);
        let states = model_forward(&tape, &self.cfg, &bound, tokens)?;
        let (_, sum, n) = token_nll(&tape, states.logits, tokens, self.cfg.pad_id)?;
        Ok((tape.value(sum).item().as_f64(), n))
    }
}

impl<E: Element> TrainModel<E> for HierarchyModel<E> {
    fn forward_loss(
        &self,
        tokens: &[u32],
        weights: &LossWeights,
    ) -> Result<(BTreeMap<String, Tensor<E>>, LossBundle)> {
        let tape: Tape<E> = Tape::new();
        let bound = self.params.bind(&tape);
        let states = model_forward(&tape, &self.cfg, &bound, tokens)?;
        let (total, bundle) = total_loss(&tape, &self.cfg, &bound, &states, tokens, weights)?;
        let grads = tape.backward(total)?;
        let named = named_grads(&grads, &bound, |b: &ModelParams<Var>, f| {
            b.visit(&mut |name, var| f(name, var))
        });
        Ok((named, bundle))
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        self.params.visit_mut(f);
    }

    fn context_multiple(&self) -> usize {
        self.cfg.chunk_product()
    }
}

/// Flat decoder-only baseline bundled for training and sessions.
pub struct FlatModel<E> {
    pub params: FlatParams<Tensor<E>>,
    pub bos_id: u32,
    pub pad_id: u32,
}

impl<E: Element> FlatModel<E> {
    pub fn init(
        cfg: crate::blocks::BlockConfig,
        vocab: usize,
        std: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = crate::seeded_rng(seed);
        Ok(FlatModel {
            params: FlatParams::init(cfg, vocab, std, &mut rng)?,
            bos_id: 1,
            pad_id: 0,
        })
    }

    pub fn score(&self, tokens: &[u32]) -> Result<(f64, usize)> {
        let tape: Tape<E> = Tape::new();
        let bound = self.params.bind(&tape);
        let logits = flat_forward(&tape, &bound, tokens, self.bos_id)?;
        let (_, sum, n) = token_nll(&tape, logits, tokens, self.pad_id)?;
        Ok((tape.value(sum).item().as_f64(), n))
    }
}

impl<E: Element> TrainModel<E> for FlatModel<E> {
    fn forward_loss(
        &self,
        tokens: &[u32],
        _weights: &LossWeights,
    ) -> Result<(BTreeMap<String, Tensor<E>>, LossBundle)> {
        let tape: Tape<E> = Tape::new();
        let bound = self.params.bind(&tape);
        let logits = flat_forward(&tape, &bound, tokens, self.bos_id)?;
        let (mean, sum, n) = token_nll(&tape, logits, tokens, self.pad_id)?;
        let grads = tape.backward(mean)?;
        let named = named_grads(&grads, &bound, |b: &FlatParams<Var>, f| {
            b.visit(&mut |name, var| f(name, var))
        });
        let m = tape.value(mean).item().as_f64();
        let bundle = LossBundle {
            token_nll: m,
            rec_loss: 0.0,
            context_loss: 0.0,
            total: m,
            token_nll_sum: tape.value(sum).item().as_f64(),
            n_predicted: n,
        };
        Ok((named, bundle))
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        self.params.visit_mut(f);
    }

    fn context_multiple(&self) -> usize {
        1
    }
}

/// Deterministic training loop: seeded window sampling, per-sample
/// forward/backward in a fixed order, averaged gradients, Adam update.
/// Aborts on a non-finite loss with the failing step index.
pub fn train_loop<E: Element, M: TrainModel<E>>(
    model: &mut M,
    tcfg: &TrainConfig,
    corpus: &[u32],
    mut on_step: impl FnMut(&StepMetrics) -> Result<()>,
    mut on_checkpoint: impl FnMut(usize, &M) -> Result<()>,
) -> Result<Vec<StepMetrics>> {
    tcfg.weights.validate()?;
    if tcfg.context_len % model.context_multiple() != 0 {
        return Err(Error::ChunkDivisibility {
            len: tcfg.context_len,
            chunk_product: model.context_multiple(),
        });
    }
    if corpus.len() < tcfg.context_len {
        return Err(Error::SequenceTooShort {
            need: tcfg.context_len,
            got: corpus.len(),
        });
    }
    let max_start = corpus.len() - tcfg.context_len;
    let mut rng = crate::seeded_rng(tcfg.seed);
    let mut adam: Adam<E> = Adam::new(tcfg.lr, tcfg.warmup);
    let mut history = Vec::with_capacity(tcfg.steps);

    for step in 0..tcfg.steps {
        let mut grads_acc: BTreeMap<String, Tensor<E>> = BTreeMap::new();
        let mut bundle_acc = LossBundle {
            token_nll: 0.0,
            rec_loss: 0.0,
            context_loss: 0.0,
            total: 0.0,
            token_nll_sum: 0.0,
            n_predicted: 0,
        };
        let inv = 1.0 / tcfg.batch_size as f64;
        for _ in 0..tcfg.batch_size {
            let start = if max_start == 0 {
                0
            } else {
                rand::Rng::gen_range(&mut rng, 0..=max_start)
            };
            let window = &corpus[start..start + tcfg.context_len];
            let (grads, bundle) = model.forward_loss(window, &tcfg.weights)?;
            if !bundle.total.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            add_scaled_into(&mut grads_acc, &grads, inv);
            bundle_acc.token_nll += bundle.token_nll * inv;
            bundle_acc.rec_loss += bundle.rec_loss * inv;
            bundle_acc.context_loss += bundle.context_loss * inv;
            bundle_acc.total += bundle.total * inv;
            bundle_acc.token_nll_sum += bundle.token_nll_sum;
            bundle_acc.n_predicted += bundle.n_predicted;
        }
        let gnorm = grad_norm(&grads_acc);
        if !gnorm.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let lr = adam.lr_at(step);
        adam.step(&grads_acc, |f| model.visit_params_mut(f));
        let metrics = StepMetrics {
            step,
            bundle: bundle_acc,
            grad_norm: gnorm,
            lr,
        };
        on_step(&metrics)?;
        let reached = tcfg
            .stop_below_nll
            .is_some_and(|t| metrics.bundle.token_nll < t);
        history.push(metrics);
        if tcfg.checkpoint_every > 0 && (step + 1) % tcfg.checkpoint_every == 0 {
            on_checkpoint(step + 1, model)?;
        }
        if reached {
            break;
        }
    }
    Ok(history)
}
