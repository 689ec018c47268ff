//! Command implementations behind the `photon` binary: corpus ingestion,
//! training, evaluation, generation, the parameter audit, and the KV-traffic
//! bench. Everything is a library function so tests drive the same code the
//! binary does.

pub mod checkpoint;
pub mod config;
pub mod corpus;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use photon_core::cost::{decode_schedule, kv_storage, prefill_compute, CostConfig, CostReport};
use photon_core::count::{preset_breakdown, Breakdown, Preset};
use photon_core::infer::{FlatSession, PhotonSession, Sampler, TrafficLedger};
use photon_core::model::{FlatParams, HierarchyConfig, ModelParams};
use photon_core::tensor::{DType, Element, Tensor};
use photon_core::train::{train_loop, FlatModel, HierarchyModel, LossWeights, TrainConfig};

use config::{model_spec, ModelSpec, RawConfig};
use corpus::Corpus;

/// Errors mapped onto the documented exit codes: 2 for configuration
/// problems, 3 for numeric failures, 1 otherwise.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(String),
    Io(std::io::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl From<photon_core::Error> for CliError {
    fn from(e: photon_core::Error) -> Self {
        use photon_core::Error as E;
        match e {
            E::NonFinite { .. }
            | E::NonFiniteLoss { .. }
            | E::NonFiniteLogits
            | E::EmptyAttentionRow { .. } => CliError::Numeric(e.to_string()),
            E::Io(io) => CliError::Io(io),
            other => CliError::Config(other.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// `photon ingest`: raw bytes in, corpus file out.
pub fn cmd_ingest(inputs: &[PathBuf], out: &Path) -> CliResult<String> {
    if inputs.is_empty() {
        return Err(CliError::Config("ingest needs at least one input file".into()));
    }
    let corpus = corpus::ingest_paths(inputs)?;
    corpus.validate()?;
    corpus.save(out)?;
    Ok(format!(
        "ingested {} documents, {} tokens (vocab {}), wrote {}",
        corpus.boundaries.len(),
        corpus.ids.len(),
        corpus.vocab_size,
        out.display()
    ))
}

fn render_breakdown(b: &Breakdown) -> String {
    let mut out = String::new();
    out.push_str(&format!("preset {}\n", b.label));
    out.push_str(&format!("  {:<24} {:>14} {:>14}\n", "component", "parameters", "reference"));
    for c in &b.components {
        match c.reference {
            Some(r) if r != c.count => {
                let diff = c.count as i64 - r as i64;
                out.push_str(&format!(
                    "  {:<24} {:>14} {:>14}  diff {:+}\n",
                    c.name, c.count, r, diff
                ));
            }
            Some(r) => {
                out.push_str(&format!("  {:<24} {:>14} {:>14}\n", c.name, c.count, r));
            }
            None => {
                out.push_str(&format!("  {:<24} {:>14} {:>14}\n", c.name, c.count, "-"));
            }
        }
    }
    match b.reference_total {
        Some(r) => {
            let diff = b.total as i64 - r as i64;
            let dev = 100.0 * (diff as f64).abs() / r as f64;
            out.push_str(&format!(
                "  {:<24} {:>14} {:>14}  diff {:+} ({:.4}%)\n",
                "total", b.total, r, diff, dev
            ));
        }
        None => out.push_str(&format!("  {:<24} {:>14}\n", "total", b.total)),
    }
    out
}

/// `photon params`: the per-component audit against the published tables.
pub fn cmd_params(which: Option<&str>) -> CliResult<String> {
    let presets: Vec<Preset> = match which {
        None | Some("all") => Preset::ALL.to_vec(),
        Some(name) => vec![Preset::parse(name).ok_or_else(|| {
            CliError::Config(format!(
                "unknown preset {name:?} (expected one of vanilla-600m, vanilla-1.2b, photon-600m, photon-1.2b)"
            ))
        })?],
    };
    let mut out = String::new();
    for p in presets {
        out.push_str(&render_breakdown(&preset_breakdown(p)));
        out.push('\n');
    }
    Ok(out)
}

fn train_config(raw: &RawConfig, spec: &ModelSpec) -> CliResult<TrainConfig> {
    let weights = LossWeights {
        alpha: raw.f64("train.alpha", 0.0)?,
        beta: raw.f64("train.beta", 0.0)?,
    };
    weights.validate().map_err(CliError::from)?;
    let context = raw.usize("train.context", 64)?;
    if context % spec.context_multiple() != 0 {
        return Err(CliError::Config(format!(
            "train.context {} must be a multiple of {}",
            context,
            spec.context_multiple()
        )));
    }
    let stop = raw.f64("train.stop_below_nll", 0.0)?;
    Ok(TrainConfig {
        steps: raw.usize("train.steps", 500)?,
        batch_size: raw.usize("train.batch", 2)?.max(1),
        context_len: context,
        seed: raw.u64("train.seed", 0)?,
        lr: raw.f64("train.lr", 3e-3)?,
        warmup: raw.usize("train.warmup", 100)?,
        weights,
        checkpoint_every: raw.usize("train.checkpoint_every", 0)?,
        stop_below_nll: (stop > 0.0).then_some(stop),
    })
}

/// `photon train`: deterministic training run with a manifest, a per-step
/// metrics log, and checkpoints.
pub fn cmd_train(raw: &RawConfig) -> CliResult<String> {
    match raw.dtype()? {
        DType::F64 => train_impl::<f64>(raw),
        DType::F32 => train_impl::<f32>(raw),
    }
}

fn train_impl<E: Element>(raw: &RawConfig) -> CliResult<String> {
    let spec = model_spec(raw)?;
    let corpus_path = PathBuf::from(raw.required("train.corpus")?);
    let corpus = Corpus::load(&corpus_path)?;
    let tokens = corpus.tokens();
    let tcfg = train_config(raw, &spec)?;
    let init_std = raw.f64("train.init_std", 0.05)?;

    let out_dir = PathBuf::from(raw.str_or("train.out_dir", "run"));
    std::fs::create_dir_all(&out_dir).map_err(CliError::Io)?;

    // Run manifest: resolved config, seed, code version, input hash.
    let corpus_bytes = std::fs::read(&corpus_path).map_err(CliError::Io)?;
    let manifest = format!(
        "version={}\nseed={}\ncorpus={}\ncorpus_fnv1a={:016x}\n--- resolved config ---\n{}",
        env!("CARGO_PKG_VERSION"),
        tcfg.seed,
        corpus_path.display(),
        corpus::fnv1a(&corpus_bytes),
        raw.snapshot()
    );
    std::fs::write(out_dir.join("manifest.txt"), manifest).map_err(CliError::Io)?;

    let metrics_path = out_dir.join("metrics.tsv");
    let metrics_file = std::fs::File::create(&metrics_path).map_err(CliError::Io)?;
    let mut metrics = std::io::BufWriter::new(metrics_file);
    writeln!(metrics, "#step\ttoken_nll\trec\tcontext\ttotal\tgrad_norm\tlr")
        .map_err(CliError::Io)?;

    let final_ckpt = out_dir.join("model.phk");
    let summary = match spec {
        ModelSpec::Hierarchy(cfg) => {
            if corpus.vocab_size as usize != cfg.vocab_size {
                return Err(CliError::Config(format!(
                    "corpus vocab {} != model vocab {}",
                    corpus.vocab_size, cfg.vocab_size
                )));
            }
            let mut model: HierarchyModel<E> =
                HierarchyModel::init(cfg, init_std, tcfg.seed).map_err(CliError::from)?;
            let hist = train_loop(
                &mut model,
                &tcfg,
                &tokens,
                |m| {
                    writeln!(metrics, "{}", m.tsv_line())?;
                    Ok(())
                },
                |step, m| {
                    checkpoint::save_hierarchy(
                        &out_dir.join(format!("ck_{step}.phk")),
                        &m.cfg,
                        &m.params,
                    )
                    .map_err(|e| photon_core::Error::Config(e.to_string()))?;
                    Ok(())
                },
            )
            .map_err(CliError::from)?;
            checkpoint::save_hierarchy(&final_ckpt, &model.cfg, &model.params)?;
            let last = hist.last().expect("at least one step");
            format!(
                "trained photon model for {} steps; final token NLL {:.4} nats\nmetrics: {}\ncheckpoint: {}",
                hist.len(),
                last.bundle.token_nll,
                metrics_path.display(),
                final_ckpt.display()
            )
        }
        ModelSpec::Flat { cfg, vocab } => {
            if corpus.vocab_size as usize != vocab {
                return Err(CliError::Config(format!(
                    "corpus vocab {} != model vocab {}",
                    corpus.vocab_size, vocab
                )));
            }
            let mut model: FlatModel<E> =
                FlatModel::init(cfg, vocab, init_std, tcfg.seed).map_err(CliError::from)?;
            let hist = train_loop(
                &mut model,
                &tcfg,
                &tokens,
                |m| {
                    writeln!(metrics, "{}", m.tsv_line())?;
                    Ok(())
                },
                |step, m| {
                    checkpoint::save_flat(&out_dir.join(format!("ck_{step}.phk")), &m.params)
                        .map_err(|e| photon_core::Error::Config(e.to_string()))?;
                    Ok(())
                },
            )
            .map_err(CliError::from)?;
            checkpoint::save_flat(&final_ckpt, &model.params)?;
            let last = hist.last().expect("at least one step");
            format!(
                "trained flat model for {} steps; final token NLL {:.4} nats\nmetrics: {}\ncheckpoint: {}",
                hist.len(),
                last.bundle.token_nll,
                metrics_path.display(),
                final_ckpt.display()
            )
        }
    };
    metrics.flush().map_err(CliError::Io)?;
    Ok(summary)
}

/// `photon eval`: mean NLL, perplexity, and bits-per-byte over held-out
/// windows.
pub fn cmd_eval(raw: &RawConfig) -> CliResult<String> {
    match raw.dtype()? {
        DType::F64 => eval_impl::<f64>(raw),
        DType::F32 => eval_impl::<f32>(raw),
    }
}

fn eval_impl<E: Element>(raw: &RawConfig) -> CliResult<String> {
    let ckpt = PathBuf::from(raw.required("eval.checkpoint")?);
    let corpus = Corpus::load(&PathBuf::from(raw.required("eval.corpus")?))?;
    let tokens = corpus.tokens();
    let context = raw.usize("eval.context", 64)?;
    let max_windows = raw.usize("eval.max_windows", 0)?;
    let loaded = checkpoint::load::<E>(&ckpt)?;

    let mut total_nll = 0.0f64;
    let mut total_n = 0usize;
    let mut windows = 0usize;
    let mut start = 0usize;
    while start + context <= tokens.len() {
        if max_windows > 0 && windows >= max_windows {
            break;
        }
        let window = &tokens[start..start + context];
        let (sum, n) = match &loaded {
            checkpoint::LoadedModel::Hierarchy { cfg, params } => {
                if context % cfg.chunk_product() != 0 {
                    return Err(CliError::Config(format!(
                        "eval.context {} must be a multiple of {}",
                        context,
                        cfg.chunk_product()
                    )));
                }
                let model = HierarchyModel {
                    cfg: cfg.clone(),
                    params: params.clone(),
                };
                model.score(window).map_err(CliError::from)?
            }
            checkpoint::LoadedModel::Flat { params, .. } => {
                let model = FlatModel {
                    params: params.clone(),
                    bos_id: corpus::BOS,
                    pad_id: corpus::PAD,
                };
                model.score(window).map_err(CliError::from)?
            }
        };
        total_nll += sum;
        total_n += n;
        windows += 1;
        start += context;
    }
    if total_n == 0 {
        return Err(CliError::Config(
            "corpus too short for a single evaluation window".into(),
        ));
    }
    let mean = total_nll / total_n as f64;
    Ok(format!(
        "windows={} positions={} mean_nll={:.4} nats/token ppl={:.3} bits_per_byte={:.4}",
        windows,
        total_n,
        mean,
        mean.exp(),
        mean / std::f64::consts::LN_2
    ))
}

/// `photon generate`: emit text bytes from a checkpoint.
pub fn cmd_generate(raw: &RawConfig) -> CliResult<Vec<u8>> {
    match raw.dtype()? {
        DType::F64 => generate_impl::<f64>(raw),
        DType::F32 => generate_impl::<f32>(raw),
    }
}

fn generate_impl<E: Element>(raw: &RawConfig) -> CliResult<Vec<u8>> {
    let ckpt = PathBuf::from(raw.required("gen.checkpoint")?);
    let prompt_text = raw.str_or("gen.prompt", "The ");
    let n_tokens = raw.usize("gen.tokens", 128)?;
    let temperature = raw.f64("gen.temperature", 0.0)?;
    let seed = raw.u64("gen.seed", 0)?;
    let max_context = raw.usize("gen.max_context", 4096)?;
    let mut sampler = if temperature > 0.0 {
        Sampler::temperature(temperature, seed)
    } else {
        Sampler::greedy()
    };
    let prompt: Vec<u32> = prompt_text
        .bytes()
        .map(|b| b as u32 + corpus::RESERVED)
        .collect();
    if prompt.is_empty() {
        return Err(CliError::Config("gen.prompt must not be empty".into()));
    }
    let loaded = checkpoint::load::<E>(&ckpt)?;
    let tokens = match &loaded {
        checkpoint::LoadedModel::Hierarchy { cfg, params } => {
            let mut session =
                PhotonSession::new(cfg, params, max_context).map_err(CliError::from)?;
            session.prefill(&prompt).map_err(CliError::from)?;
            let (toks, _) = session.generate(n_tokens, &mut sampler).map_err(CliError::from)?;
            toks
        }
        checkpoint::LoadedModel::Flat { params, .. } => {
            let mut session = FlatSession::new(params, corpus::BOS, max_context);
            session.prefill(&prompt).map_err(CliError::from)?;
            let (toks, _) = session.generate(n_tokens, &mut sampler).map_err(CliError::from)?;
            toks
        }
    };
    Ok(Corpus::detokenize(&tokens))
}

/// One bench row: measured session counters next to the cost-model numbers
/// they must reproduce.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BenchRow {
    pub regime: String,
    pub model: String,
    pub prompt_tokens: usize,
    pub gen_tokens: usize,
    pub kv_entries_peak_global: u64,
    pub formula_kv_entries_prefill: u64,
    pub decode_global_entries_read: u64,
    pub schedule_global_reads: u64,
    pub decode_local_entries_read: u64,
    pub schedule_local_reads: u64,
    pub prefill_attention_pairs: u64,
    pub formula_prefill_pairs: u64,
    pub tokens_emitted: u64,
    pub tokens_per_peak_entry: f64,
}

impl BenchRow {
    pub fn csv_header() -> &'static str {
        "regime,model,prompt_tokens,gen_tokens,kv_entries_peak_global,formula_kv_entries_prefill,decode_global_entries_read,schedule_global_reads,decode_local_entries_read,schedule_local_reads,prefill_attention_pairs,formula_prefill_pairs,tokens_emitted,tokens_per_peak_entry"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.regime,
            self.model,
            self.prompt_tokens,
            self.gen_tokens,
            self.kv_entries_peak_global,
            self.formula_kv_entries_prefill,
            self.decode_global_entries_read,
            self.schedule_global_reads,
            self.decode_local_entries_read,
            self.schedule_local_reads,
            self.prefill_attention_pairs,
            self.formula_prefill_pairs,
            self.tokens_emitted,
            self.tokens_per_peak_entry
        )
    }
}

pub struct BenchOutput {
    pub rows: Vec<BenchRow>,
    pub table: String,
    pub json: serde_json::Value,
}

fn deterministic_prompt(len: usize, seed: u64) -> Vec<u32> {
    let mut rng = photon_core::seeded_rng(seed);
    (0..len)
        .map(|_| rand::Rng::gen_range(&mut rng, corpus::RESERVED..corpus::BYTE_VOCAB as u32))
        .collect()
}

fn photon_bench_row<E: Element>(
    regime: &str,
    cfg: &HierarchyConfig,
    params: &ModelParams<Tensor<E>>,
    prompt_len: usize,
    gen_len: usize,
    seed: u64,
) -> CliResult<(BenchRow, TrafficLedger)> {
    let cost_cfg = CostConfig::from(cfg);
    let storage = kv_storage(prompt_len, &cost_cfg).map_err(CliError::from)?;
    let prefill = prefill_compute(prompt_len, &cost_cfg).map_err(CliError::from)?;
    let schedule = decode_schedule(prompt_len, gen_len, &cost_cfg).map_err(CliError::from)?;

    let mut session = PhotonSession::new(cfg, params, prompt_len + gen_len + 1)
        .map_err(CliError::from)?;
    session
        .prefill(&deterministic_prompt(prompt_len, seed))
        .map_err(CliError::from)?;
    let prefill_pairs = session.ledger().sum_by_prefix("", |s| s.attention_pairs);
    let (tokens, delta) = session
        .generate(gen_len, &mut Sampler::greedy())
        .map_err(CliError::from)?;
    let peak = session.ledger().global_entries_peak();
    let row = BenchRow {
        regime: regime.into(),
        model: "photon".into(),
        prompt_tokens: prompt_len,
        gen_tokens: gen_len,
        kv_entries_peak_global: peak,
        formula_kv_entries_prefill: storage.global_total,
        decode_global_entries_read: delta.global_entries_read(),
        schedule_global_reads: schedule.global_reads_total,
        decode_local_entries_read: delta.local_entries_read(),
        schedule_local_reads: schedule.local_reads_total,
        prefill_attention_pairs: prefill_pairs,
        formula_prefill_pairs: prefill.pairs_total,
        tokens_emitted: tokens.len() as u64,
        tokens_per_peak_entry: tokens.len() as f64 / peak.max(1) as f64,
    };
    Ok((row, session.ledger().clone()))
}

fn flat_bench_row<E: Element>(
    regime: &str,
    params: &FlatParams<Tensor<E>>,
    prompt_len: usize,
    gen_len: usize,
    seed: u64,
) -> CliResult<(BenchRow, TrafficLedger)> {
    // The flat schedule only needs the prefix and token counts.
    let cost_cfg = CostConfig::new(vec![1], vec![0]).map_err(CliError::from)?;
    let storage = kv_storage(prompt_len, &cost_cfg).map_err(CliError::from)?;
    let prefill = prefill_compute(prompt_len, &cost_cfg).map_err(CliError::from)?;
    let schedule = decode_schedule(prompt_len, gen_len, &cost_cfg).map_err(CliError::from)?;

    let mut session = FlatSession::new(params, corpus::BOS, prompt_len + gen_len + 1);
    session
        .prefill(&deterministic_prompt(prompt_len, seed))
        .map_err(CliError::from)?;
    let prefill_pairs = session.ledger().stack("flat").unwrap().attention_pairs;
    let (tokens, delta) = session
        .generate(gen_len, &mut Sampler::greedy())
        .map_err(CliError::from)?;
    let peak = session.ledger().stack("flat").unwrap().kv_entries_peak;
    let row = BenchRow {
        regime: regime.into(),
        model: "flat".into(),
        prompt_tokens: prompt_len,
        gen_tokens: gen_len,
        kv_entries_peak_global: peak,
        formula_kv_entries_prefill: storage.flat,
        decode_global_entries_read: delta.stack("flat").unwrap().kv_entries_read,
        schedule_global_reads: schedule.flat_reads_total,
        decode_local_entries_read: 0,
        schedule_local_reads: 0,
        prefill_attention_pairs: prefill_pairs,
        formula_prefill_pairs: prefill.flat_pairs,
        tokens_emitted: tokens.len() as u64,
        tokens_per_peak_entry: tokens.len() as f64 / peak.max(1) as f64,
    };
    Ok((row, session.ledger().clone()))
}

/// `photon bench`: prefill-heavy and decode-heavy regimes over the
/// hierarchy and the flat baseline, reporting measured counters beside the
/// cost-model outputs (which the CLI never recomputes itself).
pub fn cmd_bench(raw: &RawConfig) -> CliResult<BenchOutput> {
    match raw.dtype()? {
        DType::F64 => bench_impl::<f64>(raw),
        DType::F32 => bench_impl::<f32>(raw),
    }
}

fn bench_impl<E: Element>(raw: &RawConfig) -> CliResult<BenchOutput> {
    let spec = model_spec(raw)?;
    let cfg = match spec {
        ModelSpec::Hierarchy(cfg) => cfg,
        ModelSpec::Flat { .. } => {
            return Err(CliError::Config(
                "bench compares against the flat baseline; set model.kind=photon".into(),
            ))
        }
    };
    let seed = raw.u64("bench.seed", 0)?;
    let paper = raw.bool("bench.paper_lengths", false)?;
    let (pf_prompt, pf_gen, de_prompt, de_gen) = if paper {
        (2048, 128, 128, 2048)
    } else {
        (
            raw.usize("bench.pf_prompt", 512)?,
            raw.usize("bench.pf_gen", 32)?,
            raw.usize("bench.de_prompt", 32)?,
            raw.usize("bench.de_gen", 512)?,
        )
    };
    let regimes: Vec<(&str, usize, usize)> = match raw.str_or("bench.regime", "both").as_str() {
        "pf" => vec![("pf", pf_prompt, pf_gen)],
        "de" => vec![("de", de_prompt, de_gen)],
        "both" => vec![("pf", pf_prompt, pf_gen), ("de", de_prompt, de_gen)],
        other => {
            return Err(CliError::Config(format!(
                "bench.regime must be pf, de, or both; got {other:?}"
            )))
        }
    };

    let mut rng = photon_core::seeded_rng(seed);
    let params = ModelParams::<Tensor<E>>::init(&cfg, 0.05, &mut rng).map_err(CliError::from)?;
    let flat_dim = raw.usize("model.flat_dim", 32)?;
    let flat_heads = raw.usize("model.flat_heads", raw.usize("model.heads", 2)?)?;
    let flat_cfg = photon_core::blocks::BlockConfig {
        hidden_dim: flat_dim,
        intermediate_dim: raw.usize("model.intermediate_mult", 2)? * flat_dim,
        n_layers: raw.usize("model.flat_layers", 2)?,
        n_heads: flat_heads,
        head_dim: flat_dim / flat_heads.max(1),
    };
    flat_cfg.validate().map_err(CliError::from)?;
    let flat_params =
        FlatParams::<Tensor<E>>::init(flat_cfg, cfg.vocab_size, 0.05, &mut rng)
            .map_err(CliError::from)?;

    let mut rows = Vec::new();
    let mut ledgers = serde_json::Map::new();
    let mut reports = serde_json::Map::new();
    for (name, prompt_len, gen_len) in regimes {
        // Independent sessions over frozen parameters run concurrently.
        let (photon_res, flat_res) = std::thread::scope(|scope| {
            let p = scope.spawn(|| {
                photon_bench_row::<E>(name, &cfg, &params, prompt_len, gen_len, seed)
            });
            let f = scope.spawn(|| flat_bench_row::<E>(name, &flat_params, prompt_len, gen_len, seed));
            (p.join().expect("photon bench thread"), f.join().expect("flat bench thread"))
        });
        let (prow, pledger) = photon_res?;
        let (frow, fledger) = flat_res?;
        ledgers.insert(format!("{name}.photon"), pledger.to_json());
        ledgers.insert(format!("{name}.flat"), fledger.to_json());
        let report =
            CostReport::build(prompt_len, &CostConfig::from(&cfg)).map_err(CliError::from)?;
        reports.insert(name.to_string(), report.to_json());
        rows.push(prow);
        rows.push(frow);
    }

    let mut table = String::new();
    table.push_str(BenchRow::csv_header());
    table.push('\n');
    for r in &rows {
        table.push_str(&r.csv_row());
        table.push('\n');
    }

    let json = serde_json::json!({
        "rows": rows,
        "ledgers": serde_json::Value::Object(ledgers),
        "cost_reports": serde_json::Value::Object(reports),
    });

    if let Some(path) = raw.get("bench.out_csv") {
        std::fs::write(path, &table).map_err(CliError::Io)?;
    }
    if let Some(path) = raw.get("bench.out_json") {
        std::fs::write(path, serde_json::to_string_pretty(&json).unwrap()).map_err(CliError::Io)?;
    }
    Ok(BenchOutput { rows, table, json })
}
