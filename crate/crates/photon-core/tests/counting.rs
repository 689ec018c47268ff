//! The counting oracle: the instrumented session and the closed-form cost
//! model are independent routes to the same integers. Any disagreement is a
//! build-stopping defect.

use photon_core::cost::{decode_schedule, kv_storage, prefill_compute, CostConfig};
use photon_core::infer::{FlatSession, PhotonSession, Sampler};
use photon_core::model::{FlatParams, HierarchyConfig, ModelParams};
use photon_core::seeded_rng;
use photon_core::tensor::Tensor;

fn toy_hierarchy(
    chunk: &[usize],
    conv: &[usize],
    seed: u64,
) -> (HierarchyConfig, ModelParams<Tensor<f64>>) {
    let d0 = 4usize;
    let d1 = chunk[0] * d0;
    let mut dims = vec![d0, d1];
    dims.extend(std::iter::repeat(d1).take(chunk.len() - 1));
    let cfg = HierarchyConfig::toy(chunk, &dims, 1, 2, 29).with_conv_width(conv);
    let mut rng = seeded_rng(seed);
    let params = ModelParams::init(&cfg, 0.1, &mut rng).unwrap();
    (cfg, params)
}

fn random_prompt(t: usize, vocab: u32, seed: u64) -> Vec<u32> {
    let mut rng = seeded_rng(seed);
    (0..t)
        .map(|_| rand::Rng::gen_range(&mut rng, 0..vocab))
        .collect()
}

#[test]
fn prefill_pairs_match_closed_form_on_oracle_triples() {
    let triples: [(usize, Vec<usize>, usize); 3] = [
        (64, vec![2, 2], 1),
        (256, vec![4, 4], 2),
        (1024, vec![4, 2], 2),
    ];
    for (t, chunk, r) in triples {
        let conv = vec![r; chunk.len()];
        let (cfg, params) = toy_hierarchy(&chunk, &conv, 90);
        let cost_cfg = CostConfig::from(&cfg);
        let expect = prefill_compute(t, &cost_cfg).unwrap();

        let mut s = PhotonSession::new(&cfg, &params, 2 * t).unwrap();
        s.prefill(&random_prompt(t, 29, 91)).unwrap();

        for (i, lvl) in expect.per_level.iter().enumerate() {
            let enc = s.ledger().stack(&format!("enc.l{}", i + 1)).unwrap();
            assert_eq!(
                enc.attention_pairs, lvl.global_pairs,
                "T={t} level {} encoder pairs",
                i + 1
            );
            assert_eq!(enc.kv_entries_read, lvl.global_reads);
            assert_eq!(enc.kv_entries_peak, lvl.m);
            assert_eq!(enc.kv_entries_written, lvl.m);

            let dec = s.ledger().stack(&format!("dec.l{}", i + 1)).unwrap();
            assert_eq!(
                dec.attention_pairs, lvl.local_pairs,
                "T={t} level {} local pairs",
                i + 1
            );
            assert_eq!(dec.kv_entries_read, lvl.local_reads);
            let bound = (cfg.conv_width[i] + cfg.chunk[i]) as u64;
            assert!(dec.kv_entries_peak <= bound);
        }
        let total_pairs = s.ledger().sum_by_prefix("", |st| st.attention_pairs);
        assert_eq!(total_pairs, expect.pairs_total, "T={t} total pairs");
    }
}

#[test]
fn storage_formula_matches_ledger_peak() {
    let (cfg, params) = toy_hierarchy(&[4, 4], &[2, 2], 92);
    let cost_cfg = CostConfig::from(&cfg);
    let t = 512;
    let formula = kv_storage(t, &cost_cfg).unwrap();
    assert_eq!(formula.global_total, 160);

    let mut s = PhotonSession::new(&cfg, &params, 4096).unwrap();
    s.prefill(&random_prompt(t, 29, 93)).unwrap();
    assert_eq!(s.ledger().global_entries_peak(), formula.global_total);
    for (i, &m) in formula.per_level.iter().enumerate() {
        let enc = s.ledger().stack(&format!("enc.l{}", i + 1)).unwrap();
        assert_eq!(enc.kv_entries_peak, m);
    }
}

#[test]
fn decode_ledger_matches_schedule_exactly() {
    for (prefix, n, seed) in [(64usize, 48usize, 94u64), (13, 29, 95), (160, 100, 96)] {
        let (cfg, params) = toy_hierarchy(&[4, 4], &[2, 2], seed);
        let cost_cfg = CostConfig::from(&cfg);
        let schedule = decode_schedule(prefix, n, &cost_cfg).unwrap();

        let mut s = PhotonSession::new(&cfg, &params, 4096).unwrap();
        s.prefill(&random_prompt(prefix, 29, seed + 1)).unwrap();
        let (tokens, delta) = s.generate(n, &mut Sampler::greedy()).unwrap();
        assert_eq!(tokens.len(), n);
        assert_eq!(delta.tokens_emitted, n as u64);

        for lv in 1..=cfg.levels {
            let enc = delta.stack(&format!("enc.l{lv}")).unwrap();
            assert_eq!(
                enc.kv_entries_read,
                schedule.enc_reads[lv - 1],
                "prefix={prefix} n={n} enc l{lv} reads"
            );
            assert_eq!(enc.kv_entries_written, schedule.enc_appends[lv - 1]);
            assert_eq!(enc.attention_pairs, schedule.enc_pairs[lv - 1]);

            let dec = delta.stack(&format!("dec.l{lv}")).unwrap();
            assert_eq!(
                dec.kv_entries_read,
                schedule.dec_reads[lv - 1],
                "prefix={prefix} n={n} dec l{lv} reads"
            );
            assert_eq!(dec.attention_pairs, schedule.dec_pairs[lv - 1]);
        }
        assert_eq!(delta.global_entries_read(), schedule.global_reads_total);
        assert_eq!(delta.local_entries_read(), schedule.local_reads_total);
    }
}

#[test]
fn three_level_decode_ledger_matches_schedule() {
    let (cfg, params) = toy_hierarchy(&[2, 2, 2], &[1, 2, 1], 97);
    let cost_cfg = CostConfig::from(&cfg);
    let (prefix, n) = (24usize, 40usize);
    let schedule = decode_schedule(prefix, n, &cost_cfg).unwrap();

    let mut s = PhotonSession::new(&cfg, &params, 4096).unwrap();
    s.prefill(&random_prompt(prefix, 29, 98)).unwrap();
    let (_, delta) = s.generate(n, &mut Sampler::greedy()).unwrap();

    for lv in 1..=3 {
        let enc = delta.stack(&format!("enc.l{lv}")).unwrap();
        assert_eq!(enc.kv_entries_read, schedule.enc_reads[lv - 1], "enc l{lv}");
        let dec = delta.stack(&format!("dec.l{lv}")).unwrap();
        assert_eq!(dec.kv_entries_read, schedule.dec_reads[lv - 1], "dec l{lv}");
        assert_eq!(dec.attention_pairs, schedule.dec_pairs[lv - 1], "dec l{lv}");
    }
}

#[test]
fn flat_decode_reads_match_schedule() {
    let cfg = photon_core::blocks::BlockConfig {
        hidden_dim: 8,
        intermediate_dim: 16,
        n_layers: 2,
        n_heads: 2,
        head_dim: 4,
    };
    let mut rng = seeded_rng(99);
    let params = FlatParams::<Tensor<f64>>::init(cfg, 29, 0.1, &mut rng).unwrap();
    let (prefix, n) = (50usize, 30usize);
    let mut s = FlatSession::new(&params, 1, 4096);
    s.prefill(&random_prompt(prefix, 29, 100)).unwrap();
    let (_, delta) = s.generate(n, &mut Sampler::greedy()).unwrap();

    let cost_cfg = CostConfig::new(vec![4], vec![2]).unwrap();
    let schedule = decode_schedule(prefix, n, &cost_cfg).unwrap();
    assert_eq!(
        delta.stack("flat").unwrap().kv_entries_read,
        schedule.flat_reads_total
    );
    assert_eq!(s.ledger().stack("flat").unwrap().kv_entries_peak, (prefix + n) as u64);
}

#[test]
fn bounded_span_over_randomized_configs() {
    // Local decoders never read more than R + C − 1 entries in one step,
    // whatever the context length.
    let mut rng = seeded_rng(101);
    for trial in 0..6 {
        let levels = 1 + (trial % 3);
        let chunk: Vec<usize> = (0..levels)
            .map(|_| if rand::Rng::gen_bool(&mut rng, 0.5) { 2 } else { 4 })
            .collect();
        let conv: Vec<usize> = (0..levels)
            .map(|_| 1 + rand::Rng::gen_range(&mut rng, 0..2usize))
            .collect();
        let (cfg, params) = toy_hierarchy(&chunk, &conv, 200 + trial as u64);
        let span: usize = cfg.chunk_product();
        let t = span * rand::Rng::gen_range(&mut rng, 2..6usize);
        let mut s = PhotonSession::new(&cfg, &params, 8192).unwrap();
        s.prefill(&random_prompt(t, 29, 300 + trial as u64)).unwrap();
        s.generate(2 * span + 3, &mut Sampler::greedy()).unwrap();
        for lv in 1..=levels {
            let dec = s.ledger().stack(&format!("dec.l{lv}")).unwrap();
            let bound = (cfg.conv_width[lv - 1] + cfg.chunk[lv - 1] - 1) as u64;
            assert!(
                dec.max_read_span <= bound,
                "config {chunk:?}/{conv:?} level {lv}: span {} > {bound}",
                dec.max_read_span
            );
        }
    }
}
