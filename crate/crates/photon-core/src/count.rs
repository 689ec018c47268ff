//! Exact parameter accounting, component by component, for hierarchy
//! configurations and flat baselines, plus the published presets the audit
//! command reproduces.

use serde::Serialize;

use crate::blocks::BlockConfig;
use crate::model::{Dissimilarity, HierarchyConfig};

/// One named component with its exact count and, for presets, the published
/// reference value.
#[derive(Debug, Clone, Serialize)]
pub struct ComponentCount {
    pub name: String,
    pub count: u64,
    pub reference: Option<u64>,
}

impl ComponentCount {
    fn new(name: impl Into<String>, count: u64) -> Self {
        ComponentCount {
            name: name.into(),
            count,
            reference: None,
        }
    }

    fn with_ref(name: impl Into<String>, count: u64, reference: u64) -> Self {
        ComponentCount {
            name: name.into(),
            count,
            reference: Some(reference),
        }
    }
}

/// Per-component breakdown with totals.
#[derive(Debug, Clone, Serialize)]
pub struct Breakdown {
    pub label: String,
    pub components: Vec<ComponentCount>,
    pub total: u64,
    pub reference_total: Option<u64>,
}

impl Breakdown {
    fn finish(label: &str, components: Vec<ComponentCount>, reference_total: Option<u64>) -> Self {
        let total = components.iter().map(|c| c.count).sum();
        Breakdown {
            label: label.to_string(),
            components,
            total,
            reference_total,
        }
    }

    /// Components whose count differs from their reference.
    pub fn mismatches(&self) -> Vec<&ComponentCount> {
        self.components
            .iter()
            .filter(|c| c.reference.is_some_and(|r| r != c.count))
            .collect()
    }

    /// Relative deviation of the total from the reference total.
    pub fn total_rel_dev(&self) -> Option<f64> {
        self.reference_total.map(|r| {
            (self.total as f64 - r as f64).abs() / r as f64
        })
    }
}

/// Flat decoder-only baseline: embedding, blocks, final norm, head.
pub fn count_flat(cfg: &BlockConfig, vocab: usize) -> Breakdown {
    let d = cfg.hidden_dim as u64;
    let components = vec![
        ComponentCount::new("token_embedding", vocab as u64 * d),
        ComponentCount::new("transformer_blocks", cfg.param_count()),
        ComponentCount::new("final_norm", d),
        ComponentCount::new("lm_head", d * vocab as u64),
    ];
    Breakdown::finish("flat", components, None)
}

pub fn chunker_param_count(cfg: &HierarchyConfig, level: usize) -> u64 {
    if level == 1 {
        return 0;
    }
    let din = (cfg.chunk[level - 1] * cfg.dims[level - 1]) as u64;
    let dout = cfg.dims[level] as u64;
    din * dout + din + dout
}

pub fn converter_param_count(cfg: &HierarchyConfig, level: usize) -> u64 {
    let out = (cfg.conv_width[level - 1] * cfg.dec_width(level - 1)) as u64;
    cfg.dims[level] as u64 * out + out
}

/// Full hierarchy breakdown. Stack rows include the stack's own final norm
/// gain; start latents and begin-of-chunk rows get their own rows.
pub fn count_hierarchy(cfg: &HierarchyConfig) -> Breakdown {
    let mut components = Vec::new();
    let v = cfg.vocab_size as u64;
    components.push(ComponentCount::new(
        "enc_embed",
        v * cfg.dims[0] as u64,
    ));
    for lv in 1..=cfg.levels {
        components.push(ComponentCount::new(
            format!("enc.l{lv}.chunker"),
            chunker_param_count(cfg, lv),
        ));
        components.push(ComponentCount::new(
            format!("enc.l{lv}.stack"),
            cfg.enc[lv - 1].stack_param_count(),
        ));
    }
    for lv in (1..=cfg.levels).rev() {
        components.push(ComponentCount::new(
            format!("dec.l{lv}.conv"),
            converter_param_count(cfg, lv),
        ));
        components.push(ComponentCount::new(
            format!("dec.l{lv}.stack"),
            cfg.dec[lv - 1].stack_param_count(),
        ));
    }
    components.push(ComponentCount::new(
        "dec_embed",
        v * cfg.dec_embed_dim as u64,
    ));
    components.push(ComponentCount::new(
        "lm_head",
        cfg.dec_embed_dim as u64 * v,
    ));
    let start: u64 = cfg.dims[1..].iter().map(|&d| d as u64).sum();
    components.push(ComponentCount::new("start_latents", start));
    let boc: u64 = (2..=cfg.levels)
        .map(|lv| cfg.dec_width(lv - 1) as u64)
        .sum();
    components.push(ComponentCount::new("boc_rows", boc));
    Breakdown::finish("hierarchy", components, None)
}

/// Published configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Vanilla600m,
    Vanilla1_2b,
    Photon600m,
    Photon1_2b,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::Vanilla600m,
        Preset::Vanilla1_2b,
        Preset::Photon600m,
        Preset::Photon1_2b,
    ];

    pub fn parse(name: &str) -> Option<Preset> {
        match name {
            "vanilla-600m" => Some(Preset::Vanilla600m),
            "vanilla-1.2b" => Some(Preset::Vanilla1_2b),
            "photon-600m" => Some(Preset::Photon600m),
            "photon-1.2b" => Some(Preset::Photon1_2b),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Vanilla600m => "vanilla-600m",
            Preset::Vanilla1_2b => "vanilla-1.2b",
            Preset::Photon600m => "photon-600m",
            Preset::Photon1_2b => "photon-1.2b",
        }
    }
}

pub fn flat_preset_config(p: Preset) -> Option<BlockConfig> {
    match p {
        Preset::Vanilla600m => Some(BlockConfig {
            hidden_dim: 1664,
            intermediate_dim: 4096,
            n_layers: 16,
            n_heads: 32,
            head_dim: 52,
        }),
        Preset::Vanilla1_2b => Some(BlockConfig {
            hidden_dim: 1920,
            intermediate_dim: 5120,
            n_layers: 24,
            n_heads: 32,
            head_dim: 60,
        }),
        _ => None,
    }
}

pub fn hierarchy_preset_config(p: Preset) -> Option<HierarchyConfig> {
    let (d0, d, inter, layers, head_dim) = match p {
        Preset::Photon600m => (416usize, 1664usize, 4096usize, 4usize, 52usize),
        Preset::Photon1_2b => (480, 1920, 5120, 6, 60),
        _ => return None,
    };
    let stack = BlockConfig {
        hidden_dim: d,
        intermediate_dim: inter,
        n_layers: layers,
        n_heads: 32,
        head_dim,
    };
    Some(HierarchyConfig {
        levels: 2,
        chunk: vec![4, 4],
        conv_width: vec![2, 2],
        dims: vec![d0, d, d],
        dec_embed_dim: d,
        vocab_size: 32_000,
        bos_id: 1,
        pad_id: 0,
        enc: vec![stack, stack],
        dec: vec![stack, stack],
        dissimilarity: Dissimilarity::Mse,
    })
}

/// Breakdown for a preset with the published per-component reference values
/// attached, so any mismatch can be printed as a diff.
pub fn preset_breakdown(p: Preset) -> Breakdown {
    match p {
        Preset::Vanilla600m => {
            let mut b = count_flat(&flat_preset_config(p).unwrap(), 32_000);
            attach_refs(
                &mut b,
                &[
                    ("token_embedding", 53_248_000),
                    ("transformer_blocks", 504_418_304),
                    ("final_norm", 1_664),
                    ("lm_head", 53_248_000),
                ],
            );
            b.label = p.name().to_string();
            b.reference_total = Some(610_915_968);
            b
        }
        Preset::Vanilla1_2b => {
            let mut b = count_flat(&flat_preset_config(p).unwrap(), 32_000);
            attach_refs(
                &mut b,
                &[
                    ("token_embedding", 61_440_000),
                    ("transformer_blocks", 1_061_775_360),
                    ("final_norm", 1_920),
                    ("lm_head", 61_440_000),
                ],
            );
            b.label = p.name().to_string();
            b.reference_total = Some(1_184_657_280);
            b
        }
        Preset::Photon600m => {
            let mut b = count_hierarchy(&hierarchy_preset_config(p).unwrap());
            attach_refs(
                &mut b,
                &[
                    ("enc_embed", 13_312_000),
                    ("enc.l1.chunker", 0),
                    ("enc.l1.stack", 126_106_240),
                    ("enc.l2.chunker", 11_083_904),
                    ("enc.l2.stack", 126_106_240),
                    ("dec.l2.conv", 5_541_120),
                    ("dec.l2.stack", 126_106_240),
                    ("dec.l1.conv", 5_541_120),
                    ("dec.l1.stack", 126_106_240),
                    ("dec_embed", 53_248_000),
                    ("lm_head", 53_248_000),
                ],
            );
            b.label = p.name().to_string();
            b.reference_total = Some(646_399_104);
            b
        }
        Preset::Photon1_2b => {
            let mut b = count_hierarchy(&hierarchy_preset_config(p).unwrap());
            attach_refs(
                &mut b,
                &[
                    ("enc_embed", 15_360_000),
                    ("enc.l1.chunker", 0),
                    ("enc.l1.stack", 265_445_760),
                    ("enc.l2.chunker", 14_755_200),
                    ("enc.l2.stack", 265_445_760),
                    ("dec.l2.conv", 7_376_640),
                    ("dec.l2.stack", 265_445_760),
                    ("dec.l1.conv", 7_376_640),
                    ("dec.l1.stack", 265_445_760),
                    ("dec_embed", 61_440_000),
                    ("lm_head", 61_440_000),
                ],
            );
            b.label = p.name().to_string();
            b.reference_total = Some(1_229_531_520);
            b
        }
    }
}

fn attach_refs(b: &mut Breakdown, refs: &[(&str, u64)]) {
    for (name, v) in refs {
        if let Some(c) = b.components.iter_mut().find(|c| c.name == *name) {
            c.reference = Some(*v);
        } else {
            // Reference row our construction does not produce: surface it.
            b.components.push(ComponentCount::with_ref(*name, 0, *v));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;
    use crate::tensor::Tensor;

    #[test]
    fn vanilla_600m_rows_exact() {
        let b = preset_breakdown(Preset::Vanilla600m);
        assert!(b.mismatches().is_empty(), "{:?}", b.mismatches());
        assert_eq!(b.total, 610_915_968);
    }

    #[test]
    fn vanilla_1_2b_total_reconciles() {
        let b = preset_breakdown(Preset::Vanilla1_2b);
        assert!(b.mismatches().is_empty(), "{:?}", b.mismatches());
        assert_eq!(b.total, 1_184_657_280);
    }

    #[test]
    fn photon_600m_components_exact_and_total_close() {
        let b = preset_breakdown(Preset::Photon600m);
        assert!(b.mismatches().is_empty(), "{:?}", b.mismatches());
        // Start latents and begin-of-chunk rows are real parameters the
        // published table omits; they keep the total within 0.1%.
        assert_eq!(b.total, 646_399_104 + 2 * 1664 + 1664);
        assert!(b.total_rel_dev().unwrap() < 1e-3);
    }

    #[test]
    fn photon_1_2b_components_exact_and_total_close() {
        let b = preset_breakdown(Preset::Photon1_2b);
        assert!(b.mismatches().is_empty(), "{:?}", b.mismatches());
        assert_eq!(b.total, 1_229_531_520 + 2 * 1920 + 1920);
        assert!(b.total_rel_dev().unwrap() < 1e-3);
    }

    #[test]
    fn chunker_and_converter_counts_match_table_rows() {
        let cfg = hierarchy_preset_config(Preset::Photon600m).unwrap();
        assert_eq!(chunker_param_count(&cfg, 2), 11_083_904);
        assert_eq!(converter_param_count(&cfg, 2), 5_541_120);
        assert_eq!(converter_param_count(&cfg, 1), 5_541_120);
    }

    #[test]
    fn degenerate_config_counts_trivially() {
        // All dims 1, vocab 1, zero-layer stacks: only embeddings, head,
        // norm gains, converters, start latents remain.
        let stack = BlockConfig {
            hidden_dim: 1,
            intermediate_dim: 1,
            n_layers: 0,
            n_heads: 1,
            head_dim: 1,
        };
        let cfg = HierarchyConfig {
            levels: 1,
            chunk: vec![1],
            conv_width: vec![1],
            dims: vec![1, 1],
            dec_embed_dim: 1,
            vocab_size: 1,
            bos_id: 0,
            pad_id: 0,
            enc: vec![stack],
            dec: vec![stack],
            dissimilarity: Dissimilarity::Mse,
        };
        let b = count_hierarchy(&cfg);
        // enc_embed 1 + chunker 0 + enc stack norm 1 + conv (1·1+1)=2 +
        // dec stack norm 1 + dec_embed 1 + head 1 + start 1 + boc 0 = 8
        assert_eq!(b.total, 8);
    }

    #[test]
    fn breakdown_matches_instantiated_parameters() {
        // The counter and the actual tensor allocation are two routes to the
        // same number.
        let cfg = HierarchyConfig::toy(&[2, 2], &[8, 16, 16], 2, 2, 17);
        let mut rng = crate::test_rng(60);
        let params = ModelParams::<Tensor<f64>>::init(&cfg, 0.1, &mut rng).unwrap();
        let b = count_hierarchy(&cfg);
        assert_eq!(b.total, params.param_count());
    }
}
