use petl_core::accounting::{audit, complexity_table, predict_count, PREFIX_NOTE};
use petl_core::backbone::{ArchConfig, Backbone, Family, Head, HeadConfig, OutputKind};
use petl_core::petl::{AdaptedModel, LoraScope, Method, PetlConfig};
use proptest::prelude::*;

fn predicted(arch: ArchConfig, method: Method) -> u64 {
    predict_count(&arch, &method, 6, None).total_trainable
}

#[test]
fn reference_cells_are_exact() {
    let t = ArchConfig::transformer_base();
    assert_eq!(predicted(t, PetlConfig::Adapter { bottleneck: 16 }.into()), 322_752);
    assert_eq!(predicted(t, PetlConfig::Prompt { n_prompts: 64 }.into()), 49_152);
    assert_eq!(predicted(t, PetlConfig::BitFit.into()), 50_688);
    assert_eq!(predicted(t, PetlConfig::Ssf.into()), 82_944);
    let lora = PetlConfig::Lora {
        rank: 2,
        scope: LoraScope::All,
    };
    assert_eq!(predicted(t, lora.into()), 165_888);
    let c = ArchConfig::conformer_base();
    assert_eq!(predicted(c, PetlConfig::Prompt { n_prompts: 64 }.into()), 65_536);
    assert_eq!(predicted(c, lora.into()), 405_504);
    assert_eq!(predicted(t, Method::Probing), 0);
    assert_eq!(predicted(c, Method::Probing), 0);
}

#[test]
fn ssf_and_bitfit_closed_forms() {
    let d = 768;
    assert_eq!(predicted(ArchConfig::transformer_base(), PetlConfig::Ssf.into()), 6 * 18 * d);
    assert_eq!(predicted(ArchConfig::transformer_base(), PetlConfig::BitFit.into()), 6 * 11 * d);
}

#[test]
fn fine_tune_layer_sum_at_base_width() {
    let d: u64 = 768;
    let layer = 4 * (d * d + d) + (d * 3072 + 3072) + (3072 * d + d) + 2 * (2 * d);
    assert_eq!(layer, 7_087_872);
    assert_eq!(predicted(ArchConfig::transformer_base(), Method::FineTune), 6 * layer);
}

/// Oracle for LoRA counts: `r · (d_in + d_out)` summed over the wrapped
/// linears of the used layers, read off the built model.
fn lora_oracle(base: &Backbone<f32>, rank: usize, scope: LoraScope) -> u64 {
    base.used_linears()
        .filter(|l| scope == LoraScope::All || l.kind.is_attention())
        .map(|l| (rank * (l.d_in + l.d_out)) as u64)
        .sum()
}

#[test]
fn lora_grid_matches_wrapped_matrix_sums() {
    for arch in [ArchConfig::transformer(16, 3, 2), ArchConfig::conformer(16, 3, 2).with_conv_kernel(3)] {
        let base = Backbone::<f32>::build(arch, 0).unwrap().with_use_layers(2).unwrap();
        for (scope, rank) in [(LoraScope::Att, 1), (LoraScope::Att, 2), (LoraScope::Att, 4), (LoraScope::All, 2), (LoraScope::All, 4)] {
            let method: Method = PetlConfig::Lora { rank, scope }.into();
            let expected = lora_oracle(&base, rank, scope);
            assert_eq!(predict_count(&arch, &method, 2, None).total_trainable, expected);
            if arch.family == Family::Transformer {
                let per_layer = if scope == LoraScope::Att { 8 } else { 18 };
                assert_eq!(expected, (per_layer * rank * 16 * 2) as u64);
            }
        }
    }
}

#[test]
fn bias_glob_on_one_transformer_layer_is_11d() {
    for d in [8, 16, 24] {
        let base = Backbone::<f32>::build(ArchConfig::transformer(d, 2, 2), 0).unwrap();
        base.freeze_all();
        assert_eq!(base.mark_trainable("layer.1.*.bias"), 11 * d);
    }
}

#[test]
fn merged_and_baked_models_audit_to_zero() {
    let arch = ArchConfig::transformer(16, 2, 2);
    for cfg in [PetlConfig::Ssf, PetlConfig::lora(), PetlConfig::Prefix { n_prefix: 4, mlp_hidden: None }] {
        let mut model = AdaptedModel::inject(Backbone::<f32>::build(arch, 0).unwrap(), cfg.into()).unwrap();
        match cfg {
            PetlConfig::Ssf => model.merge_ssf().unwrap(),
            PetlConfig::Lora { .. } => model.merge_lora().unwrap(),
            _ => model.bake_prefix().unwrap(),
        }
        assert_eq!(audit(&model, None).unwrap().total_trainable, 0, "{cfg:?}");
    }
}

#[test]
fn head_is_counted_only_when_requested() {
    let arch = ArchConfig::transformer(16, 2, 2);
    let hc = HeadConfig::new(10, OutputKind::Multiclass);
    let model = AdaptedModel::inject(Backbone::<f32>::build(arch, 0).unwrap(), Method::Probing).unwrap();
    let head = Head::<f32>::new(hc, 16, 0).unwrap();
    let with = audit(&model, Some(&head)).unwrap();
    assert!(with.includes_head);
    assert_eq!(with.total_trainable, (16 * 16 + 16 + 16 * 10 + 10) as u64);
    assert_eq!(audit(&model, None).unwrap().total_trainable, 0);
}

#[test]
fn sweep_counts_grow_with_their_hyperparameter() {
    let arch = ArchConfig::transformer_base();
    let adapter: Vec<u64> = [8, 16, 32]
        .map(|bottleneck| predicted(arch, PetlConfig::Adapter { bottleneck }.into()))
        .to_vec();
    assert!(adapter.windows(2).all(|w| w[0] < w[1]), "{adapter:?}");
    let prefix: Vec<u64> = [16, 32, 64]
        .map(|n_prefix| predicted(arch, PetlConfig::Prefix { n_prefix, mlp_hidden: None }.into()))
        .to_vec();
    assert!(prefix.windows(2).all(|w| w[0] < w[1]), "{prefix:?}");
}

#[test]
fn lora_ratio_is_a_plain_division() {
    let arch = ArchConfig::transformer_base();
    let lora = PetlConfig::Lora {
        rank: 2,
        scope: LoraScope::All,
    };
    let r = predict_count(&arch, &lora.into(), 6, None);
    assert_eq!(r.ratio, 165_888.0 / (6.0 * 7_087_872.0));
}

#[test]
fn complexity_table_flags_prefix_rows() {
    let rows = complexity_table(
        &[("transformer".into(), ArchConfig::transformer_base())],
        &Method::table_rows(),
        6,
    );
    assert_eq!(rows.len(), 8);
    for row in &rows {
        let note = row.annotation.clone().unwrap_or_default();
        assert_eq!(row.method == "prefix", note.starts_with(PREFIX_NOTE), "{row:?}");
        if ["adapter", "prompt", "bitfit", "ssf", "lora", "probing"].contains(&row.method.as_str()) {
            assert!(row.annotation.is_none(), "{row:?}");
        }
    }
}

fn arch_strategy() -> impl Strategy<Value = (ArchConfig, usize)> {
    (
        prop::bool::ANY,
        prop::sample::select(vec![8usize, 16, 32]),
        prop::sample::select(vec![1usize, 2, 4]),
        1usize..=3,
        1usize..=3,
    )
        .prop_map(|(conformer, d, heads, layers, ff)| {
            let arch = if conformer {
                ArchConfig::conformer(d, layers, heads).with_conv_kernel(3)
            } else {
                ArchConfig::transformer(d, layers, heads)
            };
            (ArchConfig { ff_mult: ff, ..arch }, layers)
        })
        .prop_flat_map(|(arch, layers)| (Just(arch), 1..=layers))
}

fn method_strategy() -> impl Strategy<Value = Method> {
    let mut all: Vec<Method> = Method::table_rows().to_vec();
    all.extend(PetlConfig::ablation_grid().into_iter().map(Method::from));
    prop::sample::select(all)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prediction_equals_registry((arch, use_layers) in arch_strategy(), method in method_strategy()) {
        let base = Backbone::<f32>::build(arch, 1).unwrap().with_use_layers(use_layers).unwrap();
        let model = AdaptedModel::inject(base, method);
        // Ranks above the narrowest host are refused at injection.
        if let Method::Petl(PetlConfig::Lora { rank, .. }) = method {
            if rank > arch.d_model {
                prop_assert!(model.is_err());
                return Ok(());
            }
        }
        let model = model.unwrap();
        let found = audit(&model, None).unwrap();
        prop_assert_eq!(found, predict_count(&arch, &method, use_layers, None));
    }

    #[test]
    fn counts_are_monotone_in_hyperparameters((arch, use_layers) in arch_strategy(), a in 1usize..64, b in 1usize..64) {
        let (lo, hi) = (a.min(b), a.max(b));
        let count = |cfg: PetlConfig| predict_count(&arch, &cfg.into(), use_layers, None).total_trainable;
        let pairs = [
            (PetlConfig::Adapter { bottleneck: lo }, PetlConfig::Adapter { bottleneck: hi }),
            (PetlConfig::Prompt { n_prompts: lo }, PetlConfig::Prompt { n_prompts: hi }),
            (
                PetlConfig::Prefix { n_prefix: lo, mlp_hidden: None },
                PetlConfig::Prefix { n_prefix: hi, mlp_hidden: None },
            ),
            (PetlConfig::Lora { rank: lo, scope: LoraScope::Att }, PetlConfig::Lora { rank: hi, scope: LoraScope::Att }),
            (PetlConfig::Lora { rank: lo, scope: LoraScope::All }, PetlConfig::Lora { rank: hi, scope: LoraScope::All }),
        ];
        for (small, large) in pairs {
            prop_assert!(count(small) <= count(large), "{:?} vs {:?}", small, large);
        }
        prop_assert!(count(PetlConfig::lora()) <= predict_count(&arch, &Method::FineTune, use_layers, None).total_trainable);
    }
}
