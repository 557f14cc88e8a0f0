use mvfs_core::backbone::BackboneKind;
use mvfs_core::controller::{hard_select, Phase};
use mvfs_core::data::{random_logits, split, Dataset, InformativeField, SyntheticMode, SyntheticSpec, SPLIT_RATIOS};
use mvfs_core::numeric::{grad_check, ParamGroup};
use mvfs_core::training::{
    evaluate, joint_train, k_sweep, report, sweep_point, train, transfer, warmup, Checkpoint, Mode, Model, TrainConfig,
};
use mvfs_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn planted(fields: usize, informative: &[usize], card: usize, strength: f64, seed: u64) -> SyntheticSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SyntheticSpec {
        cardinalities: vec![card; fields],
        mode_field: fields - 1,
        modes: vec![SyntheticMode {
            selector_values: (1..=card).collect(),
            informative: informative
                .iter()
                .map(|&field| InformativeField {
                    field,
                    logits: random_logits(card, strength, &mut rng),
                })
                .collect(),
        }],
        mode_field_weights: None,
        label_noise: 0.0,
        seed,
    }
}

fn splits(spec: &SyntheticSpec, m: usize) -> (Dataset, Dataset, Dataset) {
    let (ds, _) = spec.generate(m).unwrap();
    split(&ds, SPLIT_RATIOS, spec.seed).unwrap()
}

fn small_config(mode: Mode, backbone: BackboneKind) -> TrainConfig {
    TrainConfig {
        mode,
        backbone,
        dim: 4,
        k: 2,
        batch_size: 64,
        warmup_epochs: 1,
        max_epochs: 2,
        lr: 5e-3,
        seed: 3,
        ..TrainConfig::default()
    }
}

const ALL_MODES: [Mode; 5] = [Mode::Mvfs, Mode::AdafsStyle, Mode::None, Mode::NoIsm, Mode::NoGate];

#[test]
fn zero_warmup_epochs_is_a_no_op() {
    let (tr, _, _) = splits(&planted(4, &[0, 1], 5, 2.0, 1), 400);
    let config = TrainConfig {
        warmup_epochs: 0,
        ..small_config(Mode::Mvfs, BackboneKind::Mlp)
    };
    let mut model = Model::new(config.clone(), tr.schema().clone()).unwrap();
    let before = model.clone();
    warmup(&mut model, &tr).unwrap();
    assert_eq!(model, before);
}

#[test]
fn warmup_leaves_controller_untouched_and_lowers_loss() {
    let (tr, _, _) = splits(&planted(5, &[0, 1, 2], 6, 2.5, 2), 2000);
    let config = TrainConfig {
        warmup_epochs: 3,
        ..small_config(Mode::Mvfs, BackboneKind::Mlp)
    };
    let mut model = Model::new(config, tr.schema().clone()).unwrap();
    let all: Vec<usize> = (0..tr.len()).collect();
    let initial = model.batch_loss(&tr, &all, Phase::Train).unwrap();
    let ctrl_before: Vec<_> = model
        .store()
        .iter()
        .filter(|(_, p)| p.group == ParamGroup::Controller)
        .map(|(_, p)| p.clone())
        .collect();
    warmup(&mut model, &tr).unwrap();
    let ctrl_after: Vec<_> = model
        .store()
        .iter()
        .filter(|(_, p)| p.group == ParamGroup::Controller)
        .map(|(_, p)| p.clone())
        .collect();
    assert_eq!(ctrl_before, ctrl_after);
    assert_eq!(model.t(), 0);
    let after = model.batch_loss(&tr, &all, Phase::Train).unwrap();
    assert!(after < initial, "{after} !< {initial}");
}

#[test]
fn identical_seeds_give_identical_runs() {
    let (tr, va, _) = splits(&planted(4, &[0, 2], 5, 2.0, 4), 600);
    for mode in ALL_MODES {
        for backbone in [BackboneKind::Mlp, BackboneKind::DeepFm] {
            let config = small_config(mode, backbone);
            let a = train(&config, &tr, &va).unwrap();
            let b = train(&config, &tr, &va).unwrap();
            assert_eq!(a.checkpoint(), b.checkpoint(), "{mode:?} {backbone:?}");
            let fresh_a = Model::new(config.clone(), tr.schema().clone()).unwrap();
            let fresh_b = Model::new(config, tr.schema().clone()).unwrap();
            let rows: Vec<usize> = (0..32).collect();
            let la = fresh_a.batch_loss(&tr, &rows, Phase::Train).unwrap();
            let lb = fresh_b.batch_loss(&tr, &rows, Phase::Train).unwrap();
            assert_eq!(la.to_bits(), lb.to_bits());
        }
    }
}

#[test]
fn batch_loss_gradients_match_finite_differences() {
    let (tr, _, _) = splits(&planted(4, &[0, 1], 3, 2.0, 5), 100);
    let rows = [0usize, 1, 2, 3];
    for mode in ALL_MODES {
        for backbone in [BackboneKind::Mlp, BackboneKind::DeepFm] {
            let config = TrainConfig {
                dim: 3,
                k: 3,
                ..small_config(mode, backbone)
            };
            let model = Model::new(config, tr.schema().clone()).unwrap();
            let r = grad_check(
                |t| model.loss_var(t, &tr, &rows, Phase::Train),
                model.store(),
                1e-5,
                |_| true,
            )
            .unwrap();
            assert!(r.max_rel_err < 1e-4, "{mode:?} {backbone:?}: {r:?}");
        }
    }
}

#[test]
fn separable_data_is_learned_within_five_epochs() {
    let spec = planted(10, &[0, 3, 6], 8, 4.0, 6);
    let (ds, _) = spec.generate(20_000).unwrap();
    let (tr, va, _) = split(&ds, SPLIT_RATIOS, 6).unwrap();
    let config = TrainConfig {
        dim: 8,
        batch_size: 256,
        warmup_epochs: 2,
        max_epochs: 3,
        seed: 6,
        ..TrainConfig::default()
    };
    let model = train(&config, &tr, &va).unwrap();
    let m = evaluate(&model, &tr).unwrap();
    assert!(m.auc > 0.95, "training AUC {}", m.auc);
}

#[test]
fn evaluation_is_pure_and_repeatable() {
    let (tr, va, te) = splits(&planted(4, &[0, 1], 5, 2.0, 7), 800);
    let model = train(&small_config(Mode::Mvfs, BackboneKind::DeepFm), &tr, &va).unwrap();
    let before = model.clone();
    let a = evaluate(&model, &te).unwrap();
    let b = evaluate(&model, &te).unwrap();
    assert_eq!(a, b);
    assert_eq!(model, before);
    let preds = model.predict(&te).unwrap();
    let auc = mvfs_core::metrics::auc(&preds, &te.labels()).unwrap();
    assert_eq!(a.auc, auc);
}

#[test]
fn empty_or_mismatched_datasets_are_rejected() {
    let (tr, va, _) = splits(&planted(4, &[0, 1], 5, 2.0, 8), 200);
    let model = Model::new(small_config(Mode::Mvfs, BackboneKind::Mlp), tr.schema().clone()).unwrap();
    let empty = tr.subset(&[]);
    assert!(evaluate(&model, &empty).is_err());
    let (other, _, _) = splits(&planted(5, &[0, 1], 5, 2.0, 8), 200);
    assert!(matches!(evaluate(&model, &other), Err(Error::Schema(_))));
    assert!(train(&small_config(Mode::Mvfs, BackboneKind::Mlp), &tr, &other).is_err());
    let _ = va;
}

#[test]
fn early_stopping_returns_the_best_validation_epoch() {
    let (tr, va, _) = splits(&planted(6, &[0, 1, 2], 6, 1.5, 9), 3000);
    let config = TrainConfig {
        max_epochs: 12,
        patience: 2,
        lr: 3e-2,
        ..small_config(Mode::Mvfs, BackboneKind::Mlp)
    };
    let model = train(&config, &tr, &va).unwrap();
    let joint: Vec<_> = model.history().iter().filter(|h| h.phase == "joint").collect();
    let best = joint.iter().filter_map(|h| h.valid_auc).fold(f64::MIN, f64::max);
    assert_eq!(evaluate(&model, &va).unwrap().auc, best);
}

#[test]
fn joint_train_after_manual_warmup_equals_train() {
    let (tr, va, _) = splits(&planted(4, &[0, 1], 5, 2.0, 10), 500);
    let config = TrainConfig {
        warmup_epochs: 0,
        ..small_config(Mode::Mvfs, BackboneKind::Mlp)
    };
    let direct = train(&config, &tr, &va).unwrap();
    let staged = joint_train(Model::new(config, tr.schema().clone()).unwrap(), &tr, &va).unwrap();
    assert_eq!(direct.checkpoint(), staged.checkpoint());
}

#[test]
fn checkpoint_reload_reproduces_metrics_bit_exactly() {
    let (tr, va, te) = splits(&planted(5, &[0, 1], 5, 2.0, 11), 800);
    for mode in ALL_MODES {
        let model = train(&small_config(mode, BackboneKind::DeepFm), &tr, &va).unwrap();
        let reloaded = Model::from_checkpoint(model.checkpoint()).unwrap();
        assert_eq!(reloaded, model);
        let a = evaluate(&model, &te).unwrap();
        let b = evaluate(&reloaded, &te).unwrap();
        assert_eq!(a.auc.to_bits(), b.auc.to_bits());
        assert_eq!(a.logloss.to_bits(), b.logloss.to_bits());
    }
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let (tr, va, _) = splits(&planted(4, &[0, 1], 5, 2.0, 12), 300);
    let model = train(&small_config(Mode::Mvfs, BackboneKind::Mlp), &tr, &va).unwrap();
    let ckpt = model.checkpoint();
    let wrong_k = Checkpoint {
        config: TrainConfig {
            k: 5,
            ..ckpt.config.clone()
        },
        ..ckpt.clone()
    };
    assert!(Model::from_checkpoint(wrong_k).is_err());
    let wrong_vocab = Checkpoint {
        vocab_sizes: vec![9; 4],
        ..ckpt
    };
    assert!(Model::from_checkpoint(wrong_vocab).is_err());
}

#[test]
fn transfer_freezes_the_controller_and_keeps_selections() {
    let (tr, va, te) = splits(&planted(6, &[0, 2, 4], 6, 3.0, 13), 3000);
    let source_cfg = TrainConfig {
        k: 3,
        ..small_config(Mode::Mvfs, BackboneKind::Mlp)
    };
    let source = train(&source_cfg, &tr, &va).unwrap();
    let target_cfg = TrainConfig {
        seed: 99,
        ..small_config(Mode::None, BackboneKind::DeepFm)
    };
    let target = transfer(&source, &target_cfg, &tr, &va).unwrap();
    assert!(target.is_transferred());
    assert_eq!(target.config().mode, Mode::Mvfs);
    assert_eq!(target.config().backbone, BackboneKind::DeepFm);

    let values = |m: &Model, group: ParamGroup| -> Vec<_> {
        m.store()
            .iter()
            .filter(|(_, p)| p.group == group)
            .map(|(_, p)| p.value.clone())
            .collect()
    };
    assert_eq!(
        values(&source, ParamGroup::Controller),
        values(&target, ParamGroup::Controller)
    );
    let source_emb: Vec<_> = source
        .store()
        .iter()
        .filter(|(_, p)| p.name.starts_with("emb."))
        .map(|(_, p)| p.value.clone())
        .collect();
    assert_eq!(source_emb, values(&target, ParamGroup::SelectorEmbedding));

    let (_, src_sel) = source.inspect(&te, true).unwrap();
    let (_, tgt_sel) = target.inspect(&te, true).unwrap();
    let (src_sel, tgt_sel) = (src_sel.unwrap(), tgt_sel.unwrap());
    let threshold = source.config().threshold;
    for (a, b) in src_sel.iter().zip(&tgt_sel) {
        assert_eq!(
            hard_select(&a.importance, threshold),
            hard_select(&b.importance, threshold)
        );
        assert_eq!(a.scores, b.scores);
    }

    let reloaded = Model::from_checkpoint(target.checkpoint()).unwrap();
    assert_eq!(evaluate(&reloaded, &te).unwrap(), evaluate(&target, &te).unwrap());
}

#[test]
fn transfer_rejects_mismatched_inputs() {
    let (tr, va, _) = splits(&planted(4, &[0, 1], 5, 2.0, 14), 400);
    let source = train(&small_config(Mode::Mvfs, BackboneKind::Mlp), &tr, &va).unwrap();
    let (other, other_va, _) = splits(&planted(4, &[0, 1], 6, 2.0, 14), 400);
    let cfg = small_config(Mode::None, BackboneKind::DeepFm);
    assert!(matches!(
        transfer(&source, &cfg, &other, &other_va),
        Err(Error::Schema(_))
    ));
    let wrong_dim = TrainConfig { dim: 5, ..cfg.clone() };
    assert!(matches!(transfer(&source, &wrong_dim, &tr, &va), Err(Error::Schema(_))));
    let plain = train(&small_config(Mode::None, BackboneKind::Mlp), &tr, &va).unwrap();
    assert!(transfer(&plain, &cfg, &tr, &va).is_err());
}

#[test]
fn k_sweep_shapes_and_single_point() {
    let (tr, va, te) = splits(&planted(4, &[0, 1], 5, 2.0, 15), 600);
    let base = small_config(Mode::Mvfs, BackboneKind::Mlp);
    assert!(k_sweep(&base, &[], &tr, &va, &te).is_err());
    let rows = k_sweep(&base, &[1], &tr, &va, &te).unwrap();
    assert_eq!(rows.len(), 1);
    let direct = evaluate(&train(&TrainConfig { k: 1, ..base.clone() }, &tr, &va).unwrap(), &te).unwrap();
    assert_eq!((rows[0].auc, rows[0].logloss), (direct.auc, direct.logloss));
    let rows = k_sweep(&base, &[1, 2, 3], &tr, &va, &te).unwrap();
    assert_eq!(rows.iter().map(|r| r.k).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert_eq!(rows[1], sweep_point(&base, 2, &tr, &va, &te).unwrap());
}

#[test]
fn report_sections_follow_the_mode() {
    let spec = planted(5, &[0, 1], 5, 2.0, 16);
    let (ds, truth) = spec.generate(800).unwrap();
    let (tr, va, te) = split(&ds, SPLIT_RATIOS, 16).unwrap();
    let model = train(&small_config(Mode::Mvfs, BackboneKind::Mlp), &tr, &va).unwrap();
    let r = report(&model, &te, Some(&truth)).unwrap();
    assert_eq!(r.group_auc.len(), 2 * 5);
    let profile = r.subnet_profile.unwrap();
    assert_eq!(profile.rows.len(), 2);
    assert_eq!(r.selection_rates.unwrap().len(), 5);
    assert_eq!(r.selection_quality.unwrap().len(), 1);
    assert_eq!(r.auc, evaluate(&model, &te).unwrap().auc);

    let baseline = train(&small_config(Mode::AdafsStyle, BackboneKind::Mlp), &tr, &va).unwrap();
    let r = report(&baseline, &te, Some(&truth)).unwrap();
    assert_eq!(r.mode, "AdaFS-style");
    assert!(r.subnet_profile.is_none() && r.selection_rates.is_none());
}

#[test]
fn config_validation() {
    let ok = TrainConfig::default();
    assert!(ok.validate().is_ok());
    for bad in [
        TrainConfig {
            batch_size: 0,
            ..ok.clone()
        },
        TrainConfig { k: 0, ..ok.clone() },
        TrainConfig { dim: 0, ..ok.clone() },
        TrainConfig {
            threshold: 1.0,
            ..ok.clone()
        },
        TrainConfig { lr: 0.0, ..ok.clone() },
        TrainConfig { l2: -1.0, ..ok.clone() },
        TrainConfig {
            patience: 0,
            ..ok.clone()
        },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}

#[test]
fn divergence_is_reported() {
    let (tr, va, _) = splits(&planted(4, &[0, 1], 5, 2.0, 17), 400);
    let config = TrainConfig {
        lr: 1e300,
        ..small_config(Mode::Mvfs, BackboneKind::DeepFm)
    };
    match train(&config, &tr, &va) {
        Err(Error::Divergence { loss, .. }) => assert!(!loss.is_finite()),
        other => panic!("expected divergence, got {:?}", other.map(|m| m.t())),
    }
}
