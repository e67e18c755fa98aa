use super::*;
use crate::data::{
    anti_correlated_records, TripletRecord, ANTI_CORRELATED_CLASSES, ANTI_CORRELATED_FEAT_DIM,
};
use crate::heads::BayesianConfig;
use crate::numcore::{finite_diff_check_params, AdamConfig, Tensor};

fn small_cfg(head: HeadKind, decouple: bool) -> ModelConfig {
    ModelConfig {
        input_dim: 5,
        dim: 4,
        heads: 2,
        ffn: 6,
        classes: ClassCounts {
            attention: 2,
            spatial: 3,
            contact: 4,
        },
        flags: AblationFlags {
            decouple,
            head,
            ..AblationFlags::default()
        },
        ..ModelConfig::default()
    }
}

fn skewed_priors(classes: &ClassCounts) -> RelationPriors {
    let make = |n: usize| {
        crate::freqgate::compute_frequencies(
            &(1..=n as u64).rev().map(|c| c * c).collect::<Vec<_>>(),
            1e-6,
        )
        .unwrap()
    };
    RelationPriors {
        attention: make(classes.attention),
        spatial: make(classes.spatial),
        contact: make(classes.contact),
    }
}

/// `frames × pairs` records with random features and labels.
fn random_records(
    classes: &ClassCounts,
    feat_dim: usize,
    frames: usize,
    pairs: usize,
    clip: usize,
    rng: &mut Rng,
) -> Vec<TripletRecord> {
    let mut out = Vec::new();
    for frame in 0..frames {
        for p in 0..pairs {
            let bits = |n: usize, rng: &mut Rng| (0..n).map(|_| rng.bernoulli(0.4) as u8).collect();
            out.push(TripletRecord {
                clip,
                frame,
                subj: 0,
                obj: p + 1,
                feat: rng.normals(feat_dim),
                attn: rng.below(classes.attention),
                spat: bits(classes.spatial, rng),
                cont: bits(classes.contact, rng),
            });
        }
    }
    out
}

fn random_clip(cfg: &ModelConfig, rng: &mut Rng) -> ClipBatch {
    let recs = random_records(&cfg.classes, cfg.input_dim, 2, 2, 0, rng);
    ClipBatch::from_records(&recs, &cfg.classes, cfg.input_dim).unwrap()
}

fn head_outputs(model: &FReMuReModel, clip: &ClipBatch) -> Vec<Vec<f64>> {
    let mut g = Graph::new();
    let out = model
        .forward(&mut g, &model.store, clip, &mut HeadPass::deterministic())
        .unwrap();
    out.iter().map(|o| g.value(o.logits).to_vec()).collect()
}

fn perturb(model: &mut FReMuReModel, prefix: &str) {
    let ids: Vec<_> = model.store.ids_with_prefix(prefix).collect();
    for id in ids {
        model
            .store
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += 0.1);
    }
}

#[test]
fn empty_clip_is_rejected() {
    let cfg = small_cfg(HeadKind::Linear, true);
    assert!(matches!(
        ClipBatch::from_records(&[], &cfg.classes, 5),
        Err(Error::Contract(_))
    ));
}

#[test]
fn decoupled_branches_are_isolated_in_forward() {
    let cfg = small_cfg(HeadKind::GmmPlus, true);
    let mut model = FReMuReModel::new(cfg.clone(), skewed_priors(&cfg.classes), 3).unwrap();
    let clip = random_clip(&cfg, &mut Rng::new(1));
    let before = head_outputs(&model, &clip);
    perturb(&mut model, "attention/");
    let after = head_outputs(&model, &clip);
    assert_ne!(before[0], after[0]);
    assert_eq!(before[1], after[1]);
    assert_eq!(before[2], after[2]);
}

#[test]
fn shared_generator_moves_every_output() {
    let cfg = small_cfg(HeadKind::Linear, false);
    let mut model = FReMuReModel::new(cfg.clone(), skewed_priors(&cfg.classes), 3).unwrap();
    assert_eq!(model.branches.len(), 1);
    let clip = random_clip(&cfg, &mut Rng::new(2));
    let before = head_outputs(&model, &clip);
    perturb(&mut model, "shared/");
    let after = head_outputs(&model, &clip);
    for r in 0..3 {
        assert_ne!(before[r], after[r], "relation {r}");
    }
}

#[test]
fn single_branch_matches_saturated_fusion() {
    let mut cfg = small_cfg(HeadKind::Linear, true);
    let priors = skewed_priors(&cfg.classes);
    cfg.flags.dual_branch = false;
    let single = FReMuReModel::new(cfg.clone(), priors.clone(), 8).unwrap();
    cfg.flags.dual_branch = true;
    let mut dual = FReMuReModel::new(cfg, priors, 9).unwrap();
    for id in single.store.ids() {
        let target = dual.store.id(single.store.name(id)).unwrap();
        let d = single.store.get(id).data().to_vec();
        dual.store.get_mut(target).data_mut().copy_from_slice(&d);
    }
    for b in &dual.branches {
        let fusion = b.tail.as_ref().unwrap().fusion.linear;
        dual.store.get_mut(fusion.weight).data_mut().fill(0.0);
        dual.store
            .get_mut(fusion.bias.unwrap())
            .data_mut()
            .fill(40.0);
    }
    let clip = random_clip(&single.cfg, &mut Rng::new(4));
    assert_eq!(head_outputs(&single, &clip), head_outputs(&dual, &clip));
}

fn one_pair_clip(cfg: &ModelConfig) -> ClipBatch {
    let rec = TripletRecord {
        clip: 0,
        frame: 0,
        subj: 0,
        obj: 1,
        feat: vec![0.3, -0.2, 0.5, 0.1, -0.4],
        attn: 1,
        spat: vec![1, 0, 1],
        cont: vec![0, 0, 1, 0],
    };
    ClipBatch::from_records(&[rec], &cfg.classes, cfg.input_dim).unwrap()
}

#[test]
fn linear_total_is_sum_of_hand_evaluated_losses() {
    let cfg = small_cfg(HeadKind::Linear, true);
    let model = FReMuReModel::new(cfg.clone(), skewed_priors(&cfg.classes), 5).unwrap();
    let clip = one_pair_clip(&cfg);
    let logits = head_outputs(&model, &clip);
    let labels = clip.labels.as_ref().unwrap();
    let lse = logits[0].iter().map(|x| x.exp()).sum::<f64>().ln();
    let l_a = lse - logits[0][labels.attention[0]];
    let bce = |x: &[f64], y: &[f64]| {
        x.iter()
            .zip(y)
            .map(|(&x, &y)| {
                let p = 1.0 / (1.0 + (-x).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / x.len() as f64
    };
    let l_s = bce(&logits[1], &labels.spatial[0]);
    let l_c = bce(&logits[2], &labels.contact[0]);
    let v = model.total_loss(&clip).unwrap();
    assert!((v.attention - l_a).abs() < 1e-12);
    assert!((v.spatial - l_s).abs() < 1e-12);
    assert!((v.contact - l_c).abs() < 1e-12);
    assert_eq!(v.reg, 0.0);
    assert!((v.total() - (l_a + l_s + l_c)).abs() < 1e-12);
}

#[test]
fn total_graph_node_equals_component_sum() {
    for head in [HeadKind::Linear, HeadKind::Bayesian, HeadKind::GmmPlus] {
        let cfg = small_cfg(head, false);
        let model = FReMuReModel::new(cfg.clone(), skewed_priors(&cfg.classes), 6).unwrap();
        let clip = random_clip(&cfg, &mut Rng::new(7));
        let mut g = Graph::new();
        let parts = model
            .clip_losses(&mut g, &model.store, &clip, &mut HeadPass::deterministic())
            .unwrap();
        let total = parts.total(&mut g).unwrap();
        let v = parts.values(&g);
        assert_eq!(g.scalar(total), v.total());
        assert!(v.attention >= 0.0 && v.spatial >= 0.0 && v.contact >= 0.0 && v.reg >= 0.0);
        assert_eq!(parts.reg.is_some(), head == HeadKind::GmmPlus);
    }
}

#[test]
fn gmm_regularizer_inactive_above_target() {
    let cfg = small_cfg(HeadKind::GmmPlus, true);
    let model = FReMuReModel::new(cfg.clone(), skewed_priors(&cfg.classes), 6).unwrap();
    // initial variances are 1, well above sigma_target² = 0.01
    assert!(model.min_mixture_variance().unwrap() >= cfg.head.gmm.sigma_target.powi(2));
    let v = model
        .total_loss(&random_clip(&cfg, &mut Rng::new(8)))
        .unwrap();
    assert_eq!(v.reg, 0.0);
    assert_eq!(v.total(), v.attention + v.spatial + v.contact);
}

#[test]
fn missing_labels_are_a_contract_error() {
    let cfg = small_cfg(HeadKind::Linear, true);
    let model = FReMuReModel::new(cfg.clone(), skewed_priors(&cfg.classes), 6).unwrap();
    let mut clip = one_pair_clip(&cfg);
    clip.labels = None;
    assert!(matches!(model.total_loss(&clip), Err(Error::Contract(_))));
}

#[test]
fn prior_class_mismatch_is_rejected() {
    let cfg = small_cfg(HeadKind::Linear, true);
    let other = ClassCounts {
        attention: 3,
        ..cfg.classes
    };
    assert!(matches!(
        FReMuReModel::new(cfg, RelationPriors::uniform(&other), 0),
        Err(Error::Contract(_))
    ));
}

#[test]
fn attention_loss_leaves_other_branches_untouched() {
    for head in [HeadKind::Linear, HeadKind::Bayesian, HeadKind::GmmPlus] {
        let cfg = small_cfg(head, true);
        let mut model = FReMuReModel::new(cfg.clone(), skewed_priors(&cfg.classes), 11).unwrap();
        let mut rng = Rng::new(12);
        for _ in 0..10 {
            let clip = random_clip(&cfg, &mut rng);
            model.store.zero_grads();
            let mut g = Graph::new();
            let parts = model
                .clip_losses(&mut g, &model.store, &clip, &mut HeadPass::train(&mut rng))
                .unwrap();
            g.backward(parts.attention).unwrap();
            model.store.absorb_grads(&g).unwrap();
            let own = model.store.flat_grad(&model.relation_param_ids(0));
            assert!(own.iter().any(|&v| v != 0.0));
            for r in 1..3 {
                let other = model.store.flat_grad(&model.relation_param_ids(r));
                assert!(other.iter().all(|&v| v == 0.0), "{head} relation {r}");
            }
        }
    }
}

#[test]
fn decoupled_conflict_is_not_applicable() {
    let cfg = small_cfg(HeadKind::Linear, true);
    let model = FReMuReModel::new(cfg.clone(), skewed_priors(&cfg.classes), 1).unwrap();
    let rep = grad_conflict(&model, &random_clip(&cfg, &mut Rng::new(1))).unwrap();
    assert_eq!(rep, GradConflictReport::not_applicable());
    assert!(model.shared_param_ids().is_empty());
}

#[test]
fn conflict_of_copied_and_negated_losses() {
    let cfg = small_cfg(HeadKind::Linear, false);
    let model = FReMuReModel::new(cfg.clone(), skewed_priors(&cfg.classes), 2).unwrap();
    let clip = random_clip(&cfg, &mut Rng::new(3));
    let rep = grad_conflict_with(&model, &clip, |g, p| {
        Ok([p.attention, p.attention, g.neg(p.attention)])
    })
    .unwrap();
    assert!((rep.attention_spatial.unwrap() - 1.0).abs() < 1e-10);
    assert!((rep.attention_contact.unwrap() + 1.0).abs() < 1e-10);
    assert!((rep.spatial_contact.unwrap() + 1.0).abs() < 1e-10);
    assert_eq!(
        rep.shared_params,
        model
            .shared_param_ids()
            .iter()
            .map(|&id| model.store.get(id).numel())
            .sum::<usize>()
    );
}

#[test]
fn conflict_of_disjoint_support_losses_is_zero() {
    let cfg = small_cfg(HeadKind::Linear, false);
    let model = FReMuReModel::new(cfg.clone(), skewed_priors(&cfg.classes), 2).unwrap();
    let clip = random_clip(&cfg, &mut Rng::new(3));
    let shared = model.shared_param_ids();
    let (p1, p2) = (shared[0], shared[1]);
    let store = &model.store;
    let rep = grad_conflict_with(&model, &clip, |g, _| {
        let a = g.param(store, p1);
        let a = g.sum(a);
        let b = g.param(store, p2);
        let b = g.sum(b);
        Ok([a, b, a])
    })
    .unwrap();
    assert_eq!(rep.attention_spatial, Some(0.0));
    assert!((rep.attention_contact.unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn cosine_conventions() {
    assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
    assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-15);
    assert!((cosine(&[1.0, 0.0], &[0.0, 3.0])).abs() < 1e-15);
}

/// The library's anti-correlated construction with tied linear heads.
fn anti_correlated_setup(decouple: bool) -> (FReMuReModel, Vec<ClipBatch>) {
    let classes = ANTI_CORRELATED_CLASSES;
    let cfg = ModelConfig {
        input_dim: ANTI_CORRELATED_FEAT_DIM,
        dim: 8,
        heads: 2,
        ffn: 8,
        classes,
        flags: AblationFlags {
            decouple,
            head: HeadKind::Linear,
            ..AblationFlags::default()
        },
        tie_head_init: true,
        ..ModelConfig::default()
    };
    let records = anti_correlated_records(5, 2, 3, 21);
    let clips = clip_batches(&records, &classes, ANTI_CORRELATED_FEAT_DIM).unwrap();
    let model = FReMuReModel::new(cfg, RelationPriors::uniform(&classes), 4).unwrap();
    (model, clips)
}

#[test]
fn anti_correlated_labels_conflict_in_shared_mode() {
    let (model, clips) = anti_correlated_setup(false);
    for clip in &clips {
        let rep = grad_conflict(&model, clip).unwrap();
        assert!(rep.attention_spatial.unwrap() < 0.0, "{rep:?}");
        assert!(rep.cosines().iter().all(|c| (-1.0..=1.0).contains(c)));
    }
    let (model, clips) = anti_correlated_setup(true);
    assert_eq!(grad_conflict(&model, &clips[0]).unwrap().shared_params, 0);
}

#[test]
fn tied_heads_need_matching_linear_heads() {
    let mut cfg = small_cfg(HeadKind::Linear, false);
    cfg.tie_head_init = true;
    assert!(FReMuReModel::new(cfg.clone(), skewed_priors(&cfg.classes), 0).is_err());
    cfg.classes.spatial = cfg.classes.attention;
    cfg.flags.head = HeadKind::GmmPlus;
    assert!(FReMuReModel::new(cfg.clone(), skewed_priors(&cfg.classes), 0).is_err());
}

fn full_model_gradcheck(head: HeadKind, decouple: bool, seed: u64) -> f64 {
    let mut cfg = small_cfg(head, decouple);
    cfg.head.bayesian = BayesianConfig {
        logvar_min: -3.0,
        logvar_max: 1.0,
        ..BayesianConfig::default()
    };
    let mut model = FReMuReModel::new(cfg.clone(), skewed_priors(&cfg.classes), seed).unwrap();
    // pull variances near the target so the hinge is active at some entries
    if let Head::GmmPlus(h) = &model.heads[0] {
        let rho = h.rho;
        model
            .store
            .get_mut(rho)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = -2.2);
    }
    let clip = random_clip(&cfg, &mut Rng::new(seed + 100));
    let shell = model.clone();
    let ids: Vec<_> = model.store.ids().collect();
    let check = finite_diff_check_params(
        &mut model.store,
        &ids,
        None,
        |g, store| {
            let parts = shell.clip_losses(g, store, &clip, &mut HeadPass::deterministic())?;
            parts.total(g)
        },
        1e-5,
    )
    .unwrap();
    check.max_rel_error
}

#[test]
fn full_model_matches_finite_differences() {
    for (i, head) in [HeadKind::Linear, HeadKind::Bayesian, HeadKind::GmmPlus]
        .into_iter()
        .enumerate()
    {
        for decouple in [true, false] {
            let err = full_model_gradcheck(head, decouple, 40 + i as u64);
            assert!(err < 1e-4, "{head} decouple={decouple}: {err}");
        }
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let cfg = small_cfg(HeadKind::Bayesian, true);
    let mut model = FReMuReModel::new(cfg.clone(), skewed_priors(&cfg.classes), 1).unwrap();
    let init = model.store.to_map();
    let mut rng = Rng::new(5);
    let clips: Vec<_> = (0..3).map(|_| random_clip(&cfg, &mut rng)).collect();
    let tc = TrainConfig {
        epochs: 2,
        adam: AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    };
    let out = train(&mut model, &clips, &clips, &tc, 1).unwrap();
    assert_eq!(out.history.len(), 2);
    assert_eq!(model.store.to_map(), init);
}

#[test]
fn one_epoch_lowers_attention_loss_on_separable_toy() {
    let cfg = ModelConfig {
        classes: ClassCounts {
            attention: 2,
            spatial: 1,
            contact: 1,
        },
        input_dim: 3,
        dim: 8,
        heads: 2,
        ffn: 8,
        flags: AblationFlags {
            head: HeadKind::Linear,
            ..AblationFlags::default()
        },
        ..ModelConfig::default()
    };
    let mut rng = Rng::new(77);
    // ten single-pair samples, one per clip
    let clips: Vec<_> = (0..10)
        .map(|i| {
            let a = i % 2;
            let mut feat = rng.normals(3);
            feat[0] = if a == 1 { 2.0 } else { -2.0 };
            let rec = TripletRecord {
                clip: i,
                frame: 0,
                subj: 0,
                obj: 1,
                feat,
                attn: a,
                spat: vec![0],
                cont: vec![1],
            };
            ClipBatch::from_records(&[rec], &cfg.classes, 3).unwrap()
        })
        .collect();
    let mut model =
        FReMuReModel::new(cfg.clone(), RelationPriors::uniform(&cfg.classes), 3).unwrap();
    let mean_la = |m: &FReMuReModel| {
        clips
            .iter()
            .map(|c| m.total_loss(c).unwrap().attention)
            .sum::<f64>()
            / 10.0
    };
    let before = mean_la(&model);
    let tc = TrainConfig {
        epochs: 1,
        adam: AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    };
    train(&mut model, &clips, &[], &tc, 0).unwrap();
    assert!(mean_la(&model) < before);
}

#[test]
fn training_is_deterministic() {
    let cfg = small_cfg(HeadKind::Bayesian, false);
    let mut rng = Rng::new(5);
    let clips: Vec<_> = (0..4).map(|_| random_clip(&cfg, &mut rng)).collect();
    let run = || {
        let mut model = FReMuReModel::new(cfg.clone(), skewed_priors(&cfg.classes), 9).unwrap();
        let tc = TrainConfig {
            epochs: 2,
            batch_clips: 2,
            ..TrainConfig::default()
        };
        let out = train(&mut model, &clips, &clips, &tc, 9).unwrap();
        (history_csv(&out.history), model.store.to_map())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert!(a.starts_with(HISTORY_HEADER));
    assert_eq!(a.lines().count(), 3);
}

#[test]
fn non_finite_loss_aborts_with_context() {
    let cfg = small_cfg(HeadKind::Linear, true);
    let mut model = FReMuReModel::new(cfg.clone(), skewed_priors(&cfg.classes), 1).unwrap();
    let mut clip = random_clip(&cfg, &mut Rng::new(2));
    clip.features = Tensor::full(clip.features.shape(), f64::NAN);
    let err = train(&mut model, &[clip], &[], &TrainConfig::default(), 0).unwrap_err();
    assert!(
        matches!(
            err,
            Error::Numerical {
                epoch: 1,
                step: 1,
                ..
            }
        ),
        "{err}"
    );
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn invalid_train_config_lists_every_key() {
    let cfg = small_cfg(HeadKind::Linear, true);
    let mut model = FReMuReModel::new(cfg.clone(), skewed_priors(&cfg.classes), 1).unwrap();
    let clip = random_clip(&cfg, &mut Rng::new(2));
    let tc = TrainConfig {
        batch_clips: 0,
        adam: AdamConfig {
            lr: -1.0,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    };
    match train(&mut model, &[clip], &[], &tc, 0) {
        Err(Error::Config(keys)) => {
            assert_eq!(keys.len(), 2);
            assert!(keys[0].starts_with("train.batch_clips"));
            assert!(keys[1].starts_with("train.lr"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn checkpoint_round_trip_restores_outputs() {
    let cfg = small_cfg(HeadKind::GmmPlus, true);
    let mut model = FReMuReModel::new(cfg.clone(), skewed_priors(&cfg.classes), 13).unwrap();
    let mut rng = Rng::new(5);
    let clips: Vec<_> = (0..2).map(|_| random_clip(&cfg, &mut rng)).collect();
    let tc = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let out = train(&mut model, &clips, &[], &tc, 13).unwrap();
    let ck = Checkpoint::capture(&model, &tc, Some(&out.optimizer), 1, 13);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    let (restored, adam) = back.restore().unwrap();
    assert_eq!(adam.unwrap().t, out.optimizer.t);
    assert_eq!(
        head_outputs(&restored, &clips[0]),
        head_outputs(&model, &clips[0])
    );
    assert!(restored.min_mixture_variance().unwrap() >= cfg.head.gmm.sigma_min);
}

#[test]
fn evaluation_of_labelled_clips_is_repeatable() {
    let cfg = small_cfg(HeadKind::Bayesian, true);
    let model = FReMuReModel::new(cfg.clone(), skewed_priors(&cfg.classes), 13).unwrap();
    let mut rng = Rng::new(5);
    let clips: Vec<_> = (0..3).map(|_| random_clip(&cfg, &mut rng)).collect();
    let (a, pa) = evaluate(&model, &clips, &[1, 5], crate::metrics::Constraint::No, 4).unwrap();
    let (b, pb) = evaluate(&model, &clips, &[1, 5], crate::metrics::Constraint::No, 4).unwrap();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    let p = &pa[0].pairs[0];
    assert!((p.attn_scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(p.spat_scores.iter().all(|&s| (0.0..=1.0).contains(&s)));
    assert!(p.uncertainty["attention"].aleatoric > 0.0);
    // 2 frames per clip
    assert_eq!(scored_frames(&clips, &pa).unwrap().len(), 6);
}

fn head_kind(i: usize) -> HeadKind {
    [HeadKind::Linear, HeadKind::Bayesian, HeadKind::GmmPlus][i % 3]
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]

    #[test]
    fn losses_are_nonnegative_and_additive(seed in 0u64..10_000, head in 0usize..3, decouple: bool) {
        let cfg = small_cfg(head_kind(head), decouple);
        let model = FReMuReModel::new(cfg.clone(), skewed_priors(&cfg.classes), seed).unwrap();
        let clip = random_clip(&cfg, &mut Rng::new(seed ^ 0x5eed));
        let mut g = Graph::new();
        let mut rng = Rng::new(seed);
        let parts = model.clip_losses(&mut g, &model.store, &clip, &mut HeadPass::train(&mut rng)).unwrap();
        let v = parts.values(&g);
        proptest::prop_assert!(v.attention >= 0.0 && v.spatial >= 0.0 && v.contact >= 0.0 && v.reg >= 0.0);
        let total = parts.total(&mut g).unwrap();
        let sum = v.attention + v.spatial + v.contact + v.reg;
        proptest::prop_assert!((g.scalar(total) - sum).abs() <= 1e-12 * sum.max(1.0));
    }

    #[test]
    fn decoupled_attention_gradient_stays_in_its_branch(seed in 0u64..10_000, head in 0usize..3) {
        let cfg = small_cfg(head_kind(head), true);
        let mut model = FReMuReModel::new(cfg.clone(), skewed_priors(&cfg.classes), seed).unwrap();
        let clip = random_clip(&cfg, &mut Rng::new(seed + 1));
        let mut g = Graph::new();
        let mut rng = Rng::new(seed);
        let parts = model.clip_losses(&mut g, &model.store, &clip, &mut HeadPass::train(&mut rng)).unwrap();
        g.backward(parts.attention).unwrap();
        model.store.zero_grads();
        model.store.absorb_grads(&g).unwrap();
        for r in 1..3 {
            proptest::prop_assert!(model.store.flat_grad(&model.relation_param_ids(r)).iter().all(|&x| x == 0.0));
        }
    }
}
