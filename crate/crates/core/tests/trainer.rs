use locon::dataset::{generate_synthetic_dataset, make_split, DatasetSplit, HiddenTruth, SyntheticSpec};
use locon::network::{NetworkConfig, Parameters};
use locon::preprocess::percentile_normalize;
use locon::trainer::metrics::to_jsonl;
use locon::trainer::{
    select_best_model, train_phase1, train_phase2, MetricRecord, QualityTracker, TrainConfig, TrainMode, TrainState,
};
use locon::Error;

fn tiny_network() -> NetworkConfig {
    NetworkConfig {
        num_enc_blocks: 2,
        num_dec_blocks: 1,
        base_channels: 4,
        max_channels: 8,
        num_classes_plus_bg: 4,
        contrastive_dim: 4,
        contrastive_hidden: 4,
        input_dims: (24, 24),
    }
}

fn tiny_split(n_val: usize) -> (DatasetSplit, HiddenTruth) {
    let spec = SyntheticSpec {
        num_subjects: 8,
        slices_per_volume: 2,
        dims: (24, 24),
        ..Default::default()
    };
    let data: Vec<_> = generate_synthetic_dataset(&spec, 5)
        .unwrap()
        .into_iter()
        .map(|(v, l)| (percentile_normalize(&v).unwrap(), l))
        .collect();
    make_split(&data, 1, n_val, 1, 3).unwrap()
}

fn tiny_cfg(mode: TrainMode) -> TrainConfig {
    TrainConfig {
        phase1_iters: 6,
        phase2_iters: 6,
        refresh_period: 2,
        num_pseudo_steps: 3,
        batch_size: 4,
        labeled_per_batch: 2,
        validation_period: 2,
        seed: 9,
        ..TrainConfig::desk()
    }
    .with_mode(mode)
}

fn trainable(p: &Parameters<f32>) -> Vec<Vec<u32>> {
    let mut p = p.clone();
    p.params_mut_all()
        .iter()
        .map(|q| q.value.iter().map(|v| v.to_bits()).collect())
        .collect()
}

fn all_arrays(p: &Parameters<f32>) -> Vec<Vec<u32>> {
    locon::network::Group::ALL
        .iter()
        .flat_map(|&g| p.group_arrays(g))
        .map(|(_, a)| a.iter().map(|v| v.to_bits()).collect())
        .collect()
}

fn validations(m: &[MetricRecord]) -> Vec<MetricRecord> {
    m.iter()
        .filter(|r| matches!(r, MetricRecord::Validation { .. }))
        .cloned()
        .collect()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (split, _) = tiny_split(1);
    let mut cfg = tiny_cfg(TrainMode::Proposed);
    cfg.adam.learning_rate = 0.0;
    let init = Parameters::<f32>::init(&tiny_network(), cfg.seed).unwrap();
    let state = train_phase1(&split, &tiny_network(), &cfg).unwrap();
    assert_eq!(trainable(&state.params), trainable(&init));
    assert_eq!(state.iteration, 6);
}

#[test]
fn phase_one_touches_no_contrastive_head() {
    let (split, _) = tiny_split(1);
    let cfg = tiny_cfg(TrainMode::Proposed);
    let init = Parameters::<f32>::init(&tiny_network(), cfg.seed).unwrap();
    let state = train_phase1(&split, &tiny_network(), &cfg).unwrap();
    let g = locon::network::Group::ContrastiveHead;
    assert_eq!(state.params.group_arrays(g), init.group_arrays(g));
    assert_ne!(trainable(&state.params), trainable(&init));
}

#[test]
fn refreshes_happen_at_multiples_of_the_period() {
    let (split, _) = tiny_split(1);
    let cfg = tiny_cfg(TrainMode::Proposed);
    let p1 = train_phase1(&split, &tiny_network(), &cfg).unwrap();
    let state = train_phase2(&split, p1, &cfg, &mut ()).unwrap();
    let est: Vec<u64> = state
        .metrics
        .iter()
        .filter_map(|r| match r {
            MetricRecord::Refresh {
                estimation_iteration, ..
            } => Some(*estimation_iteration),
            _ => None,
        })
        .collect();
    assert_eq!(est, vec![0, 2, 4]);
    assert_eq!(state.pseudo_store.as_ref().unwrap().estimation_iteration, 4);
    assert_eq!(state.iteration, 12);
}

#[test]
fn metrics_log_has_loss_components_every_iteration() {
    let (split, _) = tiny_split(1);
    let cfg = tiny_cfg(TrainMode::Proposed);
    let p1 = train_phase1(&split, &tiny_network(), &cfg).unwrap();
    let state = train_phase2(&split, p1, &cfg, &mut ()).unwrap();
    let iters: Vec<(u8, u64, f64, f64, f64)> = state
        .metrics
        .iter()
        .filter_map(|r| match r {
            MetricRecord::Iter {
                phase,
                iteration,
                seg,
                cont,
                total,
                ..
            } => Some((*phase, *iteration, *seg, *cont, *total)),
            _ => None,
        })
        .collect();
    assert_eq!(iters.len(), 12);
    for (k, (phase, it, seg, cont, total)) in iters.iter().enumerate() {
        assert_eq!(*it, k as u64 + 1);
        assert_eq!(*phase, if k < 6 { 1 } else { 2 });
        assert!((total - (seg + cfg.contrastive.lambda_cont * cont)).abs() < 1e-12);
        if *phase == 2 {
            assert!(*cont > 0.0);
        }
    }
}

#[test]
fn best_validation_is_a_running_maximum() {
    let (split, _) = tiny_split(2);
    let cfg = tiny_cfg(TrainMode::SelfTraining);
    let p1 = train_phase1(&split, &tiny_network(), &cfg).unwrap();
    let state = train_phase2(&split, p1, &cfg, &mut ()).unwrap();
    let mut running = f64::NEG_INFINITY;
    for r in &state.metrics {
        if let MetricRecord::Validation { dsc, best, .. } = r {
            running = running.max(*dsc);
            assert_eq!(*best, running);
        }
    }
    let dscs: Vec<f64> = state.validations.iter().map(|v| v.dsc).collect();
    let idx = locon::trainer::best_validation_index(&dscs).unwrap();
    let best = state.best.as_ref().unwrap();
    assert_eq!(best.iteration, state.validations[idx].iteration);
    assert_eq!(state.best_val_dsc, Some(running));

    // the stored checkpoint reproduces its validation score
    let mut chosen = select_best_model(&state).unwrap();
    let rep = locon::evaluate::evaluate_model(&mut chosen, &split.validation).unwrap();
    assert_eq!(rep.foreground_mean, best.dsc);
}

#[test]
fn no_validation_volumes_means_no_model_selection() {
    let (split, _) = tiny_split(0);
    let cfg = tiny_cfg(TrainMode::Baseline);
    let state = train_phase1(&split, &tiny_network(), &cfg).unwrap();
    assert!(matches!(select_best_model(&state), Err(Error::NoValidation)));
}

#[test]
fn proposed_never_feeds_pseudo_labels_to_dice() {
    let (split, _) = tiny_split(1);
    let cfg = tiny_cfg(TrainMode::Proposed);
    let p1 = train_phase1(&split, &tiny_network(), &cfg).unwrap();
    let state = train_phase2(&split, p1.clone(), &cfg, &mut ()).unwrap();
    assert_eq!(state.audit.dice_calls, 12);
    assert_eq!(state.audit.dice_calls_with_pseudo, 0);
    assert_eq!(state.audit.contrastive_calls, 6);
    assert_eq!(state.audit.contrastive_pseudo_slices, 12);

    let st = train_phase2(&split, p1.clone(), &tiny_cfg(TrainMode::SelfTraining), &mut ()).unwrap();
    assert_eq!(st.audit.dice_calls_with_pseudo, 6);
    assert_eq!(st.audit.contrastive_calls, 0);

    let b = train_phase2(&split, p1, &tiny_cfg(TrainMode::Baseline), &mut ()).unwrap();
    assert_eq!(b.audit.dice_pseudo_slices, 0);
    assert!(b.pseudo_store.is_none());
}

#[test]
fn self_training_keeps_the_contrastive_head_frozen() {
    let (split, _) = tiny_split(1);
    let cfg = tiny_cfg(TrainMode::SelfTraining);
    let p1 = train_phase1(&split, &tiny_network(), &cfg).unwrap();
    let state = train_phase2(&split, p1, &cfg, &mut ()).unwrap();
    let g = locon::network::Group::ContrastiveHead;
    let mut fresh = state.params.clone();
    fresh.reinit_contrastive_head(cfg.seed ^ 0x7068_6932);
    assert_eq!(state.params.group_arrays(g), fresh.group_arrays(g));
}

/// With λ = 0 the unlabeled half of each batch has no path into any update, so the run
/// must match one that never samples unlabeled slices.
#[test]
fn zero_lambda_matches_a_run_without_unlabeled_slices() {
    let (split, _) = tiny_split(1);
    let mut cfg = tiny_cfg(TrainMode::Proposed);
    cfg.contrastive.lambda_cont = 0.0;
    let p1 = train_phase1(&split, &tiny_network(), &cfg).unwrap();
    let with_u = train_phase2(&split, p1.clone(), &cfg, &mut ()).unwrap();
    let mut no_u_cfg = cfg.clone();
    no_u_cfg.batch_size = no_u_cfg.labeled_per_batch;
    let without_u = train_phase2(&split, p1, &no_u_cfg, &mut ()).unwrap();
    assert_eq!(all_arrays(&with_u.params), all_arrays(&without_u.params));
    assert_eq!(validations(&with_u.metrics), validations(&without_u.metrics));
    assert_eq!(with_u.audit.contrastive_calls, 0);
}

#[test]
fn withholding_hidden_truth_changes_nothing() {
    let (split, truth) = tiny_split(1);
    let cfg = tiny_cfg(TrainMode::Proposed);
    let p1 = train_phase1(&split, &tiny_network(), &cfg).unwrap();
    let mut tracker = QualityTracker::new(&truth);
    let observed = train_phase2(&split, p1.clone(), &cfg, &mut tracker).unwrap();
    let blind = train_phase2(&split, p1, &cfg, &mut ()).unwrap();
    assert_eq!(tracker.history.len(), 3);
    assert!(tracker.history.iter().all(|(_, q)| q.is_some()));
    assert_eq!(to_jsonl(&observed.metrics), to_jsonl(&blind.metrics));
    assert_eq!(all_arrays(&observed.params), all_arrays(&blind.params));
}

#[test]
fn identical_seeds_give_identical_logs() {
    let (split, _) = tiny_split(1);
    let run = |seed: u64| {
        let cfg = TrainConfig {
            seed,
            ..tiny_cfg(TrainMode::JointPlSeg)
        };
        let p1 = train_phase1(&split, &tiny_network(), &cfg).unwrap();
        to_jsonl(&train_phase2(&split, p1, &cfg, &mut ()).unwrap().metrics)
    };
    assert_eq!(run(4), run(4));
    assert_ne!(run(4), run(5));
}

#[test]
fn consistency_filter_restricts_the_unlabeled_pool() {
    let (split, _) = tiny_split(1);
    let mut cfg = tiny_cfg(TrainMode::Proposed);
    cfg.consistency.threshold = 1.0;
    let p1 = train_phase1(&split, &tiny_network(), &cfg).unwrap();
    match train_phase2(&split, p1, &cfg, &mut ()) {
        Ok(state) => {
            let store = state.pseudo_store.unwrap();
            for r in &state.metrics {
                if let MetricRecord::Refresh {
                    retained,
                    mean_consistency,
                    ..
                } = r
                {
                    assert!(mean_consistency.is_some());
                    assert!(*retained <= store.len());
                }
            }
        }
        // nothing scored a perfect 1.0
        Err(e) => assert!(matches!(e, Error::EmptyPool(_))),
    }
}

#[test]
fn invalid_mode_combinations_are_rejected() {
    let (split, _) = tiny_split(1);
    let mut cfg = tiny_cfg(TrainMode::Proposed);
    cfg.mode = TrainMode::Baseline;
    let state = TrainState::new(&tiny_network(), &cfg).unwrap();
    assert!(matches!(train_phase2(&split, state, &cfg, &mut ()), Err(Error::Config(_))));
}

#[test]
fn one_volume_overfit_drives_the_loss_down() {
    let (split, _) = tiny_split(1);
    let cfg = TrainConfig {
        phase1_iters: 250,
        batch_size: 4,
        labeled_per_batch: 4,
        augment: locon::augment::AugmentConfig::none(),
        adam: locon::optim::AdamConfig {
            learning_rate: 1e-2,
            ..Default::default()
        },
        seed: 1,
        ..TrainConfig::desk()
    };
    let state = train_phase1(&split, &tiny_network(), &cfg).unwrap();
    let seg: Vec<f64> = state
        .metrics
        .iter()
        .filter_map(|r| match r {
            MetricRecord::Iter { seg, .. } => Some(*seg),
            _ => None,
        })
        .collect();
    let tail = &seg[seg.len() - 20..];
    let mean_tail = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(seg[0] > 0.5, "initial loss {}", seg[0]);
    assert!(mean_tail < 0.2, "final loss {mean_tail}");
}
