use std::collections::BTreeMap;

use ciff_core::checkpoint::{decode, encode_state};
use ciff_core::data::{kfold_split, synth_generate, Counting, Fold, SynthConfig, SynthDataset};
use ciff_core::model::{self, CiffModel, EXTRACTOR_GROUPS};
use ciff_core::params::in_groups;
use ciff_core::train::eval::score_single;
use ciff_core::train::{run_phases, FoldData, RunOptions, TrainConfig, TrainState};
use ciff_core::verify::tiny_model_config;
use ciff_core::Error;

fn dataset() -> (SynthDataset, Fold) {
    let ds = synth_generate(&SynthConfig { n_patients: 12, image_size: (8, 8), ..Default::default() }).unwrap();
    let fold = kfold_split(&ds.records, 3, 0).unwrap().remove(0);
    (ds, fold)
}

fn config(epochs: [usize; 3], cache: bool) -> TrainConfig {
    TrainConfig { epochs, batch_size: 8, cache_frozen_features: cache, ..Default::default() }
}

fn fresh(cfg: &TrainConfig) -> TrainState {
    TrainState::new(CiffModel::new(tiny_model_config(), 3).unwrap(), cfg)
}

const OPTS: RunOptions = RunOptions { seed: 11, fold: 0, context: true };

/// Bytes of every Adam buffer of parameters in `groups`.
fn moment_bytes(state: &TrainState, groups: &[&str]) -> BTreeMap<String, Vec<u8>> {
    state
        .adam
        .moments
        .iter()
        .filter(|(k, _)| in_groups(k, groups))
        .map(|(k, m)| {
            let mut b = m.m.to_le_bytes();
            b.extend(m.v.to_le_bytes());
            b.extend(m.step.to_le_bytes());
            (k.clone(), b)
        })
        .collect()
}

#[test]
fn phase_two_leaves_extractors_and_their_moments_alone() {
    let (ds, fold) = dataset();
    let data = FoldData { records: &ds.records, images: &ds.images, train: &fold.train, val: &fold.val };
    for cache in [true, false] {
        let cfg = config([2, 2, 2], cache);
        let mut snapshots = Vec::new();
        run_phases(fresh(&cfg), &data, &cfg, &OPTS, |s| {
            if s.epoch <= 1 {
                snapshots.push((
                    (s.phase, s.epoch),
                    s.model.params.bytes_of(&EXTRACTOR_GROUPS),
                    moment_bytes(s, &EXTRACTOR_GROUPS),
                    s.model.params.bytes_of(&[model::CFF, model::CCFF]),
                ));
            }
            Ok(())
        })
        .unwrap();
        let at = |phase: usize, epoch: usize| snapshots.iter().find(|s| s.0 == (phase, epoch)).unwrap();
        // End of phase 1, end of phase 2, first epoch of phase 3.
        let (p1, p2, p3) = (at(1, 0), at(2, 0), at(2, 1));
        assert_eq!(p1.1, p2.1, "extractor bytes moved in phase 2 (cache {cache})");
        assert_eq!(p1.2, p2.2, "frozen moments moved in phase 2 (cache {cache})");
        assert!(!p1.2.is_empty());
        assert_ne!(p1.3, p2.3, "phase 2 trains the fusion modules");
        assert_ne!(p2.1, p3.1, "phase 3 unfreezes the extractors");
    }
}

#[test]
fn phase_one_output_initialises_both_extractors() {
    let (ds, fold) = dataset();
    let data = FoldData { records: &ds.records, images: &ds.images, train: &fold.train, val: &fold.val };
    let cfg = config([2, 0, 0], true);
    let state = run_phases(fresh(&cfg), &data, &cfg, &OPTS, |_| Ok(())).unwrap();
    for (primary, context) in [
        (model::PRIMARY_BACKBONE, model::CONTEXT_BACKBONE),
        (model::PRIMARY_MKSA, model::CONTEXT_MKSA),
        (model::PRIMARY_NORM, model::CONTEXT_NORM),
    ] {
        let p: Vec<_> = state.model.params.iter().filter(|(k, _)| in_groups(k, &[primary])).collect();
        assert!(!p.is_empty());
        for (name, value) in p {
            let twin = name.replacen(primary, context, 1);
            assert_eq!(state.model.params.get(&twin).unwrap().to_le_bytes(), value.to_le_bytes(), "{twin}");
        }
    }
}

#[test]
fn zero_epoch_schedule_is_a_no_op() {
    let (ds, fold) = dataset();
    let data = FoldData { records: &ds.records, images: &ds.images, train: &fold.train, val: &fold.val };
    let cfg = config([0, 0, 0], true);
    let start = fresh(&cfg);
    let before = start.model.params.bytes_of(&[""]);
    let end = run_phases(start, &data, &cfg, &OPTS, |_| Ok(())).unwrap();
    assert_eq!(end.model.params.bytes_of(&[""]), before);
    assert!(end.adam.moments.is_empty());
    assert!(end.logs.is_empty());
}

#[test]
fn baseline_run_reads_only_what_phase_one_needs() {
    let (ds, fold) = dataset();
    let epochs = 2;
    let counting = Counting::new(&ds.images);
    let data = FoldData { records: &ds.records, images: &counting, train: &fold.train, val: &fold.val };
    let cfg = config([epochs, 3, 3], true);
    let opts = RunOptions { context: false, ..OPTS };
    let state = run_phases(fresh(&cfg), &data, &cfg, &opts, |_| Ok(())).unwrap();
    assert_eq!(state.phase, 1);
    assert!(state.logs.iter().all(|l| l.phase == 1));

    let mut reads = BTreeMap::new();
    for i in counting.take_reads() {
        *reads.entry(i).or_insert(0) += 1;
    }
    // Calibration plus one pass per epoch over the training images; one
    // scoring pass per epoch plus the baseline scoring over validation.
    let mut expected = BTreeMap::new();
    for &i in &fold.train {
        expected.insert(i, 1 + epochs);
    }
    for &i in &fold.val {
        expected.insert(i, epochs + 1);
    }
    assert_eq!(reads, expected);

    let full = Counting::new(&ds.images);
    let data = FoldData { images: &full, ..data };
    run_phases(fresh(&cfg), &data, &cfg, &OPTS, |_| Ok(())).unwrap();
    assert!(full.take_reads().len() > expected.values().sum::<usize>());
}

#[test]
fn identical_seeds_give_identical_states() {
    let (ds, fold) = dataset();
    let data = FoldData { records: &ds.records, images: &ds.images, train: &fold.train, val: &fold.val };
    let cfg = TrainConfig { blackout: 0.3, augment: Default::default(), ..config([2, 2, 2], false) };
    let a = run_phases(fresh(&cfg), &data, &cfg, &OPTS, |_| Ok(())).unwrap();
    let b = run_phases(fresh(&cfg), &data, &cfg, &OPTS, |_| Ok(())).unwrap();
    assert_eq!(encode_state(&a), encode_state(&b));
    assert_eq!(a.logs, b.logs);
    let c = run_phases(fresh(&cfg), &data, &cfg, &RunOptions { seed: 12, ..OPTS }, |_| Ok(())).unwrap();
    assert_ne!(encode_state(&a), encode_state(&c));
}

#[test]
fn resuming_from_any_epoch_matches_an_uninterrupted_run() {
    let (ds, fold) = dataset();
    let data = FoldData { records: &ds.records, images: &ds.images, train: &fold.train, val: &fold.val };
    let cfg = config([2, 2, 2], true);
    let whole = run_phases(fresh(&cfg), &data, &cfg, &OPTS, |_| Ok(())).unwrap();
    let total = whole.logs.len();
    for stop in 1..total {
        let mut saved = None;
        let interrupted = run_phases(fresh(&cfg), &data, &cfg, &OPTS, |s| {
            if s.logs.len() == stop {
                saved = Some(encode_state(s));
                return Err(Error::Contract("interrupted".into()));
            }
            Ok(())
        });
        assert!(interrupted.is_err());
        let state = decode(&saved.unwrap()).unwrap().state.unwrap();
        let resumed = run_phases(state, &data, &cfg, &OPTS, |_| Ok(())).unwrap();
        assert_eq!(resumed.logs[stop].train_loss, whole.logs[stop].train_loss, "stop {stop}");
        assert_eq!(encode_state(&resumed), encode_state(&whole), "stop {stop}");
    }
}

#[test]
fn phase_one_halves_the_training_loss() {
    let ds = synth_generate(&SynthConfig::default()).unwrap();
    let fold = kfold_split(&ds.records, 5, 0).unwrap().remove(0);
    let data = FoldData { records: &ds.records, images: &ds.images, train: &fold.train, val: &fold.val };
    let mut model_cfg = model::ModelConfig { m: 4, ..Default::default() };
    model_cfg.backbone.stages.truncate(2);
    let cfg = TrainConfig { epochs: [10, 0, 0], ..Default::default() };
    let start = TrainState::new(CiffModel::new(model_cfg, 0).unwrap(), &cfg);
    let before = score_single(&start.model, &ds.records, &ds.images, &fold.train, 0.5).unwrap().loss;
    let opts = RunOptions { context: false, ..OPTS };
    let end = run_phases(start, &data, &cfg, &opts, |_| Ok(())).unwrap();
    let after = score_single(&end.model, &ds.records, &ds.images, &fold.train, 0.5).unwrap().loss;
    assert!((before - std::f64::consts::LN_2).abs() < 1e-9, "fresh head predicts one half");
    assert!(after <= 0.5 * before, "training loss {before} -> {after}");
}

#[test]
fn divergence_names_phase_and_epoch() {
    let (ds, fold) = dataset();
    let data = FoldData { records: &ds.records, images: &ds.images, train: &fold.train, val: &fold.val };
    let cfg = config([1, 0, 0], true);
    let mut state = fresh(&cfg);
    let w = state.model.params.get_mut("head.single.w1").unwrap();
    *w = ciff_core::Tensor::full(w.shape(), f64::NAN);
    let err = run_phases(state, &data, &cfg, &OPTS, |_| Ok(())).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("phase 1") && msg.contains("epoch 1"), "{msg}");
}
