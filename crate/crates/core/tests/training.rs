mod support;

use keycap::checkpoint::Checkpoint;
use keycap::data;
use keycap::model::PreparedSample;
use keycap::train::{self, AdamState, LogRecord, TrainConfig};
use keycap::{CaptionModel, SeededRng};
use support::*;

fn corpus() -> (Vec<PreparedSample>, Vec<PreparedSample>, usize) {
    let records = data::synth_records(12, 3, 10).unwrap();
    let vocab = data::build_vocabulary(&records, 1).unwrap();
    let samples = data::prepare(&records, &vocab, 6, 30);
    let (train_set, val_set) = samples.split_at(9);
    (train_set.to_vec(), val_set.to_vec(), vocab.len())
}

fn fresh(vocab: usize) -> CaptionModel {
    let mut gen = micro_generator(false);
    gen.image_feature_size = 10;
    gen.max_gen_len = 30;
    CaptionModel::new(micro_encoder(vocab, false, 1, 2), gen, &mut SeededRng::new(21)).unwrap()
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        learning_rate: 0.01,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_bit_reproducible() {
    let (tr, va, v) = corpus();
    let a = train::train(fresh(v), &tr, &va, &cfg(3), |_| {}).unwrap();
    let b = train::train(fresh(v), &tr, &va, &cfg(3), |_| {}).unwrap();
    assert_eq!(a.last, b.last);
    assert_eq!(a.log, b.log);
    let c = train::train(fresh(v), &tr, &va, &TrainConfig { seed: 6, ..cfg(3) }, |_| {}).unwrap();
    assert_ne!(a.last, c.last);
}

#[test]
fn loss_goes_down_and_best_epoch_is_tracked() {
    let (tr, va, v) = corpus();
    let mut epochs = Vec::new();
    let out = train::train(fresh(v), &tr, &va, &cfg(15), |r| {
        if let LogRecord::Epoch { loss, val_loss, .. } = r {
            epochs.push((*loss, *val_loss));
        }
    })
    .unwrap();
    assert_eq!(epochs.len(), 15);
    assert!(epochs[14].0 < epochs[0].0);
    let (best_i, best) = epochs
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .unwrap();
    assert_eq!(out.best_epoch, best_i + 1);
    assert_eq!(out.best_val_loss, best.1);
    assert_eq!(train::evaluate_loss(&out.best, &va).unwrap(), out.best_val_loss);
}

#[test]
fn checkpoint_round_trips_a_trained_model() {
    let (tr, va, v) = corpus();
    let out = train::train(fresh(v), &tr, &va, &cfg(2), |_| {}).unwrap();
    let ck = Checkpoint::capture(&out.last, &AdamState::new(&out.last), "hash");
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    let (model, _) = back.restore(30).unwrap();
    assert_eq!(model, out.last);
    let s = &va[0];
    let ctx = model.context(&s.image, &s.keywords).unwrap();
    assert_eq!(model.beam(&ctx, 3, false).unwrap(), out.last.beam(&ctx, 3, false).unwrap());
}

#[test]
fn empty_splits_are_rejected() {
    let (tr, va, v) = corpus();
    assert!(train::train(fresh(v), &[], &va, &cfg(1), |_| {}).is_err());
    assert!(train::train(fresh(v), &tr, &[], &cfg(1), |_| {}).is_err());
    assert!(train::train(fresh(v), &tr, &va, &TrainConfig { batch_size: 0, ..cfg(1) }, |_| {}).is_err());
}

#[test]
fn one_adam_step_lowers_batch_loss() {
    let (tr, _, v) = corpus();
    let mut m = fresh(v);
    let batch: Vec<&PreparedSample> = tr.iter().take(4).collect();
    let before = model_loss(&m, &batch);
    let (_, grads) = train::batch_gradients(&m, &batch).unwrap();
    let mut adam = AdamState::new(&m);
    let mut ac = train::AdamConfig::from(&cfg(1));
    ac.learning_rate = 1e-3;
    adam.apply(&mut m, &grads, &ac).unwrap();
    assert!(model_loss(&m, &batch) < before);
}
