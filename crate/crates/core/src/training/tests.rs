use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::vocab::is_special;
use crate::data::{Batch, BatchIterator, Corpus, IGNORE_LABEL, MASK_ID, PAD_ID};
use crate::gradcheck::tiny_config;
use crate::layers::ParamStore;
use crate::model::{EncoderModel, ModelConfig, Variant};
use crate::numerics::{Tape, Tensor};

fn batch_of(seqs: &[Vec<u32>]) -> Batch {
    let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
    Batch::from_sequences(&refs).unwrap()
}

#[test]
fn mask_count_examples() {
    assert_eq!(mask_count(100, 0.15), 15);
    assert_eq!(mask_count(3, 0.15), 1);
    assert_eq!(mask_count(1, 0.15), 1);
    assert_eq!(mask_count(20, 0.15), 3);
    assert_eq!(mask_count(127, 0.15), 19);
}

#[test]
fn masks_exact_count_of_ordinary_tokens() {
    let mut seq: Vec<u32> = vec![2];
    seq.extend((0..100).map(|i| 5 + i % 50));
    seq.push(3);
    seq.extend([0, 0, 0]);
    let batch = batch_of(&[seq.clone(), seq]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let masked = mask_tokens(&batch, 0.15, &mut rng).unwrap();
    let b = &masked.batch;
    b.validate().unwrap();
    assert_eq!(masked.skipped, 0);
    assert_eq!(b.masked_positions.len(), 30);
    for &p in &b.masked_positions {
        assert_eq!(b.token_ids[p], MASK_ID);
        assert_eq!(b.mlm_labels[p], batch.token_ids[p] as i32);
    }
    for p in 0..b.token_ids.len() {
        if !b.masked_positions.contains(&p) {
            assert_eq!(b.token_ids[p], batch.token_ids[p]);
            assert_eq!(b.mlm_labels[p], IGNORE_LABEL);
        }
    }
}

#[test]
fn short_sequences_mask_one_token() {
    let batch = batch_of(&[vec![2, 9, 10, 11, 3, 0]]);
    let masked = mask_tokens(&batch, 0.15, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(masked.batch.masked_positions.len(), 1);
}

#[test]
fn sequences_without_candidates_are_skipped() {
    let batch = batch_of(&[vec![2, 3, 0, 0], vec![2, 7, 3, 0]]);
    let masked = mask_tokens(&batch, 0.15, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(masked.skipped, 1);
    assert_eq!(masked.batch.masked_positions, [5]);
}

#[test]
fn masking_is_seeded() {
    let seq: Vec<u32> = (0..64).map(|i| 5 + i).collect();
    let batch = batch_of(&[seq.clone(), seq]);
    let run = |seed| {
        mask_tokens(&batch, 0.15, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap()
            .batch
    };
    assert_eq!(run(7), run(7));
    assert_ne!(run(7).masked_positions, run(8).masked_positions);
}

#[test]
fn masking_rejects_bad_rate() {
    let batch = batch_of(&[vec![2, 7, 3]]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(mask_tokens(&batch, 0.0, &mut rng).is_err());
    assert!(mask_tokens(&batch, 1.0, &mut rng).is_err());
}

proptest! {
    #[test]
    fn masking_invariants(seed in any::<u64>(), rows in 1usize..6, len in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seqs: Vec<Vec<u32>> = (0..rows)
            .map(|_| {
                let real = rng.random_range(1..=len);
                (0..len).map(|i| if i < real { rng.random_range(0..30) } else { PAD_ID }).collect()
            })
            .collect();
        // any id may appear, including specials; padding only at the tail
        let seqs: Vec<Vec<u32>> = seqs
            .into_iter()
            .map(|s| s.into_iter().map(|t| if t == PAD_ID { PAD_ID } else { t.max(1) }).collect())
            .collect();
        let batch = batch_of(&seqs);
        let masked = mask_tokens(&batch, 0.15, &mut rng).unwrap();
        let b = &masked.batch;
        b.validate().unwrap();
        let mut skipped = 0;
        for r in 0..rows {
            let n = batch.maskable(r).count();
            let got = b.masked_positions.iter().filter(|&&p| p / len == r).count();
            if n == 0 {
                skipped += 1;
                prop_assert_eq!(got, 0);
            } else {
                prop_assert_eq!(got, ((0.15 * n as f64 + 1e-9).floor() as usize).max(1));
            }
        }
        prop_assert_eq!(skipped, masked.skipped);
        for &p in &b.masked_positions {
            prop_assert!(!is_special(batch.token_ids[p]) && !batch.pad_mask[p]);
        }
    }
}

fn explicit_ce(logits: &[f64], cols: usize, targets: &[(usize, usize)]) -> f64 {
    let mut total = 0.0;
    for &(row, t) in targets {
        let r = &logits[row * cols..(row + 1) * cols];
        let z: f64 = r.iter().map(|v| v.exp()).sum();
        total += -(r[t].exp() / z).ln();
    }
    total / targets.len() as f64
}

#[test]
fn mlm_loss_examples() {
    let v = 11;
    let mut tape = Tape::<f64>::new();
    let logits = tape.constant(Tensor::zeros(&[4, v]));
    let loss = mlm_loss(&mut tape, logits, &[IGNORE_LABEL, 3, IGNORE_LABEL, 7]).unwrap();
    assert!((tape.value(loss).item().unwrap() - (v as f64).ln()).abs() < 1e-12);

    let mut one_hot = vec![0.0; v];
    one_hot[2] = 60.0;
    let logits = tape.constant(Tensor::new(&[1, v], one_hot).unwrap());
    let loss = mlm_loss(&mut tape, logits, &[2]).unwrap();
    assert!(tape.value(loss).item().unwrap() < 1e-20);

    let logits = tape.constant(Tensor::zeros(&[2, v]));
    assert!(mlm_loss(&mut tape, logits, &[IGNORE_LABEL, IGNORE_LABEL]).is_err());
}

#[test]
fn mlm_loss_matches_explicit_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (rows, cols) = (6, 9);
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-4.0..4.0)).collect();
    let labels = [4, IGNORE_LABEL, 0, 8, IGNORE_LABEL, 2];
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::new(&[rows, cols], data.clone()).unwrap());
    let loss = mlm_loss(&mut tape, logits, &labels).unwrap();
    let expect = explicit_ce(&data, cols, &[(0, 4), (2, 0), (3, 8), (5, 2)]);
    assert!((tape.value(loss).item().unwrap() - expect).abs() < 1e-6);
}

fn single_param_store(value: f64, decay: bool) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    store.add("w", Tensor::new(&[1], vec![value]).unwrap(), decay).unwrap();
    store
}

#[test]
fn adam_zero_gradient_no_decay_is_identity() {
    let mut store = single_param_store(0.7, true);
    let id = store.ids().next().unwrap();
    store.tensor_mut(id).accumulate_grad(&[0.0]);
    let mut state = AdamState::new(&store);
    let hyper = TrainHyper {
        weight_decay: 0.0,
        ..TrainHyper::default()
    };
    adam_step(&mut store, &mut state, &hyper, 1e-3).unwrap();
    assert_eq!(store.tensor(id).data(), &[0.7]);
    assert_eq!(state.step, 1);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut store = single_param_store(0.5, false);
    let id = store.ids().next().unwrap();
    store.tensor_mut(id).accumulate_grad(&[1.0]);
    let mut state = AdamState::new(&store);
    let hyper = TrainHyper {
        adam_eps: 1e-12,
        ..TrainHyper::default()
    };
    adam_step(&mut store, &mut state, &hyper, 0.01).unwrap();
    assert!((store.tensor(id).data()[0] - 0.49).abs() < 1e-12);
}

#[test]
fn adam_decay_only_scales_weights() {
    let hyper = TrainHyper {
        weight_decay: 0.1,
        ..TrainHyper::default()
    };
    let mut decayed = single_param_store(2.0, true);
    let mut kept = single_param_store(2.0, false);
    for store in [&mut decayed, &mut kept] {
        let mut state = AdamState::new(store);
        adam_step(store, &mut state, &hyper, 0.5).unwrap();
    }
    assert!((decayed.iter().next().unwrap().tensor.data()[0] - 2.0 * (1.0 - 0.5 * 0.1)).abs() < 1e-15);
    assert_eq!(kept.iter().next().unwrap().tensor.data()[0], 2.0);
}

#[test]
fn decay_flags_follow_parameter_kind() {
    let model = EncoderModel::<f32>::new(&tiny_config(Variant::Swish), 0).unwrap();
    for p in model.store.iter() {
        let expect = p.tensor.rank() == 2 && p.name != "relative_bias";
        assert_eq!(p.decay, expect, "{}", p.name);
    }
}

#[test]
fn adam_rejects_mismatched_state() {
    let mut store = single_param_store(1.0, true);
    let mut state = AdamState::new(&single_param_store(1.0, true));
    state.m[0].push(0.0);
    assert!(adam_step(&mut store, &mut state, &TrainHyper::default(), 0.1).is_err());
}

#[test]
fn lr_schedule_examples() {
    let h = TrainHyper {
        lr_peak: 3e-4,
        warmup_steps: 20_000,
        total_steps: 100_000,
        ..TrainHyper::default()
    };
    assert_eq!(lr_schedule(0, &h), 0.0);
    assert_eq!(lr_schedule(20_000, &h), 3e-4);
    assert!((lr_schedule(10_000, &h) - 1.5e-4).abs() < 1e-18);
    assert!((lr_schedule(60_000, &h) - 1.5e-4).abs() < 1e-18);
    assert_eq!(lr_schedule(100_000, &h), 0.0);
    let flat = TrainHyper {
        warmup_steps: 10,
        total_steps: 10,
        ..TrainHyper::default()
    };
    assert_eq!(lr_schedule(10, &flat), flat.lr_peak);
}

#[test]
fn hyper_validation() {
    TrainHyper::default().validate().unwrap();
    assert!(TrainHyper {
        mask_rate: 1.0,
        ..TrainHyper::default()
    }
    .validate()
    .is_err());
    assert!(TrainHyper {
        warmup_steps: 5,
        total_steps: 4,
        ..TrainHyper::default()
    }
    .validate()
    .is_err());
}

fn toy_setup(variant: Variant) -> (ModelConfig, Corpus) {
    let mut cfg = tiny_config(variant);
    cfg.vocab_size = 16;
    cfg.max_seq_len = 12;
    cfg.d = 16;
    cfg.heads = 2;
    cfg.head_dim = 8;
    cfg.d_ffn = 32;
    cfg.d_prime = 21;
    cfg.dropout = 0.1;
    cfg.attention_dropout = 0.1;
    // every document repeats one token, so the context gives the answer away
    let docs = (0..40).map(|i| vec![5 + (i % 11) as u32; 20]).collect();
    (cfg, Corpus::new(docs, 16).unwrap())
}

fn toy_hyper(steps: u64) -> TrainHyper {
    TrainHyper {
        lr_peak: 3e-3,
        warmup_steps: steps / 10,
        total_steps: steps,
        batch_size: 8,
        seq_len: 12,
        seed: 9,
        ..TrainHyper::default()
    }
}

fn run_toy(variant: Variant, steps: u64) -> (TrainSummary, EncoderModel<f32>, AdamState<f32>) {
    let (cfg, corpus) = toy_setup(variant);
    let hyper = toy_hyper(steps);
    let mut model = EncoderModel::<f32>::new(&cfg, hyper.seed).unwrap();
    let mut state = AdamState::new(&model.store);
    let mut batches = BatchIterator::new(&corpus, hyper.seq_len, hyper.batch_size, hyper.seed).unwrap();
    let summary = train_loop(&mut model, &mut state, &mut batches, &hyper, |_, _, _| Ok(())).unwrap();
    (summary, model, state)
}

#[test]
fn training_reduces_loss_for_every_variant() {
    for variant in Variant::ALL {
        let (summary, _, state) = run_toy(variant, 300);
        assert_eq!(summary.records.len(), 300);
        assert_eq!(state.step, 300);
        let first = summary.initial_loss().unwrap();
        let last = summary.final_loss(10).unwrap();
        assert!(
            (first - 16f64.ln()).abs() < 0.1 * 16f64.ln(),
            "{variant}: initial {first}"
        );
        assert!(last < 0.7 * first, "{variant}: {first} -> {last}");
    }
}

#[test]
fn training_is_bitwise_reproducible() {
    let (a, ma, _) = run_toy(Variant::Swish, 20);
    let (b, mb, _) = run_toy(Variant::Swish, 20);
    let key = |s: &TrainSummary| -> Vec<(u64, u64, u64)> {
        s.records
            .iter()
            .map(|r| (r.step, r.loss.to_bits(), r.lr.to_bits()))
            .collect()
    };
    assert_eq!(key(&a), key(&b));
    for (p, q) in ma.store.iter().zip(mb.store.iter()) {
        assert_eq!(p.tensor.data(), q.tensor.data());
    }
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let (cfg, corpus) = toy_setup(Variant::Rab);
    let hyper = toy_hyper(5);
    let mut model = EncoderModel::<f32>::new(&cfg, 0).unwrap();
    let id = model.store.id("layers.0.ffn.w1").unwrap();
    model.store.tensor_mut(id).data_mut()[0] = f32::NAN;
    let mut state = AdamState::new(&model.store);
    let mut batches = BatchIterator::new(&corpus, hyper.seq_len, hyper.batch_size, 0).unwrap();
    let err = train_loop(&mut model, &mut state, &mut batches, &hyper, |_, _, _| Ok(())).unwrap_err();
    match err {
        crate::Error::NonFinite { step, detail, .. } => {
            assert_eq!(step, 1);
            assert!(detail.contains("layers.0.ffn.w1"));
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn empty_corpus_is_an_input_error() {
    let (cfg, _) = toy_setup(Variant::Rab);
    let hyper = toy_hyper(5);
    let mut model = EncoderModel::<f32>::new(&cfg, 0).unwrap();
    let mut state = AdamState::new(&model.store);
    let mut batches = BatchIterator::new(&Corpus::default(), 12, 8, 0).unwrap();
    let err = train_loop(&mut model, &mut state, &mut batches, &hyper, |_, _, _| Ok(())).unwrap_err();
    assert!(matches!(err, crate::Error::Input(_)));
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let (_, model, state) = run_toy(Variant::Swish, 6);
    let bytes = encode_checkpoint(&model, &state);
    let (loaded, loaded_state) = decode_checkpoint(&bytes).unwrap();
    assert_eq!(loaded.config, model.config);
    assert_eq!(loaded_state, state);
    for (p, q) in model.store.iter().zip(loaded.store.iter()) {
        assert_eq!(p.name, q.name);
        assert_eq!(p.tensor.data(), q.tensor.data());
    }
    let ids: Vec<u32> = (0..24).map(|i| 5 + i % 11).collect();
    let pad = vec![false; 24];
    let a = model.hidden_states(&ids, &pad, 12).unwrap();
    let b = loaded.hidden_states(&ids, &pad, 12).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn resumed_training_matches_uninterrupted_optimizer_state() {
    let (_, model, state) = run_toy(Variant::Rab, 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.swrn");
    save_checkpoint(&path, &model, &state).unwrap();
    let (_, loaded) = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.step, 4);
    assert!(!dir.path().join("ckpt.tmp").exists());
}

#[test]
fn checkpoint_size_is_three_tensors_per_parameter() {
    let model = EncoderModel::<f32>::new(&ModelConfig::desk(Variant::Swish), 0).unwrap();
    let state = AdamState::new(&model.store);
    let bytes = encode_checkpoint(&model, &state);
    let header = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let records: usize = model
        .store
        .iter()
        .map(|p| 4 + p.name.len() + 4 + 4 * p.tensor.rank())
        .sum::<usize>()
        + model
            .store
            .iter()
            .map(|p| 2 * (4 + p.name.len() + 7 + 4 + 4 * p.tensor.rank()))
            .sum::<usize>();
    assert_eq!(bytes.len(), 12 + header + records + 3 * 4 * model.num_params());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let (_, model, state) = run_toy(Variant::Orig, 2);
    let bytes = encode_checkpoint(&model, &state);
    let is_ckpt_err = |b: &[u8]| matches!(decode_checkpoint(b), Err(crate::Error::Checkpoint(_)));
    for cut in [0, 3, 8, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(is_ckpt_err(&bytes[..cut]), "cut at {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(is_ckpt_err(&bad));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(is_ckpt_err(&bad));
    // dropping the trailing records leaves a well-formed prefix with parameters missing
    let last_record = 4 + "adam.v.mlm.bias".len() + 4 + 4 + 4 * model.config.vocab_size;
    assert!(is_ckpt_err(&bytes[..bytes.len() - last_record]));
    let mut nan = bytes.clone();
    let n = nan.len();
    nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(is_ckpt_err(&nan));
    let mut extra = bytes;
    extra.extend_from_slice(&[1, 0, 0, 0, b'z', 0, 0, 0, 0]);
    assert!(is_ckpt_err(&extra));
}

#[test]
fn evaluation_is_deterministic() {
    let (_, model, _) = run_toy(Variant::Swish, 3);
    let (_, corpus) = toy_setup(Variant::Swish);
    let eval = || {
        let batches = BatchIterator::new(&corpus, 12, 8, 0).unwrap();
        let n = batches.batches_per_epoch();
        evaluate(&model, batches.take(n), 0.15, 11).unwrap()
    };
    let (a, n) = eval();
    assert_eq!((a, n), eval());
    assert!(a.is_finite() && n > 0);
}

#[test]
fn metrics_csv_appends_and_strips_timing() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let rec = StepRecord {
        step: 1,
        loss: 2.5,
        lr: 1e-4,
        wall_ms: 12.3456,
    };
    {
        let mut w = MetricsWriter::open(&path).unwrap();
        w.write(&rec).unwrap();
        w.flush().unwrap();
    }
    {
        let mut w = MetricsWriter::open(&path).unwrap();
        w.write(&StepRecord { step: 2, ..rec }).unwrap();
        w.flush().unwrap();
    }
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text, "step,loss,lr,wall_ms\n1,2.5,0.0001,12.346\n2,2.5,0.0001,12.346\n");
    assert_eq!(strip_timing(&text), "step,loss,lr\n1,2.5,0.0001\n2,2.5,0.0001");
}
