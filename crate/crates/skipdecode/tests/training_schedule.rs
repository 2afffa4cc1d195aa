//! Schedule-aware fine-tuning: training with per-position skipping must stay
//! close to full-depth training on the synthetic corpus.

use skipdecode::model::{init_weights, ModelConfig};
use skipdecode::schedule::{build_schedule, preset_or_derived};
use skipdecode::training::{
    active_sets_for, eval_loss, finetune_with_schedule, make_synthetic_corpus, CorpusSpec,
    LossTargets, TrainConfig,
};

#[test]
fn schedule_trained_model_stays_within_fifteen_percent_of_full_depth() {
    let corpus = make_synthetic_corpus(&CorpusSpec { records: 320, seed: 99 });
    let sequences = corpus.sequences().unwrap();
    let (train_seqs, eval_seqs) = sequences.split_at(256);
    let prompt_len = corpus.prompt_len();
    let max_len = corpus.max_sequence_len().unwrap();
    let pad = corpus.vocab.pad_id();

    let cfg = ModelConfig {
        vocab_size: corpus.vocab.len(),
        d_model: 32,
        n_heads: 4,
        d_ff: 64,
        num_decoder_layers: 6,
        max_positions: max_len + 2,
    };

    // 2x analog at toy depth: min 2, max 4, warmup 1
    let preset = preset_or_derived(6, 2.0).unwrap();
    assert_eq!(
        (preset.min_exit_layer, preset.max_exit_layer, preset.warmup_layers),
        (2, 4, 1)
    );
    let schedule = build_schedule(&preset.schedule_config(prompt_len, max_len)).unwrap();

    let base = TrainConfig {
        learning_rate: 1e-3,
        epochs: 30,
        batch_size: 16,
        warmup_steps: 20,
        max_seq_len: max_len,
        prompt_length: prompt_len,
        seed: 4,
        schedule: None,
    };
    let scheduled = TrainConfig {
        schedule: Some(schedule.clone()),
        ..base.clone()
    };

    let init = init_weights::<f32>(&cfg, 21).unwrap();
    let (full_model, _) =
        finetune_with_schedule(init.clone(), train_seqs, pad, &base).unwrap();
    let (skip_model, _) =
        finetune_with_schedule(init, train_seqs, pad, &scheduled).unwrap();

    // each model is evaluated in its own operating mode
    let eval = |model: &skipdecode::DecoderWeights<f32>, sched: Option<&skipdecode::ExitSchedule>| {
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in eval_seqs.chunks(32) {
            let width = chunk.iter().map(|s| s.len()).max().unwrap();
            let tokens: Vec<Vec<u32>> = chunk
                .iter()
                .map(|s| {
                    let mut row = s.clone();
                    row.resize(width, pad);
                    row
                })
                .collect();
            let targets = LossTargets::from_pad(&tokens, pad);
            let sets = active_sets_for(model, sched, width).unwrap();
            total += eval_loss(model, &tokens, &targets, &sets).unwrap();
            batches += 1;
        }
        total / batches as f64
    };

    let full_eval = eval(&full_model, None);
    let skip_eval = eval(&skip_model, Some(&schedule));
    assert!(
        skip_eval <= 1.15 * full_eval,
        "schedule-aware training drifted: skip {skip_eval:.4} vs full {full_eval:.4} ({}% gap)",
        ((skip_eval / full_eval - 1.0) * 100.0).round()
    );
    println!("full-depth eval {full_eval:.4}, schedule-aware eval {skip_eval:.4}");
}
