//! Desk-scale end-to-end run: synthesize, train the attention variant, pick
//! thresholds on dev and report eval WER.
//!
//! Knobs come from the environment, e.g.
//! `DESK_STEPS=1000 DESK_LR=0.2 cargo run --release --example desk_run`.

use std::time::Instant;

use rescore_core::corpus::synthetic::{self, SynthConfig};
use rescore_core::interpolate::{default_grid, grid_search_thresholds, tune_weights, WeightVector};
use rescore_core::metrics::oracle_wer;
use rescore_core::model::{Model, ModelConfig, Variant};
use rescore_core::ngram::{BackoffModel, KatzConfig};
use rescore_core::pipeline::{self as pl, Thresholds};
use rescore_core::tokenizer::train_bpe;
use rescore_core::trainer::{train_with_progress, TrainConfig};

fn knob<T: std::str::FromStr>(name: &str, default: T) -> T {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> rescore_core::Result<()> {
    let t0 = Instant::now();
    let corpus = synthetic::build(&SynthConfig::default())?;
    let asr = pl::wer_columns(&corpus.eval, &pl::asr_picks(&corpus.eval));
    println!("corpus: asr eval wer {:.4} (music {:.4}), oracle {:.4}", asr[0], asr[1], oracle_wer(&corpus.eval)?);

    let vocab = train_bpe(&pl::tokenizer_text(&corpus.train), knob("DESK_VOCAB", pl::DESK_VOCAB_BUDGET))?;
    let mut cfg = ModelConfig::desk(Variant::Tra, vocab.len());
    cfg.d_model = knob("DESK_D", cfg.d_model);
    cfg.ff_dim = knob("DESK_FF", cfg.ff_dim);
    cfg.enc_layers = knob("DESK_ENC", cfg.enc_layers);
    cfg.dropout = knob("DESK_DROPOUT", cfg.dropout);
    let mut model = Model::new(cfg, knob("DESK_SEED", 1))?;
    let train_x = pl::examples(&corpus.train, &vocab);
    let dev_x = pl::examples(&corpus.dev, &vocab);
    let desk = TrainConfig::desk();
    let tc = TrainConfig {
        max_steps: knob("DESK_STEPS", desk.max_steps),
        eval_every: knob("DESK_EVAL_EVERY", desk.eval_every),
        batch_token_budget: knob("DESK_BUDGET", desk.batch_token_budget),
        warmup: knob("DESK_WARMUP", desk.warmup),
        patience: knob("DESK_PATIENCE", desk.patience),
        lr_scale: knob("DESK_LR", desk.lr_scale),
        max_seconds: Some(60.0 * knob("DESK_MINUTES", 30.0)),
        ..desk
    };
    println!("vocab {} params {} ({:.1}s)", vocab.len(), model.params.store.size(), t0.elapsed().as_secs_f64());
    let report = train_with_progress(&mut model, &train_x, &dev_x, &tc, &mut |e| {
        println!("{} t={:.0}s", e.to_line(), t0.elapsed().as_secs_f64());
    })?;
    println!("{}", report.log_text().lines().last().unwrap_or(""));

    let dev_out = pl::run_model(&model, &vocab, &corpus.dev)?;
    let eval_out = pl::run_model(&model, &vocab, &corpus.eval)?;
    let dev_dec = pl::decision_records(&corpus.dev, &dev_out)?;
    let choice = grid_search_thresholds(&pl::split_in_domain(&corpus.dev, &dev_dec), &dev_dec, &default_grid())?;
    let t = Thresholds::from_choice(&choice);
    println!("thresholds {t:?} fallback={}", choice.fallback);
    let show = |name: &str, picks: &[Vec<String>]| {
        let c = pl::wer_columns(&corpus.eval, picks);
        println!("{name:<12} all {:.4} music {:.4}", c[0], c[1]);
    };
    show("ASR", &pl::asr_picks(&corpus.eval));
    show("rescore", &pl::rescore_picks(&corpus.eval, &eval_out)?);
    let r_only = Thresholds { rewrite: f64::INFINITY, ..t };
    show("TRA-R", &pl::thresholded_picks(&corpus.eval, &eval_out, r_only)?);
    show("TRA-RW", &pl::thresholded_picks(&corpus.eval, &eval_out, t)?);
    show("TRA-RW ref", &pl::thresholded_picks(&corpus.eval, &eval_out, Thresholds::reference())?);
    show("rewrite all", &eval_out.iter().map(|o| o.decode.as_ref().unwrap().words.clone()).collect::<Vec<_>>());

    let lm = BackoffModel::train(&pl::lm_text(&corpus.train), &KatzConfig::with_order(4))?;
    let runs = [
        ("4-gram+W*", pl::run_ngram(&lm, &corpus.dev), pl::run_ngram(&lm, &corpus.eval), false),
        ("TRA-R+W*", dev_out.clone(), eval_out.clone(), false),
        ("TRA-RW+W*", dev_out.clone(), eval_out.clone(), true),
    ];
    for (name, dev_o, eval_o, inject) in runs {
        let dev_s = pl::scored_records(&corpus.dev, &dev_o, inject)?;
        let eval_s = pl::scored_records(&corpus.eval, &eval_o, inject)?;
        let tuned = tune_weights(&dev_s, &WeightVector::asr(), &[])?;
        println!(
            "{name}: dev {:.4} -> {:.4} weights {:?} evals {}",
            tuned.initial_wer, tuned.wer, tuned.weights.0, tuned.powell.evaluations
        );
        show(name, &pl::interpolated_picks(&eval_s, &tuned.weights)?);
    }
    println!("total {:.0}s", t0.elapsed().as_secs_f64());
    Ok(())
}
