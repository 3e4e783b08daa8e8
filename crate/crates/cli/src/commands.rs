//! The six pipeline commands. Each returns the lines it prints on stdout.

use std::fmt::Write as _;
use std::path::Path;

use rescore_core::corpus::{self, synthetic, NBestRecord};
use rescore_core::interpolate::{grid_search_thresholds, tune_weights, TuneResult, WeightVector};
use rescore_core::metrics::oracle_wer;
use rescore_core::model::{Model, Variant};
use rescore_core::ngram::{self, BackoffModel};
use rescore_core::pipeline::{self as pl, ModelOutputs, Thresholds, WerTable, COLUMNS};
use rescore_core::tokenizer::{train_bpe, Vocabulary};
use rescore_core::trainer::train_with_progress;

use crate::config::{RunConfig, Stream};
use crate::manifest::ManifestBuilder;
use crate::{CliError, Layout, Scorer, SPLITS};

type Result<T> = std::result::Result<T, CliError>;
type SplitScorer = Box<dyn Fn(&[NBestRecord]) -> Result<Vec<ModelOutputs>>>;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Input(format!("missing {} (run `rescore {hint}` first)", path.display())))
    }
}

fn read_split(layout: &Layout, split: &str, m: &mut ManifestBuilder) -> Result<Vec<NBestRecord>> {
    let path = layout.split(split);
    require(&path, "synth")?;
    let records = corpus::read_jsonl(&path)?;
    if records.is_empty() {
        return Err(CliError::Input(format!("{} has no records", path.display())));
    }
    m.input(&path)?;
    Ok(records)
}

fn load_vocab(layout: &Layout, m: &mut ManifestBuilder) -> Result<Vocabulary> {
    let path = layout.vocab();
    require(&path, "tokenize")?;
    m.input(&path)?;
    Ok(Vocabulary::load(&path)?)
}

pub fn synth(cfg: &RunConfig, layout: &Layout) -> Result<String> {
    let sc = cfg.synth()?;
    let corpus = synthetic::build(&sc)?;
    let mut m = ManifestBuilder::new("synth", &layout.work, cfg)?;
    m.seed(&Stream::Synth.name(), sc.seed);
    create_dir(&layout.data)?;
    for (name, records) in SPLITS.iter().zip([&corpus.train, &corpus.dev, &corpus.eval]) {
        let path = layout.split(name);
        corpus::emit_jsonl(records, &path)?;
        m.output(&path)?;
    }
    m.finish(&layout.data)?;
    let asr = pl::wer_columns(&corpus.eval, &pl::asr_picks(&corpus.eval));
    Ok(format!(
        "records train={} dev={} eval={}\neval 1-best wer={:.4} music={:.4} oracle={:.4}\n",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.eval.len(),
        asr[0],
        asr[1],
        oracle_wer(&corpus.eval)?
    ))
}

pub fn tokenize(cfg: &RunConfig, layout: &Layout) -> Result<String> {
    let mut m = ManifestBuilder::new("tokenize", &layout.work, cfg)?;
    let train = read_split(layout, "train", &mut m)?;
    let vocab = train_bpe(&pl::tokenizer_text(&train), cfg.vocab_budget()?)?;
    let dir = layout.tokenizer_dir();
    create_dir(&dir)?;
    vocab.save(&layout.vocab())?;
    m.output(&layout.vocab())?;
    m.finish(&dir)?;
    Ok(format!("vocabulary size={} merges={}\n", vocab.len(), vocab.merges().len()))
}

pub fn train(cfg: &RunConfig, layout: &Layout, scorer: Scorer) -> Result<String> {
    let mut m = ManifestBuilder::new(&format!("train {}", scorer.name()), &layout.work, cfg)?;
    let dir = layout.model_dir(scorer);
    let train = read_split(layout, "train", &mut m)?;
    let Some(variant) = scorer.variant() else {
        let lm = BackoffModel::train(&pl::lm_text(&train), &cfg.katz()?)?;
        create_dir(&dir)?;
        ngram::export_arpa(&lm, &layout.arpa())?;
        m.output(&layout.arpa())?;
        m.finish(&dir)?;
        let sizes: Vec<String> = (1..=lm.order()).map(|n| format!("{}-grams={}", n, lm.entries(n).len())).collect();
        return Ok(format!("{}\n", sizes.join(" ")));
    };
    let dev = read_split(layout, "dev", &mut m)?;
    let vocab = load_vocab(layout, &mut m)?;
    let mc = cfg.model(variant, vocab.len())?;
    let tc = cfg.train(variant)?;
    let init = cfg.seed(Stream::Init(variant))?;
    m.seed(&Stream::Init(variant).name(), init);
    m.seed(&Stream::Train(variant).name(), tc.seed);
    let mut model = Model::new(mc, init)?;
    let report =
        train_with_progress(&mut model, &pl::examples(&train, &vocab), &pl::examples(&dev, &vocab), &tc, &mut |e| {
            eprintln!("{}", e.to_line())
        })?;
    model.save(&dir)?;
    let log = dir.join("train.log");
    write_file(&log, &report.log_text())?;
    for name in ["model.cfg", "params.ckpt"] {
        m.output(&dir.join(name))?;
    }
    m.output(&log)?;
    m.finish(&dir)?;
    Ok(report.log_text().lines().last().unwrap_or_default().to_owned() + "\n")
}

fn load_model(layout: &Layout, variant: Variant, vocab: &Vocabulary, m: &mut ManifestBuilder) -> Result<Model> {
    let dir = layout.model_dir(if variant == Variant::Tra { Scorer::Tra } else { Scorer::Tr });
    for name in ["model.cfg", "params.ckpt"] {
        require(&dir.join(name), &format!("train {}", variant.name()))?;
        m.input(&dir.join(name))?;
    }
    let model = Model::load(&dir)?;
    if model.config.variant != variant {
        return Err(CliError::Input(format!("{} holds a {} model", dir.display(), model.config.variant.name())));
    }
    if model.config.vocab_size != vocab.len() {
        return Err(CliError::Input(format!(
            "model vocabulary {} does not match tokenizer vocabulary {}",
            model.config.vocab_size,
            vocab.len()
        )));
    }
    Ok(model)
}

pub fn score(cfg: &RunConfig, layout: &Layout, scorer: Scorer) -> Result<String> {
    let mut m = ManifestBuilder::new(&format!("score {}", scorer.name()), &layout.work, cfg)?;
    let splits = [("dev", read_split(layout, "dev", &mut m)?), ("eval", read_split(layout, "eval", &mut m)?)];
    let run: SplitScorer = match scorer.variant() {
        None => {
            require(&layout.arpa(), "train ngram")?;
            m.input(&layout.arpa())?;
            let lm = ngram::import_arpa(&layout.arpa())?;
            Box::new(move |r| Ok(pl::run_ngram(&lm, r)))
        }
        Some(variant) => {
            let vocab = load_vocab(layout, &mut m)?;
            let model = load_model(layout, variant, &vocab, &mut m)?;
            Box::new(move |r| Ok(pl::run_model(&model, &vocab, r)?))
        }
    };
    let dir = layout.scores_dir(scorer);
    create_dir(&dir)?;
    let mut out = String::new();
    for (split, records) in &splits {
        let outputs = run(records)?;
        let path = layout.scores(scorer, split);
        pl::write_outputs(&outputs, &path)?;
        m.output(&path)?;
        let picks = pl::rescore_picks(records, &outputs)?;
        let _ =
            writeln!(out, "{split}: {} records, argmax wer={:.4}", records.len(), pl::wer_columns(records, &picks)[0]);
    }
    m.finish(&dir)?;
    Ok(out)
}

fn read_scores(layout: &Layout, scorer: Scorer, split: &str, m: &mut ManifestBuilder) -> Result<Vec<ModelOutputs>> {
    let path = layout.scores(scorer, split);
    require(&path, &format!("score {}", scorer.name()))?;
    m.input(&path)?;
    Ok(pl::read_outputs(&path)?)
}

fn tune_line(name: &str, t: &TuneResult) -> String {
    format!(
        "{name}: dev wer {:.6} -> {:.6} evaluations={} converged={}\n",
        t.initial_wer, t.wer, t.powell.evaluations, t.powell.converged
    )
}

pub fn tune(cfg: &RunConfig, layout: &Layout, scorer: Scorer) -> Result<String> {
    let mut m = ManifestBuilder::new(&format!("tune {}", scorer.name()), &layout.work, cfg)?;
    let dev = read_split(layout, "dev", &mut m)?;
    let outputs = read_scores(layout, scorer, "dev", &mut m)?;
    let dir = layout.tune_dir(scorer);
    create_dir(&dir)?;
    let mut log = String::new();
    let mut files: Vec<(&str, String)> = Vec::new();
    if scorer == Scorer::Tra {
        let decisions = pl::decision_records(&dev, &outputs)?;
        let choice = grid_search_thresholds(&pl::split_in_domain(&dev, &decisions), &decisions, &cfg.grid()?)?;
        let _ = writeln!(
            log,
            "thresholds: rescore={} rewrite={} in_domain_wer={:.6} all_domain_wer={:.6} fallback={}",
            choice.rescore, choice.rewrite, choice.in_domain_wer, choice.all_domain_wer, choice.fallback
        );
        files.push(("thresholds.txt", Thresholds::from_choice(&choice).to_text()));
        let r = tune_weights(&pl::scored_records(&dev, &outputs, false)?, &WeightVector::asr(), &[])?;
        let rw = tune_weights(&pl::scored_records(&dev, &outputs, true)?, &WeightVector::asr(), &[])?;
        log.push_str(&tune_line("weights_r", &r));
        log.push_str(&tune_line("weights_rw", &rw));
        files.push(("weights_r.txt", r.weights.to_text()));
        files.push(("weights_rw.txt", rw.weights.to_text()));
    } else {
        let t = tune_weights(&pl::scored_records(&dev, &outputs, false)?, &WeightVector::asr(), &[])?;
        log.push_str(&tune_line("weights", &t));
        files.push(("weights.txt", t.weights.to_text()));
    }
    files.push(("tune.log", log.clone()));
    for (name, text) in &files {
        let path = dir.join(name);
        write_file(&path, text)?;
        m.output(&path)?;
    }
    m.finish(&dir)?;
    Ok(log)
}

/// Eval-table rows in print order and the artifacts each one needs.
struct RowSpec {
    name: &'static str,
    scorer: Scorer,
    /// File under the scorer's tune directory; `None` for plain argmax.
    tuned: Option<&'static str>,
}

const ROWS: [RowSpec; 7] = [
    RowSpec { name: "4-gram+W*", scorer: Scorer::Ngram, tuned: Some("weights.txt") },
    RowSpec { name: "TR", scorer: Scorer::Tr, tuned: None },
    RowSpec { name: "TR+W*", scorer: Scorer::Tr, tuned: Some("weights.txt") },
    RowSpec { name: "TRA-R", scorer: Scorer::Tra, tuned: Some("thresholds.txt") },
    RowSpec { name: "TRA-R+W*", scorer: Scorer::Tra, tuned: Some("weights_r.txt") },
    RowSpec { name: "TRA-RW", scorer: Scorer::Tra, tuned: Some("thresholds.txt") },
    RowSpec { name: "TRA-RW+W*", scorer: Scorer::Tra, tuned: Some("weights_rw.txt") },
];

fn read_text(path: &Path, m: &mut ManifestBuilder) -> Result<String> {
    m.input(path)?;
    std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))
}

fn row_picks(
    spec: &RowSpec,
    records: &[NBestRecord],
    outputs: &[ModelOutputs],
    tuned: Option<String>,
) -> Result<Vec<Vec<String>>> {
    Ok(match (spec.tuned, tuned) {
        (None, _) => pl::rescore_picks(records, outputs)?,
        (Some("thresholds.txt"), Some(text)) => {
            let mut t = Thresholds::from_text(&text)?;
            if spec.name == "TRA-R" {
                t.rewrite = f64::INFINITY;
            }
            pl::thresholded_picks(records, outputs, t)?
        }
        (Some(file), Some(text)) => {
            let w = WeightVector::from_text(&text)?;
            let scored = pl::scored_records(records, outputs, file == "weights_rw.txt")?;
            pl::interpolated_picks(&scored, &w)?
        }
        (Some(_), None) => unreachable!("caller checks the tune file"),
    })
}

/// Scores the records with every method whose artifacts exist. The ASR row
/// is always present and is the baseline for relative changes.
pub fn eval(cfg: &RunConfig, layout: &Layout, records_path: Option<&Path>) -> Result<(WerTable, String)> {
    let mut m = ManifestBuilder::new("eval", &layout.work, cfg)?;
    let path = records_path.map_or_else(|| layout.split("eval"), Path::to_path_buf);
    require(&path, "synth")?;
    let records = corpus::read_jsonl(&path)?;
    if records.is_empty() {
        return Err(CliError::Input(format!("{} has no records", path.display())));
    }
    m.input(&path)?;
    let mut table = WerTable::new(&COLUMNS);
    table.push("ASR", pl::wer_columns(&records, &pl::asr_picks(&records)))?;
    for spec in &ROWS {
        let scores = layout.scores(spec.scorer, "eval");
        let tuned = spec.tuned.map(|f| layout.tune_dir(spec.scorer).join(f));
        if !scores.is_file() || tuned.as_ref().is_some_and(|t| !t.is_file()) {
            continue;
        }
        let outputs = read_scores(layout, spec.scorer, "eval", &mut m)?;
        let text = match &tuned {
            Some(t) => Some(read_text(t, &mut m)?),
            None => None,
        };
        let picks = row_picks(spec, &records, &outputs, text)?;
        table.push(spec.name, pl::wer_columns(&records, &picks))?;
    }
    let dir = layout.report_dir();
    create_dir(&dir)?;
    let text = table.to_text();
    for (name, body) in [("table.txt", &text), ("table.tsv", &table.to_tsv())] {
        let p = dir.join(name);
        write_file(&p, body)?;
        m.output(&p)?;
    }
    m.finish(&dir)?;
    Ok((table, text))
}
