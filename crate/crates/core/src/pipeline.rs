//! Glue shared by the command-line tool and the end-to-end tests: running a
//! trained model over a split, turning its outputs into decisions and
//! interpolation signals, and the WER report.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::synthetic::IN_DOMAIN;
use crate::corpus::NBestRecord;
use crate::error::{Error, Result};
use crate::interpolate::{DecisionRecord, ScoredRecord, ThresholdChoice, WeightVector};
use crate::metrics::{self, WerAccumulator};
use crate::model::{self, Action, Example, Model, SeqProb, Variant};
use crate::ngram::BackoffModel;
use crate::parallel::par_map;
use crate::tensor::sigmoid;
use crate::tokenizer::Vocabulary;

/// Subword vocabulary budget for the desk-scale corpus.
pub const DESK_VOCAB_BUDGET: usize = 600;

/// Floor applied before taking logs of rescore probabilities.
const MIN_PROB: f64 = 1e-300;

/// Text the subword vocabulary is learned from: references and every
/// hypothesis of the training split.
pub fn tokenizer_text(records: &[NBestRecord]) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    for r in records {
        out.push(r.reference.clone());
        out.extend(r.hypotheses.iter().map(|h| h.words.clone()));
    }
    out
}

/// Reference text for the n-gram model.
pub fn lm_text(records: &[NBestRecord]) -> Vec<Vec<String>> {
    records.iter().map(|r| r.reference.clone()).collect()
}

pub fn examples(records: &[NBestRecord], vocab: &Vocabulary) -> Vec<Example> {
    records.iter().map(|r| Example::from_record(r, vocab)).collect()
}

/// Greedy decoder output in word form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeSummary {
    pub words: Vec<String>,
    pub mean_logp: f64,
    pub total_logp: f64,
}

/// One record's scores from a second-pass model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutputs {
    pub id: String,
    /// Rescore value per hypothesis: the rescore head's score, the
    /// baseline's normalized probability, or the n-gram probability.
    pub scores: Vec<f64>,
    /// Natural log of `scores`, the interpolation signal.
    pub log_scores: Vec<f64>,
    /// Absent for models without a decoder.
    pub decode: Option<DecodeSummary>,
}

fn seq_prob(kind: SeqProb, mean: f64) -> f64 {
    match kind {
        SeqProb::SigmoidMean => sigmoid(mean),
        SeqProb::ExpMean => mean.exp(),
    }
}

/// Runs inference on every record.
pub fn run_model(model: &Model, vocab: &Vocabulary, records: &[NBestRecord]) -> Result<Vec<ModelOutputs>> {
    par_map(records, |_, r| {
        let hyps: Vec<Vec<u32>> = r.hypotheses.iter().map(|h| vocab.encode(&h.words)).collect();
        let inf = model.infer(&hyps)?;
        let scores = match model.config.variant {
            Variant::Tra => {
                inf.scores.ok_or_else(|| Error::Usage("attention variant returned no scores".into()))?.scores
            }
            Variant::Tr => {
                let raw: Vec<f64> = inf.hyp_mean_logps.iter().map(|&m| seq_prob(model.config.seq_prob, m)).collect();
                let z: f64 = raw.iter().sum();
                raw.iter().map(|p| p / z).collect()
            }
        };
        let decode = DecodeSummary {
            words: vocab.decode(&inf.decode.tokens)?,
            mean_logp: inf.decode.mean_logp,
            total_logp: inf.decode.total_logp(),
        };
        Ok(ModelOutputs {
            id: r.query_id.clone(),
            log_scores: scores.iter().map(|s| s.max(MIN_PROB).ln()).collect(),
            scores,
            decode: Some(decode),
        })
    })
    .into_iter()
    .collect()
}

/// Sentence log-probabilities (natural log) under the n-gram model.
pub fn run_ngram(lm: &BackoffModel, records: &[NBestRecord]) -> Vec<ModelOutputs> {
    par_map(records, |_, r| {
        let log_scores: Vec<f64> = r.hypotheses.iter().map(|h| lm.sentence_logprob_ln(&h.words)).collect();
        ModelOutputs {
            id: r.query_id.clone(),
            scores: log_scores.iter().map(|l| l.exp()).collect(),
            log_scores,
            decode: None,
        }
    })
}

fn check_aligned(records: &[NBestRecord], outputs: &[ModelOutputs]) -> Result<()> {
    if records.len() != outputs.len() {
        return Err(Error::Input(format!("{} records but {} score rows", records.len(), outputs.len())));
    }
    for (r, o) in records.iter().zip(outputs) {
        if r.query_id != o.id || r.n() != o.scores.len() {
            return Err(Error::Input(format!("score row {} does not match record {}", o.id, r.query_id)));
        }
    }
    Ok(())
}

fn decode_of(o: &ModelOutputs) -> Result<&DecodeSummary> {
    o.decode.as_ref().ok_or_else(|| Error::Input(format!("score row {} has no decoder output", o.id)))
}

/// Precomputed outcomes for the threshold search.
pub fn decision_records(records: &[NBestRecord], outputs: &[ModelOutputs]) -> Result<Vec<DecisionRecord>> {
    check_aligned(records, outputs)?;
    records
        .iter()
        .zip(outputs)
        .map(|(r, o)| {
            let d = decode_of(o)?;
            let errs = |w: &[String]| metrics::edit_stats(w, &r.reference).errors();
            let best = model::argmax_first(&o.scores).unwrap_or(0);
            Ok(DecisionRecord {
                mean_logp: d.mean_logp,
                n: r.n(),
                ref_len: r.reference.len(),
                asr_errors: errs(&r.hypotheses[0].words),
                rescore_errors: errs(&r.hypotheses[best].words),
                rewrite_errors: errs(&d.words),
            })
        })
        .collect()
}

/// The in-domain subset of `items`, which run parallel to `records`.
pub fn split_in_domain<T: Clone>(records: &[NBestRecord], items: &[T]) -> Vec<T> {
    records.iter().zip(items).filter(|(r, _)| r.domain() == IN_DOMAIN).map(|(_, x)| x.clone()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub rescore: f64,
    pub rewrite: f64,
}

impl Thresholds {
    /// The values reported for the production system.
    pub fn reference() -> Self {
        Self { rescore: -1.0, rewrite: -0.5 }
    }

    pub fn from_choice(c: &ThresholdChoice) -> Self {
        Self { rescore: c.rescore, rewrite: c.rewrite }
    }

    pub fn to_text(&self) -> String {
        format!("rescore={}\nrewrite={}\n", self.rescore, self.rewrite)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut rescore = None;
        let mut rewrite = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("thresholds: expected key=value, got {line:?}")))?;
            let v: f64 = v.trim().parse().map_err(|e| Error::Config(format!("thresholds {k}: {e}")))?;
            match k.trim() {
                "rescore" => rescore = Some(v),
                "rewrite" => rewrite = Some(v),
                other => return Err(Error::Config(format!("thresholds: unknown key {other:?}"))),
            }
        }
        match (rescore, rewrite) {
            (Some(rescore), Some(rewrite)) => Ok(Self { rescore, rewrite }),
            _ => Err(Error::Config("thresholds need rescore and rewrite".into())),
        }
    }
}

/// The ASR 1-best of every record.
pub fn asr_picks(records: &[NBestRecord]) -> Vec<Vec<String>> {
    records.iter().map(|r| r.hypotheses[0].words.clone()).collect()
}

/// Always re-rank by the model's scores.
pub fn rescore_picks(records: &[NBestRecord], outputs: &[ModelOutputs]) -> Result<Vec<Vec<String>>> {
    check_aligned(records, outputs)?;
    Ok(records
        .iter()
        .zip(outputs)
        .map(|(r, o)| r.hypotheses[model::argmax_first(&o.scores).unwrap_or(0)].words.clone())
        .collect())
}

/// Thresholded keep / rescore / rewrite. Pass an infinite rewrite threshold
/// for rescore-only behaviour.
pub fn thresholded_picks(records: &[NBestRecord], outputs: &[ModelOutputs], t: Thresholds) -> Result<Vec<Vec<String>>> {
    check_aligned(records, outputs)?;
    records
        .iter()
        .zip(outputs)
        .map(|(r, o)| {
            let d = decode_of(o)?;
            let action = model::rewrite_decide(d.mean_logp, &o.scores, t.rescore, t.rewrite);
            Ok(match action {
                Action::KeepAsr => r.hypotheses[0].words.clone(),
                Action::Rescore(i) => r.hypotheses[i].words.clone(),
                Action::Rewrite => d.words.clone(),
            })
        })
        .collect()
}

/// Interpolation rows; with `inject_rewrite` the decoded text of every
/// multi-hypothesis record is added as an extra candidate.
pub fn scored_records(
    records: &[NBestRecord],
    outputs: &[ModelOutputs],
    inject_rewrite: bool,
) -> Result<Vec<ScoredRecord>> {
    check_aligned(records, outputs)?;
    records
        .iter()
        .zip(outputs)
        .map(|(r, o)| {
            let mut s = ScoredRecord::from_record(r, &o.log_scores)?;
            if inject_rewrite && r.n() > 1 {
                let d = decode_of(o)?;
                s.inject_rewrite(d.words.clone(), d.total_logp);
            }
            Ok(s)
        })
        .collect()
}

pub fn interpolated_picks(scored: &[ScoredRecord], w: &WeightVector) -> Result<Vec<Vec<String>>> {
    scored.iter().map(|s| Ok(s.candidates[crate::interpolate::select(&s.candidates, w)?].words.clone())).collect()
}

/// Corpus WER of `picks` over the records accepted by `keep`.
pub fn slice_wer(records: &[NBestRecord], picks: &[Vec<String>], keep: impl Fn(&NBestRecord) -> bool) -> f64 {
    let mut acc = WerAccumulator::default();
    for (r, p) in records.iter().zip(picks) {
        if keep(r) {
            acc.add(&metrics::edit_stats(p, &r.reference));
        }
    }
    acc.wer()
}

/// WER on the whole set and on the in-domain slice.
pub fn wer_columns(records: &[NBestRecord], picks: &[Vec<String>]) -> Vec<f64> {
    vec![slice_wer(records, picks, |_| true), slice_wer(records, picks, |r| r.domain() == IN_DOMAIN)]
}

pub const COLUMNS: [&str; 2] = ["all", "music"];

/// Rows of WER cells; the first row is the baseline that relative changes
/// are measured against.
#[derive(Debug, Clone, PartialEq)]
pub struct WerTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl WerTable {
    pub fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, name: &str, cells: Vec<f64>) -> Result<()> {
        if cells.len() != self.columns.len() {
            return Err(Error::Usage(format!(
                "row {name} has {} cells for {} columns",
                cells.len(),
                self.columns.len()
            )));
        }
        self.rows.push((name.to_owned(), cells));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.rows.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_slice())
    }

    /// `(baseline - method) / baseline`; zero when the baseline is zero.
    pub fn relative_change(baseline: f64, method: f64) -> f64 {
        if baseline == 0.0 {
            0.0
        } else {
            (baseline - method) / baseline
        }
    }

    fn base(&self, col: usize) -> f64 {
        self.rows.first().map_or(0.0, |(_, c)| c[col])
    }

    /// Aligned text: WER in percent with the relative change in brackets.
    pub fn to_text(&self) -> String {
        let name_w = self.rows.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
        let cell = |v: f64, rel: f64| format!("{:6.2} ({:+6.2}%)", 100.0 * v, 100.0 * rel);
        let cell_w = cell(0.0, 0.0).len();
        let mut s = String::new();
        let _ = write!(s, "{:<name_w$}", "method");
        for c in &self.columns {
            let _ = write!(s, "  {c:>cell_w$}");
        }
        s.push('\n');
        for (name, cells) in &self.rows {
            let _ = write!(s, "{name:<name_w$}");
            for (j, &v) in cells.iter().enumerate() {
                let _ = write!(s, "  {:>cell_w$}", cell(v, Self::relative_change(self.base(j), v)));
            }
            s.push('\n');
        }
        s
    }

    /// Tab-separated copy with raw fractions.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("method");
        for c in &self.columns {
            let _ = write!(s, "\t{c}_wer\t{c}_rel");
        }
        s.push('\n');
        for (name, cells) in &self.rows {
            s.push_str(name);
            for (j, &v) in cells.iter().enumerate() {
                let _ = write!(s, "\t{v:.6}\t{:.6}", Self::relative_change(self.base(j), v));
            }
            s.push('\n');
        }
        s
    }
}

pub fn write_outputs(outputs: &[ModelOutputs], path: &Path) -> Result<()> {
    let mut s = String::new();
    for o in outputs {
        s.push_str(&serde_json::to_string(o).expect("plain data serializes"));
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_outputs(path: &Path) -> Result<Vec<ModelOutputs>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Hypothesis;
    use crate::metrics::words;

    fn record(id: &str, reference: &str, hyps: &[&str]) -> NBestRecord {
        NBestRecord {
            query_id: id.into(),
            reference: words(reference),
            hypotheses: hyps
                .iter()
                .enumerate()
                .map(|(i, h)| Hypothesis { words: words(h), acoustic_logp: -(i as f64), firstpass_lm_logp: -5.0 })
                .collect(),
        }
    }

    fn outputs(id: &str, scores: Vec<f64>, rewrite: &str, mean: f64) -> ModelOutputs {
        ModelOutputs {
            id: id.into(),
            log_scores: scores.iter().map(|s: &f64| s.ln()).collect(),
            scores,
            decode: Some(DecodeSummary { words: words(rewrite), mean_logp: mean, total_logp: mean * 3.0 }),
        }
    }

    #[test]
    fn perfect_asr_gives_zero_wer_row() {
        let recs = vec![record("music-0", "play a song", &["play a song", "play the song"])];
        let cols = wer_columns(&recs, &asr_picks(&recs));
        assert_eq!(cols[0], 0.0);
        let mut t = WerTable::new(&COLUMNS);
        t.push("ASR", cols).unwrap();
        assert!(t.to_text().contains("0.00"));
    }

    #[test]
    fn relative_change_convention() {
        assert!((WerTable::relative_change(0.10, 0.09) - 0.1).abs() < 1e-12);
        assert!(WerTable::relative_change(0.10, 0.11) < 0.0);
        let mut t = WerTable::new(&COLUMNS);
        t.push("ASR", vec![0.2, 0.1]).unwrap();
        t.push("X", vec![0.1, 0.1]).unwrap();
        let tsv = t.to_tsv();
        assert!(tsv.lines().nth(2).unwrap().starts_with("X\t0.100000\t0.500000\t0.100000\t0.000000"));
        assert!(t.push("bad", vec![0.1]).is_err());
    }

    #[test]
    fn threshold_branches_pick_expected_words() {
        let recs = vec![
            record("music-0", "play a song", &["play the song", "play a song"]),
            record("music-1", "play b song", &["play bee song", "play be song"]),
            record("general-2", "call home", &["call home"]),
        ];
        let outs = vec![
            outputs("music-0", vec![0.2, 0.8], "play a song", -0.7),
            outputs("music-1", vec![0.6, 0.4], "play b song", -0.2),
            outputs("general-2", vec![0.9], "call phone", -0.1),
        ];
        let picks = thresholded_picks(&recs, &outs, Thresholds::reference()).unwrap();
        assert_eq!(picks[0], words("play a song"));
        assert_eq!(picks[1], words("play b song"));
        // single hypothesis: no rewrite
        assert_eq!(picks[2], words("call home"));
        let d = decision_records(&recs, &outs).unwrap();
        assert_eq!((d[0].asr_errors, d[0].rescore_errors), (1, 0));
        assert_eq!(d[2].rewrite_errors, 1);
        let scored = scored_records(&recs, &outs, true).unwrap();
        assert_eq!(scored[0].candidates.len(), 2);
        assert_eq!(scored[1].candidates.len(), 3);
        assert_eq!(scored[2].candidates.len(), 1);
    }

    #[test]
    fn misaligned_scores_rejected() {
        let recs = vec![record("music-0", "a", &["a", "b"])];
        let outs = vec![outputs("music-9", vec![0.5, 0.5], "a", -0.1)];
        assert!(matches!(rescore_picks(&recs, &outs), Err(Error::Input(_))));
    }

    #[test]
    fn outputs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("o.jsonl");
        let o = vec![outputs("music-0", vec![0.25, 0.75], "x y", -0.4)];
        write_outputs(&o, &p).unwrap();
        assert_eq!(read_outputs(&p).unwrap(), o);
        let t = Thresholds::reference();
        assert_eq!(Thresholds::from_text(&t.to_text()).unwrap(), t);
    }
}
