//! Synthetic queries and a noisy word channel that turns them into N-best
//! lists with pseudo acoustic scores.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ngram::BackoffModel;

pub mod synthetic;

/// Slot fillers: slot name to the list of possible word sequences.
pub type Catalog = BTreeMap<String, Vec<Vec<String>>>;

/// A query pattern such as `play {song} by {artist}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryTemplate {
    pattern: String,
    slot_names: Vec<String>,
}

impl QueryTemplate {
    /// Parses `{slot}` placeholders out of `pattern`.
    pub fn new(pattern: &str) -> Result<Self> {
        if pattern.trim().is_empty() {
            return Err(Error::Config("empty query template".into()));
        }
        let mut slot_names = Vec::new();
        for tok in pattern.split_whitespace() {
            if let Some(inner) = tok.strip_prefix('{') {
                let name = inner
                    .strip_suffix('}')
                    .filter(|n| !n.is_empty() && !n.contains(['{', '}']))
                    .ok_or_else(|| Error::Config(format!("malformed slot `{tok}` in `{pattern}`")))?;
                if !slot_names.iter().any(|s| s == name) {
                    slot_names.push(name.to_owned());
                }
            } else if tok.contains(['{', '}']) {
                return Err(Error::Config(format!("malformed slot `{tok}` in `{pattern}`")));
            }
        }
        Ok(Self { pattern: pattern.to_owned(), slot_names })
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn slot_names(&self) -> &[String] {
        &self.slot_names
    }

    fn instantiate<R: Rng>(&self, catalog: &Catalog, rng: &mut R) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for tok in self.pattern.split_whitespace() {
            match tok.strip_prefix('{').and_then(|t| t.strip_suffix('}')) {
                Some(slot) => {
                    let fillers = catalog
                        .get(slot)
                        .filter(|f| !f.is_empty())
                        .ok_or_else(|| Error::Config(format!("catalog has no entries for slot `{slot}`")))?;
                    let pick = &fillers[rng.gen_range(0..fillers.len())];
                    out.extend(pick.iter().cloned());
                }
                None => out.push(tok.to_lowercase()),
            }
        }
        Ok(out)
    }
}

/// Draws `count` queries, each from a uniformly chosen template.
pub fn generate_queries(
    templates: &[QueryTemplate],
    catalog: &Catalog,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<String>>> {
    for t in templates {
        for slot in &t.slot_names {
            if catalog.get(slot).is_none_or(Vec::is_empty) {
                return Err(Error::Config(format!("catalog has no entries for slot `{slot}`")));
            }
        }
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    if templates.is_empty() {
        return Err(Error::Config("no query templates".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let t = &templates[rng.gen_range(0..templates.len())];
            t.instantiate(catalog, &mut rng)
        })
        .collect()
}

/// Independent per-word substitution/deletion and per-gap insertion channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorChannelConfig {
    pub p_sub: f64,
    pub p_del: f64,
    pub p_ins: f64,
    /// Acoustically confusable alternatives per word.
    pub confusion_map: BTreeMap<String, Vec<String>>,
    /// Words used for insertions and for substitutions of unmapped words.
    pub vocabulary: Vec<String>,
    pub nbest_size_max: usize,
    pub noise_scale: f64,
    pub seed: u64,
}

impl ErrorChannelConfig {
    /// A channel that never errs.
    pub fn noiseless(nbest_size_max: usize) -> Self {
        Self {
            p_sub: 0.0,
            p_del: 0.0,
            p_ins: 0.0,
            confusion_map: BTreeMap::new(),
            vocabulary: Vec::new(),
            nbest_size_max,
            noise_scale: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_sub", self.p_sub), ("p_del", self.p_del), ("p_ins", self.p_ins)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if self.p_sub + self.p_del > 1.0 {
            return Err(Error::Config("p_sub + p_del exceeds 1".into()));
        }
        if self.nbest_size_max == 0 || self.nbest_size_max > 10 {
            return Err(Error::Config(format!("nbest_size_max = {} outside [1, 10]", self.nbest_size_max)));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config("noise_scale must be finite and non-negative".into()));
        }
        if self.p_ins > 0.0 && self.vocabulary.is_empty() {
            return Err(Error::Config("insertions need a non-empty vocabulary".into()));
        }
        Ok(())
    }

    /// Expected errors per reference word for a single draw of a sentence
    /// with `len` words (insertions happen in `len + 1` gaps).
    pub fn expected_error_rate(&self, len: usize) -> f64 {
        self.p_sub + self.p_del + self.p_ins * (len as f64 + 1.0) / len as f64
    }
}

/// One ASR hypothesis with its decoding scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub words: Vec<String>,
    pub acoustic_logp: f64,
    pub firstpass_lm_logp: f64,
}

/// A query's reference and its ranked N-best list.
#[derive(Debug, Clone, PartialEq)]
pub struct NBestRecord {
    pub query_id: String,
    pub reference: Vec<String>,
    pub hypotheses: Vec<Hypothesis>,
}

impl NBestRecord {
    pub fn n(&self) -> usize {
        self.hypotheses.len()
    }

    /// Domain tag, taken from the id prefix before the first `-`.
    pub fn domain(&self) -> &str {
        self.query_id.split('-').next().unwrap_or("")
    }
}

struct Draw {
    words: Vec<String>,
    log_lik: f64,
}

fn sample_channel<R: Rng>(reference: &[String], cfg: &ErrorChannelConfig, rng: &mut R) -> Draw {
    let p_keep = 1.0 - cfg.p_sub - cfg.p_del;
    let mut words = Vec::with_capacity(reference.len() + 2);
    let mut log_lik = 0.0;
    let gap = |words: &mut Vec<String>, log_lik: &mut f64, rng: &mut R| {
        if cfg.p_ins > 0.0 && rng.gen::<f64>() < cfg.p_ins {
            let w = &cfg.vocabulary[rng.gen_range(0..cfg.vocabulary.len())];
            words.push(w.clone());
            *log_lik += (cfg.p_ins / cfg.vocabulary.len() as f64).ln();
        } else {
            *log_lik += (1.0 - cfg.p_ins).ln();
        }
    };
    for word in reference {
        gap(&mut words, &mut log_lik, rng);
        let u: f64 = rng.gen();
        if u < cfg.p_sub {
            let mapped = cfg.confusion_map.get(word).filter(|c| !c.is_empty());
            match mapped {
                Some(alts) => {
                    words.push(alts[rng.gen_range(0..alts.len())].clone());
                    log_lik += (cfg.p_sub / alts.len() as f64).ln();
                }
                None => {
                    let others: Vec<&String> = cfg.vocabulary.iter().filter(|v| *v != word).collect();
                    if let Some(alt) = others.choose(rng) {
                        words.push((*alt).clone());
                        log_lik += (cfg.p_sub / others.len() as f64).ln();
                    } else {
                        words.push(word.clone());
                        log_lik += p_keep.ln();
                    }
                }
            }
        } else if u < cfg.p_sub + cfg.p_del {
            log_lik += cfg.p_del.ln();
        } else {
            words.push(word.clone());
            log_lik += p_keep.ln();
        }
    }
    gap(&mut words, &mut log_lik, rng);
    Draw { words, log_lik }
}

/// Samples `n` corrupted copies of `reference`, merges duplicates (keeping
/// the best score) and returns them ranked by acoustic score. Scores are
/// shifted so the top hypothesis has `acoustic_logp == 0`.
pub fn corrupt(
    query_id: &str,
    reference: &[String],
    cfg: &ErrorChannelConfig,
    n: usize,
    seed: u64,
    firstpass_lm: Option<&BackoffModel>,
) -> Result<NBestRecord> {
    if reference.is_empty() {
        return Err(Error::Input(format!("empty reference for {query_id}")));
    }
    if n == 0 || n > cfg.nbest_size_max {
        return Err(Error::Input(format!("n = {n} outside [1, {}]", cfg.nbest_size_max)));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, cfg.noise_scale.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;

    let mut merged: Vec<Draw> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut d = sample_channel(reference, cfg, &mut rng);
        if cfg.noise_scale > 0.0 {
            d.log_lik += jitter.sample(&mut rng);
        }
        match merged.iter_mut().find(|m| m.words == d.words) {
            Some(m) => m.log_lik = m.log_lik.max(d.log_lik),
            None => merged.push(d),
        }
    }
    // Stable sort keeps draw order on ties.
    merged.sort_by(|a, b| b.log_lik.total_cmp(&a.log_lik));
    let top = merged[0].log_lik;
    let hypotheses = merged
        .into_iter()
        .map(|d| {
            let lm = firstpass_lm.map_or(0.0, |m| m.sentence_logprob_ln(&d.words));
            Hypothesis { words: d.words, acoustic_logp: d.log_lik - top, firstpass_lm_logp: lm }
        })
        .collect();
    Ok(NBestRecord { query_id: query_id.to_owned(), reference: reference.to_vec(), hypotheses })
}

#[derive(Serialize, Deserialize)]
struct JsonHyp {
    text: String,
    am: f64,
    lm: f64,
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    id: String,
    #[serde(rename = "ref")]
    reference: String,
    nbest: Vec<JsonHyp>,
}

impl From<&NBestRecord> for JsonRecord {
    fn from(r: &NBestRecord) -> Self {
        JsonRecord {
            id: r.query_id.clone(),
            reference: r.reference.join(" "),
            nbest: r
                .hypotheses
                .iter()
                .map(|h| JsonHyp { text: h.words.join(" "), am: h.acoustic_logp, lm: h.firstpass_lm_logp })
                .collect(),
        }
    }
}

impl From<JsonRecord> for NBestRecord {
    fn from(r: JsonRecord) -> Self {
        NBestRecord {
            query_id: r.id,
            reference: crate::metrics::words(&r.reference),
            hypotheses: r
                .nbest
                .into_iter()
                .map(|h| Hypothesis {
                    words: crate::metrics::words(&h.text),
                    acoustic_logp: h.am,
                    firstpass_lm_logp: h.lm,
                })
                .collect(),
        }
    }
}

/// Serializes one record as a single JSON line (no trailing newline).
pub fn record_to_json(record: &NBestRecord) -> String {
    serde_json::to_string(&JsonRecord::from(record)).expect("record serialization is infallible")
}

pub fn record_from_json(line: &str) -> std::result::Result<NBestRecord, String> {
    let r: JsonRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if r.nbest.is_empty() {
        return Err("record has no hypotheses".into());
    }
    Ok(r.into())
}

pub fn emit_jsonl(records: &[NBestRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        writeln!(out, "{}", record_to_json(r)).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<NBestRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = record_from_json(&line).map_err(|msg| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Every distinct word appearing in references or hypotheses.
pub fn word_inventory(records: &[NBestRecord]) -> BTreeSet<String> {
    let mut set = BTreeSet::new();
    for r in records {
        set.extend(r.reference.iter().cloned());
        for h in &r.hypotheses {
            set.extend(h.words.iter().cloned());
        }
    }
    set
}
