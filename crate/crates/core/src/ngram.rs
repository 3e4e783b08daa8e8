//! Katz back-off n-gram language model with Good-Turing discounting,
//! count cutoffs and ARPA serialization.
//!
//! Probabilities are kept as log10 internally, matching ARPA. The natural-log
//! helpers are used where scores meet the other interpolation signals.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

/// log10 value written for impossible events.
pub const LOG10_ZERO: f64 = -99.0;

type Ngram = Vec<String>;

/// Estimation knobs. Defaults follow the classical 4-gram recipe: 3- and
/// 4-grams seen once are dropped, and 2- to 4-grams with counts up to 7 are
/// Good-Turing discounted.
#[derive(Debug, Clone, PartialEq)]
pub struct KatzConfig {
    pub order: usize,
    /// Minimum count to keep an n-gram, indexed by order - 1.
    pub min_counts: Vec<u64>,
    /// Counts at or below this are discounted.
    pub gt_max_count: u64,
    /// Lowest order that receives discounting.
    pub discount_from_order: usize,
    /// Pseudo-count reserving unigram mass for `<unk>`.
    pub unk_pseudo_count: f64,
}

impl KatzConfig {
    pub fn with_order(order: usize) -> Self {
        let min_counts = (1..=order).map(|n| if n >= 3 { 2 } else { 1 }).collect();
        Self { order, min_counts, gt_max_count: 7, discount_from_order: 2, unk_pseudo_count: 1.0 }
    }

    /// Maximum-likelihood estimation with no cutoffs and no discounting.
    pub fn unsmoothed(order: usize) -> Self {
        Self {
            order,
            min_counts: vec![1; order],
            gt_max_count: 0,
            discount_from_order: order + 1,
            unk_pseudo_count: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.order == 0 {
            return Err(Error::Config("n-gram order must be at least 1".into()));
        }
        if self.min_counts.len() != self.order {
            return Err(Error::Config("min_counts needs one entry per order".into()));
        }
        if !(self.unk_pseudo_count > 0.0) {
            return Err(Error::Config("unk_pseudo_count must be positive".into()));
        }
        Ok(())
    }
}

impl Default for KatzConfig {
    fn default() -> Self {
        Self::with_order(4)
    }
}

/// Raw n-gram statistics of a boundary-padded corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CountTable {
    pub order: usize,
    /// `counts[n - 1]` holds n-gram counts.
    pub counts: Vec<BTreeMap<Ngram, u64>>,
    /// `context_totals[n - 1][h]` is the number of n-grams with history `h`,
    /// taken before any cutoff.
    pub context_totals: Vec<BTreeMap<Ngram, u64>>,
    /// `count_of_counts[n - 1][r]` is the number of distinct n-grams seen
    /// exactly `r` times, before cutoffs.
    pub count_of_counts: Vec<BTreeMap<u64, u64>>,
}

fn pad(sentence: &[String]) -> Vec<String> {
    let mut v = Vec::with_capacity(sentence.len() + 2);
    v.push(BOS.to_owned());
    v.extend(sentence.iter().cloned());
    v.push(EOS.to_owned());
    v
}

/// Counts orders `1..=order` over `<s> w1 .. wk </s>` windows.
pub fn count(corpus: &[Vec<String>], order: usize) -> Result<CountTable> {
    if corpus.is_empty() {
        return Err(Error::Input("cannot count an empty corpus".into()));
    }
    if order == 0 {
        return Err(Error::Config("n-gram order must be at least 1".into()));
    }
    let mut counts = vec![BTreeMap::new(); order];
    let mut context_totals = vec![BTreeMap::new(); order];
    for sentence in corpus {
        let padded = pad(sentence);
        for n in 1..=order {
            for win in padded.windows(n) {
                // No n-gram predicts <s>; only the unigram keeps its count.
                if n > 1 && win[n - 1] == BOS {
                    continue;
                }
                *counts[n - 1].entry(win.to_vec()).or_insert(0u64) += 1;
                if n > 1 {
                    *context_totals[n - 1].entry(win[..n - 1].to_vec()).or_insert(0u64) += 1;
                }
            }
        }
    }
    let count_of_counts = counts
        .iter()
        .map(|m| {
            let mut coc = BTreeMap::new();
            for (g, &c) in m {
                if g.last().map(String::as_str) != Some(BOS) {
                    *coc.entry(c).or_insert(0u64) += 1;
                }
            }
            coc
        })
        .collect();
    Ok(CountTable { order, counts, context_totals, count_of_counts })
}

/// Drops n-grams whose count is below the per-order minimum.
pub fn apply_cutoffs(table: &CountTable, min_counts: &[u64]) -> CountTable {
    let mut out = table.clone();
    for (n, m) in out.counts.iter_mut().enumerate() {
        let min = min_counts.get(n).copied().unwrap_or(1);
        m.retain(|_, c| *c >= min);
    }
    out
}

/// Good-Turing adjusted count `r* = (r + 1) N_{r+1} / N_r`.
pub fn gt_adjusted_count(r: u64, count_of_counts: &BTreeMap<u64, u64>) -> Option<f64> {
    let nr = *count_of_counts.get(&r)? as f64;
    let nr1 = count_of_counts.get(&(r + 1)).copied().unwrap_or(0) as f64;
    if nr == 0.0 {
        return None;
    }
    Some((r as f64 + 1.0) * nr1 / nr)
}

/// Per-order discount ratios `d_r`, `r = 1..=max_count`. Counts above the
/// range (and orders below `discount_from_order`) use `d_r = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discounts {
    pub max_count: u64,
    /// `ratios[n - 1][r - 1]`.
    pub ratios: Vec<Vec<f64>>,
}

impl Discounts {
    pub fn none(order: usize) -> Self {
        Self { max_count: 0, ratios: vec![Vec::new(); order] }
    }

    pub fn ratio(&self, order: usize, r: u64) -> f64 {
        if r == 0 || r > self.max_count {
            return 1.0;
        }
        self.ratios.get(order - 1).and_then(|v| v.get(r as usize - 1)).copied().unwrap_or(1.0)
    }
}

fn katz_ratios(nr: &dyn Fn(u64) -> f64, k: u64) -> Option<Vec<f64>> {
    let n1 = nr(1);
    if n1 <= 0.0 {
        return None;
    }
    let common = (k as f64 + 1.0) * nr(k + 1) / n1;
    if !(common < 1.0) {
        return None;
    }
    let mut out = Vec::with_capacity(k as usize);
    for r in 1..=k {
        let n = nr(r);
        if n <= 0.0 {
            return None;
        }
        let r_star = (r as f64 + 1.0) * nr(r + 1) / n;
        let d = (r_star / r as f64 - common) / (1.0 - common);
        if !(d > 0.0 && d <= 1.0) {
            return None;
        }
        out.push(d);
    }
    Some(out)
}

/// Log-log least-squares fit of averaged counts-of-counts (simple
/// Good-Turing smoothing), used when raw `N_r` are sparse.
fn smoothed_counts(coc: &BTreeMap<u64, u64>) -> Option<impl Fn(u64) -> f64> {
    let pts: Vec<(u64, u64)> = coc.iter().filter(|(_, &n)| n > 0).map(|(&r, &n)| (r, n)).collect();
    if pts.len() < 2 {
        return None;
    }
    let mut xs = Vec::with_capacity(pts.len());
    let mut ys = Vec::with_capacity(pts.len());
    for (j, &(r, n)) in pts.iter().enumerate() {
        let q = if j == 0 { 0 } else { pts[j - 1].0 };
        let t = if j + 1 < pts.len() { pts[j + 1].0 } else { 2 * r - q };
        let z = n as f64 / (0.5 * (t - q) as f64);
        xs.push((r as f64).ln());
        ys.push(z.ln());
    }
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / sxx;
    let intercept = my - slope * mx;
    Some(move |r: u64| (intercept + slope * (r as f64).ln()).exp())
}

/// Computes Katz-normalized Good-Turing ratios for every discounted order.
///
/// Falls back to smoothed counts-of-counts when raw statistics are sparse or
/// produce ratios outside `(0, 1]`, and finally to an absolute discount
/// `D = N_1 / (N_1 + 2 N_2)`.
pub fn good_turing_discount(table: &CountTable, max_count: u64, discount_from_order: usize) -> Discounts {
    let mut ratios = vec![Vec::new(); table.order];
    for n in discount_from_order.max(2)..=table.order {
        let coc = &table.count_of_counts[n - 1];
        let raw = |r: u64| coc.get(&r).copied().unwrap_or(0) as f64;
        let chosen = katz_ratios(&raw, max_count)
            .or_else(|| smoothed_counts(coc).and_then(|f| katz_ratios(&f, max_count)))
            .unwrap_or_else(|| {
                let n1 = raw(1);
                let n2 = raw(2);
                let d = if n1 > 0.0 { n1 / (n1 + 2.0 * n2) } else { 0.5 };
                let d = d.clamp(0.05, 0.95);
                (1..=max_count).map(|r| (r as f64 - d) / r as f64).collect()
            });
        ratios[n - 1] = chosen;
    }
    Discounts { max_count, ratios }
}

/// A back-off model: per-order entries of (log10 prob, log10 back-off).
#[derive(Debug, Clone, PartialEq)]
pub struct BackoffModel {
    order: usize,
    /// `entries[n - 1][ngram] = (log10 p, log10 bow)`.
    entries: Vec<BTreeMap<Ngram, (f64, f64)>>,
    vocab: BTreeSet<String>,
}

fn log10_or_zero(x: f64) -> f64 {
    if x > 0.0 {
        x.log10().max(LOG10_ZERO)
    } else {
        LOG10_ZERO
    }
}

/// Katz estimation from a (cut) count table and discount ratios.
pub fn estimate(table: &CountTable, discounts: &Discounts, unk_pseudo_count: f64) -> Result<BackoffModel> {
    let order = table.order;
    let mut model = BackoffModel { order, entries: vec![BTreeMap::new(); order], vocab: BTreeSet::new() };

    let unigrams = &table.counts[0];
    let total: f64 =
        unigrams.iter().filter(|(g, _)| g[0] != BOS).map(|(_, &c)| c as f64).sum::<f64>() + unk_pseudo_count;
    for (g, &c) in unigrams {
        if g[0] == BOS {
            model.entries[0].insert(g.clone(), (LOG10_ZERO, 0.0));
            continue;
        }
        let d = discounts.ratio(1, c);
        model.entries[0].insert(g.clone(), (log10_or_zero(d * c as f64 / total), 0.0));
        model.vocab.insert(g[0].clone());
    }
    if !model.vocab.contains(UNK) {
        model.entries[0].insert(vec![UNK.to_owned()], (log10_or_zero(unk_pseudo_count / total), 0.0));
        model.vocab.insert(UNK.to_owned());
    }
    model.entries[0].entry(vec![BOS.to_owned()]).or_insert((LOG10_ZERO, 0.0));

    for n in 2..=order {
        let totals = &table.context_totals[n - 1];
        let mut level = BTreeMap::new();
        for (g, &c) in &table.counts[n - 1] {
            let h = &g[..n - 1];
            let ctx = *totals.get(h).ok_or_else(|| Error::Input(format!("missing context total for {:?}", h)))? as f64;
            let p = discounts.ratio(n, c) * c as f64 / ctx;
            level.insert(g.clone(), (log10_or_zero(p), 0.0));
        }
        model.entries[n - 1] = level;

        // Back-off weights for every (n-1)-gram acting as a context.
        let mut seen: BTreeMap<Ngram, (f64, f64)> = BTreeMap::new();
        for (g, &(lp, _)) in &model.entries[n - 1] {
            let h = g[..n - 1].to_vec();
            let lower = model.prob10(&g[1..n - 1], &g[n - 1]);
            let e = seen.entry(h).or_insert((0.0, 0.0));
            e.0 += 10f64.powf(lp);
            e.1 += 10f64.powf(lower);
        }
        let contexts: Vec<Ngram> = model.entries[n - 2].keys().cloned().collect();
        for h in contexts {
            let bow = match seen.get(&h) {
                Some(&(num, den)) => {
                    let left = 1.0 - num;
                    let right = 1.0 - den;
                    if right <= 1e-15 {
                        LOG10_ZERO
                    } else {
                        log10_or_zero(left.max(0.0) / right)
                    }
                }
                None => 0.0,
            };
            model.entries[n - 2].get_mut(&h).expect("context present").1 = bow;
        }
    }
    Ok(model)
}

impl BackoffModel {
    /// Counts, cuts, discounts and estimates in one go.
    pub fn train(corpus: &[Vec<String>], cfg: &KatzConfig) -> Result<Self> {
        cfg.validate()?;
        let table = count(corpus, cfg.order)?;
        let discounts = good_turing_discount(&table, cfg.gt_max_count, cfg.discount_from_order);
        let cut = apply_cutoffs(&table, &cfg.min_counts);
        estimate(&cut, &discounts, cfg.unk_pseudo_count)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Predictable words, including `</s>` and `<unk>`.
    pub fn vocab(&self) -> &BTreeSet<String> {
        &self.vocab
    }

    pub fn entries(&self, n: usize) -> &BTreeMap<Vec<String>, (f64, f64)> {
        &self.entries[n - 1]
    }

    fn map_word<'a>(&self, w: &'a str) -> &'a str {
        if w == BOS || self.vocab.contains(w) {
            w
        } else {
            UNK
        }
    }

    /// log10 p(word | history), backing off as needed. Only the last
    /// `order - 1` history words are used.
    pub fn prob10(&self, history: &[String], word: &str) -> f64 {
        let word = self.map_word(word);
        let start = history.len().saturating_sub(self.order - 1);
        let hist: Vec<&str> = history[start..].iter().map(|w| self.map_word(w)).collect();
        self.prob10_mapped(&hist, word)
    }

    fn prob10_mapped(&self, hist: &[&str], word: &str) -> f64 {
        let n = hist.len() + 1;
        let key: Ngram = hist.iter().map(|s| s.to_string()).chain(std::iter::once(word.to_owned())).collect();
        if let Some(&(lp, _)) = self.entries[n - 1].get(&key) {
            return lp;
        }
        if hist.is_empty() {
            return self.entries[0].get(&vec![UNK.to_owned()]).map_or(LOG10_ZERO, |e| e.0);
        }
        let h: Ngram = hist.iter().map(|s| s.to_string()).collect();
        let bow = self.entries[n - 2].get(&h).map_or(0.0, |e| e.1);
        bow + self.prob10_mapped(&hist[1..], word)
    }

    /// log10 probability of a sentence including the closing `</s>`.
    pub fn sentence_logprob10(&self, words: &[String]) -> f64 {
        let padded = pad(words);
        (1..padded.len()).map(|i| self.prob10(&padded[..i], &padded[i])).sum()
    }

    /// Natural-log sentence probability.
    pub fn sentence_logprob_ln(&self, words: &[String]) -> f64 {
        self.sentence_logprob10(words) * std::f64::consts::LN_10
    }

    pub fn to_arpa(&self) -> String {
        let mut s = String::from("\n\\data\\\n");
        for n in 1..=self.order {
            let _ = writeln!(s, "ngram {}={}", n, self.entries[n - 1].len());
        }
        for n in 1..=self.order {
            let _ = write!(s, "\n\\{}-grams:\n", n);
            for (g, &(lp, bow)) in &self.entries[n - 1] {
                let _ = write!(s, "{}\t{}", lp, g.join(" "));
                if n < self.order {
                    let _ = write!(s, "\t{}", bow);
                }
                s.push('\n');
            }
        }
        s.push_str("\n\\end\\\n");
        s
    }

    pub fn from_arpa(text: &str, source: &str) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse { path: source.to_owned(), line, msg };
        let mut declared: Vec<usize> = Vec::new();
        let mut entries: Vec<BTreeMap<Ngram, (f64, f64)>> = Vec::new();
        let mut section: Option<usize> = None;
        let mut in_data = false;
        let mut ended = false;

        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if ended {
                return Err(perr(lineno, "content after \\end\\".into()));
            }
            if line == "\\data\\" {
                in_data = true;
                section = None;
                continue;
            }
            if line == "\\end\\" {
                ended = true;
                continue;
            }
            if let Some(rest) = line.strip_prefix('\\').and_then(|l| l.strip_suffix("-grams:")) {
                let n: usize = rest.parse().map_err(|_| perr(lineno, format!("bad section header `{line}`")))?;
                if n == 0 || n > declared.len() {
                    return Err(perr(lineno, format!("section {n}-grams not declared in \\data\\")));
                }
                in_data = false;
                section = Some(n);
                continue;
            }
            if in_data {
                let spec = line
                    .strip_prefix("ngram ")
                    .ok_or_else(|| perr(lineno, format!("expected `ngram N=count` in \\data\\, got `{line}`")))?;
                let (n, c) = spec.split_once('=').ok_or_else(|| perr(lineno, format!("bad count line `{line}`")))?;
                let n: usize = n.trim().parse().map_err(|_| perr(lineno, format!("bad order in `{line}`")))?;
                let c: usize = c.trim().parse().map_err(|_| perr(lineno, format!("bad count in `{line}`")))?;
                if n != declared.len() + 1 {
                    return Err(perr(lineno, format!("orders out of sequence at `{line}`")));
                }
                declared.push(c);
                entries.push(BTreeMap::new());
                continue;
            }
            let n = section.ok_or_else(|| perr(lineno, format!("entry outside any section: `{line}`")))?;
            let fields: Vec<&str> = line.split('\t').collect();
            let (lp, words, bow) = match fields.as_slice() {
                [lp, words] => (*lp, *words, None),
                [lp, words, bow] => (*lp, *words, Some(*bow)),
                _ => {
                    // Tolerate space-separated layouts: prob, n words, optional bow.
                    let toks: Vec<&str> = line.split_whitespace().collect();
                    if toks.len() == n + 1 {
                        (toks[0], "", None)
                    } else if toks.len() == n + 2 {
                        (toks[0], "", Some(toks[n + 1]))
                    } else {
                        return Err(perr(lineno, format!("{n}-grams section: malformed entry `{line}`")));
                    }
                }
            };
            let gram: Ngram = if words.is_empty() {
                line.split_whitespace().skip(1).take(n).map(str::to_owned).collect()
            } else {
                words.split(' ').map(str::to_owned).collect()
            };
            if gram.len() != n {
                return Err(perr(lineno, format!("{n}-grams section: entry has {} words", gram.len())));
            }
            let lp: f64 = lp.parse().map_err(|_| perr(lineno, format!("{n}-grams section: bad probability `{lp}`")))?;
            let bow: f64 = match bow {
                Some(b) => b.parse().map_err(|_| perr(lineno, format!("{n}-grams section: bad back-off `{b}`")))?,
                None => 0.0,
            };
            entries[n - 1].insert(gram, (lp, bow));
        }
        if !ended {
            return Err(perr(text.lines().count(), "missing \\end\\".into()));
        }
        if declared.is_empty() {
            return Err(perr(1, "missing \\data\\ header".into()));
        }
        for (n, (&want, got)) in declared.iter().zip(&entries).enumerate() {
            if want != got.len() {
                return Err(perr(0, format!("\\data\\ declares {want} {}-grams but body has {}", n + 1, got.len())));
            }
        }
        let mut vocab: BTreeSet<String> = entries[0].keys().filter(|g| g[0] != BOS).map(|g| g[0].clone()).collect();
        if !vocab.contains(UNK) {
            entries[0].insert(vec![UNK.to_owned()], (LOG10_ZERO, 0.0));
            vocab.insert(UNK.to_owned());
        }
        Ok(BackoffModel { order: declared.len(), entries, vocab })
    }
}

pub fn export_arpa(model: &BackoffModel, path: &Path) -> Result<()> {
    fs::write(path, model.to_arpa()).map_err(|e| Error::io(path, e))
}

pub fn import_arpa(path: &Path) -> Result<BackoffModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    BackoffModel::from_arpa(&text, &path.display().to_string())
}
