//! Byte-pair-encoding subword vocabulary.
//!
//! Words are split into characters with a `▁` symbol in front of each word,
//! so decoding can recover word boundaries. Merges are learned greedily by
//! pair frequency with a lexicographic tie-break.
//!
//! Vocabulary file layout (UTF-8, `\n` line endings):
//!
//! ```text
//! #bpe-vocab v1
//! #merges <count>
//! <left> <right>        one line per merge, in merge order
//! #tokens <count>
//! <token>\t<id>         one line per token, ids dense from 0
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const WORD_MARK: &str = "▁";

const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

fn split_word(word: &str) -> Vec<String> {
    std::iter::once(WORD_MARK.to_owned()).chain(word.chars().map(|c| c.to_string())).collect()
}

fn merge_pair(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == left && symbols[i + 1] == right {
            let joined = format!("{left}{right}");
            symbols[i] = joined;
            symbols.remove(i + 1);
        }
        i += 1;
    }
}

/// Learns merges over `corpus` until the vocabulary reaches `vocab_budget`
/// (reserved ids included) or no pair occurs at least twice.
pub fn train_bpe(corpus: &[Vec<String>], vocab_budget: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::Input("cannot train BPE on an empty corpus".into()));
    }
    let mut word_freq: BTreeMap<String, u64> = BTreeMap::new();
    for sentence in corpus {
        for w in sentence {
            *word_freq.entry(w.to_lowercase()).or_insert(0) += 1;
        }
    }
    let mut alphabet: Vec<String> = vec![WORD_MARK.to_owned()];
    let mut chars: Vec<String> = word_freq.keys().flat_map(|w| w.chars().map(|c| c.to_string())).collect();
    chars.sort();
    chars.dedup();
    alphabet.extend(chars);
    let base = RESERVED.len() + alphabet.len();
    if vocab_budget <= base {
        return Err(Error::Config(format!(
            "vocab budget {vocab_budget} leaves no room for merges over {} base symbols and {} reserved ids",
            alphabet.len(),
            RESERVED.len()
        )));
    }

    let mut words: Vec<(Vec<String>, u64)> = word_freq.iter().map(|(w, &f)| (split_word(w), f)).collect();
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(alphabet);
    let mut merges = Vec::new();

    while tokens.len() < vocab_budget {
        let mut pairs: BTreeMap<(&str, &str), u64> = BTreeMap::new();
        for (syms, f) in &words {
            for p in syms.windows(2) {
                *pairs.entry((p[0].as_str(), p[1].as_str())).or_insert(0) += f;
            }
        }
        // BTreeMap iterates pairs in lexicographic order, so the first
        // maximum wins ties.
        let best = pairs.iter().fold(None::<((&str, &str), u64)>, |acc, (&p, &c)| match acc {
            Some((_, bc)) if bc >= c => acc,
            _ => Some((p, c)),
        });
        let Some(((l, r), c)) = best else { break };
        if c < 2 {
            break;
        }
        let (l, r) = (l.to_owned(), r.to_owned());
        for (syms, _) in &mut words {
            merge_pair(syms, &l, &r);
        }
        tokens.push(format!("{l}{r}"));
        merges.push((l, r));
    }
    Ok(Vocabulary::from_parts(tokens, merges))
}

impl Vocabulary {
    fn from_parts(tokens: Vec<String>, merges: Vec<(String, String)>) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        let ranks = merges.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        Self { tokens, ids, merges, ranks }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let mut syms = split_word(&word.to_lowercase());
        loop {
            let best = syms
                .windows(2)
                .enumerate()
                .filter_map(|(i, p)| self.ranks.get(&(p[0].clone(), p[1].clone())).map(|&r| (r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let (l, r) = &self.merges[rank];
            merge_pair(&mut syms, l, r);
        }
        out.extend(syms.iter().map(|s| self.id(s).unwrap_or(UNK)));
    }

    /// `[bos, subword ids.., eos]`; unknown symbols become `unk`.
    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<u32> {
        let mut out = vec![BOS];
        for w in words {
            self.encode_word(w.as_ref(), &mut out);
        }
        out.push(EOS);
        out
    }

    /// Inverse of [`encode`](Self::encode). Pad, bos and eos are dropped;
    /// `unk` is rendered as `<unk>`.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<String>> {
        let mut text = String::new();
        for &id in ids {
            let tok = self
                .token(id)
                .ok_or_else(|| Error::Input(format!("token id {id} outside vocabulary of {}", self.len())))?;
            match id {
                PAD | BOS | EOS => {}
                UNK => text.push_str(RESERVED[UNK as usize]),
                _ => text.push_str(tok),
            }
        }
        Ok(text.split(WORD_MARK).filter(|w| !w.is_empty()).map(str::to_owned).collect())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("#bpe-vocab v1\n");
        s.push_str(&format!("#merges {}\n", self.merges.len()));
        for (l, r) in &self.merges {
            s.push_str(&format!("{l} {r}\n"));
        }
        s.push_str(&format!("#tokens {}\n", self.tokens.len()));
        for (i, t) in self.tokens.iter().enumerate() {
            s.push_str(&format!("{t}\t{i}\n"));
        }
        s
    }

    pub fn from_text(text: &str, source: &str) -> Result<Self> {
        let perr = |line: usize, msg: &str| Error::Parse { path: source.to_owned(), line, msg: msg.to_owned() };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "#bpe-vocab v1")) => {}
            _ => return Err(perr(1, "missing `#bpe-vocab v1` header")),
        }
        let count_line = |l: Option<(usize, &str)>, tag: &str| -> Result<usize> {
            let (i, l) = l.ok_or_else(|| perr(0, "truncated file"))?;
            l.strip_prefix(tag)
                .and_then(|c| c.trim().parse().ok())
                .ok_or_else(|| perr(i + 1, &format!("expected `{tag} <count>`")))
        };
        let n_merges = count_line(lines.next(), "#merges ")?;
        let mut merges = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            let (i, l) = lines.next().ok_or_else(|| perr(0, "truncated merge list"))?;
            let (a, b) = l.split_once(' ').ok_or_else(|| perr(i + 1, "merge line needs two symbols"))?;
            merges.push((a.to_owned(), b.to_owned()));
        }
        let n_tokens = count_line(lines.next(), "#tokens ")?;
        let mut tokens = Vec::with_capacity(n_tokens);
        for expect in 0..n_tokens {
            let (i, l) = lines.next().ok_or_else(|| perr(0, "truncated token list"))?;
            let (t, id) = l.rsplit_once('\t').ok_or_else(|| perr(i + 1, "token line needs `token<TAB>id`"))?;
            let id: usize = id.parse().map_err(|_| perr(i + 1, "bad token id"))?;
            if id != expect {
                return Err(perr(i + 1, "token ids must be dense and ascending"));
            }
            tokens.push(t.to_owned());
        }
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(perr(0, "reserved tokens missing or out of place"));
        }
        Ok(Self::from_parts(tokens, merges))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::words;
    use proptest::prelude::*;

    fn toy_corpus() -> Vec<Vec<String>> {
        ["play yesterday by the beatles", "play the album revolver", "who sings yesterday"]
            .iter()
            .map(|s| words(s))
            .collect()
    }

    /// Brute-force: count every adjacent symbol pair in the initial split.
    fn brute_first_merge(corpus: &[Vec<String>]) -> (String, String) {
        let mut counts: Vec<((String, String), u64)> = Vec::new();
        for s in corpus {
            for w in s {
                let syms = split_word(w);
                for i in 0..syms.len() - 1 {
                    let p = (syms[i].clone(), syms[i + 1].clone());
                    match counts.iter_mut().find(|(q, _)| *q == p) {
                        Some((_, c)) => *c += 1,
                        None => counts.push((p, 1)),
                    }
                }
            }
        }
        counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        counts[0].0.clone()
    }

    #[test]
    fn toy_first_merge() {
        let c = vec![words("aaab"), words("aaab")];
        let expected = brute_first_merge(&c);
        assert_eq!(expected, ("a".to_string(), "a".to_string()));
        let v = train_bpe(&c, 8).unwrap();
        assert_eq!(v.merges()[0], expected);
        assert!(v.len() <= 8);
    }

    #[test]
    fn budget_too_small() {
        let c = vec![words("aaab"), words("aaab")];
        assert!(matches!(train_bpe(&c, 7), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_and_bounded() {
        let a = train_bpe(&toy_corpus(), 60).unwrap();
        let b = train_bpe(&toy_corpus(), 60).unwrap();
        assert_eq!(a.merges(), b.merges());
        assert!(a.len() <= 60);
        for (l, r) in a.merges() {
            assert!(!RESERVED.contains(&format!("{l}{r}").as_str()));
        }
    }

    #[test]
    fn encode_shapes() {
        let v = train_bpe(&toy_corpus(), 60).unwrap();
        let empty: Vec<String> = vec![];
        assert_eq!(v.encode(&empty), vec![BOS, EOS]);
        assert!(v.decode(&[BOS, EOS]).unwrap().is_empty());
        let ids = v.encode(&words("play qqq"));
        assert_eq!(ids[0], BOS);
        assert_eq!(*ids.last().unwrap(), EOS);
        assert!(ids.contains(&UNK));
        assert!(v.decode(&[9999]).is_err());
    }

    #[test]
    fn round_trip_on_corpus() {
        let v = train_bpe(&toy_corpus(), 40).unwrap();
        for line in toy_corpus() {
            assert_eq!(v.decode(&v.encode(&line)).unwrap(), line);
        }
        let text = v.to_text();
        let back = Vocabulary::from_text(&text, "mem").unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn prefix_stable_without_eos() {
        let v = train_bpe(&toy_corpus(), 40).unwrap();
        let a = v.encode(&words("play the"));
        let b = v.encode(&words("play the beatles"));
        assert_eq!(&b[..a.len() - 1], &a[..a.len() - 1]);
    }

    proptest! {
        #[test]
        fn round_trip_in_alphabet(ws in prop::collection::vec("[abehlprstuy]{1,7}", 0..6), budget in 26usize..90) {
            let v = train_bpe(&toy_corpus(), budget).unwrap();
            let ids = v.encode(&ws);
            prop_assert_eq!(v.decode(&ids).unwrap(), ws);
        }

        #[test]
        fn pads_are_skipped(ws in prop::collection::vec("[abehlprstuy]{1,7}", 1..5), spots in prop::collection::vec(0usize..100, 0..6)) {
            let v = train_bpe(&toy_corpus(), 50).unwrap();
            let mut ids = v.encode(&ws);
            for s in spots {
                let at = s % (ids.len() + 1);
                ids.insert(at, PAD);
            }
            prop_assert_eq!(v.decode(&ids).unwrap(), ws);
        }
    }
}
