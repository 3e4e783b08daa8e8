//! A self-contained two-domain corpus (music queries plus general assistant
//! queries) with an acoustic-confusion channel, sized for desk experiments.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{corrupt, generate_queries, Catalog, ErrorChannelConfig, NBestRecord, QueryTemplate};
use crate::error::{Error, Result};
use crate::ngram::{BackoffModel, KatzConfig};
use crate::parallel::{derive_seed, par_map};

pub const IN_DOMAIN: &str = "music";
pub const ALL_DOMAIN: &str = "general";

const MUSIC_TEMPLATES: &[&str] = &[
    "play {song}",
    "play {song_by_artist}",
    "play some {genre} music",
    "play the album {album}",
    "shuffle songs by {artist}",
    "who sings {song}",
    "add {song} to my {playlist} playlist",
    "play {artist} radio",
    "i want to hear {song_by_artist}",
    "put on my {playlist} playlist",
    "play the latest from {artist}",
    "skip to {song}",
];

const GENERAL_TEMPLATES: &[&str] = &[
    "what is the weather in {city}",
    "what is the weather in {city} {day}",
    "set an alarm for {hour} {ampm}",
    "call {contact}",
    "text {contact} i am on my way",
    "how tall is {landmark}",
    "remind me to {task} {day}",
    "directions to {landmark} in {city}",
    "what time is it in {city}",
    "wake me up at {hour} {ampm} {day}",
];

const GENRES: &[&str] = &["jazz", "rock", "pop", "blues", "classical", "country", "metal", "folk", "soul", "reggae"];
const PLAYLISTS: &[&str] = &["workout", "morning", "party", "chill", "focus", "dinner"];
const HOURS: &[&str] =
    &["one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve"];
const DAYS: &[&str] =
    &["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday", "today", "tomorrow"];
const TASKS: &[&str] = &[
    "buy milk",
    "call the bank",
    "water the plants",
    "pay rent",
    "walk the dog",
    "book a table",
    "take out the trash",
    "pick up the kids",
    "send the report",
    "check the mail",
];

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "kr", "st", "tr"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];
const CODAS: &[&str] = &["", "", "", "n", "r", "l", "s", "m"];

/// Knobs for the desk-scale corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub train: usize,
    pub dev: usize,
    pub eval: usize,
    /// Fraction of queries drawn from the music domain.
    pub in_domain_ratio: f64,
    pub nbest_max: usize,
    pub p_sub: f64,
    pub p_del: f64,
    pub p_ins: f64,
    pub noise_scale: f64,
    /// Sentences used to fit the first-pass bigram LM.
    pub firstpass_sentences: usize,
    /// In-domain fraction of the first-pass LM's training text.
    pub firstpass_in_domain_ratio: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train: 5000,
            dev: 500,
            eval: 500,
            in_domain_ratio: 0.7,
            nbest_max: 5,
            p_sub: 0.14,
            p_del: 0.02,
            p_ins: 0.01,
            noise_scale: 2.5,
            firstpass_sentences: 2000,
            firstpass_in_domain_ratio: 0.1,
            seed: 20240901,
        }
    }
}

/// The generated world: catalogs, templates and the error channel.
#[derive(Debug, Clone)]
pub struct World {
    pub music_templates: Vec<QueryTemplate>,
    pub general_templates: Vec<QueryTemplate>,
    pub catalog: Catalog,
    pub channel: ErrorChannelConfig,
}

impl World {
    /// Every word that can appear in a reference.
    pub fn reference_vocabulary(&self) -> BTreeSet<String> {
        let mut set = BTreeSet::new();
        for t in self.music_templates.iter().chain(&self.general_templates) {
            for tok in t.pattern().split_whitespace() {
                if !tok.starts_with('{') {
                    set.insert(tok.to_owned());
                }
            }
        }
        for fillers in self.catalog.values() {
            for f in fillers {
                set.extend(f.iter().cloned());
            }
        }
        set
    }
}

/// Train/dev/eval records plus the first-pass LM used to score them.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub world: World,
    pub firstpass_lm: BackoffModel,
    pub train: Vec<NBestRecord>,
    pub dev: Vec<NBestRecord>,
    pub eval: Vec<NBestRecord>,
}

struct WordMaker {
    rng: ChaCha8Rng,
    used: BTreeSet<String>,
}

impl WordMaker {
    fn fresh(&mut self, syllables: usize) -> String {
        loop {
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS.choose(&mut self.rng).unwrap());
                w.push_str(VOWELS.choose(&mut self.rng).unwrap());
            }
            w.push_str(CODAS.choose(&mut self.rng).unwrap());
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn phrase(&mut self, min_words: usize, max_words: usize) -> Vec<String> {
        let n = self.rng.gen_range(min_words..=max_words);
        (0..n)
            .map(|_| {
                let syl = self.rng.gen_range(2..=3);
                self.fresh(syl)
            })
            .collect()
    }
}

fn split_words(items: &[&str]) -> Vec<Vec<String>> {
    items.iter().map(|s| crate::metrics::words(s)).collect()
}

/// Acoustic neighbours of `word`: one vowel swap and one voicing swap.
fn confusables(word: &str, rng: &mut ChaCha8Rng) -> Vec<String> {
    const PAIRS: &[(char, char)] =
        &[('b', 'p'), ('d', 't'), ('g', 'k'), ('v', 'f'), ('z', 's'), ('m', 'n'), ('l', 'r')];
    let chars: Vec<char> = word.chars().collect();
    let mut out = Vec::new();

    let vowel_pos: Vec<usize> = (0..chars.len()).filter(|&i| "aeiou".contains(chars[i])).collect();
    if let Some(&i) = vowel_pos.choose(rng) {
        let options: Vec<char> = "aeiou".chars().filter(|&c| c != chars[i]).collect();
        let mut c = chars.clone();
        c[i] = *options.choose(rng).unwrap();
        out.push(c.into_iter().collect::<String>());
    }
    let cons_pos: Vec<usize> =
        (0..chars.len()).filter(|&i| PAIRS.iter().any(|&(a, b)| chars[i] == a || chars[i] == b)).collect();
    if let Some(&i) = cons_pos.choose(rng) {
        let swapped = PAIRS
            .iter()
            .find_map(|&(a, b)| {
                if chars[i] == a {
                    Some(b)
                } else if chars[i] == b {
                    Some(a)
                } else {
                    None
                }
            })
            .unwrap();
        let mut c = chars.clone();
        c[i] = swapped;
        out.push(c.into_iter().collect::<String>());
    } else {
        out.push(format!("{word}s"));
    }
    out.retain(|w| w != word);
    out.dedup();
    out
}

/// Builds catalogs, templates and the confusion channel from `cfg.seed`.
pub fn build_world(cfg: &SynthConfig) -> Result<World> {
    let mut maker =
        WordMaker { rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xC0FFEE)), used: BTreeSet::new() };
    for t in MUSIC_TEMPLATES.iter().chain(GENERAL_TEMPLATES) {
        for tok in t.split_whitespace() {
            maker.used.insert(tok.to_owned());
        }
    }
    for list in [GENRES, PLAYLISTS, HOURS, DAYS] {
        maker.used.extend(list.iter().map(|s| s.to_string()));
    }

    let artists: Vec<Vec<String>> = (0..30)
        .map(|i| {
            if i % 3 == 0 {
                let mut v = vec!["the".to_string()];
                v.extend(maker.phrase(1, 1));
                v
            } else {
                maker.phrase(1, 2)
            }
        })
        .collect();
    let songs: Vec<Vec<String>> = (0..50).map(|_| maker.phrase(1, 2)).collect();
    let song_by_artist: Vec<Vec<String>> = songs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut v = s.clone();
            v.push("by".into());
            v.extend(artists[(i * 7) % artists.len()].iter().cloned());
            v
        })
        .collect();
    let albums: Vec<Vec<String>> = (0..15).map(|_| maker.phrase(1, 2)).collect();
    let cities: Vec<Vec<String>> = (0..20).map(|_| maker.phrase(1, 1)).collect();
    let contacts: Vec<Vec<String>> = (0..20).map(|_| maker.phrase(1, 1)).collect();
    let landmarks: Vec<Vec<String>> = (0..10)
        .map(|_| {
            let mut v = vec!["the".to_string()];
            v.extend(maker.phrase(1, 2));
            v
        })
        .collect();

    let mut catalog = Catalog::new();
    catalog.insert("artist".into(), artists);
    catalog.insert("song".into(), songs);
    catalog.insert("song_by_artist".into(), song_by_artist);
    catalog.insert("album".into(), albums);
    catalog.insert("genre".into(), split_words(GENRES));
    catalog.insert("playlist".into(), split_words(PLAYLISTS));
    catalog.insert("city".into(), cities);
    catalog.insert("contact".into(), contacts);
    catalog.insert("landmark".into(), landmarks);
    catalog.insert("hour".into(), split_words(HOURS));
    catalog.insert("ampm".into(), split_words(&["am", "pm"]));
    catalog.insert("day".into(), split_words(DAYS));
    catalog.insert("task".into(), split_words(TASKS));

    let music_templates = MUSIC_TEMPLATES.iter().map(|t| QueryTemplate::new(t)).collect::<Result<Vec<_>>>()?;
    let general_templates = GENERAL_TEMPLATES.iter().map(|t| QueryTemplate::new(t)).collect::<Result<Vec<_>>>()?;

    let mut world =
        World { music_templates, general_templates, catalog, channel: ErrorChannelConfig::noiseless(cfg.nbest_max) };
    let vocab = world.reference_vocabulary();
    let mut conf_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xC0F));
    let confusion_map: BTreeMap<String, Vec<String>> =
        vocab.iter().map(|w| (w.clone(), confusables(w, &mut conf_rng))).collect();
    world.channel = ErrorChannelConfig {
        p_sub: cfg.p_sub,
        p_del: cfg.p_del,
        p_ins: cfg.p_ins,
        confusion_map,
        vocabulary: vocab.into_iter().collect(),
        nbest_size_max: cfg.nbest_max,
        noise_scale: cfg.noise_scale,
        seed: cfg.seed,
    };
    world.channel.validate()?;
    Ok(world)
}

/// Draws `count` (domain, query) pairs with the given in-domain ratio.
fn draw_queries(
    world: &World,
    count: usize,
    in_domain_ratio: f64,
    seed: u64,
) -> Result<Vec<(&'static str, Vec<String>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_music = (0..count).filter(|_| rng.gen::<f64>() < in_domain_ratio).count();
    let music = generate_queries(&world.music_templates, &world.catalog, n_music, derive_seed(seed, 1))?;
    let general = generate_queries(&world.general_templates, &world.catalog, count - n_music, derive_seed(seed, 2))?;
    let mut all: Vec<(&'static str, Vec<String>)> =
        music.into_iter().map(|q| (IN_DOMAIN, q)).chain(general.into_iter().map(|q| (ALL_DOMAIN, q))).collect();
    all.shuffle(&mut rng);
    Ok(all)
}

fn make_split(
    world: &World,
    lm: &BackoffModel,
    name: &str,
    count: usize,
    cfg: &SynthConfig,
    split_seed: u64,
) -> Result<Vec<NBestRecord>> {
    let queries = draw_queries(world, count, cfg.in_domain_ratio, split_seed)?;
    par_map(&queries, |i, (domain, q)| {
        let seed = derive_seed(split_seed, i as u64 + 1000);
        let n = 1 + (seed % cfg.nbest_max as u64) as usize;
        corrupt(&format!("{domain}-{name}{i:05}"), q, &world.channel, n, derive_seed(seed, 3), Some(lm))
    })
    .into_iter()
    .collect()
}

/// Generates the full train/dev/eval corpus.
pub fn build(cfg: &SynthConfig) -> Result<SyntheticCorpus> {
    if !(0.0..=1.0).contains(&cfg.in_domain_ratio) {
        return Err(Error::Config("in_domain_ratio outside [0, 1]".into()));
    }
    let world = build_world(cfg)?;
    let fp_text: Vec<Vec<String>> =
        draw_queries(&world, cfg.firstpass_sentences.max(1), cfg.firstpass_in_domain_ratio, derive_seed(cfg.seed, 10))?
            .into_iter()
            .map(|(_, q)| q)
            .collect();
    let firstpass_lm = BackoffModel::train(&fp_text, &KatzConfig::with_order(2))?;

    let train = make_split(&world, &firstpass_lm, "train", cfg.train, cfg, derive_seed(cfg.seed, 11))?;
    let dev = make_split(&world, &firstpass_lm, "dev", cfg.dev, cfg, derive_seed(cfg.seed, 12))?;
    let eval = make_split(&world, &firstpass_lm, "eval", cfg.eval, cfg, derive_seed(cfg.seed, 13))?;
    Ok(SyntheticCorpus { world, firstpass_lm, train, dev, eval })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{oracle_wer, selection_wer};

    fn small() -> SynthConfig {
        SynthConfig { train: 400, dev: 50, eval: 50, ..SynthConfig::default() }
    }

    #[test]
    fn vocabulary_is_desk_sized() {
        let w = build_world(&SynthConfig::default()).unwrap();
        let v = w.reference_vocabulary().len();
        assert!((250..=360).contains(&v), "vocabulary size {v}");
    }

    #[test]
    fn build_is_deterministic() {
        let a = build(&small()).unwrap();
        let b = build(&small()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.eval, b.eval);
    }

    #[test]
    fn default_channel_gives_about_ten_percent_wer() {
        let c = build(&SynthConfig::default()).unwrap();
        let asr = selection_wer(&c.train, |_| 0).unwrap();
        assert!((0.08..=0.12).contains(&asr), "1-best WER {asr}");
        assert_eq!((c.train.len(), c.dev.len(), c.eval.len()), (5000, 500, 500));
    }

    #[test]
    fn records_are_well_formed() {
        let c = build(&small()).unwrap();
        for r in c.train.iter().chain(&c.dev).chain(&c.eval) {
            assert!(r.n() >= 1 && r.n() <= 5);
            assert!(r.domain() == IN_DOMAIN || r.domain() == ALL_DOMAIN);
            for h in &r.hypotheses {
                assert!(h.firstpass_lm_logp.is_finite() && h.firstpass_lm_logp <= 0.0);
            }
        }
        let asr = selection_wer(&c.train, |_| 0).unwrap();
        let oracle = oracle_wer(&c.train).unwrap();
        assert!(oracle < asr);
    }
}
