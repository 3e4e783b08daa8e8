//! The transformer rescorer networks.
//!
//! Both variants share an encoder over the concatenated N-best list and a
//! one-sided decoder that predicts the corrected query. The attention
//! variant adds a cross-attention head from the encoded hypotheses onto the
//! target embedding and reduces it to one score per hypothesis.

use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::NBestRecord;
use crate::error::{Error, Result};
use crate::metrics;
use crate::tensor::{Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::tokenizer::{Vocabulary, BOS, EOS, PAD};

const MASKED: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Plain rescorer scored by teacher-forced likelihood.
    Tr,
    /// Rescorer with the rescore-attention head.
    Tra,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Tr => "tr",
            Variant::Tra => "tra",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tr" => Ok(Variant::Tr),
            "tra" => Ok(Variant::Tra),
            other => Err(Error::Config(format!("unknown model variant {other:?}"))),
        }
    }
}

/// How a hypothesis' mean token log-probability becomes an unnormalized
/// probability for the likelihood rescorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqProb {
    /// `sigmoid(mean logp)`, in (0, 0.5].
    SigmoidMean,
    /// `exp(mean logp)`, the geometric-mean token probability.
    ExpMean,
}

impl SeqProb {
    fn name(self) -> &'static str {
        match self {
            SeqProb::SigmoidMean => "sigmoid_mean",
            SeqProb::ExpMean => "exp_mean",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "sigmoid_mean" => Ok(SeqProb::SigmoidMean),
            "exp_mean" => Ok(SeqProb::ExpMean),
            other => Err(Error::Config(format!("unknown seq_prob {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    /// Longest token sequence, including bos and eos, for one hypothesis
    /// or target.
    pub max_len: usize,
    pub nbest_max: usize,
    pub dropout: f64,
    pub seq_prob: SeqProb,
    /// Initial gain of the normalization inside the rescore head.
    pub rescore_norm_gain: f64,
}

impl ModelConfig {
    /// Small configuration that trains on one CPU core.
    pub fn desk(variant: Variant, vocab_size: usize) -> Self {
        Self {
            variant,
            enc_layers: 2,
            dec_layers: 1,
            heads: 4,
            d_model: 32,
            ff_dim: 64,
            vocab_size,
            max_len: 40,
            nbest_max: 5,
            dropout: 0.1,
            seq_prob: SeqProb::SigmoidMean,
            rescore_norm_gain: 0.01,
        }
    }

    /// The full-size dimensions.
    pub fn large(variant: Variant, vocab_size: usize) -> Self {
        Self {
            enc_layers: 4,
            heads: 8,
            d_model: 512,
            ff_dim: 2048,
            max_len: 64,
            nbest_max: 10,
            ..Self::desk(variant, vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("ff_dim", self.ff_dim),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("nbest_max", self.nbest_max),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_model {} is not divisible by heads {}", self.d_model, self.heads)));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must leave room for bos and eos".into()));
        }
        if self.vocab_size <= EOS as usize {
            return Err(Error::Config("vocab_size must cover the reserved ids".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !self.rescore_norm_gain.is_finite() {
            return Err(Error::Config("rescore_norm_gain must be finite".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "variant={}", self.variant.name());
        let _ = writeln!(s, "enc_layers={}", self.enc_layers);
        let _ = writeln!(s, "dec_layers={}", self.dec_layers);
        let _ = writeln!(s, "heads={}", self.heads);
        let _ = writeln!(s, "d_model={}", self.d_model);
        let _ = writeln!(s, "ff_dim={}", self.ff_dim);
        let _ = writeln!(s, "vocab_size={}", self.vocab_size);
        let _ = writeln!(s, "max_len={}", self.max_len);
        let _ = writeln!(s, "nbest_max={}", self.nbest_max);
        let _ = writeln!(s, "dropout={}", self.dropout);
        let _ = writeln!(s, "seq_prob={}", self.seq_prob.name());
        let _ = writeln!(s, "rescore_norm_gain={}", self.rescore_norm_gain);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::desk(Variant::Tra, 0);
        let mut seen_variant = false;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("model config line {}: expected key=value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| v.parse::<usize>().map_err(|e| Error::Config(format!("model config {k}: {e}")));
            match k {
                "variant" => {
                    cfg.variant = Variant::parse(v)?;
                    seen_variant = true;
                }
                "enc_layers" => cfg.enc_layers = num(v)?,
                "dec_layers" => cfg.dec_layers = num(v)?,
                "heads" => cfg.heads = num(v)?,
                "d_model" => cfg.d_model = num(v)?,
                "ff_dim" => cfg.ff_dim = num(v)?,
                "vocab_size" => cfg.vocab_size = num(v)?,
                "max_len" => cfg.max_len = num(v)?,
                "nbest_max" => cfg.nbest_max = num(v)?,
                "dropout" => {
                    cfg.dropout = v.parse().map_err(|e| Error::Config(format!("model config dropout: {e}")))?
                }
                "seq_prob" => cfg.seq_prob = SeqProb::parse(v)?,
                "rescore_norm_gain" => {
                    cfg.rescore_norm_gain =
                        v.parse().map_err(|e| Error::Config(format!("model config rescore_norm_gain: {e}")))?
                }
                other => return Err(Error::Config(format!("unknown model config key {other:?}"))),
            }
        }
        if !seen_variant {
            return Err(Error::Config("model config is missing variant".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy)]
struct AttnIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct NormIds {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    attn: AttnIds,
    norm1: NormIds,
    ffn: FfnIds,
    norm2: NormIds,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    self_attn: AttnIds,
    norm1: NormIds,
    cross: AttnIds,
    norm2: NormIds,
    ffn: FfnIds,
    norm3: NormIds,
}

/// Every learned tensor of a model, held in one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub store: ParamStore,
    embed: ParamId,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    out_w: ParamId,
    out_b: ParamId,
    rescore: Option<(AttnIds, NormIds)>,
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut rand_chacha::ChaCha8Rng,
    d: usize,
}

impl Builder<'_> {
    fn add(&mut self, name: &str, r: usize, c: usize, init: Init) -> Result<ParamId> {
        self.store.add(name, r, c, init, self.rng)
    }

    fn attn(&mut self, prefix: &str) -> Result<AttnIds> {
        let d = self.d;
        Ok(AttnIds {
            wq: self.add(&format!("{prefix}.wq"), d, d, Init::Xavier)?,
            wk: self.add(&format!("{prefix}.wk"), d, d, Init::Xavier)?,
            wv: self.add(&format!("{prefix}.wv"), d, d, Init::Xavier)?,
            wo: self.add(&format!("{prefix}.wo"), d, d, Init::Xavier)?,
            bo: self.add(&format!("{prefix}.bo"), 1, d, Init::Zeros)?,
        })
    }

    fn norm(&mut self, prefix: &str, gain: f64) -> Result<NormIds> {
        Ok(NormIds {
            gain: self.add(&format!("{prefix}.gain"), 1, self.d, Init::Constant(gain))?,
            bias: self.add(&format!("{prefix}.bias"), 1, self.d, Init::Zeros)?,
        })
    }

    fn ffn(&mut self, prefix: &str, ff: usize) -> Result<FfnIds> {
        let d = self.d;
        Ok(FfnIds {
            w1: self.add(&format!("{prefix}.w1"), d, ff, Init::Xavier)?,
            b1: self.add(&format!("{prefix}.b1"), 1, ff, Init::Zeros)?,
            w2: self.add(&format!("{prefix}.w2"), ff, d, Init::Xavier)?,
            b2: self.add(&format!("{prefix}.b2"), 1, d, Init::Zeros)?,
        })
    }
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::tensor::seeded_rng(seed);
        let d = cfg.d_model;
        let mut b = Builder { store: ParamStore::new(), rng: &mut rng, d };
        let embed = b.add("embed", cfg.vocab_size, d, Init::Normal((d as f64).powf(-0.5)))?;
        let mut encoder = Vec::with_capacity(cfg.enc_layers);
        for i in 0..cfg.enc_layers {
            let p = format!("enc{i}");
            encoder.push(EncoderLayer {
                attn: b.attn(&format!("{p}.attn"))?,
                norm1: b.norm(&format!("{p}.norm1"), 1.0)?,
                ffn: b.ffn(&format!("{p}.ffn"), cfg.ff_dim)?,
                norm2: b.norm(&format!("{p}.norm2"), 1.0)?,
            });
        }
        let mut decoder = Vec::with_capacity(cfg.dec_layers);
        for i in 0..cfg.dec_layers {
            let p = format!("dec{i}");
            decoder.push(DecoderLayer {
                self_attn: b.attn(&format!("{p}.self"))?,
                norm1: b.norm(&format!("{p}.norm1"), 1.0)?,
                cross: b.attn(&format!("{p}.cross"))?,
                norm2: b.norm(&format!("{p}.norm2"), 1.0)?,
                ffn: b.ffn(&format!("{p}.ffn"), cfg.ff_dim)?,
                norm3: b.norm(&format!("{p}.norm3"), 1.0)?,
            });
        }
        let out_w = b.add("out.w", d, cfg.vocab_size, Init::Xavier)?;
        let out_b = b.add("out.b", 1, cfg.vocab_size, Init::Zeros)?;
        let rescore = match cfg.variant {
            Variant::Tra => Some((b.attn("rescore.attn")?, b.norm("rescore.norm", cfg.rescore_norm_gain)?)),
            Variant::Tr => None,
        };
        Ok(Self { store: b.store, embed, encoder, decoder, out_w, out_b, rescore })
    }
}

/// Greedy decoder output. `tokens` excludes the leading bos.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub tokens: Vec<u32>,
    pub token_logps: Vec<f64>,
    pub mean_logp: f64,
}

impl DecodeResult {
    /// Log-probability of the whole decoded sequence.
    pub fn total_logp(&self) -> f64 {
        self.token_logps.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RescoreOutput {
    pub scores: Vec<f64>,
}

/// Encoder output for one N-best list.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub hidden: Var,
    /// Padded hypothesis length.
    pub len: usize,
    pub n: usize,
    /// True at pad rows of `hidden`.
    pub pad: Vec<bool>,
}

/// One record in token form.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// Each hypothesis as `[bos, ..., eos]`.
    pub hyps: Vec<Vec<u32>>,
    /// The reference as `[bos, ..., eos]`.
    pub target: Vec<u32>,
    /// Query-similarity score of every hypothesis.
    pub similarity: Vec<f64>,
    /// Raw word-error count of every hypothesis.
    pub word_errors: Vec<f64>,
}

impl Example {
    pub fn from_record(record: &NBestRecord, vocab: &Vocabulary) -> Self {
        let mut similarity = Vec::with_capacity(record.n());
        let mut word_errors = Vec::with_capacity(record.n());
        for h in &record.hypotheses {
            let st = metrics::edit_stats(&h.words, &record.reference);
            similarity.push(metrics::similarity_from_wer(st.wer()));
            word_errors.push(st.errors() as f64);
        }
        Self {
            hyps: record.hypotheses.iter().map(|h| vocab.encode(&h.words)).collect(),
            target: vocab.encode(&record.reference),
            similarity,
            word_errors,
        }
    }

    pub fn n(&self) -> usize {
        self.hyps.len()
    }

    /// Length the hypotheses pad to.
    pub fn padded_len(&self) -> usize {
        self.hyps.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// Everything the inference path produces for one record.
#[derive(Debug, Clone)]
pub struct Inference {
    pub decode: DecodeResult,
    /// Rescore-head scores (attention variant only).
    pub scores: Option<RescoreOutput>,
    /// Mean teacher-forced log-probability of every hypothesis.
    pub hyp_mean_logps: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    KeepAsr,
    Rescore(usize),
    Rewrite,
}

/// A configuration plus its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    positions: Tensor,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Self::with_params(config, params))
    }

    fn with_params(config: ModelConfig, params: ModelParams) -> Self {
        let positions = Tensor::sinusoidal(config.max_len, config.d_model);
        Self { config, params, positions }
    }

    /// Writes `<dir>/model.cfg` and `<dir>/params.ckpt`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg = dir.join("model.cfg");
        std::fs::write(&cfg, self.config.to_text()).map_err(|e| Error::io(&cfg, e))?;
        self.params.store.save(&dir.join("params.ckpt"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join("model.cfg");
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config = ModelConfig::from_text(&text)?;
        let loaded = ParamStore::load(&dir.join("params.ckpt"))?;
        let mut params = ModelParams::init(&config, 0)?;
        params.store.assign_from(&loaded)?;
        Ok(Self::with_params(config, params))
    }

    fn p(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(&self.params.store, id)
    }

    fn check_len(&self, seq: &[u32], what: &str) -> Result<()> {
        if seq.len() > self.config.max_len {
            return Err(Error::Input(format!("{what} has {} tokens, max_len is {}", seq.len(), self.config.max_len)));
        }
        if let Some(&bad) = seq.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Input(format!("{what} holds token {bad} outside the vocabulary")));
        }
        Ok(())
    }

    /// Scaled embeddings plus positions restarting at 0: `len x d`.
    fn embed(&self, g: &mut Graph, seq: &[u32]) -> Result<Var> {
        let d = self.config.d_model;
        let table = self.p(g, self.params.embed);
        let ids: Vec<usize> = seq.iter().map(|&t| t as usize).collect();
        let e = g.embedding(table, &ids)?;
        let e = g.scale(e, (d as f64).sqrt());
        let pos = Tensor::new(seq.len(), d, self.positions.data()[..seq.len() * d].to_vec())?;
        let pos = g.constant(pos);
        g.add(e, pos)
    }

    fn attention(&self, g: &mut Graph, ids: &AttnIds, query: Var, memory: Var, mask: Option<&[bool]>) -> Result<Var> {
        let heads = self.config.heads;
        let dk = self.config.d_model / heads;
        let (wq, wk, wv, wo, bo) =
            (self.p(g, ids.wq), self.p(g, ids.wk), self.p(g, ids.wv), self.p(g, ids.wo), self.p(g, ids.bo));
        let q = g.matmul(query, wq)?;
        let k = g.matmul(memory, wk)?;
        let v = g.matmul(memory, wv)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dk, dk)?;
            let kh = g.slice_cols(k, h * dk, dk)?;
            let vh = g.slice_cols(v, h * dk, dk)?;
            let mut s = g.matmul_bt(qh, kh)?;
            s = g.scale(s, 1.0 / (dk as f64).sqrt());
            if let Some(m) = mask {
                s = g.masked_fill(s, m, MASKED)?;
            }
            let a = g.softmax(s);
            outs.push(g.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        let o = g.matmul(cat, wo)?;
        g.add_row(o, bo)
    }

    fn norm(&self, g: &mut Graph, ids: &NormIds, x: Var) -> Result<Var> {
        let (gain, bias) = (self.p(g, ids.gain), self.p(g, ids.bias));
        g.layer_norm(x, gain, bias)
    }

    fn ffn(&self, g: &mut Graph, ids: &FfnIds, x: Var) -> Result<Var> {
        let p = self.config.dropout;
        let (w1, b1, w2, b2) = (self.p(g, ids.w1), self.p(g, ids.b1), self.p(g, ids.w2), self.p(g, ids.b2));
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h);
        let h = g.dropout(h, p);
        let o = g.matmul(h, w2)?;
        g.add_row(o, b2)
    }

    /// Residual connection followed by normalization.
    fn residual(&self, g: &mut Graph, x: Var, sub: Var, norm: &NormIds) -> Result<Var> {
        let sub = g.dropout(sub, self.config.dropout);
        let sum = g.add(x, sub)?;
        self.norm(g, norm, sum)
    }

    /// Embeds and pads every hypothesis to a common length, then concatenates
    /// them along the length axis.
    pub fn embed_nbest(&self, g: &mut Graph, hyps: &[Vec<u32>]) -> Result<(Vec<Var>, Vec<usize>)> {
        if hyps.is_empty() {
            return Err(Error::Input("empty N-best list".into()));
        }
        if hyps.len() > self.config.nbest_max {
            return Err(Error::Input(format!("{} hypotheses exceed nbest_max {}", hyps.len(), self.config.nbest_max)));
        }
        let len = hyps.iter().map(Vec::len).max().unwrap_or(0);
        let mut parts = Vec::with_capacity(hyps.len());
        let mut lengths = Vec::with_capacity(hyps.len());
        for (i, h) in hyps.iter().enumerate() {
            self.check_len(h, &format!("hypothesis {i}"))?;
            if h.is_empty() {
                return Err(Error::Input(format!("hypothesis {i} has no tokens")));
            }
            let mut padded = h.clone();
            padded.resize(len, PAD);
            parts.push(self.embed(g, &padded)?);
            lengths.push(h.len());
        }
        Ok((parts, lengths))
    }

    /// Runs the encoder over the aggregated N-best list.
    pub fn encode(&self, g: &mut Graph, hyps: &[Vec<u32>]) -> Result<Encoded> {
        let (parts, lengths) = self.embed_nbest(g, hyps)?;
        let (x, pad) = aggregate_context(g, &parts, &lengths)?;
        let n = parts.len();
        let rows = pad.len();
        let len = rows / n;
        let key_mask: Vec<bool> = (0..rows).flat_map(|_| pad.iter().copied()).collect();
        let mut x = g.dropout(x, self.config.dropout);
        for layer in &self.params.encoder {
            let a = self.attention(g, &layer.attn, x, x, Some(&key_mask))?;
            x = self.residual(g, x, a, &layer.norm1)?;
            let f = self.ffn(g, &layer.ffn, x)?;
            x = self.residual(g, x, f, &layer.norm2)?;
        }
        Ok(Encoded { hidden: x, len, n, pad })
    }

    /// Log-softmax over the vocabulary at every decoder input position:
    /// `len(inputs) x vocab`.
    fn decoder_logprobs(&self, g: &mut Graph, enc: &Encoded, inputs: &[u32]) -> Result<Var> {
        let t = inputs.len();
        let causal: Vec<bool> = (0..t).flat_map(|i| (0..t).map(move |j| j > i)).collect();
        let cross_mask: Vec<bool> = (0..t).flat_map(|_| enc.pad.iter().copied()).collect();
        let x = self.embed(g, inputs)?;
        let mut x = g.dropout(x, self.config.dropout);
        for layer in &self.params.decoder {
            let a = self.attention(g, &layer.self_attn, x, x, Some(&causal))?;
            x = self.residual(g, x, a, &layer.norm1)?;
            let c = self.attention(g, &layer.cross, x, enc.hidden, Some(&cross_mask))?;
            x = self.residual(g, x, c, &layer.norm2)?;
            let f = self.ffn(g, &layer.ffn, x)?;
            x = self.residual(g, x, f, &layer.norm3)?;
        }
        let (w, b) = (self.p(g, self.params.out_w), self.p(g, self.params.out_b));
        let logits = g.matmul(x, w)?;
        let logits = g.add_row(logits, b)?;
        Ok(g.log_softmax(logits))
    }

    /// Log-probability of every target token after the leading bos, with
    /// the target shifted right as decoder input: `(len - 1) x 1`.
    pub fn teacher_force_logps(&self, g: &mut Graph, enc: &Encoded, target: &[u32]) -> Result<Var> {
        self.check_len(target, "target")?;
        if target.len() < 2 || target[0] != BOS {
            return Err(Error::Input("target must start with bos and hold at least one more token".into()));
        }
        let lp = self.decoder_logprobs(g, enc, &target[..target.len() - 1])?;
        let next: Vec<usize> = target[1..].iter().map(|&t| t as usize).collect();
        g.pick_cols(lp, &next)
    }

    /// Greedy argmax decoding from bos until eos or `max_len` tokens. Pad
    /// and bos are never emitted.
    pub fn decode_greedy(&self, g: &mut Graph, enc: &Encoded) -> Result<DecodeResult> {
        let mut seq = vec![BOS];
        let mut token_logps = Vec::new();
        while seq.len() < self.config.max_len {
            let lp = self.decoder_logprobs(g, enc, &seq)?;
            let last = g.value(lp).row(seq.len() - 1);
            let (best, logp) = last
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != PAD as usize && i != BOS as usize)
                .fold((EOS as usize, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            seq.push(best as u32);
            token_logps.push(logp);
            if best == EOS as usize {
                break;
            }
        }
        let mean_logp = token_logps.iter().sum::<f64>() / token_logps.len() as f64;
        Ok(DecodeResult { tokens: seq[1..].to_vec(), token_logps, mean_logp })
    }

    /// Unnormalized-to-normalized hypothesis probabilities from teacher-forced
    /// likelihoods: a `1 x N` row summing to 1.
    pub fn score_nbest_tr(&self, g: &mut Graph, enc: &Encoded, hyps: &[Vec<u32>]) -> Result<Var> {
        if hyps.is_empty() {
            return Err(Error::Input("empty N-best list".into()));
        }
        let mut qs = Vec::with_capacity(hyps.len());
        for h in hyps {
            let lp = self.teacher_force_logps(g, enc, h)?;
            let mean = g.mean_all(lp);
            qs.push(match self.config.seq_prob {
                SeqProb::SigmoidMean => g.sigmoid(mean),
                SeqProb::ExpMean => g.exp(mean),
            });
        }
        let q = g.concat_cols(&qs)?;
        let total = g.sum_all(q);
        g.div_scalar(q, total)
    }

    /// Target-side embedding used as keys and values of the rescore head.
    pub fn target_embedding(&self, g: &mut Graph, target: &[u32]) -> Result<Var> {
        self.check_len(target, "target")?;
        if target.is_empty() {
            return Err(Error::Input("empty target".into()));
        }
        self.embed(g, target)
    }

    /// One score in (0, 1) per hypothesis: a `1 x N` row.
    pub fn rescore_attention(&self, g: &mut Graph, enc: &Encoded, target_emb: Var) -> Result<Var> {
        let (attn, norm) =
            self.params.rescore.ok_or_else(|| Error::Usage("rescore attention needs the attention variant".into()))?;
        let rows = g.shape(enc.hidden)[0];
        if enc.n == 0 || !rows.is_multiple_of(enc.n) || rows / enc.n != enc.len {
            return Err(Error::Usage(format!("{rows} encoded rows do not split into {} blocks", enc.n)));
        }
        let a = self.attention(g, &attn, enc.hidden, target_emb, None)?;
        let a = self.norm(g, &norm, a)?;
        let d = self.config.d_model;
        let keep: Vec<f64> = enc.pad.iter().flat_map(|&p| std::iter::repeat_n(if p { 0.0 } else { 1.0 }, d)).collect();
        let a = g.mul_const(a, &Tensor::new(rows, d, keep)?)?;
        let blocks = g.sum_blocks(a, enc.len)?;
        let t = g.sum_rows(target_emb);
        let logits = g.matmul_bt(t, blocks)?;
        Ok(g.sigmoid(logits))
    }

    /// Inference for one record with dropout off. The rescore head reads
    /// the embedding of the decoded sequence.
    pub fn infer(&self, hyps: &[Vec<u32>]) -> Result<Inference> {
        let mut g = Graph::inference();
        let enc = self.encode(&mut g, hyps)?;
        let decode = self.decode_greedy(&mut g, &enc)?;
        let scores = match self.config.variant {
            Variant::Tra => {
                let mut target = vec![BOS];
                target.extend_from_slice(&decode.tokens);
                let ht = self.target_embedding(&mut g, &target)?;
                let s = self.rescore_attention(&mut g, &enc, ht)?;
                Some(RescoreOutput { scores: g.value(s).data().to_vec() })
            }
            Variant::Tr => None,
        };
        let mut hyp_mean_logps = Vec::with_capacity(hyps.len());
        for h in hyps {
            let lp = self.teacher_force_logps(&mut g, &enc, h)?;
            let v = g.value(lp);
            hyp_mean_logps.push(v.sum() / v.len() as f64);
        }
        Ok(Inference { decode, scores, hyp_mean_logps })
    }
}

/// Concatenates equally padded hypothesis embeddings along the length axis.
/// Returns the aggregate and a mask that is true at pad rows.
pub fn aggregate_context(g: &mut Graph, parts: &[Var], lengths: &[usize]) -> Result<(Var, Vec<bool>)> {
    let first = parts.first().ok_or_else(|| Error::Usage("no hypotheses to aggregate".into()))?;
    let len = g.shape(*first)[0];
    if parts.len() != lengths.len() {
        return Err(Error::Usage("one length per hypothesis is required".into()));
    }
    for (i, &p) in parts.iter().enumerate() {
        if g.shape(p)[0] != len {
            return Err(Error::Usage(format!("hypothesis {i} has {} rows, expected {len}", g.shape(p)[0])));
        }
        if lengths[i] > len {
            return Err(Error::Usage(format!("hypothesis {i} is longer than its padding")));
        }
    }
    let pad = lengths.iter().flat_map(|&l| (0..len).map(move |j| j >= l)).collect();
    let x = if parts.len() == 1 { *first } else { g.concat_rows(parts)? };
    Ok((x, pad))
}

/// Index of the highest score; ties go to the lower index (better ASR rank).
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Chooses between the ASR order, re-ranking, and replacing the 1-best with
/// the decoded text, based on the decoder's mean log-probability. `scores`
/// holds one rescore value per hypothesis.
pub fn rewrite_decide(mean_logp: f64, scores: &[f64], threshold_rescore: f64, threshold_rewrite: f64) -> Action {
    if !(mean_logp > threshold_rescore) {
        return Action::KeepAsr;
    }
    if mean_logp > threshold_rewrite && scores.len() > 1 {
        return Action::Rewrite;
    }
    match argmax_first(scores) {
        Some(i) => Action::Rescore(i),
        None => Action::KeepAsr,
    }
}

/// The final 1-best words for an action.
pub fn apply_action(action: Action, record: &NBestRecord, rewrite: &[String]) -> Vec<String> {
    match action {
        Action::KeepAsr => record.hypotheses.first().map(|h| h.words.clone()).unwrap_or_default(),
        Action::Rescore(i) => record.hypotheses[i].words.clone(),
        Action::Rewrite => rewrite.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Hypothesis;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            enc_layers: 2,
            dec_layers: 1,
            heads: 2,
            d_model: 16,
            ff_dim: 24,
            vocab_size: 20,
            max_len: 12,
            nbest_max: 5,
            dropout: 0.0,
            seq_prob: SeqProb::SigmoidMean,
            rescore_norm_gain: 0.05,
        }
    }

    fn random_hyps(rng: &mut impl Rng, n: usize, vocab: u32) -> Vec<Vec<u32>> {
        (0..n)
            .map(|_| {
                let l = rng.gen_range(1..=5);
                let mut h = vec![BOS];
                h.extend((0..l).map(|_| rng.gen_range(4..vocab)));
                h.push(EOS);
                h
            })
            .collect()
    }

    #[test]
    fn config_text_round_trip_and_validation() {
        let c = tiny(Variant::Tra);
        assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
        let mut bad = c.clone();
        bad.heads = 3;
        assert!(bad.validate().is_err());
        assert!(ModelConfig::from_text("heads=2\n").is_err());
    }

    #[test]
    fn aggregate_shapes_and_rows() {
        let mut g = Graph::inference();
        let parts: Vec<Var> = (0..3)
            .map(|h| g.constant(Tensor::new(4, 8, (0..32).map(|i| (h * 100 + i) as f64).collect()).unwrap()))
            .collect();
        let (x, pad) = aggregate_context(&mut g, &parts, &[4, 2, 3]).unwrap();
        assert_eq!(g.shape(x), [12, 8]);
        for k in 0..12 {
            assert_eq!(g.value(x).row(k), g.value(parts[k / 4]).row(k % 4));
        }
        assert_eq!(pad[4..8], [false, false, true, true]);

        let one = g.constant(Tensor::zeros(4, 8));
        let (y, _) = aggregate_context(&mut g, &[one], &[4]).unwrap();
        assert_eq!(g.value(y), g.value(one));

        let short = g.constant(Tensor::zeros(3, 8));
        assert!(matches!(aggregate_context(&mut g, &[one, short], &[1, 1]), Err(Error::Usage(_))));
    }

    #[test]
    fn pad_embeddings_do_not_leak() {
        let m = Model::new(tiny(Variant::Tra), 1).unwrap();
        let mut m2 = m.clone();
        let embed = m2.params.embed;
        for v in m2.params.store.value_mut(embed).row_mut(PAD as usize) {
            *v += 3.7;
        }
        let hyps = vec![vec![1, 5, 6, 7, 2], vec![1, 8, 2], vec![1, 9, 10, 2]];
        let run = |m: &Model| {
            let mut g = Graph::inference();
            let enc = m.encode(&mut g, &hyps).unwrap();
            (g.value(enc.hidden).clone(), enc.pad.clone())
        };
        let (a, pad) = run(&m);
        let (b, _) = run(&m2);
        assert_eq!(a.shape(), [15, 16]);
        for (r, &p) in pad.iter().enumerate() {
            if !p {
                assert_eq!(a.row(r), b.row(r), "row {r}");
            }
        }
        assert_eq!(m.infer(&hyps).unwrap().scores, m2.infer(&hyps).unwrap().scores);
    }

    #[test]
    fn greedy_decode_is_self_consistent() {
        let m = Model::new(tiny(Variant::Tra), 2).unwrap();
        let hyps = vec![vec![1, 5, 6, 2], vec![1, 7, 2]];
        let mut g = Graph::inference();
        let enc = m.encode(&mut g, &hyps).unwrap();
        let d = m.decode_greedy(&mut g, &enc).unwrap();
        assert_eq!(d.tokens.len(), d.token_logps.len());
        assert!(d.token_logps.iter().all(|v| v.is_finite() && *v <= 0.0));
        assert!(d.mean_logp <= 0.0);
        let mut target = vec![BOS];
        target.extend_from_slice(&d.tokens);
        let lp = m.teacher_force_logps(&mut g, &enc, &target).unwrap();
        for (a, b) in g.value(lp).data().iter().zip(&d.token_logps) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_terminates_with_one_symbol_vocabulary() {
        let mut cfg = tiny(Variant::Tr);
        cfg.vocab_size = 5;
        let mut m = Model::new(cfg, 3).unwrap();
        // make eos unreachable so only max_len stops decoding
        let b = m.params.out_b;
        m.params.store.value_mut(b).data_mut()[EOS as usize] = -1e6;
        let mut g = Graph::inference();
        let enc = m.encode(&mut g, &[vec![1, 4, 2]]).unwrap();
        let d = m.decode_greedy(&mut g, &enc).unwrap();
        assert_eq!(d.tokens.len(), m.config.max_len - 1);
    }

    #[test]
    fn teacher_forcing_distributions_and_causality() {
        let m = Model::new(tiny(Variant::Tr), 4).unwrap();
        let hyps = vec![vec![1, 5, 6, 2]];
        let mut g = Graph::inference();
        let enc = m.encode(&mut g, &hyps).unwrap();
        let full = m.decoder_logprobs(&mut g, &enc, &[1, 5, 9, 11]).unwrap();
        for r in 0..4 {
            let z: f64 = g.value(full).row(r).iter().map(|v| v.exp()).sum();
            assert!((z - 1.0).abs() < 1e-9);
        }
        let a = m.teacher_force_logps(&mut g, &enc, &[1, 5, 9, 11, 2]).unwrap();
        let b = m.teacher_force_logps(&mut g, &enc, &[1, 5, 9, 13, 2]).unwrap();
        // target token 3 changed: positions predicting tokens 1..=3 are unaffected
        assert_eq!(g.value(a).data()[..2], g.value(b).data()[..2]);
        assert!(matches!(m.teacher_force_logps(&mut g, &enc, &[1; 13]), Err(Error::Input(_))));
    }

    #[test]
    fn tr_probabilities() {
        let m = Model::new(tiny(Variant::Tr), 5).unwrap();
        let mut g = Graph::inference();
        let one = vec![vec![1, 5, 2]];
        let enc = m.encode(&mut g, &one).unwrap();
        let p = m.score_nbest_tr(&mut g, &enc, &one).unwrap();
        assert!((g.value(p).item() - 1.0).abs() < 1e-15);

        let same = vec![vec![1, 5, 6, 2]; 3];
        let enc = m.encode(&mut g, &same).unwrap();
        let p = m.score_nbest_tr(&mut g, &enc, &same).unwrap();
        for v in g.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn exp_mean_variant_matches_closed_form() {
        let mut cfg = tiny(Variant::Tr);
        cfg.seq_prob = SeqProb::ExpMean;
        let m = Model::new(cfg, 6).unwrap();
        let hyps = vec![vec![1, 5, 2], vec![1, 7, 8, 2]];
        let mut g = Graph::inference();
        let enc = m.encode(&mut g, &hyps).unwrap();
        let p = m.score_nbest_tr(&mut g, &enc, &hyps).unwrap();
        let means = m.infer(&hyps).unwrap().hyp_mean_logps;
        let q: Vec<f64> = means.iter().map(|v| v.exp()).collect();
        let z: f64 = q.iter().sum();
        for (a, b) in g.value(p).data().iter().zip(&q) {
            assert!((a - b / z).abs() < 1e-12);
        }
    }

    #[test]
    fn rescore_head_requires_attention_variant() {
        let m = Model::new(tiny(Variant::Tr), 7).unwrap();
        let mut g = Graph::inference();
        let enc = m.encode(&mut g, &[vec![1, 5, 2]]).unwrap();
        let t = m.target_embedding(&mut g, &[1, 5, 2]).unwrap();
        assert!(matches!(m.rescore_attention(&mut g, &enc, t), Err(Error::Usage(_))));
    }

    #[test]
    fn thresholds() {
        let s = [0.2, 0.7, 0.7];
        assert_eq!(rewrite_decide(-0.3, &s, -1.0, -0.5), Action::Rewrite);
        assert_eq!(rewrite_decide(-0.7, &s, -1.0, -0.5), Action::Rescore(1));
        assert_eq!(rewrite_decide(-1.2, &s, -1.0, -0.5), Action::KeepAsr);
        assert_eq!(rewrite_decide(-1.0, &s, -1.0, -0.5), Action::KeepAsr);
        assert_eq!(rewrite_decide(-0.1, &[0.4], -1.0, -0.5), Action::Rescore(0));
        assert_eq!(rewrite_decide(0.0, &s, f64::INFINITY, f64::INFINITY), Action::KeepAsr);
        assert_eq!(rewrite_decide(-0.1, &s, -1.0, f64::INFINITY), Action::Rescore(1));
    }

    #[test]
    fn apply_action_picks_text() {
        let h = |w: &str| Hypothesis { words: crate::metrics::words(w), acoustic_logp: 0.0, firstpass_lm_logp: 0.0 };
        let rec = NBestRecord {
            query_id: "music-1".into(),
            reference: crate::metrics::words("a b"),
            hypotheses: vec![h("a c"), h("a b")],
        };
        let rw = crate::metrics::words("x");
        assert_eq!(apply_action(Action::KeepAsr, &rec, &rw), crate::metrics::words("a c"));
        assert_eq!(apply_action(Action::Rescore(1), &rec, &rw), crate::metrics::words("a b"));
        assert_eq!(apply_action(Action::Rewrite, &rec, &rw), rw);
    }

    #[test]
    fn monotone_transform_keeps_argmax() {
        let logits = [0.3, -1.2, 2.5, 2.5, 0.0];
        let s: Vec<f64> = logits.iter().map(|&x| crate::tensor::sigmoid(x)).collect();
        let t: Vec<f64> = logits.iter().map(|&x| crate::tensor::sigmoid(3.0 * x + 1.0)).collect();
        assert_eq!(argmax_first(&s), argmax_first(&t));
        assert_eq!(argmax_first(&s), Some(2));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::new(tiny(Variant::Tra), 8).unwrap();
        m.save(dir.path()).unwrap();
        let back = Model::load(dir.path()).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.params.store, m.params.store);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn scores_permute_with_hypotheses(seed in 0u64..10_000, n in 1usize..5) {
            let m = Model::new(tiny(Variant::Tra), 11).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let hyps = random_hyps(&mut rng, n, 20);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.rotate_left(1);
            perm.reverse();
            let shuffled: Vec<Vec<u32>> = perm.iter().map(|&i| hyps[i].clone()).collect();
            let a = m.infer(&hyps).unwrap();
            let b = m.infer(&shuffled).unwrap();
            let (sa, sb) = (a.scores.unwrap().scores, b.scores.unwrap().scores);
            prop_assert!(sa.iter().all(|&v| v > 0.0 && v < 1.0));
            prop_assert_eq!(sa.len(), n);
            for (k, &i) in perm.iter().enumerate() {
                prop_assert!((sb[k] - sa[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn tr_probabilities_sum_to_one(seed in 0u64..10_000, n in 1usize..5) {
            let m = Model::new(tiny(Variant::Tr), 12).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let hyps = random_hyps(&mut rng, n, 20);
            let mut g = Graph::inference();
            let enc = m.encode(&mut g, &hyps).unwrap();
            let p = m.score_nbest_tr(&mut g, &enc, &hyps).unwrap();
            prop_assert!((g.value(p).sum() - 1.0).abs() < 1e-9);
        }
    }
}
