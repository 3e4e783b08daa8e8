//! Linear score interpolation over N-best candidates, weight tuning with
//! Powell's direction-set method, and the rescore/rewrite threshold search.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::NBestRecord;
use crate::error::{Error, Result};
use crate::metrics::{self, WerAccumulator};
use crate::parallel::par_map;

pub const SIGNAL_NAMES: [&str; 4] = ["am", "lm", "rescorer", "lm_cost_plus"];

/// Per-candidate features combined by a [`WeightVector`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SignalVector {
    pub acoustic_logp: f64,
    pub firstpass_lm_logp: f64,
    pub rescorer_logp: f64,
    pub lm_cost_plus: f64,
}

impl SignalVector {
    pub fn values(&self) -> [f64; 4] {
        [self.acoustic_logp, self.firstpass_lm_logp, self.rescorer_logp, self.lm_cost_plus]
    }

    /// Signals of an injected rewrite: no ASR scores, only the generative
    /// log-likelihood.
    pub fn rewrite(lm_cost_plus: f64) -> Self {
        Self { lm_cost_plus, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(pub Vec<f64>);

impl WeightVector {
    /// Pure acoustic score: reproduces the ASR 1-best.
    pub fn asr() -> Self {
        Self(vec![1.0, 0.0, 0.0, 0.0])
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, w) in self.0.iter().enumerate() {
            let name = SIGNAL_NAMES.get(i).copied().unwrap_or("extra");
            let _ = writeln!(s, "{name}={w}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut w = vec![0.0; SIGNAL_NAMES.len()];
        let mut seen = [false; 4];
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("weights: expected key=value, got {line:?}")))?;
            let i = SIGNAL_NAMES
                .iter()
                .position(|n| *n == k.trim())
                .ok_or_else(|| Error::Config(format!("weights: unknown signal {k:?}")))?;
            w[i] = v.trim().parse().map_err(|e| Error::Config(format!("weights {k}: {e}")))?;
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Config("weights file must list all four signals".into()));
        }
        Ok(Self(w))
    }
}

pub fn combine(signals: &SignalVector, w: &WeightVector) -> Result<f64> {
    if w.0.len() != 4 {
        return Err(Error::Usage(format!("{} weights for 4 signals", w.0.len())));
    }
    Ok(signals.values().iter().zip(&w.0).map(|(s, w)| s * w).sum())
}

/// One selectable row: the ASR hypotheses in rank order, optionally followed
/// by a rewrite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub words: Vec<String>,
    pub signals: SignalVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRecord {
    pub query_id: String,
    pub reference: Vec<String>,
    pub candidates: Vec<Candidate>,
}

impl ScoredRecord {
    /// Candidates from a record's hypotheses with one rescorer value each.
    pub fn from_record(record: &NBestRecord, rescorer: &[f64]) -> Result<Self> {
        if rescorer.len() != record.n() {
            return Err(Error::Usage(format!("{} rescorer values for {} hypotheses", rescorer.len(), record.n())));
        }
        Ok(Self {
            query_id: record.query_id.clone(),
            reference: record.reference.clone(),
            candidates: record
                .hypotheses
                .iter()
                .zip(rescorer)
                .map(|(h, &r)| Candidate {
                    words: h.words.clone(),
                    signals: SignalVector {
                        acoustic_logp: h.acoustic_logp,
                        firstpass_lm_logp: h.firstpass_lm_logp,
                        rescorer_logp: r,
                        lm_cost_plus: 0.0,
                    },
                })
                .collect(),
        })
    }

    /// Appends a rewrite candidate unless its text is already present.
    pub fn inject_rewrite(&mut self, words: Vec<String>, lm_cost_plus: f64) {
        if self.candidates.iter().any(|c| c.words == words) {
            return;
        }
        self.candidates.push(Candidate { words, signals: SignalVector::rewrite(lm_cost_plus) });
    }

    pub fn domain(&self) -> &str {
        self.query_id.split('-').next().unwrap_or("")
    }
}

/// Highest combined score; ties go to the earlier (better ASR rank) row.
pub fn select(candidates: &[Candidate], w: &WeightVector) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let s = combine(&c.signals, w)?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i).ok_or_else(|| Error::Input("record without candidates".into()))
}

/// Corpus WER of the rows chosen by `w`.
pub fn interpolated_wer(records: &[ScoredRecord], w: &WeightVector) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Input("no records to score".into()));
    }
    let mut acc = WerAccumulator::default();
    for r in records {
        let i = select(&r.candidates, w)?;
        acc.add(&metrics::edit_stats(&r.candidates[i].words, &r.reference));
    }
    Ok(acc.wer())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LineSearch {
    /// Bracketing followed by Brent's parabolic search; for smooth
    /// objectives.
    Brent { tol: f64 },
    /// Symmetric log-spaced scan plus two local refinements; for piecewise
    /// constant objectives.
    Scan { min_step: f64, max_step: f64, points: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowellOptions {
    /// Stop when one sweep improves the objective by less than this.
    pub tol: f64,
    pub max_iters: usize,
    pub line: LineSearch,
}

impl Default for PowellOptions {
    fn default() -> Self {
        Self { tol: 1e-12, max_iters: 50, line: LineSearch::Brent { tol: 1e-7 } }
    }
}

impl PowellOptions {
    /// Settings for a word-error-rate objective.
    pub fn for_wer() -> Self {
        Self { tol: 1e-9, max_iters: 20, line: LineSearch::Scan { min_step: 1e-3, max_step: 100.0, points: 11 } }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowellResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub iterations: usize,
    /// False when `max_iters` ran out first.
    pub converged: bool,
    /// Best value after each sweep.
    pub trace: Vec<f64>,
}

struct Counted<F> {
    f: F,
    evals: usize,
    best_x: Vec<f64>,
    best_v: f64,
}

impl<F: FnMut(&[f64]) -> f64> Counted<F> {
    fn eval(&mut self, x: &[f64]) -> f64 {
        self.evals += 1;
        let v = (self.f)(x);
        if v < self.best_v {
            self.best_v = v;
            self.best_x = x.to_vec();
        }
        v
    }

    fn along(&mut self, p: &[f64], d: &[f64], t: f64) -> f64 {
        let x: Vec<f64> = p.iter().zip(d).map(|(a, b)| a + t * b).collect();
        self.eval(&x)
    }
}

const GOLD: f64 = 1.618_033_988_749_895;
const CGOLD: f64 = 0.381_966_011_250_105_1;
const TINY: f64 = 1e-20;

/// Brackets a minimum along `d` from `p` (where the value is `f0`).
fn bracket<F: FnMut(&[f64]) -> f64>(
    c: &mut Counted<F>,
    p: &[f64],
    d: &[f64],
    f0: f64,
) -> (f64, f64, f64, f64, f64, f64) {
    let (mut ax, mut bx) = (0.0, 1.0);
    let (mut fa, mut fb) = (f0, c.along(p, d, bx));
    if fb > fa {
        std::mem::swap(&mut ax, &mut bx);
        std::mem::swap(&mut fa, &mut fb);
    }
    let mut cx = bx + GOLD * (bx - ax);
    let mut fc = c.along(p, d, cx);
    let mut guard = 0;
    while fb > fc && guard < 60 {
        guard += 1;
        let r = (bx - ax) * (fb - fc);
        let q = (bx - cx) * (fb - fa);
        let denom = 2.0 * (q - r).abs().max(TINY).copysign(q - r);
        let mut u = bx - ((bx - cx) * q - (bx - ax) * r) / denom;
        let ulim = bx + 100.0 * (cx - bx);
        let mut fu;
        if (bx - u) * (u - cx) > 0.0 {
            fu = c.along(p, d, u);
            if fu < fc {
                return (bx, u, cx, fb, fu, fc);
            } else if fu > fb {
                return (ax, bx, u, fa, fb, fu);
            }
            u = cx + GOLD * (cx - bx);
            fu = c.along(p, d, u);
        } else if (cx - u) * (u - ulim) > 0.0 {
            fu = c.along(p, d, u);
            if fu < fc {
                bx = cx;
                cx = u;
                u = cx + GOLD * (cx - bx);
                fb = fc;
                fc = fu;
                fu = c.along(p, d, u);
            }
        } else if (u - ulim) * (ulim - cx) >= 0.0 {
            u = ulim;
            fu = c.along(p, d, u);
        } else {
            u = cx + GOLD * (cx - bx);
            fu = c.along(p, d, u);
        }
        ax = bx;
        bx = cx;
        cx = u;
        fa = fb;
        fb = fc;
        fc = fu;
    }
    (ax, bx, cx, fa, fb, fc)
}

/// Brent's method on a bracket; returns `(t, f(t))`.
fn brent<F: FnMut(&[f64]) -> f64>(
    c: &mut Counted<F>,
    p: &[f64],
    d: &[f64],
    br: (f64, f64, f64, f64, f64, f64),
    tol: f64,
) -> (f64, f64) {
    let (ax, bx, cx, fa, fbx, fc) = br;
    let (mut a, mut b) = if ax < cx { (ax, cx) } else { (cx, ax) };
    // seed the parabola with the bracket ends so the first step can be a fit
    let ((mut w, mut fw), (mut v, mut fv)) = if fa <= fc { ((ax, fa), (cx, fc)) } else { ((cx, fc), (ax, fa)) };
    let (mut x, mut fx) = (bx, fbx);
    let (mut dstep, mut e) = (0.0f64, b - a);
    for _ in 0..100 {
        let xm = 0.5 * (a + b);
        let tol1 = tol * x.abs() + 1e-10;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut pp = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                pp = -pp;
            }
            q = q.abs();
            let etemp = e;
            e = dstep;
            if pp.abs() >= (0.5 * q * etemp).abs() || pp <= q * (a - x) || pp >= q * (b - x) {
                e = if x >= xm { a - x } else { b - x };
                dstep = CGOLD * e;
            } else {
                dstep = pp / q;
                let u = x + dstep;
                if u - a < tol2 || b - u < tol2 {
                    dstep = tol1.copysign(xm - x);
                }
            }
        } else {
            e = if x >= xm { a - x } else { b - x };
            dstep = CGOLD * e;
        }
        let u = if dstep.abs() >= tol1 { x + dstep } else { x + tol1.copysign(dstep) };
        let fu = c.along(p, d, u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            w = x;
            x = u;
            fv = fw;
            fw = fx;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                w = u;
                fv = fw;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, fx)
}

/// Coarse scan for piecewise-constant objectives. Only strict improvements
/// move the point, so flat regions keep `t = 0`.
fn scan<F: FnMut(&[f64]) -> f64>(
    c: &mut Counted<F>,
    p: &[f64],
    d: &[f64],
    f0: f64,
    min_step: f64,
    max_step: f64,
    points: usize,
) -> (f64, f64) {
    let points = points.max(2);
    let ratio = (max_step / min_step).powf(1.0 / (points - 1) as f64);
    let mut steps: Vec<f64> = (0..points).map(|i| min_step * ratio.powi(i as i32)).collect();
    steps.extend(steps.clone().into_iter().map(|s| -s));
    let (mut best_t, mut best_f) = (0.0, f0);
    for &t in &steps {
        let f = c.along(p, d, t);
        if f < best_f {
            best_t = t;
            best_f = f;
        }
    }
    // two rounds of local refinement around the best step
    let mut width = if best_t == 0.0 { min_step } else { best_t.abs() * (ratio - 1.0) };
    for _ in 0..2 {
        let centre = best_t;
        for k in 1..=4 {
            for sign in [-1.0, 1.0] {
                let t = centre + sign * width * k as f64 / 4.0;
                let f = c.along(p, d, t);
                if f < best_f {
                    best_t = t;
                    best_f = f;
                }
            }
        }
        width /= 4.0;
    }
    (best_t, best_f)
}

fn line_min<F: FnMut(&[f64]) -> f64>(c: &mut Counted<F>, p: &mut [f64], d: &[f64], f0: f64, line: LineSearch) -> f64 {
    let (t, f) = match line {
        LineSearch::Brent { tol } => {
            let br = bracket(c, p, d, f0);
            brent(c, p, d, br, tol)
        }
        LineSearch::Scan { min_step, max_step, points } => scan(c, p, d, f0, min_step, max_step, points),
    };
    if f < f0 {
        for (pi, di) in p.iter_mut().zip(d) {
            *pi += t * di;
        }
        f
    } else {
        f0
    }
}

/// Powell's direction-set minimization. The returned point is the best one
/// evaluated, so its value never exceeds the value at `w0`.
pub fn powell_optimize<F>(objective: F, w0: &[f64], opts: &PowellOptions) -> PowellResult
where
    F: FnMut(&[f64]) -> f64,
{
    let n = w0.len();
    let mut c = Counted { f: objective, evals: 0, best_x: w0.to_vec(), best_v: f64::INFINITY };
    let mut p = w0.to_vec();
    let mut fret = c.eval(&p);
    let mut dirs: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let mut pt = p.clone();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        iterations += 1;
        let fp = fret;
        let (mut ibig, mut del) = (0, 0.0);
        for (i, d) in dirs.clone().iter().enumerate() {
            let before = fret;
            fret = line_min(&mut c, &mut p, d, fret, opts.line);
            if before - fret > del {
                del = before - fret;
                ibig = i;
            }
        }
        trace.push(c.best_v);
        if fp - fret <= opts.tol {
            converged = true;
            break;
        }
        let ptt: Vec<f64> = p.iter().zip(&pt).map(|(a, b)| 2.0 * a - b).collect();
        let xit: Vec<f64> = p.iter().zip(&pt).map(|(a, b)| a - b).collect();
        pt.clone_from(&p);
        let fptt = c.eval(&ptt);
        if fptt < fp {
            let t = 2.0 * (fp - 2.0 * fret + fptt) * (fp - fret - del).powi(2) - del * (fp - fptt).powi(2);
            if t < 0.0 {
                fret = line_min(&mut c, &mut p, &xit, fret, opts.line);
                dirs[ibig] = dirs[n - 1].clone();
                dirs[n - 1] = xit;
            }
        }
    }
    PowellResult { x: c.best_x, value: c.best_v, evaluations: c.evals, iterations, converged, trace }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    pub weights: WeightVector,
    pub initial_wer: f64,
    pub wer: f64,
    pub powell: PowellResult,
}

/// Minimizes dev-set WER over the interpolation weights, starting at `w0`.
/// Dimensions listed in `frozen` keep their starting value.
pub fn tune_weights(dev: &[ScoredRecord], w0: &WeightVector, frozen: &[usize]) -> Result<TuneResult> {
    if dev.is_empty() {
        return Err(Error::Input("tuning needs a non-empty dev set".into()));
    }
    if w0.0.len() != 4 {
        return Err(Error::Usage(format!("{} starting weights for 4 signals", w0.0.len())));
    }
    let free: Vec<usize> = (0..4).filter(|i| !frozen.contains(i)).collect();
    let expand = |x: &[f64]| {
        let mut w = w0.0.clone();
        for (k, &i) in free.iter().enumerate() {
            w[i] = x[k];
        }
        WeightVector(w)
    };
    let initial_wer = interpolated_wer(dev, w0)?;
    let start: Vec<f64> = free.iter().map(|&i| w0.0[i]).collect();
    let objective = |x: &[f64]| interpolated_wer(dev, &expand(x)).unwrap_or(f64::INFINITY);
    let powell = powell_optimize(objective, &start, &PowellOptions::for_wer());
    let weights = expand(&powell.x);
    let wer = interpolated_wer(dev, &weights)?;
    Ok(TuneResult { weights, initial_wer, wer, powell })
}

/// Word errors of each possible outcome for one record, precomputed so the
/// threshold grid search only does arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRecord {
    pub mean_logp: f64,
    pub n: usize,
    pub ref_len: usize,
    pub asr_errors: usize,
    pub rescore_errors: usize,
    pub rewrite_errors: usize,
}

impl DecisionRecord {
    fn errors(&self, rescore_at: f64, rewrite_at: f64) -> usize {
        if !(self.mean_logp > rescore_at) {
            self.asr_errors
        } else if self.mean_logp > rewrite_at && self.n > 1 {
            self.rewrite_errors
        } else {
            self.rescore_errors
        }
    }
}

pub fn thresholded_wer(records: &[DecisionRecord], rescore_at: f64, rewrite_at: f64) -> f64 {
    let errors: usize = records.iter().map(|r| r.errors(rescore_at, rewrite_at)).sum();
    let words: usize = records.iter().map(|r| r.ref_len).sum();
    if words == 0 {
        return if errors == 0 { 0.0 } else { f64::INFINITY };
    }
    errors as f64 / words as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdChoice {
    pub rescore: f64,
    pub rewrite: f64,
    pub in_domain_wer: f64,
    pub all_domain_wer: f64,
    /// True when no finite threshold kept all-domain WER at the baseline.
    pub fallback: bool,
}

/// The default candidate grid: -3.0 to 0.0 in steps of 0.1.
pub fn default_grid() -> Vec<f64> {
    (-30..=0).map(|i| i as f64 / 10.0).collect()
}

/// Picks the rescore threshold first (rewriting off), then the rewrite
/// threshold above it. Each minimizes in-domain WER subject to all-domain
/// WER not exceeding the untouched ASR output. Rescore ties keep the
/// smaller value, which leaves the rewrite search the widest range; rewrite
/// ties keep the larger, more conservative value.
pub fn grid_search_thresholds(
    dev_in: &[DecisionRecord],
    dev_all: &[DecisionRecord],
    grid: &[f64],
) -> Result<ThresholdChoice> {
    if dev_in.is_empty() || dev_all.is_empty() {
        return Err(Error::Input("threshold search needs both dev sets".into()));
    }
    if grid.iter().any(|g| g.is_nan()) {
        return Err(Error::Config("threshold grid holds NaN".into()));
    }
    let inf = f64::INFINITY;
    let baseline = thresholded_wer(dev_all, inf, inf);
    let mut cands: Vec<f64> = grid.to_vec();
    cands.sort_by(|a, b| b.total_cmp(a));
    cands.dedup();

    // Candidates arrive in descending order and start from the never-act
    // choice; `prefer_smaller` lets equal in-domain WER move further down.
    let pick = |options: &mut dyn Iterator<Item = f64>,
                eval: &dyn Fn(f64) -> (f64, f64),
                prefer_smaller: bool|
     -> (f64, bool) {
        let (mut best, mut best_in) = (inf, eval(inf).0);
        let mut any_finite = false;
        for t in options {
            let (w_in, w_all) = eval(t);
            if w_all <= baseline + 1e-12 {
                any_finite = true;
                let better = w_in < best_in - 1e-12;
                let tie = (w_in - best_in).abs() <= 1e-12 && best.is_finite();
                if better || (prefer_smaller && tie) {
                    best = t;
                    best_in = w_in;
                }
            }
        }
        (best, any_finite)
    };

    let (rescore, feasible_r) = pick(
        &mut cands.iter().copied().filter(|t| t.is_finite()),
        &|t| (thresholded_wer(dev_in, t, inf), thresholded_wer(dev_all, t, inf)),
        true,
    );
    let rewrite = if rescore.is_finite() {
        pick(
            &mut cands.iter().copied().filter(|&t| t.is_finite() && t > rescore),
            &|t| (thresholded_wer(dev_in, rescore, t), thresholded_wer(dev_all, rescore, t)),
            false,
        )
        .0
    } else {
        inf
    };
    Ok(ThresholdChoice {
        rescore,
        rewrite,
        in_domain_wer: thresholded_wer(dev_in, rescore, rewrite),
        all_domain_wer: thresholded_wer(dev_all, rescore, rewrite),
        fallback: !feasible_r,
    })
}

#[derive(Serialize, Deserialize)]
struct JsonSignals {
    id: String,
    #[serde(rename = "ref")]
    reference: String,
    rows: Vec<JsonRow>,
}

#[derive(Serialize, Deserialize)]
struct JsonRow {
    text: String,
    am: f64,
    lm: f64,
    rescorer: f64,
    lm_cost_plus: f64,
}

pub fn write_signals(records: &[ScoredRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in records {
        let j = JsonSignals {
            id: r.query_id.clone(),
            reference: r.reference.join(" "),
            rows: r
                .candidates
                .iter()
                .map(|c| JsonRow {
                    text: c.words.join(" "),
                    am: c.signals.acoustic_logp,
                    lm: c.signals.firstpass_lm_logp,
                    rescorer: c.signals.rescorer_logp,
                    lm_cost_plus: c.signals.lm_cost_plus,
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&j).expect("plain data serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_signals(path: &Path) -> Result<Vec<ScoredRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let j: JsonSignals = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(ScoredRecord {
            query_id: j.id,
            reference: metrics::words(&j.reference),
            candidates: j
                .rows
                .into_iter()
                .map(|r| Candidate {
                    words: metrics::words(&r.text),
                    signals: SignalVector {
                        acoustic_logp: r.am,
                        firstpass_lm_logp: r.lm,
                        rescorer_logp: r.rescorer,
                        lm_cost_plus: r.lm_cost_plus,
                    },
                })
                .collect(),
        });
    }
    Ok(out)
}

/// Scores every record's candidates in parallel with `f`.
pub fn score_records<F>(records: &[NBestRecord], f: F) -> Result<Vec<ScoredRecord>>
where
    F: Fn(&NBestRecord) -> Result<Vec<f64>> + Sync,
{
    par_map(records, |_, r| ScoredRecord::from_record(r, &f(r)?)).into_iter().collect()
}
