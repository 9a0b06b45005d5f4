//! One acoustic tokenizer layer: initialization by uniform cutting and
//! k-means, segmental training that alternates maximum-likelihood parameter
//! estimates with Viterbi state realignment, and token-loop decoding.
//!
//! The decoding objective is the joint score of a labeling: every segment
//! pays a uniform 1/n token prior at entry, per-frame emission and
//! self-loop/advance transition scores inside the left-to-right HMM, and the
//! exit probability of the final state at its last frame. Training given a
//! fixed alignment produces the exact constrained maximizer of that same
//! objective (variances floored, loop probabilities clamped), and `fit_layer`
//! warm-starts each epoch's alignment from the previous decode, so the
//! per-epoch corpus log-likelihood is non-decreasing.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpusio::ModelFile;
use crate::error::{Error, Result};
use crate::types::{FeatureSet, Labeling, LayerId, Segment};

/// Variance floor for state Gaussians, matched to CMVN-scaled features.
pub const VAR_FLOOR: f64 = 1e-4;
/// Clamp range for per-state self-loop probabilities.
pub const LOOP_MIN: f64 = 0.05;
pub const LOOP_MAX: f64 = 0.95;
/// Target segment length (frames) for the uniform-cut initialization.
pub const INIT_SEGMENT_FRAMES: usize = 10;
/// Viterbi realignment passes inside one training call.
const REALIGN_PASSES: usize = 3;
/// Lloyd iteration cap for the k-means initializer.
const KMEANS_MAX_ITERS: usize = 50;

/// A strictly left-to-right HMM with diagonal-covariance Gaussian states.
#[derive(Clone, PartialEq, Debug)]
pub struct TokenHmm {
    /// State means, `m x d`.
    pub means: Array2<f64>,
    /// State variances, `m x d`, floored at [`VAR_FLOOR`].
    pub vars: Array2<f64>,
    /// Per-state self-loop probability in `[LOOP_MIN, LOOP_MAX]`.
    pub self_loop: Vec<f64>,
}

impl TokenHmm {
    pub fn states(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// Per-state additive constant of the diagonal Gaussian log-density.
    fn log_norm(&self) -> Vec<f64> {
        let d = self.dim() as f64;
        (0..self.states())
            .map(|s| {
                let ln_det: f64 = self.vars.row(s).iter().map(|v| v.ln()).sum();
                -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + ln_det)
            })
            .collect()
    }

    pub fn frame_loglik(&self, state: usize, x: ArrayView1<f64>) -> f64 {
        let mut quad = 0.0;
        for ((&v, &mu), &xi) in self
            .vars
            .row(state)
            .iter()
            .zip(self.means.row(state).iter())
            .zip(x.iter())
        {
            let diff = xi - mu;
            quad += diff * diff / v;
        }
        self.log_norm_one(state) - 0.5 * quad
    }

    fn log_norm_one(&self, state: usize) -> f64 {
        let d = self.dim() as f64;
        let ln_det: f64 = self.vars.row(state).iter().map(|v| v.ln()).sum();
        -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + ln_det)
    }

    fn validate(&self) -> Result<()> {
        if self.vars.iter().any(|&v| !(v >= VAR_FLOOR * 0.999999) || !v.is_finite()) {
            return Err(Error::invalid("token HMM variance below floor or non-finite"));
        }
        if self.means.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("token HMM mean non-finite"));
        }
        if self
            .self_loop
            .iter()
            .any(|&p| !(LOOP_MIN..=LOOP_MAX).contains(&p))
        {
            return Err(Error::invalid("token HMM self-loop outside clamp range"));
        }
        Ok(())
    }
}

/// One layer of token HMMs sharing hyperparameters `psi = (m, n)`.
#[derive(Clone, PartialEq, Debug)]
pub struct TokenSet {
    pub layer: LayerId,
    pub dim: usize,
    pub models: Vec<TokenHmm>,
}

impl TokenSet {
    pub fn validate(&self) -> Result<()> {
        if self.models.len() != self.layer.n || self.layer.n < 2 {
            return Err(Error::invalid(format!(
                "token set for layer {} must hold n >= 2 models",
                self.layer
            )));
        }
        for model in &self.models {
            if model.states() != self.layer.m || model.dim() != self.dim {
                return Err(Error::invalid(format!(
                    "token model shape mismatch in layer {}",
                    self.layer
                )));
            }
            model.validate()?;
        }
        Ok(())
    }

    pub fn to_model_file(&self) -> ModelFile {
        let mut f = ModelFile::new("tokenset", 1);
        f.push_meta("m", self.layer.m);
        f.push_meta("n", self.layer.n);
        f.push_meta("dim", self.dim);
        for model in &self.models {
            f.floats.extend(model.means.iter());
            f.floats.extend(model.vars.iter());
            f.floats.extend(model.self_loop.iter());
        }
        f
    }

    pub fn from_model_file(f: &ModelFile) -> Result<TokenSet> {
        f.expect("tokenset", 1)?;
        let m = f.meta_usize("m")?;
        let n = f.meta_usize("n")?;
        let dim = f.meta_usize("dim")?;
        let per_model = 2 * m * dim + m;
        if f.floats.len() != n * per_model {
            return Err(Error::invalid("tokenset payload length mismatch"));
        }
        let mut models = Vec::with_capacity(n);
        for i in 0..n {
            let base = i * per_model;
            let means = Array2::from_shape_vec((m, dim), f.floats[base..base + m * dim].to_vec())
                .expect("shape checked");
            let vars = Array2::from_shape_vec(
                (m, dim),
                f.floats[base + m * dim..base + 2 * m * dim].to_vec(),
            )
            .expect("shape checked");
            let self_loop = f.floats[base + 2 * m * dim..base + per_model].to_vec();
            models.push(TokenHmm {
                means,
                vars,
                self_loop,
            });
        }
        let set = TokenSet {
            layer: LayerId::new(m, n),
            dim,
            models,
        };
        set.validate()?;
        Ok(set)
    }
}

/// Per-frame state indices for every utterance, as produced by decoding.
pub type StateAlignment = BTreeMap<String, Vec<usize>>;

/// Decoding result for one utterance.
#[derive(Clone, PartialEq, Debug)]
pub struct Decoded {
    pub segments: Vec<Segment>,
    /// Within-token state index per frame.
    pub states: Vec<usize>,
    pub loglik: f64,
}

/// Uniform-cut plus k-means initialization of a layer's label set.
///
/// Each utterance is cut into contiguous chunks of `max(m, 10)` frames (the
/// last chunk absorbs any remainder); chunk mean vectors are clustered into
/// `n` groups with seeded k-means++ and each chunk is labeled by its cluster.
pub fn initialize(corpus: &FeatureSet, layer: LayerId, seed: u64) -> Result<Labeling> {
    if layer.n < 2 {
        return Err(Error::invalid("phonetic granularity n must be >= 2"));
    }
    if layer.m < 1 {
        return Err(Error::invalid("temporal granularity m must be >= 1"));
    }
    if corpus.is_empty() {
        return Err(Error::invalid("cannot initialize on an empty corpus"));
    }
    let target = layer.m.max(INIT_SEGMENT_FRAMES);
    let mut spans: Vec<(String, usize, usize)> = Vec::new();
    for (utt, seq) in corpus {
        let t_len = seq.len();
        if t_len < layer.m {
            return Err(Error::invalid(format!(
                "utterance `{utt}` has {t_len} frames, fewer than m = {}",
                layer.m
            )));
        }
        let chunks = (t_len / target).max(1);
        for c in 0..chunks {
            let start = c * target;
            let end = if c + 1 == chunks { t_len } else { start + target };
            spans.push((utt.clone(), start, end));
        }
    }
    if spans.len() < layer.n {
        return Err(Error::invalid(format!(
            "corpus yields {} segments, fewer than n = {}; choose a smaller n",
            spans.len(),
            layer.n
        )));
    }
    let dim = corpus.values().next().expect("non-empty").dim();
    let mut points = Array2::zeros((spans.len(), dim));
    for (i, (utt, start, end)) in spans.iter().enumerate() {
        let seq = &corpus[utt];
        for t in *start..*end {
            for j in 0..dim {
                points[[i, j]] += seq.data[[t, j]] as f64;
            }
        }
        let inv = 1.0 / (*end - *start) as f64;
        for j in 0..dim {
            points[[i, j]] *= inv;
        }
    }
    let assignment = kmeans(&points, layer.n, seed);
    let mut labeling = Labeling::new(layer);
    for ((utt, start, end), &cluster) in spans.iter().zip(&assignment) {
        labeling
            .utts
            .entry(utt.clone())
            .or_default()
            .push(Segment::new(cluster, *start, *end));
    }
    Ok(labeling)
}

/// Seeded k-means++ with Lloyd refinement; deterministic for a given seed.
fn kmeans(points: &Array2<f64>, k: usize, seed: u64) -> Vec<usize> {
    let npoints = points.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist2 = |a: ArrayView1<f64>, b: ArrayView1<f64>| -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
    };

    // k-means++ seeding.
    let mut centers: Vec<usize> = vec![rng.random_range(0..npoints)];
    let mut best_d2: Vec<f64> = (0..npoints)
        .map(|i| dist2(points.row(i), points.row(centers[0])))
        .collect();
    while centers.len() < k {
        let total: f64 = best_d2.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..npoints)
        } else {
            let r = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = npoints - 1;
            for (i, &d) in best_d2.iter().enumerate() {
                acc += d;
                if acc >= r {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centers.push(next);
        for i in 0..npoints {
            let d = dist2(points.row(i), points.row(next));
            if d < best_d2[i] {
                best_d2[i] = d;
            }
        }
    }
    let mut means: Array2<f64> = Array2::zeros((k, points.ncols()));
    for (c, &idx) in centers.iter().enumerate() {
        means.row_mut(c).assign(&points.row(idx));
    }

    let mut assign = vec![0usize; npoints];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for i in 0..npoints {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d = dist2(points.row(i), means.row(c));
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut counts = vec![0usize; k];
        means.fill(0.0);
        for i in 0..npoints {
            counts[assign[i]] += 1;
            for j in 0..points.ncols() {
                means[[assign[i], j]] += points[[i, j]];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for j in 0..points.ncols() {
                    means[[c, j]] *= inv;
                }
            } else {
                // Re-seed an empty cluster with the point farthest from its
                // current center.
                let mut far = 0usize;
                let mut far_d = -1.0;
                for i in 0..npoints {
                    let d = dist2(points.row(i), means.row(assign[i]));
                    if d > far_d {
                        far_d = d;
                        far = i;
                    }
                }
                means.row_mut(c).assign(&points.row(far));
            }
        }
    }
    assign
}

struct SegRef {
    utt: String,
    start: usize,
    end: usize,
}

/// Token model optimization for a fixed label set: uniform state partition
/// (or a caller-provided warm alignment), then three passes of Viterbi state
/// realignment alternating with maximum-likelihood re-estimation.
pub fn train_models(corpus: &FeatureSet, labels: &Labeling) -> Result<TokenSet> {
    train_models_warm(corpus, labels, None)
}

/// As [`train_models`], warm-starting state boundaries from a previous
/// decode so that refitting never lowers the joint labeling score.
pub fn train_models_warm(
    corpus: &FeatureSet,
    labels: &Labeling,
    warm: Option<&StateAlignment>,
) -> Result<TokenSet> {
    train_models_inner(corpus, labels, warm, REALIGN_PASSES)
}

pub(crate) fn train_models_inner(
    corpus: &FeatureSet,
    labels: &Labeling,
    warm: Option<&StateAlignment>,
    realign_passes: usize,
) -> Result<TokenSet> {
    let layer = labels.layer;
    let counts = crate::types::frame_counts(corpus);
    labels.validate_tiling(|utt| counts.get(utt).copied())?;
    if labels.utts.len() != corpus.len() {
        return Err(Error::invalid("labeling does not cover the corpus"));
    }
    let dim = corpus.values().next().map(|s| s.dim()).unwrap_or(0);
    if dim == 0 {
        return Err(Error::invalid("corpus has zero-dimensional features"));
    }
    let corpus64: BTreeMap<&str, Array2<f64>> = corpus
        .iter()
        .map(|(k, v)| (k.as_str(), v.to_f64()))
        .collect();

    // Pool segments per token, in deterministic order.
    let mut segs: Vec<Vec<SegRef>> = (0..layer.n).map(|_| Vec::new()).collect();
    for (utt, utt_segs) in &labels.utts {
        for seg in utt_segs {
            segs[seg.token].push(SegRef {
                utt: utt.clone(),
                start: seg.start,
                end: seg.end,
            });
        }
    }

    let m = layer.m;
    // Initial state alignment per (token, segment).
    let mut aligns: Vec<Vec<Vec<usize>>> = Vec::with_capacity(layer.n);
    for token_segs in &segs {
        let mut token_aligns = Vec::with_capacity(token_segs.len());
        for seg in token_segs {
            let len = seg.end - seg.start;
            let align = match warm.and_then(|w| w.get(seg.utt.as_str())) {
                Some(states)
                    if states.len() == counts[seg.utt.as_str()]
                        && states[seg.start..seg.end].iter().all(|&s| s < m) =>
                {
                    states[seg.start..seg.end].to_vec()
                }
                _ => uniform_partition(len, m),
            };
            token_aligns.push(align);
        }
        aligns.push(token_aligns);
    }

    let mut models = estimate(&corpus64, &segs, &aligns, m, dim);
    for _ in 0..realign_passes {
        for (token, token_segs) in segs.iter().enumerate() {
            if let Some(model) = &models[token] {
                for (i, seg) in token_segs.iter().enumerate() {
                    let len = seg.end - seg.start;
                    if len >= m {
                        let x = &corpus64[seg.utt.as_str()];
                        aligns[token][i] = force_align(model, x, seg.start, seg.end).1;
                    }
                }
            }
        }
        models = estimate(&corpus64, &segs, &aligns, m, dim);
    }

    // Re-seed starved tokens by perturbing the most populated token's means.
    // The donor model is left untouched so the current labeling's score is
    // unchanged. Ties go to the lowest token id.
    let mut donor: Option<usize> = None;
    for t in 0..layer.n {
        if models[t].is_some() && donor.is_none_or(|d| segs[t].len() > segs[d].len()) {
            donor = Some(t);
        }
    }
    let donor = donor.ok_or_else(|| Error::invalid("every token is starved; nothing to train"))?;
    let donor_model = models[donor].clone().expect("donor is populated");
    let mut final_models = Vec::with_capacity(layer.n);
    for (token, model) in models.into_iter().enumerate() {
        match model {
            Some(model) => final_models.push(model),
            None => {
                let mut reseeded = donor_model.clone();
                let sigma = reseeded.vars.mapv(f64::sqrt);
                reseeded.means = &reseeded.means + &(sigma * 0.1);
                log::warn!(
                    "layer {layer}: token {token} had no segments; reseeded from token {donor}"
                );
                final_models.push(reseeded);
            }
        }
    }

    let set = TokenSet {
        layer,
        dim,
        models: final_models,
    };
    set.validate()?;
    Ok(set)
}

/// State of each local frame under the equal-share partition: state `s` owns
/// frames `[floor(s*len/m), floor((s+1)*len/m))`. For `len < m` some states
/// own nothing and are skipped.
fn uniform_partition(len: usize, m: usize) -> Vec<usize> {
    let mut states = vec![0usize; len];
    for s in 0..m {
        let lo = s * len / m;
        let hi = (s + 1) * len / m;
        for t in lo..hi {
            states[t] = s;
        }
    }
    states
}

/// ML estimates from the current alignment. Returns `None` for tokens with
/// no frames at all.
fn estimate(
    corpus64: &BTreeMap<&str, Array2<f64>>,
    segs: &[Vec<SegRef>],
    aligns: &[Vec<Vec<usize>>],
    m: usize,
    dim: usize,
) -> Vec<Option<TokenHmm>> {
    let mut out = Vec::with_capacity(segs.len());
    for (token_segs, token_aligns) in segs.iter().zip(aligns.iter()) {
        if token_segs.is_empty() {
            out.push(None);
            continue;
        }
        let mut count = vec![0f64; m];
        let mut occ = vec![0f64; m];
        let mut sum = Array2::<f64>::zeros((m, dim));
        let mut sumsq = Array2::<f64>::zeros((m, dim));
        for (seg, align) in token_segs.iter().zip(token_aligns.iter()) {
            let x = &corpus64[seg.utt.as_str()];
            let mut visited = vec![false; m];
            for (local, &s) in align.iter().enumerate() {
                let row = x.row(seg.start + local);
                count[s] += 1.0;
                if !visited[s] {
                    visited[s] = true;
                    occ[s] += 1.0;
                }
                for j in 0..dim {
                    sum[[s, j]] += row[j];
                    sumsq[[s, j]] += row[j] * row[j];
                }
            }
        }
        let mut means = Array2::<f64>::zeros((m, dim));
        let mut vars = Array2::<f64>::from_elem((m, dim), VAR_FLOOR);
        let mut self_loop = vec![0.5f64; m];
        let filled: Vec<usize> = (0..m).filter(|&s| count[s] > 0.0).collect();
        for &s in &filled {
            for j in 0..dim {
                let mean = sum[[s, j]] / count[s];
                means[[s, j]] = mean;
                vars[[s, j]] = (sumsq[[s, j]] / count[s] - mean * mean).max(VAR_FLOOR);
            }
            self_loop[s] = ((count[s] - occ[s]) / count[s]).clamp(LOOP_MIN, LOOP_MAX);
        }
        // States never visited (only possible when every segment is shorter
        // than m) borrow the nearest visited state's Gaussian.
        for s in 0..m {
            if count[s] == 0.0 {
                let nearest = filled
                    .iter()
                    .min_by_key(|&&f| (f as isize - s as isize).unsigned_abs())
                    .copied()
                    .expect("token has at least one frame");
                for j in 0..dim {
                    means[[s, j]] = means[[nearest, j]];
                    vars[[s, j]] = vars[[nearest, j]];
                }
                self_loop[s] = 0.5;
            }
        }
        out.push(Some(TokenHmm {
            means,
            vars,
            self_loop,
        }));
    }
    out
}

/// Viterbi forced alignment of frames `[start, end)` through all `m` states
/// in order. Returns the path score (emissions plus internal transitions)
/// and the per-frame state sequence. Requires `end - start >= m`.
fn force_align(
    model: &TokenHmm,
    x: &Array2<f64>,
    start: usize,
    end: usize,
) -> (f64, Vec<usize>) {
    let m = model.states();
    let len = end - start;
    debug_assert!(len >= m);
    let log_norm = model.log_norm();
    let emis = |t: usize, s: usize| -> f64 {
        let mut quad = 0.0;
        let row = x.row(start + t);
        for j in 0..model.dim() {
            let diff = row[j] - model.means[[s, j]];
            quad += diff * diff / model.vars[[s, j]];
        }
        log_norm[s] - 0.5 * quad
    };
    let neg = f64::NEG_INFINITY;
    let mut delta = vec![neg; m];
    let mut bp = vec![vec![0u8; m]; len];
    delta[0] = emis(0, 0);
    for t in 1..len {
        let mut next = vec![neg; m];
        for s in (0..m).rev() {
            let stay = if delta[s] > neg {
                delta[s] + model.self_loop[s].ln()
            } else {
                neg
            };
            let advance = if s > 0 && delta[s - 1] > neg {
                delta[s - 1] + (1.0 - model.self_loop[s - 1]).ln()
            } else {
                neg
            };
            if stay >= advance {
                next[s] = stay + emis(t, s);
                bp[t][s] = 0;
            } else {
                next[s] = advance + emis(t, s);
                bp[t][s] = 1;
            }
        }
        delta = next;
    }
    let mut states = vec![0usize; len];
    let mut s = m - 1;
    for t in (1..len).rev() {
        states[t] = s;
        if bp[t][s] == 1 {
            s -= 1;
        }
    }
    states[0] = s;
    debug_assert_eq!(states[0], 0);
    (delta[m - 1], states)
}

/// Token label optimization: Viterbi decoding over a uniform token loop.
/// Any token may follow any token with prior `1/n`; every segment pays the
/// final state's exit probability at its last frame.
pub fn decode(x: &Array2<f64>, tokens: &TokenSet) -> Result<Decoded> {
    tokens.validate()?;
    let (t_len, d) = x.dim();
    let (m, n) = (tokens.layer.m, tokens.layer.n);
    if d != tokens.dim {
        return Err(Error::invalid(format!(
            "feature dimension {d} does not match token set dimension {}",
            tokens.dim
        )));
    }
    if t_len < m {
        return Err(Error::invalid(format!(
            "utterance of {t_len} frames is shorter than m = {m}"
        )));
    }
    let neg = f64::NEG_INFINITY;
    let ln_prior = -(n as f64).ln();
    let log_norm: Vec<Vec<f64>> = tokens.models.iter().map(|mo| mo.log_norm()).collect();
    let ln_loop: Vec<Vec<f64>> = tokens
        .models
        .iter()
        .map(|mo| mo.self_loop.iter().map(|p| p.ln()).collect())
        .collect();
    let ln_adv: Vec<Vec<f64>> = tokens
        .models
        .iter()
        .map(|mo| mo.self_loop.iter().map(|p| (1.0 - p).ln()).collect())
        .collect();

    let idx = |k: usize, s: usize| k * m + s;
    let states = n * m;
    let mut delta = vec![neg; states];
    let mut emis_row = vec![0.0f64; states];
    // Backpointer codes: 0 self, 1 advance, 2 token entry.
    let mut bp = vec![0u8; t_len * states];
    let mut enter_from: Vec<usize> = vec![0; t_len];

    let fill_emissions = |t: usize, emis_row: &mut Vec<f64>| {
        let row = x.row(t);
        for (k, model) in tokens.models.iter().enumerate() {
            for s in 0..m {
                let mut quad = 0.0;
                for j in 0..d {
                    let diff = row[j] - model.means[[s, j]];
                    quad += diff * diff / model.vars[[s, j]];
                }
                emis_row[idx(k, s)] = log_norm[k][s] - 0.5 * quad;
            }
        }
    };

    fill_emissions(0, &mut emis_row);
    for k in 0..n {
        delta[idx(k, 0)] = ln_prior + emis_row[idx(k, 0)];
    }

    for t in 1..t_len {
        // Best completed token at t-1, for re-entry.
        let mut best_exit = neg;
        let mut best_exit_tok = 0usize;
        for k in 0..n {
            let v = delta[idx(k, m - 1)];
            if v > neg {
                let cand = v + ln_adv[k][m - 1];
                if cand > best_exit {
                    best_exit = cand;
                    best_exit_tok = k;
                }
            }
        }
        enter_from[t] = best_exit_tok;
        fill_emissions(t, &mut emis_row);
        let mut next = vec![neg; states];
        for k in 0..n {
            for s in 0..m {
                let i = idx(k, s);
                let mut best = if delta[i] > neg {
                    delta[i] + ln_loop[k][s]
                } else {
                    neg
                };
                let mut code = 0u8;
                if s > 0 && delta[i - 1] > neg {
                    let cand = delta[i - 1] + ln_adv[k][s - 1];
                    if cand > best {
                        best = cand;
                        code = 1;
                    }
                }
                if s == 0 && best_exit > neg {
                    let cand = best_exit + ln_prior;
                    if cand > best {
                        best = cand;
                        code = 2;
                    }
                }
                if best > neg {
                    next[i] = best + emis_row[i];
                    bp[t * states + i] = code;
                }
            }
        }
        delta = next;
    }

    let mut best_final = neg;
    let mut best_tok = 0usize;
    for k in 0..n {
        let v = delta[idx(k, m - 1)];
        if v > neg {
            let cand = v + ln_adv[k][m - 1];
            if cand > best_final {
                best_final = cand;
                best_tok = k;
            }
        }
    }
    if !best_final.is_finite() {
        return Err(Error::NonFinite(
            "decoding produced no finite-scoring path".into(),
        ));
    }

    // Backtrace.
    let mut token_path = vec![0usize; t_len];
    let mut state_path = vec![0usize; t_len];
    let mut k = best_tok;
    let mut s = m - 1;
    for t in (0..t_len).rev() {
        token_path[t] = k;
        state_path[t] = s;
        if t == 0 {
            break;
        }
        match bp[t * states + idx(k, s)] {
            0 => {}
            1 => s -= 1,
            _ => {
                k = enter_from[t];
                s = m - 1;
            }
        }
    }

    // A token-entry backpointer on the chosen path marks a segment boundary;
    // re-entering the same token id starts a new segment too.
    let mut segments = Vec::new();
    let mut start = 0usize;
    for t in 1..t_len {
        if bp[t * states + idx(token_path[t], state_path[t])] == 2 {
            segments.push(Segment::new(token_path[t - 1], start, t));
            start = t;
        }
    }
    segments.push(Segment::new(token_path[t_len - 1], start, t_len));
    Ok(Decoded {
        segments,
        states: state_path,
        loglik: best_final,
    })
}

/// Joint score of a given labeling under a token set: per-segment forced
/// alignment plus the same entry prior and exit costs used by [`decode`].
/// Every segment must be at least `m` frames long.
pub fn labeling_loglik(corpus: &FeatureSet, tokens: &TokenSet, labels: &Labeling) -> Result<f64> {
    tokens.validate()?;
    let (m, n) = (tokens.layer.m, tokens.layer.n);
    let ln_prior = -(n as f64).ln();
    let mut total = 0.0;
    for (utt, segs) in &labels.utts {
        let seq = corpus
            .get(utt)
            .ok_or_else(|| Error::invalid(format!("labeling covers unknown utterance `{utt}`")))?;
        let x = seq.to_f64();
        for seg in segs {
            if seg.len() < m {
                return Err(Error::invalid(format!(
                    "segment of {} frames in `{utt}` is shorter than m = {m}",
                    seg.len()
                )));
            }
            let model = &tokens.models[seg.token];
            let (score, _) = force_align(model, &x, seg.start, seg.end);
            total += ln_prior + score + (1.0 - model.self_loop[m - 1]).ln();
        }
    }
    Ok(total)
}

/// Decodes every utterance of a corpus; returns labeling, state alignments
/// and total log-likelihood.
pub fn decode_corpus(
    corpus: &FeatureSet,
    tokens: &TokenSet,
) -> Result<(Labeling, StateAlignment, f64)> {
    let mut labeling = Labeling::new(tokens.layer);
    let mut aligns = StateAlignment::new();
    let mut total = 0.0;
    for (utt, seq) in corpus {
        let decoded = decode(&seq.to_f64(), tokens)?;
        total += decoded.loglik;
        labeling.utts.insert(utt.clone(), decoded.segments);
        aligns.insert(utt.clone(), decoded.states);
    }
    Ok((labeling, aligns, total))
}

/// Result of fitting one tokenizer layer.
#[derive(Clone, Debug)]
pub struct LayerFit {
    pub tokens: TokenSet,
    pub labels: Labeling,
    /// Corpus log-likelihood after each epoch's decode.
    pub logliks: Vec<f64>,
}

/// Alternates token model optimization and token label optimization until
/// the labels stop changing or `max_epochs` is reached.
pub fn fit_layer(
    corpus: &FeatureSet,
    init: &Labeling,
    max_epochs: usize,
) -> Result<LayerFit> {
    if max_epochs == 0 {
        return Err(Error::invalid("max_epochs must be >= 1"));
    }
    let mut labels = init.clone();
    let mut aligns: Option<StateAlignment> = None;
    let mut logliks = Vec::new();
    let mut tokens = None;
    for _ in 0..max_epochs {
        let set = train_models_warm(corpus, &labels, aligns.as_ref())?;
        let (new_labels, new_aligns, ll) = decode_corpus(corpus, &set)?;
        logliks.push(ll);
        tokens = Some(set);
        let converged = new_labels == labels;
        labels = new_labels;
        aligns = Some(new_aligns);
        if converged {
            break;
        }
    }
    Ok(LayerFit {
        tokens: tokens.expect("at least one epoch ran"),
        labels,
        logliks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::FeatureSequence;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn const_seq(utt: &str, rows: Vec<Vec<f32>>) -> FeatureSequence {
        let dim = rows[0].len();
        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        FeatureSequence::new(
            utt,
            10,
            Array2::from_shape_vec((rows.len(), dim), flat).unwrap(),
        )
    }

    fn gauss_corpus(seed: u64, utts: usize, frames: usize, dim: usize) -> FeatureSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut corpus = FeatureSet::new();
        for u in 0..utts {
            let mut rows = Vec::new();
            for t in 0..frames {
                let center = if (t / 10) % 2 == 0 { -2.0 } else { 2.0 };
                let row: Vec<f32> = (0..dim)
                    .map(|_| (center + 0.3 * (rng.random::<f64>() - 0.5)) as f32)
                    .collect();
                rows.push(row);
            }
            corpus.insert(format!("u{u:02}"), const_seq(&format!("u{u:02}"), rows));
        }
        corpus
    }

    #[test]
    fn initialize_cuts_and_clusters() {
        let corpus = gauss_corpus(7, 2, 100, 3);
        let labeling = initialize(&corpus, LayerId::new(5, 4), 42).unwrap();
        let total: usize = labeling.utts.values().map(Vec::len).sum();
        assert_eq!(total, 20);
        for segs in labeling.utts.values() {
            assert!(segs.iter().all(|s| s.len() == 10));
            assert!(segs.iter().all(|s| s.token < 4));
        }
        labeling
            .validate_tiling(|u| corpus.get(u).map(|s| s.len()))
            .unwrap();
    }

    #[test]
    fn initialize_rejects_n_below_two() {
        let corpus = gauss_corpus(7, 1, 50, 2);
        assert!(initialize(&corpus, LayerId::new(3, 1), 0).is_err());
    }

    #[test]
    fn initialize_rejects_too_few_segments() {
        let corpus = gauss_corpus(7, 1, 20, 2);
        // 20 frames -> 2 chunks, n = 8 impossible.
        let err = initialize(&corpus, LayerId::new(3, 8), 0).unwrap_err();
        assert!(err.to_string().contains("smaller n"));
    }

    #[test]
    fn initialize_is_deterministic() {
        let corpus = gauss_corpus(9, 3, 70, 4);
        let a = initialize(&corpus, LayerId::new(3, 4), 11).unwrap();
        let b = initialize(&corpus, LayerId::new(3, 4), 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn initialize_separates_two_populations() {
        // Utterances alternate 10-frame runs near -2 and +2; k-means on chunk
        // means with n = 2 must separate them perfectly.
        let corpus = gauss_corpus(3, 2, 100, 3);
        let labeling = initialize(&corpus, LayerId::new(5, 2), 5).unwrap();
        for segs in labeling.utts.values() {
            let first = segs[0].token;
            for (i, seg) in segs.iter().enumerate() {
                if i % 2 == 0 {
                    assert_eq!(seg.token, first);
                } else {
                    assert_ne!(seg.token, first);
                }
            }
        }
    }

    #[test]
    fn first_pass_uniform_partition_means() {
        // One token, one 6-frame segment, m = 3: states own frame pairs.
        let corpus: FeatureSet = [(
            "u".to_string(),
            const_seq(
                "u",
                vec![
                    vec![0.0],
                    vec![1.0],
                    vec![10.0],
                    vec![11.0],
                    vec![20.0],
                    vec![21.0],
                ],
            ),
        )]
        .into();
        let mut labels = Labeling::new(LayerId::new(3, 2));
        labels
            .utts
            .insert("u".into(), vec![Segment::new(0, 0, 6)]);
        // Zero realignment passes exposes the first-pass estimates.
        let set = train_models_inner(&corpus, &labels, None, 0).unwrap();
        let model = &set.models[0];
        assert_abs_diff_eq!(model.means[[0, 0]], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(model.means[[1, 0]], 10.5, epsilon = 1e-12);
        assert_abs_diff_eq!(model.means[[2, 0]], 20.5, epsilon = 1e-12);
        // Each state: 2 frames, 1 occurrence -> loop 0.5.
        assert_abs_diff_eq!(model.self_loop[0], 0.5, epsilon = 1e-12);
    }

    fn sample_hmm(
        rng: &mut ChaCha8Rng,
        means: &[f64],
        stay: f64,
        min_len: usize,
    ) -> Vec<Vec<f32>> {
        let m = means.len();
        let mut rows = Vec::new();
        for &mu in means {
            loop {
                rows.push(vec![(mu + 0.05 * (rng.random::<f64>() - 0.5)) as f32]);
                if rng.random::<f64>() > stay {
                    break;
                }
            }
        }
        while rows.len() < min_len.max(m) {
            rows.push(vec![*means.last().unwrap() as f32]);
        }
        rows
    }

    #[test]
    fn training_recovers_known_state_means() {
        let truth = [-3.0, 0.0, 3.0];
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut corpus = FeatureSet::new();
        let mut labels = Labeling::new(LayerId::new(3, 2));
        for i in 0..200 {
            let utt = format!("s{i:03}");
            let rows = sample_hmm(&mut rng, &truth, 0.5, 3);
            let len = rows.len();
            corpus.insert(utt.clone(), const_seq(&utt, rows));
            // Alternate a second filler token so n >= 2 stays populated.
            labels.utts.insert(utt, vec![Segment::new(0, 0, len)]);
        }
        // Give token 1 a couple of segments from flat data.
        for i in 0..3 {
            let utt = format!("z{i}");
            corpus.insert(
                utt.clone(),
                const_seq(&utt, vec![vec![9.0], vec![9.0], vec![9.0], vec![9.0]]),
            );
            labels.utts.insert(utt, vec![Segment::new(1, 0, 4)]);
        }
        let set = train_models(&corpus, &labels).unwrap();
        let model = &set.models[0];
        for (s, &mu) in truth.iter().enumerate() {
            assert!(
                (model.means[[s, 0]] - mu).abs() < 0.1,
                "state {s}: {} vs {mu}",
                model.means[[s, 0]]
            );
        }
    }

    #[test]
    fn starved_token_is_reseeded() {
        let corpus = gauss_corpus(5, 4, 60, 2);
        let layer = LayerId::new(3, 8);
        let mut labels = Labeling::new(layer);
        for (i, (utt, seq)) in corpus.iter().enumerate() {
            // Use only tokens 0..6, leaving 5 unused... use token (i % 6),
            // skipping ids 6 and 7 entirely and id 5 later re-checked.
            let tok = [0, 1, 2, 3, 4, 6][i % 6];
            labels
                .utts
                .insert(utt.clone(), vec![Segment::new(tok, 0, seq.len())]);
        }
        let set = train_models(&corpus, &labels).unwrap();
        assert_eq!(set.models.len(), 8);
        set.validate().unwrap();
    }

    fn two_token_set(mu_a: f64, mu_b: f64) -> TokenSet {
        let model = |mu: f64| TokenHmm {
            means: array![[mu]],
            vars: array![[1.0]],
            self_loop: vec![0.5],
        };
        TokenSet {
            layer: LayerId::new(1, 2),
            dim: 1,
            models: vec![model(mu_a), model(mu_b)],
        }
    }

    #[test]
    fn decode_splits_two_level_sequence() {
        let set = two_token_set(0.0, 5.0);
        let x = array![[0.0], [0.0], [5.0], [5.0]];
        let out = decode(&x, &set).unwrap();
        assert_eq!(
            out.segments,
            vec![Segment::new(0, 0, 2), Segment::new(1, 2, 4)]
        );
    }

    #[test]
    fn decode_orders_token_loop_consistently() {
        // A sequence generated by one model decodes as a single segment.
        let set = two_token_set(-4.0, 4.0);
        let x = array![[4.1], [3.9], [4.0], [4.05], [3.95]];
        let out = decode(&x, &set).unwrap();
        assert_eq!(out.segments, vec![Segment::new(1, 0, 5)]);
        assert_eq!(out.states, vec![0; 5]);
    }

    #[test]
    fn decode_rejects_short_utterances_and_dim_mismatch() {
        let set = TokenSet {
            layer: LayerId::new(3, 2),
            dim: 1,
            models: vec![
                TokenHmm {
                    means: array![[0.0], [1.0], [2.0]],
                    vars: array![[1.0], [1.0], [1.0]],
                    self_loop: vec![0.5, 0.5, 0.5],
                },
                TokenHmm {
                    means: array![[5.0], [6.0], [7.0]],
                    vars: array![[1.0], [1.0], [1.0]],
                    self_loop: vec![0.5, 0.5, 0.5],
                },
            ],
        };
        assert!(decode(&array![[0.0], [1.0]], &set).is_err());
        assert!(decode(&array![[0.0, 1.0], [0.0, 1.0], [0.0, 1.0]], &set).is_err());
    }

    #[test]
    fn decode_dominates_training_labeling_score() {
        let corpus = gauss_corpus(21, 3, 60, 2);
        let init = initialize(&corpus, LayerId::new(3, 4), 1).unwrap();
        let tokens = train_models(&corpus, &init).unwrap();
        let (_, _, decode_ll) = decode_corpus(&corpus, &tokens).unwrap();
        let labeled_ll = labeling_loglik(&corpus, &tokens, &init).unwrap();
        assert!(
            decode_ll >= labeled_ll - 1e-9,
            "decode {decode_ll} < labeling {labeled_ll}"
        );
    }

    #[test]
    fn fit_layer_loglik_is_monotone() {
        let corpus = gauss_corpus(33, 4, 80, 3);
        let init = initialize(&corpus, LayerId::new(3, 4), 2).unwrap();
        let fit = fit_layer(&corpus, &init, 10).unwrap();
        for w in fit.logliks.windows(2) {
            assert!(
                w[1] >= w[0] - 1e-6,
                "log-likelihood decreased: {} -> {}",
                w[0],
                w[1]
            );
        }
        fit.labels
            .validate_tiling(|u| corpus.get(u).map(|s| s.len()))
            .unwrap();
    }

    #[test]
    fn fit_layer_converged_input_stops_after_one_epoch() {
        let corpus = gauss_corpus(11, 3, 60, 2);
        let init = initialize(&corpus, LayerId::new(3, 4), 3).unwrap();
        let fit = fit_layer(&corpus, &init, 10).unwrap();
        let refit = fit_layer(&corpus, &fit.labels, 10).unwrap();
        assert_eq!(refit.logliks.len(), 1, "fixed point should stop after one epoch");
        assert_eq!(refit.labels, fit.labels);
    }

    #[test]
    fn fit_layer_respects_epoch_bound() {
        let corpus = gauss_corpus(13, 3, 60, 2);
        let init = initialize(&corpus, LayerId::new(3, 4), 4).unwrap();
        let fit = fit_layer(&corpus, &init, 1).unwrap();
        assert_eq!(fit.logliks.len(), 1);
        fit.labels
            .validate_tiling(|u| corpus.get(u).map(|s| s.len()))
            .unwrap();
    }

    #[test]
    fn fit_is_deterministic_for_a_seed() {
        let corpus = gauss_corpus(15, 3, 70, 2);
        let run = || {
            let init = initialize(&corpus, LayerId::new(3, 4), 8).unwrap();
            fit_layer(&corpus, &init, 5).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.tokens.to_model_file(), b.tokens.to_model_file());
        assert_eq!(a.logliks, b.logliks);
    }

    #[test]
    fn tokenset_serialization_round_trips() {
        let corpus = gauss_corpus(19, 2, 60, 2);
        let init = initialize(&corpus, LayerId::new(3, 4), 6).unwrap();
        let set = train_models(&corpus, &init).unwrap();
        let file = set.to_model_file();
        let back = TokenSet::from_model_file(&file).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn trained_parameters_respect_floors_and_clamps() {
        let corpus = gauss_corpus(23, 3, 80, 2);
        let init = initialize(&corpus, LayerId::new(5, 4), 9).unwrap();
        let set = train_models(&corpus, &init).unwrap();
        for model in &set.models {
            assert!(model.vars.iter().all(|&v| v >= VAR_FLOOR));
            assert!(model
                .self_loop
                .iter()
                .all(|&p| (LOOP_MIN..=LOOP_MAX).contains(&p)));
        }
    }
}
