//! Mutual reinforcement across tokenizer layers: per-layer token boundaries
//! are fused into one joint segmentation, and the fused segments are
//! relabeled by LDA topic modeling over cross-layer bags of tokens. The
//! relabeled segmentation becomes the new initial label set for every layer.
//!
//! Boundary fusion: each layer contributes a binary boundary function over
//! the interior inter-frame positions, weighted proportionally to its state
//! count m (longer HMMs cut less often, so their cuts count more). The
//! weighted average is smoothed with a short kernel; peaks need a negative
//! discrete second difference, a local maximum, and height of at least
//! `theta` times the mean. Peaks closer than `merge_radius` keep the higher
//! one (ties keep the earlier), and cuts that would create segments shorter
//! than `min_len` frames are dropped left to right.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpusio::ModelFile;
use crate::error::{Error, Result};
use crate::types::{Labeling, LayerId, Segment};

pub const DEFAULT_BETA: f64 = 0.01;
pub const DEFAULT_SWEEPS: usize = 200;

pub fn default_alpha(topics: usize) -> f64 {
    50.0 / topics as f64
}

/// Peak-picking constants for boundary fusion; every value is overridable
/// from the pipeline configuration.
#[derive(Clone, Copy, Debug)]
pub struct FusionConfig {
    /// Centered smoothing kernel over the joint boundary function.
    pub kernel: [f64; 3],
    /// Relative height threshold: a peak needs `B >= theta * mean(B)`.
    pub theta: f64,
    /// Peaks closer than this many frames are merged.
    pub merge_radius: usize,
    /// Minimum fused segment length in frames.
    pub min_len: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            kernel: [0.25, 0.5, 0.25],
            theta: 1.0,
            merge_radius: 3,
            min_len: 3,
        }
    }
}

/// A joint segmentation: per utterance, the fused spans `[start, end)`.
pub type Segmentation = BTreeMap<String, Vec<(usize, usize)>>;

/// Fuses per-layer token boundaries into one segmentation per utterance.
/// `weights` defaults to `m / sum(m)` per layer.
pub fn fuse_boundaries(
    labelings: &[Labeling],
    weights: Option<&[f64]>,
    cfg: &FusionConfig,
) -> Result<Segmentation> {
    if labelings.is_empty() {
        return Err(Error::invalid("boundary fusion needs at least one layer"));
    }
    let utt_frames = consistent_frames(labelings)?;
    if labelings.len() == 1 {
        log::warn!("boundary fusion over a single layer returns its own segmentation");
        let only = &labelings[0];
        return Ok(only
            .utts
            .iter()
            .map(|(utt, segs)| {
                (
                    utt.clone(),
                    segs.iter().map(|s| (s.start, s.end)).collect(),
                )
            })
            .collect());
    }
    let weights: Vec<f64> = match weights {
        Some(w) => {
            if w.len() != labelings.len() {
                return Err(Error::invalid("one fusion weight per layer required"));
            }
            if w.iter().any(|&x| !(x > 0.0)) {
                return Err(Error::invalid("fusion weights must be positive"));
            }
            w.to_vec()
        }
        None => labelings.iter().map(|l| l.layer.m as f64).collect(),
    };
    let weight_sum: f64 = weights.iter().sum();

    let mut out = Segmentation::new();
    for (utt, &t_len) in &utt_frames {
        let cuts = if t_len >= 2 {
            let positions = t_len - 1; // interior cut positions 1..=t_len-1
            let mut joint = vec![0.0f64; positions];
            for (labeling, &w) in labelings.iter().zip(&weights) {
                for cut in labeling.boundaries(utt) {
                    joint[cut - 1] += w;
                }
            }
            for v in &mut joint {
                *v /= weight_sum;
            }
            pick_cuts(&joint, t_len, cfg)
        } else {
            Vec::new()
        };
        let mut spans = Vec::with_capacity(cuts.len() + 1);
        let mut start = 0usize;
        for cut in cuts {
            spans.push((start, cut));
            start = cut;
        }
        spans.push((start, t_len));
        out.insert(utt.clone(), spans);
    }
    Ok(out)
}

/// Peak picking over one utterance's joint boundary function. `joint[p]`
/// holds the mass of the cut between frames `p` and `p + 1`.
fn pick_cuts(joint: &[f64], t_len: usize, cfg: &FusionConfig) -> Vec<usize> {
    let positions = joint.len();
    let at = |v: &[f64], i: isize| -> f64 {
        if i < 0 || i as usize >= v.len() {
            0.0
        } else {
            v[i as usize]
        }
    };
    let smoothed: Vec<f64> = (0..positions as isize)
        .map(|p| {
            cfg.kernel[0] * at(joint, p - 1) + cfg.kernel[1] * at(joint, p) + cfg.kernel[2] * at(joint, p + 1)
        })
        .collect();
    let mean = smoothed.iter().sum::<f64>() / positions as f64;
    let threshold = cfg.theta * mean;

    let mut peaks: Vec<usize> = Vec::new();
    for p in 0..positions as isize {
        let here = at(&smoothed, p);
        let left = at(&smoothed, p - 1);
        let right = at(&smoothed, p + 1);
        let second_diff = left - 2.0 * here + right;
        if second_diff < 0.0 && here >= left && here >= right && here >= threshold && here > 0.0 {
            peaks.push(p as usize);
        }
    }

    // Merge close peaks, keeping the larger smoothed mass (earlier on ties).
    let mut kept: Vec<usize> = Vec::new();
    for &p in &peaks {
        match kept.last() {
            Some(&last) if p - last < cfg.merge_radius => {
                if smoothed[p] > smoothed[last] {
                    *kept.last_mut().expect("non-empty") = p;
                }
            }
            _ => kept.push(p),
        }
    }

    // Enforce the minimum segment length left to right.
    let mut cuts = Vec::new();
    let mut prev = 0usize;
    for p in kept {
        let cut = p + 1;
        if cut - prev >= cfg.min_len && t_len - cut >= cfg.min_len {
            cuts.push(cut);
            prev = cut;
        }
    }
    cuts
}

/// Frame counts per utterance, verified identical across all layers.
fn consistent_frames(labelings: &[Labeling]) -> Result<BTreeMap<String, usize>> {
    let mut frames: BTreeMap<String, usize> = BTreeMap::new();
    for l in labelings {
        l.validate_tiling(|_| None)?;
        for (utt, segs) in &l.utts {
            let t_len = segs.last().expect("validated non-empty").end;
            match frames.get(utt) {
                Some(&existing) if existing != t_len => {
                    return Err(Error::invalid(format!(
                        "utterance `{utt}` has inconsistent frame counts across layers"
                    )));
                }
                _ => {
                    frames.insert(utt.clone(), t_len);
                }
            }
        }
    }
    for l in labelings {
        if l.utts.len() != frames.len() {
            return Err(Error::invalid(format!(
                "layer {} does not cover every utterance",
                l.layer
            )));
        }
    }
    Ok(frames)
}

/// Bijection between (layer index, token id) pairs and flat LDA word ids.
#[derive(Clone, Debug)]
pub struct VocabMap {
    offsets: Vec<usize>,
    sizes: Vec<usize>,
}

impl VocabMap {
    pub fn build(layers: &[LayerId]) -> VocabMap {
        let mut offsets = Vec::with_capacity(layers.len());
        let mut sizes = Vec::with_capacity(layers.len());
        let mut total = 0usize;
        for l in layers {
            offsets.push(total);
            sizes.push(l.n);
            total += l.n;
        }
        VocabMap { offsets, sizes }
    }

    pub fn word(&self, layer_index: usize, token: usize) -> usize {
        debug_assert!(token < self.sizes[layer_index]);
        self.offsets[layer_index] + token
    }

    pub fn size(&self) -> usize {
        self.offsets.last().map_or(0, |o| o + self.sizes[self.sizes.len() - 1])
    }
}

/// Builds one bag-of-words document per fused segment: every token instance
/// from every layer overlapping the span contributes one word. Documents are
/// emitted in canonical order (utterances sorted, spans in order), matching
/// [`relabel`].
pub fn build_documents(
    segmentation: &Segmentation,
    labelings: &[Labeling],
) -> (Vec<Vec<usize>>, Vec<(String, usize, usize)>, VocabMap) {
    let vocab = VocabMap::build(&labelings.iter().map(|l| l.layer).collect::<Vec<_>>());
    let mut docs = Vec::new();
    let mut refs = Vec::new();
    for (utt, spans) in segmentation {
        for &(start, end) in spans {
            let mut words = Vec::new();
            for (li, labeling) in labelings.iter().enumerate() {
                if let Some(segs) = labeling.utts.get(utt) {
                    for seg in segs {
                        if seg.start < end && start < seg.end {
                            words.push(vocab.word(li, seg.token));
                        }
                    }
                }
            }
            docs.push(words);
            refs.push((utt.clone(), start, end));
        }
    }
    (docs, refs, vocab)
}

/// Collapsed-Gibbs LDA over bag-of-words documents.
#[derive(Clone, PartialEq, Debug)]
pub struct LdaModel {
    pub topics: usize,
    pub vocab: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Topic-word counts, `K x V`.
    pub topic_word: Vec<Vec<u32>>,
    pub topic_total: Vec<u32>,
    /// Document-topic counts, `D x K`.
    pub doc_topic: Vec<Vec<u32>>,
}

impl LdaModel {
    /// Most probable topic of a training document; ties go to the lowest id.
    pub fn doc_label(&self, doc: usize) -> usize {
        let counts = &self.doc_topic[doc];
        let mut best = 0usize;
        for (k, &c) in counts.iter().enumerate() {
            if c > counts[best] {
                best = k;
            }
        }
        best
    }

    pub fn to_model_file(&self) -> ModelFile {
        let mut f = ModelFile::new("lda", 1);
        f.push_meta("topics", self.topics);
        f.push_meta("vocab", self.vocab);
        f.push_meta("docs", self.doc_topic.len());
        f.push_meta("alpha", self.alpha);
        f.push_meta("beta", self.beta);
        for row in &self.topic_word {
            f.floats.extend(row.iter().map(|&c| c as f64));
        }
        for row in &self.doc_topic {
            f.floats.extend(row.iter().map(|&c| c as f64));
        }
        f
    }

    pub fn from_model_file(f: &ModelFile) -> Result<LdaModel> {
        f.expect("lda", 1)?;
        let topics = f.meta_usize("topics")?;
        let vocab = f.meta_usize("vocab")?;
        let docs = f.meta_usize("docs")?;
        let alpha = f.meta_f64("alpha")?;
        let beta = f.meta_f64("beta")?;
        if f.floats.len() != topics * vocab + docs * topics {
            return Err(Error::invalid("lda payload length mismatch"));
        }
        let mut topic_word: Vec<Vec<u32>> = Vec::with_capacity(topics);
        for k in 0..topics {
            topic_word.push(
                f.floats[k * vocab..(k + 1) * vocab]
                    .iter()
                    .map(|&v| v as u32)
                    .collect(),
            );
        }
        let base = topics * vocab;
        let mut doc_topic = Vec::with_capacity(docs);
        for d in 0..docs {
            doc_topic.push(
                f.floats[base + d * topics..base + (d + 1) * topics]
                    .iter()
                    .map(|&v| v as u32)
                    .collect(),
            );
        }
        let topic_total = (0..topics)
            .map(|k| topic_word[k].iter().sum::<u32>())
            .collect();
        Ok(LdaModel {
            topics,
            vocab,
            alpha,
            beta,
            topic_word,
            topic_total,
            doc_topic,
        })
    }
}

/// Fits LDA by collapsed Gibbs sampling; deterministic for a given seed.
pub fn lda_fit(
    docs: &[Vec<usize>],
    vocab: usize,
    topics: usize,
    alpha: f64,
    beta: f64,
    seed: u64,
    sweeps: usize,
) -> Result<LdaModel> {
    if topics < 2 {
        return Err(Error::invalid("LDA needs at least 2 topics"));
    }
    if docs.is_empty() {
        return Err(Error::invalid("LDA needs at least one document"));
    }
    for (d, doc) in docs.iter().enumerate() {
        if doc.is_empty() {
            return Err(Error::invalid(format!("document {d} is empty")));
        }
        if let Some(&w) = doc.iter().find(|&&w| w >= vocab) {
            return Err(Error::invalid(format!(
                "document {d} holds word {w} outside vocabulary of {vocab}"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut topic_word = vec![vec![0u32; vocab]; topics];
    let mut topic_total = vec![0u32; topics];
    let mut doc_topic = vec![vec![0u32; topics]; docs.len()];
    let mut assignments: Vec<Vec<usize>> = Vec::with_capacity(docs.len());
    for (d, doc) in docs.iter().enumerate() {
        let mut z = Vec::with_capacity(doc.len());
        for &w in doc {
            let k = rng.random_range(0..topics);
            z.push(k);
            topic_word[k][w] += 1;
            topic_total[k] += 1;
            doc_topic[d][k] += 1;
        }
        assignments.push(z);
    }

    let v_beta = vocab as f64 * beta;
    let mut probs = vec![0.0f64; topics];
    for _ in 0..sweeps {
        for (d, doc) in docs.iter().enumerate() {
            for (i, &w) in doc.iter().enumerate() {
                let old = assignments[d][i];
                topic_word[old][w] -= 1;
                topic_total[old] -= 1;
                doc_topic[d][old] -= 1;
                let mut total = 0.0;
                for k in 0..topics {
                    let p = (doc_topic[d][k] as f64 + alpha)
                        * (topic_word[k][w] as f64 + beta)
                        / (topic_total[k] as f64 + v_beta);
                    total += p;
                    probs[k] = total;
                }
                let r = rng.random::<f64>() * total;
                let mut new = topics - 1;
                for (k, &cum) in probs.iter().enumerate() {
                    if r < cum {
                        new = k;
                        break;
                    }
                }
                assignments[d][i] = new;
                topic_word[new][w] += 1;
                topic_total[new] += 1;
                doc_topic[d][new] += 1;
            }
        }
    }
    Ok(LdaModel {
        topics,
        vocab,
        alpha,
        beta,
        topic_word,
        topic_total,
        doc_topic,
    })
}

/// Labels every fused segment of `segmentation` with its most probable topic
/// under `lda`, producing the new initial labeling for `target` (whose `n`
/// must equal the topic count). Documents are rebuilt in the same canonical
/// order used to fit the model.
pub fn relabel(
    segmentation: &Segmentation,
    labelings: &[Labeling],
    lda: &LdaModel,
    target: LayerId,
) -> Result<Labeling> {
    if lda.topics != target.n {
        return Err(Error::invalid(format!(
            "LDA with {} topics cannot seed layer {target}",
            lda.topics
        )));
    }
    let (docs, refs, _) = build_documents(segmentation, labelings);
    if docs.len() != lda.doc_topic.len() {
        return Err(Error::invalid(
            "segmentation does not match the fitted LDA document count",
        ));
    }
    let mut labeling = Labeling::new(target);
    for (d, (utt, start, end)) in refs.iter().enumerate() {
        labeling
            .utts
            .entry(utt.clone())
            .or_default()
            .push(Segment::new(lda.doc_label(d), *start, *end));
    }
    labeling.validate_tiling(|_| None)?;
    Ok(labeling)
}

/// Audit record of one mutual-reinforcement round.
#[derive(Clone, Debug, serde::Serialize)]
pub struct MrAudit {
    pub fused_segments: usize,
    pub lda_topic_counts: Vec<usize>,
}

/// One full label re-initialization: fuse boundaries across layers, fit one
/// LDA per distinct `n` (with as many topics as tokens), and relabel the
/// fused segments for every layer.
pub fn reinitialize(
    labelings: &[Labeling],
    weights: Option<&[f64]>,
    cfg: &FusionConfig,
    beta: f64,
    sweeps: usize,
    seed: u64,
) -> Result<(Vec<Labeling>, Segmentation, MrAudit)> {
    if labelings.len() < 2 {
        return Err(Error::invalid(
            "mutual reinforcement needs at least two layers",
        ));
    }
    let segmentation = fuse_boundaries(labelings, weights, cfg)?;
    let (docs, refs, vocab) = build_documents(&segmentation, labelings);
    for (doc, (utt, start, end)) in docs.iter().zip(&refs) {
        if doc.is_empty() {
            return Err(Error::invalid(format!(
                "fused segment `{utt}`[{start},{end}) produced an empty document"
            )));
        }
    }
    let distinct_ns: BTreeSet<usize> = labelings.iter().map(|l| l.layer.n).collect();
    let mut models: BTreeMap<usize, LdaModel> = BTreeMap::new();
    for &n in &distinct_ns {
        let model = lda_fit(
            &docs,
            vocab.size(),
            n,
            default_alpha(n),
            beta,
            seed ^ mix(n as u64),
            sweeps,
        )?;
        models.insert(n, model);
    }
    let mut out = Vec::with_capacity(labelings.len());
    for l in labelings {
        out.push(relabel(&segmentation, labelings, &models[&l.layer.n], l.layer)?);
    }
    let audit = MrAudit {
        fused_segments: refs.len(),
        lda_topic_counts: distinct_ns.into_iter().collect(),
    };
    Ok((out, segmentation, audit))
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn mix(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
