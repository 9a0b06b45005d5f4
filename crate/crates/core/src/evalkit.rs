//! Evaluation metrics: ABX discriminability of frame features, unit-quality
//! scores for discovered segmentations (NED, coverage, boundary/token/type
//! precision-recall), and mean average precision for ranked retrieval.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matching::{feature_dtw, FrameMetric, SearchResult};
use crate::types::{FeatureSet, Labeling};

/// One transcribed span of a reference alignment.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct GoldSegment {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct GoldUtt {
    pub speaker: String,
    pub segments: Vec<GoldSegment>,
}

/// Reference alignments per utterance. Gaps are allowed (untranscribed
/// regions) but segments may not overlap.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct GoldAlignment {
    pub utts: BTreeMap<String, GoldUtt>,
}

impl GoldAlignment {
    pub fn validate(&self) -> Result<()> {
        for (utt, gu) in &self.utts {
            let mut cursor = 0usize;
            for seg in &gu.segments {
                if seg.start >= seg.end {
                    return Err(Error::invalid(format!(
                        "gold segment in `{utt}` has start >= end"
                    )));
                }
                if seg.start < cursor {
                    return Err(Error::invalid(format!(
                        "gold segments in `{utt}` overlap at {}",
                        seg.start
                    )));
                }
                cursor = seg.end;
            }
        }
        Ok(())
    }

    /// Interior gold boundary positions per utterance: every segment edge
    /// except the utterance start and the final end.
    pub fn boundaries(&self, utt: &str) -> Vec<usize> {
        let mut out = BTreeSet::new();
        if let Some(gu) = self.utts.get(utt) {
            let last_end = gu.segments.last().map(|s| s.end).unwrap_or(0);
            for seg in &gu.segments {
                if seg.start > 0 {
                    out.insert(seg.start);
                }
                if seg.end < last_end {
                    out.insert(seg.end);
                }
            }
        }
        out.into_iter().collect()
    }

    pub fn labels(&self) -> BTreeSet<String> {
        self.utts
            .values()
            .flat_map(|g| g.segments.iter().map(|s| s.label.clone()))
            .collect()
    }
}

/// Reads TSV `utt<TAB>label<TAB>start<TAB>end<TAB>speaker`.
pub fn read_gold(path: impl AsRef<Path>) -> Result<GoldAlignment> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut gold = GoldAlignment::default();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 5 tab-separated fields, got {}", fields.len()),
            ));
        }
        let parse = |v: &str, what: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::parse(path, lineno, format!("bad {what} `{v}`")))
        };
        let start = parse(fields[2], "start frame")?;
        let end = parse(fields[3], "end frame")?;
        let entry = gold
            .utts
            .entry(fields[0].to_string())
            .or_insert_with(|| GoldUtt {
                speaker: fields[4].to_string(),
                segments: Vec::new(),
            });
        if entry.speaker != fields[4] {
            return Err(Error::parse(path, lineno, "utterance changes speaker"));
        }
        entry.segments.push(GoldSegment {
            label: fields[1].to_string(),
            start,
            end,
        });
    }
    for gu in gold.utts.values_mut() {
        gu.segments.sort_by_key(|s| s.start);
    }
    gold.validate()?;
    Ok(gold)
}

pub fn write_gold(gold: &GoldAlignment, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for (utt, gu) in &gold.utts {
        for seg in &gu.segments {
            writeln!(
                out,
                "{utt}\t{}\t{}\t{}\t{}",
                seg.label, seg.start, seg.end, gu.speaker
            )
            .map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SpeakerCondition {
    /// A, B and X share one speaker.
    Within,
    /// A and B share a speaker; X comes from a different one.
    Across,
}

impl std::fmt::Display for SpeakerCondition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SpeakerCondition::Within => write!(f, "within"),
            SpeakerCondition::Across => write!(f, "across"),
        }
    }
}

/// One reference segment used by the ABX task.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct AbxSegment {
    pub utt: String,
    pub start: usize,
    pub end: usize,
    pub label: String,
    pub speaker: String,
}

/// A triple of indices into [`AbxTask::segments`]: A and X share a label, B
/// differs.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct AbxTriple {
    pub a: usize,
    pub b: usize,
    pub x: usize,
}

#[derive(Clone, Debug)]
pub struct AbxTask {
    pub condition: SpeakerCondition,
    pub segments: Vec<AbxSegment>,
    pub triples: Vec<AbxTriple>,
}

impl AbxTask {
    /// Builds a task by enumerating valid triples per ordered label pair,
    /// keeping at most `max_per_pair` by deterministic reservoir sampling.
    pub fn from_gold(
        gold: &GoldAlignment,
        condition: SpeakerCondition,
        max_per_pair: usize,
        seed: u64,
    ) -> Result<AbxTask> {
        if max_per_pair == 0 {
            return Err(Error::invalid("max_per_pair must be >= 1"));
        }
        let mut segments = Vec::new();
        for (utt, gu) in &gold.utts {
            for seg in &gu.segments {
                segments.push(AbxSegment {
                    utt: utt.clone(),
                    start: seg.start,
                    end: seg.end,
                    label: seg.label.clone(),
                    speaker: gu.speaker.clone(),
                });
            }
        }
        let labels: Vec<String> = gold.labels().into_iter().collect();
        let by_label = |label: &str| -> Vec<usize> {
            segments
                .iter()
                .enumerate()
                .filter(|(_, s)| s.label == label)
                .map(|(i, _)| i)
                .collect()
        };
        let mut triples = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for la in &labels {
            for lb in &labels {
                if la == lb {
                    continue;
                }
                let a_pool = by_label(la);
                let b_pool = by_label(lb);
                let mut reservoir: Vec<AbxTriple> = Vec::with_capacity(max_per_pair);
                let mut seen = 0usize;
                for &a in &a_pool {
                    for &b in &b_pool {
                        if segments[a].speaker != segments[b].speaker {
                            continue;
                        }
                        for &x in &a_pool {
                            if x == a {
                                continue;
                            }
                            let ok = match condition {
                                SpeakerCondition::Within => {
                                    segments[x].speaker == segments[a].speaker
                                }
                                SpeakerCondition::Across => {
                                    segments[x].speaker != segments[a].speaker
                                }
                            };
                            if !ok {
                                continue;
                            }
                            let triple = AbxTriple { a, b, x };
                            if reservoir.len() < max_per_pair {
                                reservoir.push(triple);
                            } else {
                                let j = rng.random_range(0..=seen);
                                if j < max_per_pair {
                                    reservoir[j] = triple;
                                }
                            }
                            seen += 1;
                        }
                    }
                }
                triples.extend(reservoir);
            }
        }
        if triples.is_empty() {
            return Err(Error::invalid(format!(
                "no valid {condition} ABX triples could be built"
            )));
        }
        Ok(AbxTask {
            condition,
            segments,
            triples,
        })
    }
}

/// ABX error rate: per triple, 1 when X sits closer to B than to its own
/// category exemplar A (0.5 on ties), averaged per label pair and then
/// macro-averaged. Lower is better; 0.5 is chance.
pub fn abx_error(features: &FeatureSet, task: &AbxTask, metric: FrameMetric) -> Result<f64> {
    if task.triples.is_empty() {
        return Err(Error::invalid("ABX task has no triples"));
    }
    let slice = |i: usize| -> Result<crate::types::FeatureSequence> {
        let seg = &task.segments[i];
        let seq = features
            .get(&seg.utt)
            .ok_or_else(|| Error::invalid(format!("missing features for `{}`", seg.utt)))?;
        if seg.end > seq.len() || seg.start >= seg.end {
            return Err(Error::invalid(format!(
                "segment [{}, {}) outside `{}`",
                seg.start, seg.end, seg.utt
            )));
        }
        Ok(seq.slice_frames(seg.start, seg.end))
    };
    let mut per_pair: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    for t in &task.triples {
        let a = slice(t.a)?;
        let b = slice(t.b)?;
        let x = slice(t.x)?;
        let d_ax = feature_dtw(&a, &x, metric)?.normalized;
        let d_bx = feature_dtw(&b, &x, metric)?.normalized;
        let contribution = if d_ax > d_bx {
            1.0
        } else if d_ax == d_bx {
            0.5
        } else {
            0.0
        };
        let key = (
            task.segments[t.a].label.clone(),
            task.segments[t.b].label.clone(),
        );
        let entry = per_pair.entry(key).or_insert((0.0, 0));
        entry.0 += contribution;
        entry.1 += 1;
    }
    let macro_avg = per_pair
        .values()
        .map(|(sum, count)| sum / *count as f64)
        .sum::<f64>()
        / per_pair.len() as f64;
    Ok(macro_avg)
}

/// Levenshtein distance over label sequences.
pub fn levenshtein(a: &[String], b: &[String]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut cur = vec![i + 1];
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur.push(sub.min(prev[j + 1] + 1).min(cur[j] + 1));
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Mean normalized edit distance over pairs of gold transcriptions.
pub fn ned(pairs: &[(Vec<String>, Vec<String>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("NED needs at least one pair"));
    }
    let mut total = 0.0;
    for (a, b) in pairs {
        let denom = a.len().max(b.len());
        if denom > 0 {
            total += levenshtein(a, b) as f64 / denom as f64;
        }
    }
    Ok(total / pairs.len() as f64)
}

/// Fraction of gold-transcribed frames lying inside at least one discovered
/// segment.
pub fn coverage(
    discovered: &BTreeMap<String, Vec<(usize, usize)>>,
    gold: &GoldAlignment,
) -> f64 {
    let mut covered = 0usize;
    let mut total = 0usize;
    for (utt, gu) in &gold.utts {
        let spans = discovered.get(utt).map(Vec::as_slice).unwrap_or(&[]);
        for seg in &gu.segments {
            total += seg.end - seg.start;
            for frame in seg.start..seg.end {
                if spans.iter().any(|&(s, e)| s <= frame && frame < e) {
                    covered += 1;
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        covered as f64 / total as f64
    }
}

/// Precision, recall and F-score.
#[derive(Clone, Copy, PartialEq, Debug, serde::Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

impl Prf {
    pub fn from_counts(matched: usize, discovered: usize, gold: usize) -> Prf {
        let p = if discovered == 0 {
            0.0
        } else {
            matched as f64 / discovered as f64
        };
        let r = if gold == 0 {
            0.0
        } else {
            matched as f64 / gold as f64
        };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        Prf {
            precision: p,
            recall: r,
            f_score: f,
        }
    }
}

/// Greedy nearest-first one-to-one matching of boundary positions within a
/// frame tolerance; returns the number of matches.
pub fn match_boundaries(discovered: &[usize], gold: &[usize], tolerance: usize) -> usize {
    let mut candidates: Vec<(usize, usize, usize)> = Vec::new();
    for (di, &d) in discovered.iter().enumerate() {
        for (gi, &g) in gold.iter().enumerate() {
            let dist = d.abs_diff(g);
            if dist <= tolerance {
                candidates.push((dist, di, gi));
            }
        }
    }
    candidates.sort();
    let mut used_d = vec![false; discovered.len()];
    let mut used_g = vec![false; gold.len()];
    let mut matched = 0;
    for (_, di, gi) in candidates {
        if !used_d[di] && !used_g[gi] {
            used_d[di] = true;
            used_g[gi] = true;
            matched += 1;
        }
    }
    matched
}

/// Corpus-level boundary precision/recall/F against gold boundaries.
pub fn boundary_prf(
    discovered: &BTreeMap<String, Vec<usize>>,
    gold: &BTreeMap<String, Vec<usize>>,
    tolerance: usize,
) -> Prf {
    let empty: Vec<usize> = Vec::new();
    let mut matched = 0;
    let mut total_d = 0;
    let mut total_g = 0;
    let utts: BTreeSet<&String> = discovered.keys().chain(gold.keys()).collect();
    for utt in utts {
        let d = discovered.get(utt).unwrap_or(&empty);
        let g = gold.get(utt).unwrap_or(&empty);
        matched += match_boundaries(d, g, tolerance);
        total_d += d.len();
        total_g += g.len();
    }
    Prf::from_counts(matched, total_d, total_g)
}

/// Token and type precision/recall/F of a discovered labeling against gold
/// segments. A discovered segment matches a gold segment when both of its
/// boundaries fall within the tolerance; each discovered token id is mapped
/// to its majority gold label over matched segments and the mapped label
/// inventory is scored against the gold inventory as sets.
pub fn token_type_prf(
    discovered: &Labeling,
    gold: &GoldAlignment,
    tolerance: usize,
) -> (Prf, Prf) {
    let mut matched = 0usize;
    let mut total_d = 0usize;
    let mut total_g = 0usize;
    // token id -> gold label -> count over matched segments
    let mut votes: BTreeMap<usize, BTreeMap<String, usize>> = BTreeMap::new();
    for (utt, gu) in &gold.utts {
        let empty = Vec::new();
        let disc = discovered.utts.get(utt).unwrap_or(&empty);
        total_d += disc.len();
        total_g += gu.segments.len();
        let mut used_gold = vec![false; gu.segments.len()];
        for seg in disc {
            for (gi, gseg) in gu.segments.iter().enumerate() {
                if used_gold[gi] {
                    continue;
                }
                if seg.start.abs_diff(gseg.start) <= tolerance
                    && seg.end.abs_diff(gseg.end) <= tolerance
                {
                    used_gold[gi] = true;
                    matched += 1;
                    *votes
                        .entry(seg.token)
                        .or_default()
                        .entry(gseg.label.clone())
                        .or_insert(0) += 1;
                    break;
                }
            }
        }
    }
    // Unmatched discovered segments in utterances without gold still count
    // toward the denominator.
    for (utt, segs) in &discovered.utts {
        if !gold.utts.contains_key(utt) {
            total_d += segs.len();
        }
    }
    let token = Prf::from_counts(matched, total_d, total_g);

    let mapped: BTreeSet<String> = votes
        .values()
        .map(|counts| {
            counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
                .map(|(label, _)| label.clone())
                .expect("votes non-empty")
        })
        .collect();
    let gold_labels = gold.labels();
    let inter = mapped.intersection(&gold_labels).count();
    let typ = Prf::from_counts(inter, mapped.len(), gold_labels.len());
    (token, typ)
}

/// Mean average precision of ranked retrieval results.
pub fn mean_average_precision(
    results: &[SearchResult],
    relevance: &BTreeMap<String, BTreeSet<String>>,
) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::invalid("MAP needs at least one query"));
    }
    let mut total = 0.0;
    for r in results {
        let relevant = relevance
            .get(&r.query)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| {
                Error::invalid(format!("query `{}` has no relevant documents", r.query))
            })?;
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank, (doc, _)) in r.ranked.iter().enumerate() {
            if relevant.contains(doc) {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
            }
        }
        total += ap / relevant.len() as f64;
    }
    Ok(total / results.len() as f64)
}
