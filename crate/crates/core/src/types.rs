//! Shared domain types: feature sequences, tokenizer layers, labelings.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Hyperparameters of one tokenizer layer: `m` states per token HMM
/// (temporal granularity) and `n` distinct tokens (phonetic granularity).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct LayerId {
    pub m: usize,
    pub n: usize,
}

impl LayerId {
    pub fn new(m: usize, n: usize) -> Self {
        LayerId { m, n }
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.m, self.n)
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (m, n) = s
            .split_once(',')
            .ok_or_else(|| Error::invalid(format!("layer id `{s}` is not of the form m,n")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("layer id `{s}` has a non-integer part")))
        };
        Ok(LayerId::new(parse(m)?, parse(n)?))
    }
}

/// One labeled span of frames `[start, end)`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Segment {
    pub token: usize,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn new(token: usize, start: usize, end: usize) -> Self {
        Segment { token, start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Per-utterance token segmentation for one tokenizer layer.
#[derive(Clone, PartialEq, Debug)]
pub struct Labeling {
    pub layer: LayerId,
    pub utts: BTreeMap<String, Vec<Segment>>,
}

impl Labeling {
    pub fn new(layer: LayerId) -> Self {
        Labeling {
            layer,
            utts: BTreeMap::new(),
        }
    }

    /// Checks that every utterance's segments tile `[0, T)` with no gaps or
    /// overlaps and that token ids are below the layer's `n`.
    ///
    /// `frames` maps an utterance id to its frame count; `None` skips the
    /// total-length check for that utterance (used when only internal
    /// consistency can be verified).
    pub fn validate_tiling<F>(&self, frames: F) -> Result<()>
    where
        F: Fn(&str) -> Option<usize>,
    {
        for (utt, segs) in &self.utts {
            if segs.is_empty() {
                return Err(Error::invalid(format!(
                    "utterance `{utt}` layer {} has no segments",
                    self.layer
                )));
            }
            let mut cursor = 0usize;
            for seg in segs {
                if seg.start != cursor {
                    return Err(Error::invalid(format!(
                        "utterance `{utt}` layer {}: segment starting at {} leaves a gap or overlap at {}",
                        self.layer, seg.start, cursor
                    )));
                }
                if seg.start >= seg.end {
                    return Err(Error::invalid(format!(
                        "utterance `{utt}` layer {}: empty segment at {}",
                        self.layer, seg.start
                    )));
                }
                if seg.token >= self.layer.n {
                    return Err(Error::invalid(format!(
                        "utterance `{utt}` layer {}: token id {} out of range",
                        self.layer, seg.token
                    )));
                }
                cursor = seg.end;
            }
            if let Some(total) = frames(utt) {
                if cursor != total {
                    return Err(Error::invalid(format!(
                        "utterance `{utt}` layer {}: segments end at {cursor}, expected {total}",
                        self.layer
                    )));
                }
            }
        }
        Ok(())
    }

    /// Interior boundary positions of one utterance: every segment end
    /// except the final one. A boundary at `j` separates frames `j-1` and `j`.
    pub fn boundaries(&self, utt: &str) -> Vec<usize> {
        match self.utts.get(utt) {
            Some(segs) if !segs.is_empty() => {
                segs[..segs.len() - 1].iter().map(|s| s.end).collect()
            }
            _ => Vec::new(),
        }
    }

    /// Token id of the segment containing each frame, in frame order.
    pub fn frame_tokens(&self, utt: &str) -> Vec<usize> {
        let mut out = Vec::new();
        if let Some(segs) = self.utts.get(utt) {
            for seg in segs {
                out.extend(std::iter::repeat(seg.token).take(seg.len()));
            }
        }
        out
    }
}

/// A matrix of frame vectors for one utterance, with the analysis frame
/// period carried along for time conversions.
#[derive(Clone, PartialEq, Debug)]
pub struct FeatureSequence {
    pub utt: String,
    pub period_ms: u32,
    pub data: Array2<f32>,
}

impl FeatureSequence {
    pub fn new(utt: impl Into<String>, period_ms: u32, data: Array2<f32>) -> Self {
        FeatureSequence {
            utt: utt.into(),
            period_ms,
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// Frame matrix widened to f64 for numeric work.
    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(f64::from)
    }

    /// A view restricted to frames `[start, end)`, keeping metadata.
    pub fn slice_frames(&self, start: usize, end: usize) -> FeatureSequence {
        FeatureSequence {
            utt: self.utt.clone(),
            period_ms: self.period_ms,
            data: self.data.slice(ndarray::s![start..end, ..]).to_owned(),
        }
    }
}

/// A corpus of feature sequences keyed by utterance id. `BTreeMap` keeps
/// every corpus-level iteration deterministic.
pub type FeatureSet = BTreeMap<String, FeatureSequence>;

/// Frame counts of a corpus, for tiling validation.
pub fn frame_counts(corpus: &FeatureSet) -> BTreeMap<String, usize> {
    corpus.iter().map(|(k, v)| (k.clone(), v.len())).collect()
}
