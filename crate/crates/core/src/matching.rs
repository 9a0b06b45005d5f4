//! Distances and search: symmetric-KL distance matrices between token HMMs,
//! token-level DTW over matching matrices, frame-level feature DTW, and
//! multi-stream score fusion for query-by-example spoken term detection.
//!
//! Both DTW variants use steps {(i-1,j), (i,j-1), (i-1,j-1)}, minimize raw
//! path cost (ties broken toward shorter paths), and report the cost divided
//! by the path length. Token DTW leaves the document start and end free so a
//! short query can match anywhere inside a document; feature DTW anchors
//! both axes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1};

use crate::corpusio::ModelFile;
use crate::error::{Error, Result};
use crate::hmmtok::TokenSet;
use crate::types::{FeatureSequence, FeatureSet, LayerId};

/// Symmetric token-to-token distance matrix for one layer.
#[derive(Clone, PartialEq, Debug)]
pub struct TokenDistanceMatrix {
    pub layer: LayerId,
    pub s: Array2<f64>,
}

impl TokenDistanceMatrix {
    pub fn to_model_file(&self) -> ModelFile {
        let mut f = ModelFile::new("klmat", 1);
        f.push_meta("m", self.layer.m);
        f.push_meta("n", self.layer.n);
        f.floats.extend(self.s.iter());
        f
    }

    pub fn from_model_file(f: &ModelFile) -> Result<TokenDistanceMatrix> {
        f.expect("klmat", 1)?;
        let m = f.meta_usize("m")?;
        let n = f.meta_usize("n")?;
        if f.floats.len() != n * n {
            return Err(Error::invalid("klmat payload length mismatch"));
        }
        Ok(TokenDistanceMatrix {
            layer: LayerId::new(m, n),
            s: Array2::from_shape_vec((n, n), f.floats.clone()).expect("shape checked"),
        })
    }
}

/// Closed-form KL divergence between diagonal Gaussians.
pub fn gaussian_kl(
    mean_p: ArrayView1<f64>,
    var_p: ArrayView1<f64>,
    mean_q: ArrayView1<f64>,
    var_q: ArrayView1<f64>,
) -> f64 {
    let mut kl = 0.0;
    for j in 0..mean_p.len() {
        let diff = mean_q[j] - mean_p[j];
        kl += 0.5 * (var_p[j] / var_q[j] + diff * diff / var_q[j] - 1.0 + (var_q[j] / var_p[j]).ln());
    }
    kl
}

/// Token distance matrix: symmetric KL between states matched by index,
/// summed over the states. With single-Gaussian states the closed form is
/// exact.
pub fn kl_matrix(tokens: &TokenSet) -> TokenDistanceMatrix {
    let n = tokens.models.len();
    let m = tokens.layer.m;
    let mut s = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (&tokens.models[i], &tokens.models[j]);
            let mut total = 0.0;
            for st in 0..m {
                total += gaussian_kl(a.means.row(st), a.vars.row(st), b.means.row(st), b.vars.row(st))
                    + gaussian_kl(b.means.row(st), b.vars.row(st), a.means.row(st), a.vars.row(st));
            }
            s[[i, j]] = total;
            s[[j, i]] = total;
        }
    }
    TokenDistanceMatrix {
        layer: tokens.layer,
        s,
    }
}

/// DTW outcome: minimal raw path cost, its path length, and the
/// length-normalized distance used everywhere by default.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct DtwOutcome {
    pub cost: f64,
    pub path_len: usize,
    pub normalized: f64,
}

#[derive(Clone, Copy)]
struct Cell {
    cost: f64,
    len: u32,
}

impl Cell {
    const UNSET: Cell = Cell {
        cost: f64::INFINITY,
        len: 0,
    };

    fn better_than(&self, other: &Cell) -> bool {
        self.cost < other.cost || (self.cost == other.cost && self.len < other.len)
    }
}

fn outcome(best: Cell) -> DtwOutcome {
    DtwOutcome {
        cost: best.cost,
        path_len: best.len as usize,
        normalized: best.cost / best.len as f64,
    }
}

/// Token DTW between a document and a query over the matching matrix
/// `W(i, j) = S(doc[i], query[j])`. The query must align fully; the document
/// start and end are free.
pub fn token_dtw(doc: &[usize], query: &[usize], s: &Array2<f64>) -> Result<DtwOutcome> {
    if doc.is_empty() || query.is_empty() {
        return Err(Error::invalid("token DTW requires non-empty sequences"));
    }
    let (d_len, q_len) = (doc.len(), query.len());
    let range = s.nrows();
    for &t in doc.iter().chain(query.iter()) {
        if t >= range {
            return Err(Error::invalid(format!(
                "token id {t} outside distance matrix of size {range}"
            )));
        }
    }
    let w = |i: usize, j: usize| s[[doc[i], query[j]]];
    let mut prev = vec![Cell::UNSET; q_len];
    let mut best_end = Cell::UNSET;
    for i in 0..d_len {
        let mut cur = vec![Cell::UNSET; q_len];
        // Free start on the document axis: every row may begin the path.
        cur[0] = {
            let from_above = Cell {
                cost: prev[0].cost + w(i, 0),
                len: prev[0].len + 1,
            };
            let fresh = Cell {
                cost: w(i, 0),
                len: 1,
            };
            if i > 0 && from_above.better_than(&fresh) {
                from_above
            } else {
                fresh
            }
        };
        for j in 1..q_len {
            let mut best = Cell {
                cost: cur[j - 1].cost,
                len: cur[j - 1].len,
            };
            if i > 0 {
                if prev[j].better_than(&best) {
                    best = prev[j];
                }
                if prev[j - 1].better_than(&best) {
                    best = prev[j - 1];
                }
            }
            cur[j] = Cell {
                cost: best.cost + w(i, j),
                len: best.len + 1,
            };
        }
        if cur[q_len - 1].better_than(&best_end) {
            best_end = cur[q_len - 1];
        }
        prev = cur;
    }
    Ok(outcome(best_end))
}

/// Frame distance metrics for feature DTW.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum FrameMetric {
    Euclidean,
    CosineDistance,
}

impl FrameMetric {
    pub fn distance(&self, a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
        match self {
            FrameMetric::Euclidean => a
                .iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
            FrameMetric::CosineDistance => {
                let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
                let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na < 1e-12 && nb < 1e-12 {
                    0.0
                } else if na < 1e-12 || nb < 1e-12 {
                    1.0
                } else {
                    1.0 - dot / (na * nb)
                }
            }
        }
    }
}

impl std::str::FromStr for FrameMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(FrameMetric::Euclidean),
            "cosine" | "cosine-distance" => Ok(FrameMetric::CosineDistance),
            other => Err(Error::invalid(format!("unknown frame metric `{other}`"))),
        }
    }
}

/// Frame-level DTW with both axes anchored, length-normalized.
pub fn feature_dtw(
    a: &FeatureSequence,
    b: &FeatureSequence,
    metric: FrameMetric,
) -> Result<DtwOutcome> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("feature DTW requires non-empty sequences"));
    }
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "feature DTW dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let xa = a.to_f64();
    let xb = b.to_f64();
    let (ta, tb) = (xa.nrows(), xb.nrows());
    let mut prev = vec![Cell::UNSET; tb];
    for i in 0..ta {
        let mut cur = vec![Cell::UNSET; tb];
        for j in 0..tb {
            let d = metric.distance(xa.row(i), xb.row(j));
            let cell = if i == 0 && j == 0 {
                Cell { cost: d, len: 1 }
            } else {
                let mut best = Cell::UNSET;
                if j > 0 && cur[j - 1].better_than(&best) {
                    best = cur[j - 1];
                }
                if i > 0 {
                    if prev[j].better_than(&best) {
                        best = prev[j];
                    }
                    if j > 0 && prev[j - 1].better_than(&best) {
                        best = prev[j - 1];
                    }
                }
                Cell {
                    cost: best.cost + d,
                    len: best.len + 1,
                }
            };
            cur[j] = cell;
        }
        prev = cur;
    }
    Ok(outcome(prev[tb - 1]))
}

/// Token sequences of one layer for all documents and queries, plus the
/// layer's token distance matrix.
#[derive(Clone, Debug)]
pub struct CollectionLayer {
    pub layer: LayerId,
    pub distances: Array2<f64>,
    pub docs: BTreeMap<String, Vec<usize>>,
    pub queries: BTreeMap<String, Vec<usize>>,
}

/// One collection of tokenizer layers (for example one iteration/refinement
/// snapshot of the tokenizer grid).
#[derive(Clone, Debug)]
pub struct TokenCollection {
    pub name: String,
    pub layers: Vec<CollectionLayer>,
}

/// One frame-level feature stream for feature DTW.
#[derive(Clone, Debug)]
pub struct FeatureStream {
    pub name: String,
    pub metric: FrameMetric,
    pub docs: FeatureSet,
    pub queries: FeatureSet,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SearchMode {
    /// Token DTW averaged over every layer of every collection.
    Token,
    /// Feature DTW averaged over the feature streams.
    Feature,
    /// Mean over all collection and feature streams, each z-normalized per
    /// query unless disabled.
    Fused,
}

/// Ranked retrieval output for one query. Raw per-stream distances are kept
/// for fusion audits.
#[derive(Clone, Debug)]
pub struct SearchResult {
    pub query: String,
    /// (document id, distance), ascending, ties broken by document id.
    pub ranked: Vec<(String, f64)>,
    pub streams: BTreeMap<String, BTreeMap<String, f64>>,
}

fn rank(scores: &BTreeMap<String, f64>) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = scores.iter().map(|(k, v)| (k.clone(), *v)).collect();
    out.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .expect("finite distances")
            .then_with(|| a.0.cmp(&b.0))
    });
    out
}

fn znorm(scores: &BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    let n = scores.len() as f64;
    let mean: f64 = scores.values().sum::<f64>() / n;
    let var: f64 = scores.values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let scale = 1.0 / var.sqrt().max(1e-12);
    scores
        .iter()
        .map(|(k, v)| (k.clone(), (v - mean) * scale))
        .collect()
}

/// Query-by-example search over token collections and feature streams.
pub fn std_search(
    collections: &[TokenCollection],
    features: &[FeatureStream],
    mode: SearchMode,
    znormalize: bool,
) -> Result<Vec<SearchResult>> {
    // The query universe comes from whichever source is present.
    let query_ids: Vec<String> = if let Some(c) = collections.first() {
        c.layers
            .first()
            .ok_or_else(|| Error::invalid("collection has no layers"))?
            .queries
            .keys()
            .cloned()
            .collect()
    } else if let Some(f) = features.first() {
        f.queries.keys().cloned().collect()
    } else {
        return Err(Error::invalid("search needs at least one stream"));
    };
    let doc_ids: Vec<String> = if let Some(c) = collections.first() {
        c.layers[0].docs.keys().cloned().collect()
    } else {
        features[0].docs.keys().cloned().collect()
    };
    if query_ids.is_empty() || doc_ids.is_empty() {
        return Err(Error::invalid("search needs non-empty queries and documents"));
    }
    for c in collections {
        for layer in &c.layers {
            for q in &query_ids {
                if !layer.queries.contains_key(q) {
                    return Err(Error::invalid(format!(
                        "collection `{}` layer {} does not cover query `{q}`",
                        c.name, layer.layer
                    )));
                }
            }
            for d in &doc_ids {
                if !layer.docs.contains_key(d) {
                    return Err(Error::invalid(format!(
                        "collection `{}` layer {} does not cover document `{d}`",
                        c.name, layer.layer
                    )));
                }
            }
        }
    }

    let mut results = Vec::with_capacity(query_ids.len());
    for q in &query_ids {
        let mut streams: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        // Collection-level streams (mean over the grid) plus per-layer audit.
        for c in collections {
            let mut acc: BTreeMap<String, f64> = doc_ids.iter().map(|d| (d.clone(), 0.0)).collect();
            for layer in &c.layers {
                let mut per_layer = BTreeMap::new();
                for d in &doc_ids {
                    let dist =
                        token_dtw(&layer.docs[d], &layer.queries[q], &layer.distances)?.normalized;
                    *acc.get_mut(d).expect("doc present") += dist;
                    per_layer.insert(d.clone(), dist);
                }
                streams.insert(format!("{}/{}", c.name, layer.layer), per_layer);
            }
            let count = c.layers.len() as f64;
            streams.insert(
                c.name.clone(),
                acc.into_iter().map(|(k, v)| (k, v / count)).collect(),
            );
        }
        for f in features {
            let query_seq = f
                .queries
                .get(q)
                .ok_or_else(|| Error::invalid(format!("feature stream `{}` missing query `{q}`", f.name)))?;
            let mut scores = BTreeMap::new();
            for d in &doc_ids {
                let doc_seq = f.docs.get(d).ok_or_else(|| {
                    Error::invalid(format!("feature stream `{}` missing document `{d}`", f.name))
                })?;
                scores.insert(d.clone(), feature_dtw(doc_seq, query_seq, f.metric)?.normalized);
            }
            streams.insert(format!("feature/{}", f.name), scores);
        }

        let fused: BTreeMap<String, f64> = match mode {
            SearchMode::Token => {
                if collections.is_empty() {
                    return Err(Error::invalid("token mode needs at least one collection"));
                }
                mean_streams(collections.iter().map(|c| &streams[&c.name]), &doc_ids)
            }
            SearchMode::Feature => {
                if features.is_empty() {
                    return Err(Error::invalid("feature mode needs at least one stream"));
                }
                mean_streams(
                    features.iter().map(|f| &streams[&format!("feature/{}", f.name)]),
                    &doc_ids,
                )
            }
            SearchMode::Fused => {
                let names: Vec<String> = collections
                    .iter()
                    .map(|c| c.name.clone())
                    .chain(features.iter().map(|f| format!("feature/{}", f.name)))
                    .collect();
                if names.is_empty() {
                    return Err(Error::invalid("fused mode needs at least one stream"));
                }
                let prepared: Vec<BTreeMap<String, f64>> = names
                    .iter()
                    .map(|n| {
                        if znormalize {
                            znorm(&streams[n])
                        } else {
                            streams[n].clone()
                        }
                    })
                    .collect();
                mean_streams(prepared.iter(), &doc_ids)
            }
        };
        results.push(SearchResult {
            query: q.clone(),
            ranked: rank(&fused),
            streams,
        });
    }
    Ok(results)
}

fn mean_streams<'a>(
    streams: impl Iterator<Item = &'a BTreeMap<String, f64>>,
    doc_ids: &[String],
) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, f64> = doc_ids.iter().map(|d| (d.clone(), 0.0)).collect();
    let mut count = 0usize;
    for s in streams {
        count += 1;
        for d in doc_ids {
            *acc.get_mut(d).expect("doc present") += s[d];
        }
    }
    let inv = 1.0 / count as f64;
    acc.into_iter().map(|(k, v)| (k, v * inv)).collect()
}

/// Writes ranked results as TSV `query<TAB>doc<TAB>rank<TAB>distance`.
pub fn write_search_results(results: &[SearchResult], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for r in results {
        for (rank, (doc, dist)) in r.ranked.iter().enumerate() {
            writeln!(out, "{}\t{}\t{}\t{}", r.query, doc, rank + 1, dist)
                .map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmmtok::TokenHmm;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn toy_matrix() -> Array2<f64> {
        // S(a,b) = 2 with zero diagonal.
        array![[0.0, 2.0], [2.0, 0.0]]
    }

    #[test]
    fn identical_sequences_have_zero_distance() {
        let s = toy_matrix();
        let out = token_dtw(&[0, 1, 0, 1], &[0, 1, 0, 1], &s).unwrap();
        assert_eq!(out.normalized, 0.0);
    }

    #[test]
    fn subsequence_match_is_free() {
        let s = toy_matrix();
        // doc = [a, b, a], query = [b]: free start/end lands on the b.
        let out = token_dtw(&[0, 1, 0], &[1], &s).unwrap();
        assert_eq!(out.normalized, 0.0);
        assert_eq!(out.path_len, 1);
    }

    #[test]
    fn token_dtw_hand_checked_three_by_two() {
        let s = array![[0.0, 9.0, 1.0], [9.0, 0.0, 2.0], [5.0, 3.0, 0.0]];
        let doc = [2usize, 1, 0];
        let query = [2usize, 0];
        // W rows: doc[0]=2 -> (0, 5); doc[1]=1 -> (2, 9); doc[2]=0 -> (1, 0).
        // Best: free start at row 2, (2,0) -> (2,1): cost 1 + 0, length 2.
        let out = token_dtw(&doc, &query, &s).unwrap();
        assert_eq!(out.cost, 1.0);
        assert_eq!(out.path_len, 2);
        assert_eq!(out.normalized, 0.5);
    }

    #[test]
    fn empty_sequences_are_rejected() {
        let s = toy_matrix();
        assert!(token_dtw(&[], &[0], &s).is_err());
        assert!(token_dtw(&[0], &[], &s).is_err());
        assert!(token_dtw(&[5], &[0], &s).is_err());
    }

    fn seq(utt: &str, rows: Vec<Vec<f32>>) -> FeatureSequence {
        let dim = rows[0].len();
        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        FeatureSequence::new(
            utt,
            10,
            Array2::from_shape_vec((rows.len(), dim), flat).unwrap(),
        )
    }

    #[test]
    fn feature_dtw_identity_and_stretch() {
        let a = seq("a", vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let stretched = seq(
            "b",
            vec![
                vec![1.0, 0.0],
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![0.0, 1.0],
                vec![1.0, 1.0],
                vec![1.0, 1.0],
            ],
        );
        for metric in [FrameMetric::Euclidean, FrameMetric::CosineDistance] {
            // Cosine self-distance carries ~1e-17 rounding noise.
            assert!(feature_dtw(&a, &a, metric).unwrap().normalized.abs() < 1e-12);
            assert!(
                feature_dtw(&a, &stretched, metric)
                    .unwrap()
                    .normalized
                    .abs()
                    < 1e-12
            );
        }
    }

    #[test]
    fn feature_dtw_rejects_dim_mismatch() {
        let a = seq("a", vec![vec![1.0, 0.0]]);
        let b = seq("b", vec![vec![1.0]]);
        assert!(feature_dtw(&a, &b, FrameMetric::Euclidean).is_err());
    }

    #[test]
    fn kl_matrix_zero_diagonal_and_unit_gaussians() {
        let model = |mu: f64| TokenHmm {
            means: array![[mu]],
            vars: array![[1.0]],
            self_loop: vec![0.5],
        };
        let set = TokenSet {
            layer: LayerId::new(1, 2),
            dim: 1,
            models: vec![model(0.0), model(1.0)],
        };
        let mat = kl_matrix(&set);
        assert_eq!(mat.s[[0, 0]], 0.0);
        assert_eq!(mat.s[[1, 1]], 0.0);
        // KL(N(0,1) || N(1,1)) = 0.5 each way; symmetric sum = 1.
        assert_abs_diff_eq!(mat.s[[0, 1]], 1.0, epsilon = 1e-12);
        assert_eq!(mat.s[[0, 1]], mat.s[[1, 0]]);
        let back = TokenDistanceMatrix::from_model_file(&mat.to_model_file()).unwrap();
        assert_eq!(back, mat);
    }

    fn make_collection(name: &str) -> TokenCollection {
        let s = toy_matrix();
        let mut docs = BTreeMap::new();
        docs.insert("d1".to_string(), vec![0, 1, 0]);
        docs.insert("d2".to_string(), vec![1, 1, 1]);
        let mut queries = BTreeMap::new();
        queries.insert("q1".to_string(), vec![0, 1, 0]);
        TokenCollection {
            name: name.to_string(),
            layers: vec![CollectionLayer {
                layer: LayerId::new(1, 2),
                distances: s,
                docs,
                queries,
            }],
        }
    }

    #[test]
    fn exact_token_match_ranks_first() {
        let results = std_search(&[make_collection("c")], &[], SearchMode::Token, true).unwrap();
        assert_eq!(results.len(), 1);
        assert_eq!(results[0].ranked[0].0, "d1");
        assert_eq!(results[0].ranked[0].1, 0.0);
    }

    #[test]
    fn fusing_identical_streams_matches_single_stream() {
        let one = std_search(&[make_collection("a")], &[], SearchMode::Fused, true).unwrap();
        let two = std_search(
            &[make_collection("a"), make_collection("b")],
            &[],
            SearchMode::Fused,
            true,
        )
        .unwrap();
        for (r1, r2) in one.iter().zip(two.iter()) {
            assert_eq!(r1.ranked.len(), r2.ranked.len());
            for (a, b) in r1.ranked.iter().zip(r2.ranked.iter()) {
                assert_eq!(a.0, b.0);
                assert_abs_diff_eq!(a.1, b.1, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn search_determinism_and_tie_break() {
        let mut c = make_collection("c");
        // Make both documents identical so distances tie; ranking must fall
        // back to document id order.
        c.layers[0].docs.insert("d2".to_string(), vec![0, 1, 0]);
        let results = std_search(&[c], &[], SearchMode::Token, true).unwrap();
        assert_eq!(results[0].ranked[0].0, "d1");
        assert_eq!(results[0].ranked[1].0, "d2");
        assert_eq!(results[0].ranked[0].1, results[0].ranked[1].1);
    }

    #[test]
    fn missing_coverage_is_an_error() {
        let mut c = make_collection("c");
        c.layers[0].queries.clear();
        c.layers[0]
            .queries
            .insert("other".to_string(), vec![0]);
        let full = make_collection("full");
        let err = std_search(&[full, c], &[], SearchMode::Token, true);
        assert!(err.is_err());
    }

    #[test]
    fn search_results_tsv_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.tsv");
        let results = std_search(&[make_collection("c")], &[], SearchMode::Token, true).unwrap();
        write_search_results(&results, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let first = text.lines().next().unwrap();
        let fields: Vec<&str> = first.split('\t').collect();
        assert_eq!(fields.len(), 4);
        assert_eq!(fields[0], "q1");
        assert_eq!(fields[2], "1");
    }
}
