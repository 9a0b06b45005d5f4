//! Synthetic corpus generator: a small artificial language of Gaussian
//! phones composed into words, with per-speaker mean shifts, emitted as
//! feature files with phone- and word-level reference alignments and a
//! query-by-example retrieval task.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use zrspeech_core::corpusio::{self, Manifest, ManifestEntry};
use zrspeech_core::evalkit::{write_gold, GoldAlignment, GoldSegment, GoldUtt};
use zrspeech_core::types::{FeatureSequence, FeatureSet};

use crate::config::SynthSpec;
use crate::error::{CliError, Result};

pub const FRAME_PERIOD_MS: u32 = 10;
const MAX_RETRIES: usize = 20;

/// A generated corpus plus its retrieval task.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub features: FeatureSet,
    pub speakers: BTreeMap<String, String>,
    pub gold_phones: GoldAlignment,
    pub gold_words: GoldAlignment,
    pub queries: FeatureSet,
    pub query_speakers: BTreeMap<String, String>,
    pub relevance: BTreeMap<String, BTreeSet<String>>,
}

/// Standard normal draw by Box-Muller, driven by the deterministic stream.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generates a corpus. Deterministic for a given `(spec, seed)`; retries
/// with bumped seeds (bounded) until every query word occurs in the corpus.
pub fn gen_synth(spec: &SynthSpec, utterances: usize, seed: u64) -> Result<SynthCorpus> {
    spec.validate()?;
    for attempt in 0..MAX_RETRIES {
        let corpus = gen_once(spec, utterances, seed.wrapping_add(attempt as u64));
        if corpus
            .relevance
            .values()
            .all(|docs| !docs.is_empty())
        {
            return Ok(corpus);
        }
        log::warn!("synthetic corpus attempt {attempt} left a query without relevant documents; resampling");
    }
    Err(CliError::Config(format!(
        "could not generate a corpus where every query word occurs within {MAX_RETRIES} attempts"
    )))
}

fn gen_once(spec: &SynthSpec, utterances: usize, seed: u64) -> SynthCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phone_means: Vec<Vec<f64>> = (0..spec.phones)
        .map(|_| (0..spec.dim).map(|_| spec.phone_sep * normal(&mut rng)).collect())
        .collect();
    let speaker_shifts: Vec<Vec<f64>> = (0..spec.speakers)
        .map(|_| {
            (0..spec.dim)
                .map(|_| spec.speaker_shift * normal(&mut rng))
                .collect()
        })
        .collect();

    let mut features = FeatureSet::new();
    let mut speakers = BTreeMap::new();
    let mut gold_phones = GoldAlignment::default();
    let mut gold_words = GoldAlignment::default();
    // (word index) -> occurrences as (utt, start, end, speaker)
    let mut occurrences: BTreeMap<usize, Vec<(String, usize, usize, usize)>> = BTreeMap::new();

    for u in 0..utterances {
        let utt = format!("u{u:03}");
        let speaker_idx = u % spec.speakers;
        let speaker = format!("s{speaker_idx}");
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut phone_segs = Vec::new();
        let mut word_segs = Vec::new();
        for _ in 0..spec.utt_words {
            let w = rng.random_range(0..spec.words.len());
            let word_start = rows.len();
            for &p in &spec.words[w] {
                let dur = rng.random_range(spec.duration.0..=spec.duration.1);
                let start = rows.len();
                for _ in 0..dur {
                    let row: Vec<f64> = (0..spec.dim)
                        .map(|j| {
                            phone_means[p][j]
                                + speaker_shifts[speaker_idx][j]
                                + spec.noise * normal(&mut rng)
                        })
                        .collect();
                    rows.push(row);
                }
                phone_segs.push(GoldSegment {
                    label: format!("p{p}"),
                    start,
                    end: rows.len(),
                });
            }
            word_segs.push(GoldSegment {
                label: format!("w{w}"),
                start: word_start,
                end: rows.len(),
            });
            occurrences
                .entry(w)
                .or_default()
                .push((utt.clone(), word_start, rows.len(), speaker_idx));
        }
        let t_len = rows.len();
        let data = Array2::from_shape_fn((t_len, spec.dim), |(t, j)| rows[t][j] as f32);
        features.insert(
            utt.clone(),
            FeatureSequence::new(utt.clone(), FRAME_PERIOD_MS, data),
        );
        speakers.insert(utt.clone(), speaker.clone());
        gold_phones.utts.insert(
            utt.clone(),
            GoldUtt {
                speaker: speaker.clone(),
                segments: phone_segs,
            },
        );
        gold_words.utts.insert(
            utt.clone(),
            GoldUtt {
                speaker,
                segments: word_segs,
            },
        );
    }

    // Queries: cycle over word indices; exemplars are spoken instances cut
    // from the corpus; relevance is every document containing the word.
    let mut queries = FeatureSet::new();
    let mut query_speakers = BTreeMap::new();
    let mut relevance = BTreeMap::new();
    for q in 0..spec.queries {
        let w = q % spec.words.len();
        let qid = format!("q{q:02}_w{w}");
        let docs: BTreeSet<String> = occurrences
            .get(&w)
            .map(|occ| occ.iter().map(|(utt, _, _, _)| utt.clone()).collect())
            .unwrap_or_default();
        if let Some(occ) = occurrences.get(&w) {
            let (utt, start, end, speaker_idx) = &occ[rng.random_range(0..occ.len())];
            let slice = features[utt].slice_frames(*start, *end);
            queries.insert(
                qid.clone(),
                FeatureSequence::new(qid.clone(), FRAME_PERIOD_MS, slice.data),
            );
            query_speakers.insert(qid.clone(), format!("s{speaker_idx}"));
        }
        relevance.insert(qid, docs);
    }

    SynthCorpus {
        features,
        speakers,
        gold_phones,
        gold_words,
        queries,
        query_speakers,
        relevance,
    }
}

/// Writes the corpus under `dir`: `manifest.tsv`, `feats/*.zrf`,
/// `gold_phones.tsv`, `gold_words.tsv`, `queries.tsv`, `qfeats/*.zrf` and
/// `relevance.tsv`. Manifest paths are relative to `dir`.
pub fn write_synth(corpus: &SynthCorpus, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("feats")).map_err(|e| CliError::io(dir, e))?;
    std::fs::create_dir_all(dir.join("qfeats")).map_err(|e| CliError::io(dir, e))?;

    let mut manifest = Manifest::default();
    for (utt, seq) in &corpus.features {
        let rel = format!("feats/{utt}.zrf");
        corpusio::write_features(seq, dir.join(&rel))?;
        manifest.entries.push(ManifestEntry {
            utt: utt.clone(),
            path: rel,
            speaker: corpus.speakers[utt].clone(),
        });
    }
    corpusio::write_manifest(&manifest, dir.join("manifest.tsv"))?;

    let mut qmanifest = Manifest::default();
    for (qid, seq) in &corpus.queries {
        let rel = format!("qfeats/{qid}.zrf");
        corpusio::write_features(seq, dir.join(&rel))?;
        qmanifest.entries.push(ManifestEntry {
            utt: qid.clone(),
            path: rel,
            speaker: corpus.query_speakers[qid].clone(),
        });
    }
    corpusio::write_manifest(&qmanifest, dir.join("queries.tsv"))?;

    write_gold(&corpus.gold_phones, dir.join("gold_phones.tsv"))?;
    write_gold(&corpus.gold_words, dir.join("gold_words.tsv"))?;

    let mut lines = String::new();
    for (q, docs) in &corpus.relevance {
        for d in docs {
            lines.push_str(q);
            lines.push('\t');
            lines.push_str(d);
            lines.push('\n');
        }
    }
    std::fs::write(dir.join("relevance.tsv"), lines)
        .map_err(|e| CliError::io(dir.join("relevance.tsv"), e))?;
    Ok(())
}

/// Reads a relevance TSV (`query<TAB>doc` per line).
pub fn read_relevance(path: impl AsRef<Path>) -> Result<BTreeMap<String, BTreeSet<String>>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (q, d) = line.split_once('\t').ok_or_else(|| {
            CliError::Config(format!("{}:{}: expected query<TAB>doc", path.display(), idx + 1))
        })?;
        out.entry(q.to_string()).or_default().insert(d.to_string());
    }
    Ok(out)
}
