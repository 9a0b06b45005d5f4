//! On-disk artifacts: corpus manifests, feature files, label files, and the
//! versioned model container. Everything round-trips losslessly and is
//! byte-order stable across platforms.
//!
//! Formats:
//! - Feature file (`.zrf`): bytes 0-3 `ZRF1`, then frame count, dimension and
//!   frame period (ms) as little-endian u32, then row-major little-endian f32.
//! - Label file: TSV `utt<TAB>m,n<TAB>token<TAB>start<TAB>end`, sorted by
//!   utterance id, then layer, then start frame.
//! - Manifest: TSV `utt<TAB>path<TAB>speaker`.
//! - Model file: text header (`ZRM1 <kind>`, `version <int>`, metadata lines,
//!   `floats <count>`) followed by `<count>` little-endian f64 values.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::types::{FeatureSequence, Labeling, LayerId, Segment};

pub const FEATURE_MAGIC: &[u8; 4] = b"ZRF1";
pub const MODEL_MAGIC: &str = "ZRM1";

/// One corpus entry: utterance id, audio or feature path, speaker id.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ManifestEntry {
    pub utt: String,
    pub path: String,
    pub speaker: String,
}

/// An ordered corpus enumeration.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn speaker_of(&self, utt: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.utt == utt)
            .map(|e| e.speaker.as_str())
    }
}

/// Reads a tab-separated manifest, preserving file order.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 3 tab-separated fields, got {}", fields.len()),
            ));
        }
        let (utt, p, speaker) = (fields[0], fields[1], fields[2]);
        if utt.is_empty() || p.is_empty() || speaker.is_empty() {
            return Err(Error::parse(path, lineno, "empty field"));
        }
        if !seen.insert(utt.to_string()) {
            return Err(Error::parse(
                path,
                lineno,
                format!("duplicate utterance id `{utt}`"),
            ));
        }
        entries.push(ManifestEntry {
            utt: utt.to_string(),
            path: p.to_string(),
            speaker: speaker.to_string(),
        });
    }
    Ok(Manifest { entries })
}

pub fn write_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for e in &manifest.entries {
        writeln!(out, "{}\t{}\t{}", e.utt, e.path, e.speaker).map_err(|x| Error::io(path, x))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Writes one feature sequence in the `ZRF1` binary format.
pub fn write_features(seq: &FeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if seq.is_empty() || seq.dim() == 0 {
        return Err(Error::invalid(format!(
            "refusing to write empty feature sequence `{}`",
            seq.utt
        )));
    }
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    out.write_all(FEATURE_MAGIC).map_err(|e| Error::io(path, e))?;
    for v in [seq.len() as u32, seq.dim() as u32, seq.period_ms] {
        out.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    for row in seq.data.rows() {
        for &v in row {
            out.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a `ZRF1` feature file. The utterance id is taken from the file stem.
pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let utt = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut file = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)
        .map_err(|_| Error::format(path, "file too short for header"))?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::format(path, "bad magic, not a ZRF1 feature file"));
    }
    let mut word = [0u8; 4];
    let mut header = [0u32; 3];
    for slot in header.iter_mut() {
        file.read_exact(&mut word)
            .map_err(|_| Error::format(path, "truncated header"))?;
        *slot = u32::from_le_bytes(word);
    }
    let (frames, dim, period_ms) = (header[0] as usize, header[1] as usize, header[2]);
    if dim < 1 {
        return Err(Error::format(path, "dimension must be >= 1"));
    }
    if period_ms < 1 {
        return Err(Error::format(path, "frame period must be >= 1 ms"));
    }
    let mut payload = vec![0u8; frames * dim * 4];
    file.read_exact(&mut payload)
        .map_err(|_| Error::format(path, "payload shorter than header promises"))?;
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let data = Array2::from_shape_vec((frames, dim), values)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(FeatureSequence::new(utt, period_ms, data))
}

/// Writes labelings as a TSV label file with deterministic line order:
/// utterance id, then layer, then start frame.
pub fn write_labels(labelings: &[Labeling], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    for l in labelings {
        l.validate_tiling(|_| None)?;
    }
    let mut lines: Vec<(String, LayerId, Segment)> = Vec::new();
    for l in labelings {
        for (utt, segs) in &l.utts {
            for seg in segs {
                lines.push((utt.clone(), l.layer, *seg));
            }
        }
    }
    lines.sort_by(|a, b| (&a.0, a.1, a.2.start).cmp(&(&b.0, b.1, b.2.start)));
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for (utt, layer, seg) in &lines {
        writeln!(out, "{utt}\t{layer}\t{}\t{}\t{}", seg.token, seg.start, seg.end)
            .map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a label file back into one labeling per layer, sorted by layer.
pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<Labeling>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut layers: BTreeMap<LayerId, Labeling> = BTreeMap::new();
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
        let layer: LayerId = fields[1]
            .parse()
            .map_err(|e: Error| Error::parse(path, lineno, e.to_string()))?;
        let parse_usize = |v: &str, what: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::parse(path, lineno, format!("bad {what} `{v}`")))
        };
        let token = parse_usize(fields[2], "token id")?;
        let start = parse_usize(fields[3], "start frame")?;
        let end = parse_usize(fields[4], "end frame")?;
        if start >= end {
            return Err(Error::parse(path, lineno, "start must be < end"));
        }
        layers
            .entry(layer)
            .or_insert_with(|| Labeling::new(layer))
            .utts
            .entry(fields[0].to_string())
            .or_default()
            .push(Segment::new(token, start, end));
    }
    let mut out: Vec<Labeling> = layers.into_values().collect();
    for l in &mut out {
        for segs in l.utts.values_mut() {
            segs.sort_by_key(|s| s.start);
        }
        l.validate_tiling(|_| None)?;
    }
    Ok(out)
}

/// Generic model container: a versioned kind tag, string metadata and an f64
/// payload. HMM token sets, networks, LDA models and distance matrices all
/// serialize through this.
#[derive(Clone, PartialEq, Debug)]
pub struct ModelFile {
    pub kind: String,
    pub version: u32,
    pub meta: Vec<(String, String)>,
    pub floats: Vec<f64>,
}

impl ModelFile {
    pub fn new(kind: impl Into<String>, version: u32) -> Self {
        ModelFile {
            kind: kind.into(),
            version,
            meta: Vec::new(),
            floats: Vec::new(),
        }
    }

    pub fn push_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.push((key.into(), value.to_string()));
    }

    pub fn meta_value(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::invalid(format!("model file missing metadata key `{key}`")))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta_value(key)?
            .parse::<usize>()
            .map_err(|_| Error::invalid(format!("metadata key `{key}` is not an integer")))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.meta_value(key)?
            .parse::<f64>()
            .map_err(|_| Error::invalid(format!("metadata key `{key}` is not a number")))
    }

    /// Asserts the expected kind and version, for typed loaders.
    pub fn expect(&self, kind: &str, version: u32) -> Result<()> {
        if self.kind != kind {
            return Err(Error::invalid(format!(
                "expected model kind `{kind}`, found `{}`",
                self.kind
            )));
        }
        if self.version != version {
            return Err(Error::invalid(format!(
                "unsupported `{kind}` version {} (expected {version})",
                self.version
            )));
        }
        Ok(())
    }
}

pub fn write_model(model: &ModelFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    writeln!(out, "{MODEL_MAGIC} {}", model.kind).map_err(|e| Error::io(path, e))?;
    writeln!(out, "version {}", model.version).map_err(|e| Error::io(path, e))?;
    for (k, v) in &model.meta {
        writeln!(out, "{k} {v}").map_err(|e| Error::io(path, e))?;
    }
    writeln!(out, "floats {}", model.floats.len()).map_err(|e| Error::io(path, e))?;
    for v in &model.floats {
        out.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_model(path: impl AsRef<Path>) -> Result<ModelFile> {
    let path = path.as_ref();
    let mut file = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut first = String::new();
    file.read_line(&mut first).map_err(|e| Error::io(path, e))?;
    let first = first.trim_end_matches('\n');
    let kind = match first.split_once(' ') {
        Some((magic, kind)) if magic == MODEL_MAGIC && !kind.is_empty() => kind.to_string(),
        _ => return Err(Error::format(path, "bad magic, not a ZRM1 model file")),
    };
    let mut line = String::new();
    file.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let version = line
        .trim_end_matches('\n')
        .strip_prefix("version ")
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| Error::format(path, "missing version line"))?;
    let mut meta = Vec::new();
    let count;
    loop {
        line.clear();
        if file.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(Error::format(path, "missing floats line"));
        }
        let l = line.trim_end_matches('\n');
        if let Some(c) = l.strip_prefix("floats ") {
            count = c
                .parse::<usize>()
                .map_err(|_| Error::format(path, "bad float count"))?;
            break;
        }
        match l.split_once(' ') {
            Some((k, v)) => meta.push((k.to_string(), v.to_string())),
            None => return Err(Error::format(path, format!("malformed header line `{l}`"))),
        }
    }
    let mut payload = vec![0u8; count * 8];
    file.read_exact(&mut payload)
        .map_err(|_| Error::format(path, "truncated float payload"))?;
    let floats: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ModelFile {
        kind,
        version,
        meta,
        floats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::fs;

    #[test]
    fn manifest_round_trip_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.tsv");
        fs::write(&path, "u1\ta.zrf\ts1\nu3\tc.zrf\ts2\nu2\tb.zrf\ts1\n").unwrap();
        let m = read_manifest(&path).unwrap();
        assert_eq!(m.entries.len(), 3);
        assert_eq!(m.entries[1].utt, "u3");
        assert_eq!(m.speaker_of("u2"), Some("s1"));
        let out = dir.path().join("copy.tsv");
        write_manifest(&m, &out).unwrap();
        assert_eq!(read_manifest(&out).unwrap(), m);
    }

    #[test]
    fn manifest_empty_file_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.tsv");
        fs::write(&path, "").unwrap();
        assert!(read_manifest(&path).unwrap().entries.is_empty());
    }

    #[test]
    fn manifest_duplicate_id_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.tsv");
        fs::write(&path, "u1\ta\ts\nu2\tb\ts\nu3\tc\ts\nu1\td\ts\n").unwrap();
        let err = read_manifest(&path).unwrap_err().to_string();
        assert!(err.contains(":4:"), "error should cite line 4: {err}");
        assert!(err.contains("u1"));
    }

    #[test]
    fn manifest_malformed_line_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        fs::write(&path, "u1\ta\ts\nu2 b s\n").unwrap();
        let err = read_manifest(&path).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }

    #[test]
    fn features_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u1.zrf");
        let seq = FeatureSequence::new("u1", 10, array![[1.0f32, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        write_features(&seq, &path).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back, seq);
        assert_eq!(back.period_ms, 10);
    }

    #[test]
    fn features_reject_truncation_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u1.zrf");
        let seq = FeatureSequence::new("u1", 10, array![[1.0f32, 2.0], [3.0, 4.0]]);
        write_features(&seq, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let cut = dir.path().join("cut.zrf");
        fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_features(&cut), Err(Error::Format { .. })));
        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        let bad = dir.path().join("bad.zrf");
        fs::write(&bad, &corrupt).unwrap();
        assert!(matches!(read_features(&bad), Err(Error::Format { .. })));
    }

    fn one_layer(layer: LayerId, utt: &str, segs: Vec<Segment>) -> Labeling {
        let mut l = Labeling::new(layer);
        l.utts.insert(utt.to_string(), segs);
        l
    }

    #[test]
    fn labels_round_trip_single_segment() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.tsv");
        let l = one_layer(LayerId::new(3, 50), "u1", vec![Segment::new(7, 0, 42)]);
        write_labels(&[l.clone()], &path).unwrap();
        let back = read_labels(&path).unwrap();
        assert_eq!(back, vec![l]);
    }

    #[test]
    fn labels_reject_overlap_on_write() {
        let dir = tempfile::tempdir().unwrap();
        let ok = one_layer(
            LayerId::new(3, 50),
            "u1",
            vec![Segment::new(0, 0, 10), Segment::new(1, 10, 20)],
        );
        write_labels(&[ok], dir.path().join("ok.tsv")).unwrap();
        let bad = one_layer(
            LayerId::new(3, 50),
            "u1",
            vec![Segment::new(0, 0, 10), Segment::new(1, 9, 20)],
        );
        assert!(write_labels(&[bad], dir.path().join("bad.tsv")).is_err());
    }

    #[test]
    fn labels_sixteen_layers_group_and_sort_by_layer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.tsv");
        let mut labelings = Vec::new();
        for &m in &[9, 3, 7, 5] {
            for &n in &[500, 50, 300, 100] {
                labelings.push(one_layer(
                    LayerId::new(m, n),
                    "u1",
                    vec![Segment::new(0, 0, 20), Segment::new(1, 20, 40)],
                ));
            }
        }
        write_labels(&labelings, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let layers: Vec<String> = text
            .lines()
            .map(|l| l.split('\t').nth(1).unwrap().to_string())
            .collect();
        assert_eq!(layers.len(), 32);
        let mut grouped: Vec<String> = layers.clone();
        grouped.dedup();
        assert_eq!(grouped.len(), 16, "each layer forms one contiguous group");
        let parsed: Vec<LayerId> = grouped.iter().map(|s| s.parse().unwrap()).collect();
        let mut sorted = parsed.clone();
        sorted.sort();
        assert_eq!(parsed, sorted, "groups sorted by layer");
        assert_eq!(read_labels(&path).unwrap().len(), 16);
    }

    #[test]
    fn model_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.model");
        let mut m = ModelFile::new("tokenset", 1);
        m.push_meta("m", 3);
        m.push_meta("n", 50);
        m.floats = vec![0.25, -1.5, 3.25e-17, f64::MIN_POSITIVE];
        write_model(&m, &path).unwrap();
        let back = read_model(&path).unwrap();
        assert_eq!(back, m);
        back.expect("tokenset", 1).unwrap();
        assert!(back.expect("lda", 1).is_err());
        assert!(back.expect("tokenset", 2).is_err());
        assert_eq!(back.meta_usize("n").unwrap(), 50);
    }

    #[test]
    fn model_file_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.model");
        fs::write(&path, "nonsense\n").unwrap();
        assert!(matches!(read_model(&path), Err(Error::Format { .. })));
        let truncated = dir.path().join("short.model");
        fs::write(&truncated, "ZRM1 x\nversion 1\nfloats 4\n\x00\x00").unwrap();
        assert!(matches!(read_model(&truncated), Err(Error::Format { .. })));
    }
}
