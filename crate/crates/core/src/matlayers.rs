//! Orchestration of the tokenizer grid and the outer feature-learning loop:
//! fit every (m, n) layer independently, refine all layers jointly by
//! mutual reinforcement, train the multi-target network on the layered
//! labels, extract bottleneck features, and feed them back as the next
//! iteration's tokenizer input.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;

use crate::corpusio;
use crate::error::{Error, Result};
use crate::frontend::StackedSequence;
use crate::hmmtok::{self, TokenSet};
use crate::mdnn::{self, MultiTargetNet, NetConfig};
use crate::reinforce::{self, mix, FusionConfig, MrAudit};
use crate::types::{FeatureSet, Labeling, LayerId};

/// The tokenizer hyperparameter grid: temporal granularities (states per
/// HMM) crossed with phonetic granularities (token inventory sizes).
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct GranularityGrid {
    pub m_values: Vec<usize>,
    pub n_values: Vec<usize>,
}

impl GranularityGrid {
    pub fn new(m_values: Vec<usize>, n_values: Vec<usize>) -> Result<GranularityGrid> {
        let strictly_increasing = |v: &[usize]| v.windows(2).all(|w| w[0] < w[1]);
        if m_values.is_empty() || n_values.is_empty() {
            return Err(Error::invalid("grid axes must be non-empty"));
        }
        if m_values[0] < 2 || !strictly_increasing(&m_values) {
            return Err(Error::invalid(
                "temporal granularities must be >= 2 and strictly increasing",
            ));
        }
        if n_values[0] < 2 || !strictly_increasing(&n_values) {
            return Err(Error::invalid(
                "phonetic granularities must be >= 2 and strictly increasing",
            ));
        }
        Ok(GranularityGrid { m_values, n_values })
    }

    /// Layers in deterministic grid order (m-major).
    pub fn layers(&self) -> Vec<LayerId> {
        let mut out = Vec::with_capacity(self.size());
        for &m in &self.m_values {
            for &n in &self.n_values {
                out.push(LayerId::new(m, n));
            }
        }
        out
    }

    pub fn size(&self) -> usize {
        self.m_values.len() * self.n_values.len()
    }
}

/// Independent, reproducible per-layer seed derivation.
pub fn layer_seed(seed: u64, layer: LayerId) -> u64 {
    seed ^ mix(((layer.m as u64) << 32) | layer.n as u64)
}

/// One trained layer: its token models, current labels, and the per-epoch
/// log-likelihood trace of the most recent fit.
#[derive(Clone, Debug)]
pub struct LayerState {
    pub tokens: TokenSet,
    pub labels: Labeling,
    pub logliks: Vec<f64>,
}

/// The tokenizer grid after one iteration of fitting (and any number of
/// mutual-reinforcement rounds).
#[derive(Clone, Debug)]
pub struct IterationState {
    /// 1-based iteration index.
    pub iteration: usize,
    /// Identifier of the feature stream the tokenizers consumed.
    pub input_feature: String,
    pub mr_rounds: usize,
    pub layers: Vec<LayerState>,
    pub mr_audit: Vec<MrAudit>,
}

impl IterationState {
    pub fn labelings(&self) -> Vec<Labeling> {
        self.layers.iter().map(|l| l.labels.clone()).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FitOptions {
    pub max_epochs: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { max_epochs: 10 }
    }
}

/// Fits every grid layer independently on `corpus`. Layer seeds are derived
/// from `seed` so each layer is reproducible in isolation.
pub fn run_mat(
    corpus: &FeatureSet,
    grid: &GranularityGrid,
    seed: u64,
    opts: &FitOptions,
    iteration: usize,
    input_feature: &str,
) -> Result<IterationState> {
    if corpus.is_empty() {
        return Err(Error::invalid("tokenizer grid needs a non-empty corpus"));
    }
    let mut layers = Vec::with_capacity(grid.size());
    for layer in grid.layers() {
        let fit = fit_one_layer(corpus, layer, seed, opts)
            .map_err(|e| Error::invalid(format!("layer {layer}: {e}")))?;
        layers.push(fit);
    }
    Ok(IterationState {
        iteration,
        input_feature: input_feature.to_string(),
        mr_rounds: 0,
        layers,
        mr_audit: Vec::new(),
    })
}

/// Initializes and fits one layer with its derived seed.
pub fn fit_one_layer(
    corpus: &FeatureSet,
    layer: LayerId,
    seed: u64,
    opts: &FitOptions,
) -> Result<LayerState> {
    let init = hmmtok::initialize(corpus, layer, layer_seed(seed, layer))?;
    let fit = hmmtok::fit_layer(corpus, &init, opts.max_epochs)?;
    Ok(LayerState {
        tokens: fit.tokens,
        labels: fit.labels,
        logliks: fit.logliks,
    })
}

/// Mutual-reinforcement options; fusion constants and LDA hyperparameters.
#[derive(Clone, Debug)]
pub struct MrOptions {
    pub fusion: FusionConfig,
    pub weights: Option<Vec<f64>>,
    pub beta: f64,
    pub sweeps: usize,
}

impl Default for MrOptions {
    fn default() -> Self {
        MrOptions {
            fusion: FusionConfig::default(),
            weights: None,
            beta: reinforce::DEFAULT_BETA,
            sweeps: reinforce::DEFAULT_SWEEPS,
        }
    }
}

/// Runs `rounds` mutual-reinforcement cycles: fuse boundaries, relabel by
/// LDA, refit every layer from the relabeled initialization.
pub fn apply_mr(
    state: &IterationState,
    corpus: &FeatureSet,
    rounds: usize,
    mr: &MrOptions,
    opts: &FitOptions,
    seed: u64,
) -> Result<IterationState> {
    let mut out = state.clone();
    for round in 1..=rounds {
        let labelings = out.labelings();
        let (inits, _, audit) = reinforce::reinitialize(
            &labelings,
            mr.weights.as_deref(),
            &mr.fusion,
            mr.beta,
            mr.sweeps,
            seed ^ mix(0x4d52_0000 + (out.mr_rounds as u64 + round as u64)),
        )?;
        let mut layers = Vec::with_capacity(out.layers.len());
        for (prev, init) in out.layers.iter().zip(inits) {
            let fit = hmmtok::fit_layer(corpus, &init, opts.max_epochs).map_err(|e| {
                Error::invalid(format!("layer {}: {e}", prev.tokens.layer))
            })?;
            layers.push(LayerState {
                tokens: fit.tokens,
                labels: fit.labels,
                logliks: fit.logliks,
            });
        }
        out.layers = layers;
        out.mr_rounds += 1;
        out.mr_audit.push(audit);
    }
    Ok(out)
}

/// Per-utterance auxiliary inputs for the network: one vector per utterance
/// (appended to every frame) and any number of frame-level streams (stacked
/// like the main features).
#[derive(Clone, Debug, Default)]
pub struct AuxStreams {
    pub per_utt: Option<BTreeMap<String, Vec<f32>>>,
    pub per_frame: Vec<FeatureSet>,
}

impl AuxStreams {
    pub fn utt_dim(&self) -> usize {
        self.per_utt
            .as_ref()
            .and_then(|m| m.values().next())
            .map_or(0, Vec::len)
    }
}

/// Builds the network input: every stream (initial features plus all prior
/// bottleneck features plus frame-level auxiliaries) is windowed with
/// `context` frames per side and concatenated; the per-utterance auxiliary
/// vector is appended once at the end of every row.
pub fn build_net_input(
    streams: &[&FeatureSet],
    aux: &AuxStreams,
    context: usize,
) -> Result<BTreeMap<String, StackedSequence>> {
    if streams.is_empty() {
        return Err(Error::invalid("network input needs at least one stream"));
    }
    let base = streams[0];
    let aux_utt_dim = aux.utt_dim();
    if let Some(per_utt) = &aux.per_utt {
        for (utt, v) in per_utt {
            if v.len() != aux_utt_dim {
                return Err(Error::invalid(format!(
                    "auxiliary vector for `{utt}` has dimension {}, expected {aux_utt_dim}",
                    v.len()
                )));
            }
        }
    }
    let mut out = BTreeMap::new();
    for (utt, first) in base.iter() {
        let t_len = first.len();
        let mut parts: Vec<Array2<f64>> = Vec::new();
        for stream in streams.iter().copied().chain(aux.per_frame.iter().map(|s| {
            // treat frame-level aux exactly like a feature stream
            s as &FeatureSet
        })) {
            let seq = stream.get(utt).ok_or_else(|| {
                Error::invalid(format!("stream missing utterance `{utt}`"))
            })?;
            if seq.len() != t_len {
                return Err(Error::invalid(format!(
                    "stream frame count mismatch for `{utt}`: {} vs {t_len}",
                    seq.len()
                )));
            }
            parts.push(crate::frontend::stack(seq, context, None).data);
        }
        let width: usize = parts.iter().map(|p| p.ncols()).sum::<usize>() + aux_utt_dim;
        let mut data = Array2::zeros((t_len, width));
        let mut col = 0usize;
        for p in &parts {
            data.slice_mut(ndarray::s![.., col..col + p.ncols()]).assign(p);
            col += p.ncols();
        }
        if aux_utt_dim > 0 {
            let per_utt = aux.per_utt.as_ref().expect("aux_utt_dim > 0");
            let v = per_utt.get(utt).ok_or_else(|| {
                Error::invalid(format!("auxiliary vector missing for `{utt}`"))
            })?;
            for (j, &x) in v.iter().enumerate() {
                for t in 0..t_len {
                    data[[t, col + j]] = x as f64;
                }
            }
        }
        out.insert(
            utt.clone(),
            StackedSequence {
                utt: utt.clone(),
                data,
            },
        );
    }
    Ok(out)
}

/// Flattens stacked utterances into one design matrix, utterances in sorted
/// order, frames in time order.
pub fn flatten_inputs(stacked: &BTreeMap<String, StackedSequence>) -> Result<Array2<f64>> {
    let width = stacked
        .values()
        .next()
        .ok_or_else(|| Error::invalid("no stacked utterances"))?
        .dim();
    let rows: usize = stacked.values().map(StackedSequence::len).sum();
    let mut out = Array2::zeros((rows, width));
    let mut r = 0usize;
    for seq in stacked.values() {
        if seq.dim() != width {
            return Err(Error::invalid("inconsistent stacked widths"));
        }
        out.slice_mut(ndarray::s![r..r + seq.len(), ..]).assign(&seq.data);
        r += seq.len();
    }
    Ok(out)
}

/// Per-layer frame targets aligned with [`flatten_inputs`] row order.
pub fn frame_targets(labelings: &[Labeling], corpus: &FeatureSet) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(labelings.len());
    for labeling in labelings {
        let mut targets = Vec::new();
        for (utt, seq) in corpus {
            let frames = labeling.frame_tokens(utt);
            if frames.len() != seq.len() {
                return Err(Error::invalid(format!(
                    "layer {} targets for `{utt}` cover {} of {} frames",
                    labeling.layer,
                    frames.len(),
                    seq.len()
                )));
            }
            targets.extend(frames);
        }
        out.push(targets);
    }
    Ok(out)
}

/// Network hyperparameters that are not derivable from the state.
#[derive(Clone, Debug)]
pub struct NetOptions {
    pub hidden: Vec<usize>,
    pub bottleneck: usize,
    pub learning_rate: f64,
    pub minibatch: usize,
    pub epochs: usize,
}

impl Default for NetOptions {
    fn default() -> Self {
        NetOptions {
            hidden: vec![256, 256],
            bottleneck: 39,
            learning_rate: 0.1,
            minibatch: 64,
            epochs: 20,
        }
    }
}

/// Trains the multi-target network on the state's labels over the given
/// input streams and extracts bottleneck features for the whole corpus.
pub fn train_net_on_state(
    state: &IterationState,
    corpus: &FeatureSet,
    streams: &[&FeatureSet],
    aux: &AuxStreams,
    context: usize,
    net_opts: &NetOptions,
    seed: u64,
) -> Result<(MultiTargetNet, Vec<f64>, FeatureSet)> {
    if state.layers.is_empty() {
        return Err(Error::invalid("iteration state has no trained layers"));
    }
    let stacked = build_net_input(streams, aux, context)?;
    let inputs = flatten_inputs(&stacked)?;
    let labelings = state.labelings();
    let targets = frame_targets(&labelings, corpus)?;
    let groups: Vec<usize> = state.layers.iter().map(|l| l.tokens.layer.n).collect();
    let config = NetConfig {
        input: inputs.ncols(),
        hidden: net_opts.hidden.clone(),
        bottleneck: net_opts.bottleneck,
        groups,
        learning_rate: net_opts.learning_rate,
        minibatch: net_opts.minibatch,
        epochs: net_opts.epochs,
        seed,
    };
    let mut net = MultiTargetNet::new(config)?;
    let losses = mdnn::train(&mut net, &inputs, &targets)?;
    let period = corpus.values().next().map_or(10, |s| s.period_ms);
    let bnf = mdnn::extract_bnf(&net, &stacked, period)?;
    Ok((net, losses, bnf))
}

/// One full feedback step: train the network for the current iteration,
/// extract bottleneck features, and refit the tokenizer grid on those
/// features alone as the next iteration.
#[allow(clippy::too_many_arguments)]
pub fn run_iteration(
    state: &IterationState,
    corpus: &FeatureSet,
    initial: &FeatureSet,
    bnf_history: &[FeatureSet],
    aux: &AuxStreams,
    context: usize,
    net_opts: &NetOptions,
    grid: &GranularityGrid,
    opts: &FitOptions,
    seed: u64,
) -> Result<(IterationState, FeatureSet, MultiTargetNet, Vec<f64>)> {
    let mut streams: Vec<&FeatureSet> = vec![initial];
    streams.extend(bnf_history.iter());
    let net_seed = seed ^ mix(0x6e65_7400 + state.iteration as u64);
    let (net, losses, bnf) =
        train_net_on_state(state, corpus, &streams, aux, context, net_opts, net_seed)?;
    let next = run_mat(
        &bnf,
        grid,
        seed ^ mix(state.iteration as u64 + 1),
        opts,
        state.iteration + 1,
        &format!("bnf-{}", state.iteration),
    )?;
    Ok((next, bnf, net, losses))
}

/// File name of one layer's model inside an iteration directory.
pub fn layer_model_name(layer: LayerId) -> String {
    format!("layer_{}_{}.model", layer.m, layer.n)
}

/// Persists every layer model and the joint label file into `dir`
/// (`layer_<m>_<n>.model` + `labels.tsv`).
pub fn save_layers(dir: impl AsRef<Path>, layers: &[LayerState]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for layer in layers {
        corpusio::write_model(
            &layer.tokens.to_model_file(),
            dir.join(layer_model_name(layer.tokens.layer)),
        )?;
    }
    let labelings: Vec<Labeling> = layers.iter().map(|l| l.labels.clone()).collect();
    corpusio::write_labels(&labelings, dir.join("labels.tsv"))
}

/// Loads layer models and labels saved by [`save_layers`]; log-likelihood
/// traces are not reloaded (they live in the iteration log).
pub fn load_layers(dir: impl AsRef<Path>, grid: &GranularityGrid) -> Result<Vec<LayerState>> {
    let dir = dir.as_ref();
    let labelings = corpusio::read_labels(dir.join("labels.tsv"))?;
    let by_layer: BTreeMap<LayerId, Labeling> =
        labelings.into_iter().map(|l| (l.layer, l)).collect();
    let mut out = Vec::with_capacity(grid.size());
    for layer in grid.layers() {
        let tokens =
            TokenSet::from_model_file(&corpusio::read_model(dir.join(layer_model_name(layer)))?)?;
        let labels = by_layer
            .get(&layer)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("labels.tsv missing layer {layer}")))?;
        out.push(LayerState {
            tokens,
            labels,
            logliks: Vec::new(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::FeatureSequence;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn synthetic_corpus(seed: u64, utts: usize, frames: usize, dim: usize) -> FeatureSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut corpus = FeatureSet::new();
        for u in 0..utts {
            let data = Array2::from_shape_fn((frames, dim), |(t, _)| {
                let center = if (t / 8) % 2 == 0 { -1.5 } else { 1.5 };
                (center + 0.4 * (rng.random::<f64>() - 0.5)) as f32
            });
            corpus.insert(
                format!("u{u:02}"),
                FeatureSequence::new(format!("u{u:02}"), 10, data),
            );
        }
        corpus
    }

    #[test]
    fn grid_validation_and_enumeration() {
        let grid = GranularityGrid::new(vec![3, 5, 7, 9], vec![50, 100, 300, 500]).unwrap();
        assert_eq!(grid.size(), 16);
        assert_eq!(grid.layers().len(), 16);
        assert_eq!(grid.layers()[0], LayerId::new(3, 50));
        assert!(GranularityGrid::new(vec![3, 3], vec![4]).is_err());
        assert!(GranularityGrid::new(vec![1, 3], vec![4]).is_err());
        assert!(GranularityGrid::new(vec![3], vec![8, 4]).is_err());
        assert!(GranularityGrid::new(vec![], vec![4]).is_err());
    }

    #[test]
    fn layer_seeds_are_distinct_and_stable() {
        let a = layer_seed(42, LayerId::new(3, 50));
        let b = layer_seed(42, LayerId::new(5, 50));
        let c = layer_seed(42, LayerId::new(3, 100));
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, layer_seed(42, LayerId::new(3, 50)));
    }

    #[test]
    fn single_cell_grid_matches_direct_fit() {
        let corpus = synthetic_corpus(1, 3, 64, 2);
        let grid = GranularityGrid::new(vec![3], vec![4]).unwrap();
        let opts = FitOptions::default();
        let state = run_mat(&corpus, &grid, 7, &opts, 1, "feat").unwrap();
        let direct = fit_one_layer(&corpus, LayerId::new(3, 4), 7, &opts).unwrap();
        assert_eq!(state.layers.len(), 1);
        assert_eq!(state.layers[0].labels, direct.labels);
        assert_eq!(
            state.layers[0].tokens.to_model_file(),
            direct.tokens.to_model_file()
        );
    }

    #[test]
    fn layers_are_independent_of_grid_shape() {
        let corpus = synthetic_corpus(2, 3, 64, 2);
        let opts = FitOptions::default();
        let small = run_mat(
            &corpus,
            &GranularityGrid::new(vec![3], vec![4]).unwrap(),
            9,
            &opts,
            1,
            "feat",
        )
        .unwrap();
        let big = run_mat(
            &corpus,
            &GranularityGrid::new(vec![3, 5], vec![4, 8]).unwrap(),
            9,
            &opts,
            1,
            "feat",
        )
        .unwrap();
        let in_big = &big.layers[0];
        assert_eq!(in_big.tokens.layer, LayerId::new(3, 4));
        assert_eq!(small.layers[0].labels, in_big.labels);
        assert_eq!(
            small.layers[0].tokens.to_model_file(),
            in_big.tokens.to_model_file()
        );
    }

    #[test]
    fn run_mat_layers_tile_the_corpus() {
        let corpus = synthetic_corpus(3, 4, 60, 3);
        let grid = GranularityGrid::new(vec![3, 5], vec![4, 8]).unwrap();
        let state = run_mat(&corpus, &grid, 11, &FitOptions::default(), 1, "feat").unwrap();
        assert_eq!(state.layers.len(), 4);
        for layer in &state.layers {
            layer
                .labels
                .validate_tiling(|u| corpus.get(u).map(|s| s.len()))
                .unwrap();
        }
    }

    #[test]
    fn mr_zero_rounds_is_identity_and_rounds_are_audited() {
        let corpus = synthetic_corpus(4, 4, 60, 2);
        let grid = GranularityGrid::new(vec![3, 5], vec![4, 8]).unwrap();
        let opts = FitOptions::default();
        let state = run_mat(&corpus, &grid, 13, &opts, 1, "feat").unwrap();
        let mr = MrOptions {
            sweeps: 40,
            ..MrOptions::default()
        };
        let unchanged = apply_mr(&state, &corpus, 0, &mr, &opts, 13).unwrap();
        assert_eq!(unchanged.mr_rounds, 0);
        assert_eq!(unchanged.labelings(), state.labelings());

        let two = apply_mr(&state, &corpus, 2, &mr, &opts, 13).unwrap();
        assert_eq!(two.mr_rounds, 2);
        assert_eq!(two.mr_audit.len(), 2);
        for layer in &two.layers {
            layer
                .labels
                .validate_tiling(|u| corpus.get(u).map(|s| s.len()))
                .unwrap();
        }
    }

    #[test]
    fn net_input_width_arithmetic() {
        let corpus = synthetic_corpus(5, 2, 30, 39);
        let mut aux_map = BTreeMap::new();
        for utt in corpus.keys() {
            aux_map.insert(utt.clone(), vec![0.0f32; 400]);
        }
        let aux = AuxStreams {
            per_utt: Some(aux_map),
            per_frame: Vec::new(),
        };
        // Iteration 1: one 39-dim stream, context 4, 400-dim auxiliary.
        let stacked = build_net_input(&[&corpus], &aux, 4).unwrap();
        assert_eq!(stacked.values().next().unwrap().dim(), 751);
        // Iteration k: d * (2c + 1) * k + aux.
        let bnf = synthetic_corpus(6, 2, 30, 39);
        let stacked = build_net_input(&[&corpus, &bnf], &aux, 4).unwrap();
        assert_eq!(stacked.values().next().unwrap().dim(), 39 * 9 * 2 + 400);
        // A frame-level auxiliary stream is stacked like any other stream.
        let dbm = synthetic_corpus(7, 2, 30, 39);
        let aux_frames = AuxStreams {
            per_utt: aux.per_utt.clone(),
            per_frame: vec![dbm],
        };
        let stacked = build_net_input(&[&corpus, &bnf], &aux_frames, 4).unwrap();
        assert_eq!(stacked.values().next().unwrap().dim(), 1453);
    }

    #[test]
    fn net_input_rejects_inconsistent_aux() {
        let corpus = synthetic_corpus(8, 2, 20, 4);
        let mut aux_map = BTreeMap::new();
        for (i, utt) in corpus.keys().enumerate() {
            aux_map.insert(utt.clone(), vec![0.0f32; if i == 0 { 8 } else { 9 }]);
        }
        let aux = AuxStreams {
            per_utt: Some(aux_map),
            per_frame: Vec::new(),
        };
        assert!(build_net_input(&[&corpus], &aux, 2).is_err());
    }

    #[test]
    fn frame_targets_align_with_inputs() {
        let corpus = synthetic_corpus(9, 3, 40, 2);
        let grid = GranularityGrid::new(vec![3], vec![4, 8]).unwrap();
        let state = run_mat(&corpus, &grid, 3, &FitOptions::default(), 1, "feat").unwrap();
        let targets = frame_targets(&state.labelings(), &corpus).unwrap();
        let stacked = build_net_input(&[&corpus], &AuxStreams::default(), 1).unwrap();
        let inputs = flatten_inputs(&stacked).unwrap();
        for t in &targets {
            assert_eq!(t.len(), inputs.nrows());
        }
    }

    #[test]
    fn train_net_produces_bottleneck_features() {
        let corpus = synthetic_corpus(10, 3, 40, 3);
        let grid = GranularityGrid::new(vec![3], vec![4]).unwrap();
        let state = run_mat(&corpus, &grid, 5, &FitOptions::default(), 1, "feat").unwrap();
        let net_opts = NetOptions {
            hidden: vec![16],
            bottleneck: 5,
            epochs: 3,
            ..NetOptions::default()
        };
        let (net, losses, bnf) = train_net_on_state(
            &state,
            &corpus,
            &[&corpus],
            &AuxStreams::default(),
            2,
            &net_opts,
            99,
        )
        .unwrap();
        assert_eq!(losses.len(), 3);
        assert_eq!(bnf.len(), corpus.len());
        for (utt, seq) in &bnf {
            assert_eq!(seq.len(), corpus[utt].len());
            assert_eq!(seq.dim(), 5);
        }
        assert_eq!(net.config.groups, vec![4]);

        let empty_state = IterationState {
            iteration: 1,
            input_feature: "feat".into(),
            mr_rounds: 0,
            layers: Vec::new(),
            mr_audit: Vec::new(),
        };
        assert!(train_net_on_state(
            &empty_state,
            &corpus,
            &[&corpus],
            &AuxStreams::default(),
            2,
            &net_opts,
            99,
        )
        .is_err());
    }

    #[test]
    fn iteration_feeds_bnf_back_to_the_grid() {
        let corpus = synthetic_corpus(11, 3, 40, 3);
        let grid = GranularityGrid::new(vec![3], vec![4]).unwrap();
        let opts = FitOptions { max_epochs: 3 };
        let state = run_mat(&corpus, &grid, 21, &opts, 1, "feat").unwrap();
        let net_opts = NetOptions {
            hidden: vec![8],
            bottleneck: 4,
            epochs: 2,
            ..NetOptions::default()
        };
        let (next, bnf, _, _) = run_iteration(
            &state,
            &corpus,
            &corpus,
            &[],
            &AuxStreams::default(),
            1,
            &net_opts,
            &grid,
            &opts,
            21,
        )
        .unwrap();
        assert_eq!(next.iteration, 2);
        assert_eq!(next.input_feature, "bnf-1");
        assert_eq!(bnf.values().next().unwrap().dim(), 4);
        for layer in &next.layers {
            layer
                .labels
                .validate_tiling(|u| corpus.get(u).map(|s| s.len()))
                .unwrap();
        }
    }

    #[test]
    fn layer_state_round_trips_through_disk() {
        let corpus = synthetic_corpus(12, 2, 40, 2);
        let grid = GranularityGrid::new(vec![3], vec![4, 8]).unwrap();
        let state = run_mat(&corpus, &grid, 17, &FitOptions::default(), 1, "feat").unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_layers(dir.path(), &state.layers).unwrap();
        let loaded = load_layers(dir.path(), &grid).unwrap();
        assert_eq!(loaded.len(), state.layers.len());
        for (a, b) in state.layers.iter().zip(&loaded) {
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.tokens.to_model_file(), b.tokens.to_model_file());
        }
    }
}
