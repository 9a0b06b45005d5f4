//! Multi-target bottleneck network: a feed-forward classifier with sigmoid
//! trunk layers ending in a narrow bottleneck, and one softmax output group
//! per tokenizer layer. All groups share the trunk and are trained jointly
//! with a uniformly weighted cross-entropy sum; the bottleneck activations
//! are the learned features.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpusio::ModelFile;
use crate::error::{Error, Result};
use crate::frontend::StackedSequence;
use crate::reinforce::mix;
use crate::types::{FeatureSequence, FeatureSet};

/// Network topology and optimization settings.
#[derive(Clone, PartialEq, Debug)]
pub struct NetConfig {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub bottleneck: usize,
    /// Output group sizes, one per tokenizer layer.
    pub groups: Vec<usize>,
    pub learning_rate: f64,
    pub minibatch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl NetConfig {
    pub fn new(input: usize, groups: Vec<usize>, seed: u64) -> Self {
        NetConfig {
            input,
            hidden: vec![256, 256],
            bottleneck: 39,
            groups,
            learning_rate: 0.1,
            minibatch: 64,
            epochs: 20,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input == 0 || self.bottleneck == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::invalid("network widths must be >= 1"));
        }
        if self.groups.is_empty() || self.groups.iter().any(|&g| g < 2) {
            return Err(Error::invalid("every output group needs >= 2 classes"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.minibatch == 0 {
            return Err(Error::invalid("minibatch size must be >= 1"));
        }
        Ok(())
    }

    /// Trunk widths: input, hidden layers, bottleneck.
    fn trunk_widths(&self) -> Vec<usize> {
        let mut w = vec![self.input];
        w.extend(&self.hidden);
        w.push(self.bottleneck);
        w
    }
}

/// One dense layer, `w` stored input-major so a batch multiplies as `x . w`.
#[derive(Clone, PartialEq, Debug)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Clone, PartialEq, Debug)]
pub struct MultiTargetNet {
    pub config: NetConfig,
    /// Sigmoid layers from the input to the bottleneck inclusive.
    pub trunk: Vec<Dense>,
    /// One linear softmax head per output group.
    pub heads: Vec<Dense>,
}

impl MultiTargetNet {
    /// Seeded initialization: weights uniform in +/- 1/sqrt(fan-in), zero
    /// biases.
    pub fn new(config: NetConfig) -> Result<MultiTargetNet> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = |fan_in: usize, fan_out: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = Array2::from_shape_fn((fan_in, fan_out), |_| {
                (2.0 * rng.random::<f64>() - 1.0) * bound
            });
            Dense {
                w,
                b: Array1::zeros(fan_out),
            }
        };
        let widths = config.trunk_widths();
        let trunk = widths.windows(2).map(|w| init(w[0], w[1])).collect();
        let heads = config
            .groups
            .iter()
            .map(|&g| init(config.bottleneck, g))
            .collect();
        Ok(MultiTargetNet {
            config,
            trunk,
            heads,
        })
    }

    pub fn param_count(&self) -> usize {
        self.trunk
            .iter()
            .chain(self.heads.iter())
            .map(|d| d.w.len() + d.b.len())
            .sum()
    }

    pub fn to_model_file(&self) -> ModelFile {
        let mut f = ModelFile::new("mdnn", 1);
        f.push_meta("input", self.config.input);
        f.push_meta(
            "hidden",
            self.config
                .hidden
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        f.push_meta("bottleneck", self.config.bottleneck);
        f.push_meta(
            "groups",
            self.config
                .groups
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        f.push_meta("learning_rate", self.config.learning_rate);
        f.push_meta("minibatch", self.config.minibatch);
        f.push_meta("epochs", self.config.epochs);
        f.push_meta("seed", self.config.seed);
        for d in self.trunk.iter().chain(self.heads.iter()) {
            f.floats.extend(d.w.iter());
            f.floats.extend(d.b.iter());
        }
        f
    }

    pub fn from_model_file(f: &ModelFile) -> Result<MultiTargetNet> {
        f.expect("mdnn", 1)?;
        let parse_list = |s: &str| -> Result<Vec<usize>> {
            if s.is_empty() {
                return Ok(Vec::new());
            }
            s.split(',')
                .map(|v| {
                    v.parse::<usize>()
                        .map_err(|_| Error::invalid(format!("bad width `{v}` in model file")))
                })
                .collect()
        };
        let config = NetConfig {
            input: f.meta_usize("input")?,
            hidden: parse_list(f.meta_value("hidden")?)?,
            bottleneck: f.meta_usize("bottleneck")?,
            groups: parse_list(f.meta_value("groups")?)?,
            learning_rate: f.meta_f64("learning_rate")?,
            minibatch: f.meta_usize("minibatch")?,
            epochs: f.meta_usize("epochs")?,
            seed: f.meta_usize("seed")? as u64,
        };
        config.validate()?;
        let mut net = MultiTargetNet::new(config)?;
        let mut cursor = 0usize;
        for d in net.trunk.iter_mut().chain(net.heads.iter_mut()) {
            let wn = d.w.len();
            let shape = d.w.raw_dim();
            d.w = Array2::from_shape_vec(shape, f.floats[cursor..cursor + wn].to_vec())
                .expect("shape checked");
            cursor += wn;
            let bn = d.b.len();
            d.b = Array1::from_vec(f.floats[cursor..cursor + bn].to_vec());
            cursor += bn;
        }
        if cursor != f.floats.len() {
            return Err(Error::invalid("mdnn payload length mismatch"));
        }
        Ok(net)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Forward pass output: bottleneck activations and per-group class
/// distributions.
#[derive(Clone, Debug)]
pub struct Forward {
    pub bottleneck: Array2<f64>,
    pub groups: Vec<Array2<f64>>,
}

/// Trunk activations after each sigmoid layer (the last entry is the
/// bottleneck).
fn trunk_forward(net: &MultiTargetNet, batch: &Array2<f64>) -> Vec<Array2<f64>> {
    let mut acts = Vec::with_capacity(net.trunk.len());
    let mut a = batch.clone();
    for layer in &net.trunk {
        let mut z = a.dot(&layer.w);
        z += &layer.b;
        a = z.mapv(sigmoid);
        acts.push(a.clone());
    }
    acts
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

pub fn forward(net: &MultiTargetNet, batch: &Array2<f64>) -> Result<Forward> {
    if batch.ncols() != net.config.input {
        return Err(Error::invalid(format!(
            "input width {} does not match network input {}",
            batch.ncols(),
            net.config.input
        )));
    }
    let acts = trunk_forward(net, batch);
    let bottleneck = acts.last().expect("trunk non-empty").clone();
    let groups = net
        .heads
        .iter()
        .map(|head| {
            let mut logits = bottleneck.dot(&head.w);
            logits += &head.b;
            softmax_rows(&logits)
        })
        .collect();
    Ok(Forward { bottleneck, groups })
}

/// Parameter gradients matching the trunk/head layout of the network.
pub struct Gradients {
    pub trunk: Vec<Dense>,
    pub heads: Vec<Dense>,
}

/// Loss and gradients on one batch. `group_weights` scales each group's
/// cross-entropy term; training and gradient checking use the uniform
/// `1 / group count`.
pub(crate) fn loss_and_grads(
    net: &MultiTargetNet,
    batch: &Array2<f64>,
    targets: &[Vec<usize>],
    group_weights: &[f64],
) -> Result<(f64, Gradients)> {
    let b = batch.nrows();
    if targets.len() != net.heads.len() || group_weights.len() != net.heads.len() {
        return Err(Error::invalid("one target list and weight per group required"));
    }
    for (g, t) in targets.iter().enumerate() {
        if t.len() != b {
            return Err(Error::invalid(format!(
                "group {g}: {} targets for {b} input rows",
                t.len()
            )));
        }
        if t.iter().any(|&c| c >= net.config.groups[g]) {
            return Err(Error::invalid(format!("group {g}: target class out of range")));
        }
    }
    let acts = trunk_forward(net, batch);
    let bottleneck = acts.last().expect("trunk non-empty");

    let mut loss = 0.0;
    let mut d_bottleneck: Array2<f64> = Array2::zeros(bottleneck.raw_dim());
    let mut head_grads = Vec::with_capacity(net.heads.len());
    for ((head, t), &w) in net.heads.iter().zip(targets).zip(group_weights) {
        let mut logits = bottleneck.dot(&head.w);
        logits += &head.b;
        let probs = softmax_rows(&logits);
        let mut ce = 0.0;
        let mut dlogits = probs;
        for (row, &target) in t.iter().enumerate() {
            ce -= dlogits[[row, target]].max(1e-300).ln();
            dlogits[[row, target]] -= 1.0;
        }
        loss += w * ce / b as f64;
        dlogits *= w / b as f64;
        head_grads.push(Dense {
            w: bottleneck.t().dot(&dlogits),
            b: dlogits.sum_axis(Axis(0)),
        });
        d_bottleneck += &dlogits.dot(&head.w.t());
    }

    let mut trunk_grads: Vec<Dense> = Vec::with_capacity(net.trunk.len());
    let mut da = d_bottleneck;
    for (l, layer) in net.trunk.iter().enumerate().rev() {
        let a = &acts[l];
        let dz = &da * &(a * &(1.0 - a));
        let below: &Array2<f64> = if l == 0 { batch } else { &acts[l - 1] };
        trunk_grads.push(Dense {
            w: below.t().dot(&dz),
            b: dz.sum_axis(Axis(0)),
        });
        if l > 0 {
            da = dz.dot(&layer.w.t());
        }
    }
    trunk_grads.reverse();
    if !loss.is_finite() {
        return Err(Error::NonFinite(
            "training loss is not finite; lower the learning rate".into(),
        ));
    }
    Ok((
        loss,
        Gradients {
            trunk: trunk_grads,
            heads: head_grads,
        },
    ))
}

/// Framewise training by seeded minibatch gradient descent. Targets hold the
/// per-frame class of every group. Returns the mean loss per epoch.
pub fn train(
    net: &mut MultiTargetNet,
    inputs: &Array2<f64>,
    targets: &[Vec<usize>],
) -> Result<Vec<f64>> {
    let n = inputs.nrows();
    if n == 0 {
        return Err(Error::invalid("training needs at least one frame"));
    }
    let uniform = vec![1.0 / net.heads.len() as f64; net.heads.len()];
    let cfg = net.config.clone();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ mix(epoch as u64 + 1));
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut total = 0.0;
        for chunk in order.chunks(cfg.minibatch) {
            let batch = gather_rows(inputs, chunk);
            let batch_targets: Vec<Vec<usize>> = targets
                .iter()
                .map(|t| chunk.iter().map(|&i| t[i]).collect())
                .collect();
            let (loss, grads) = loss_and_grads(net, &batch, &batch_targets, &uniform)?;
            total += loss * chunk.len() as f64;
            for (layer, grad) in net.trunk.iter_mut().zip(grads.trunk.iter()) {
                layer.w.scaled_add(-cfg.learning_rate, &grad.w);
                layer.b.scaled_add(-cfg.learning_rate, &grad.b);
            }
            for (head, grad) in net.heads.iter_mut().zip(grads.heads.iter()) {
                head.w.scaled_add(-cfg.learning_rate, &grad.w);
                head.b.scaled_add(-cfg.learning_rate, &grad.b);
            }
        }
        epoch_losses.push(total / n as f64);
    }
    Ok(epoch_losses)
}

fn gather_rows(x: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), x.ncols()));
    for (r, &i) in rows.iter().enumerate() {
        out.row_mut(r).assign(&x.row(i));
    }
    out
}

/// Analytic gradients against central finite differences (step 1e-5);
/// returns the maximum relative error over all parameters. Only sized for
/// small nets.
pub fn gradient_check(
    net: &MultiTargetNet,
    batch: &Array2<f64>,
    targets: &[Vec<usize>],
) -> Result<f64> {
    if net.param_count() > 10_000 {
        return Err(Error::invalid(
            "gradient check is limited to nets with <= 1e4 parameters",
        ));
    }
    let uniform = vec![1.0 / net.heads.len() as f64; net.heads.len()];
    let (_, grads) = loss_and_grads(net, batch, targets, &uniform)?;
    let h = 1e-5;
    let mut probe = net.clone();
    let mut max_rel = 0.0f64;

    let mut check = |analytic: f64, plus: f64, minus: f64| {
        let numeric = (plus - minus) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    };

    let loss_of = |net: &MultiTargetNet| -> Result<f64> {
        Ok(loss_and_grads(net, batch, targets, &uniform)?.0)
    };

    for li in 0..net.trunk.len() {
        for idx in 0..net.trunk[li].w.len() {
            let (r, c) = (idx / net.trunk[li].w.ncols(), idx % net.trunk[li].w.ncols());
            let orig = probe.trunk[li].w[[r, c]];
            probe.trunk[li].w[[r, c]] = orig + h;
            let plus = loss_of(&probe)?;
            probe.trunk[li].w[[r, c]] = orig - h;
            let minus = loss_of(&probe)?;
            probe.trunk[li].w[[r, c]] = orig;
            check(grads.trunk[li].w[[r, c]], plus, minus);
        }
        for bi in 0..net.trunk[li].b.len() {
            let orig = probe.trunk[li].b[bi];
            probe.trunk[li].b[bi] = orig + h;
            let plus = loss_of(&probe)?;
            probe.trunk[li].b[bi] = orig - h;
            let minus = loss_of(&probe)?;
            probe.trunk[li].b[bi] = orig;
            check(grads.trunk[li].b[bi], plus, minus);
        }
    }
    for hi in 0..net.heads.len() {
        for idx in 0..net.heads[hi].w.len() {
            let (r, c) = (idx / net.heads[hi].w.ncols(), idx % net.heads[hi].w.ncols());
            let orig = probe.heads[hi].w[[r, c]];
            probe.heads[hi].w[[r, c]] = orig + h;
            let plus = loss_of(&probe)?;
            probe.heads[hi].w[[r, c]] = orig - h;
            let minus = loss_of(&probe)?;
            probe.heads[hi].w[[r, c]] = orig;
            check(grads.heads[hi].w[[r, c]], plus, minus);
        }
        for bi in 0..net.heads[hi].b.len() {
            let orig = probe.heads[hi].b[bi];
            probe.heads[hi].b[bi] = orig + h;
            let plus = loss_of(&probe)?;
            probe.heads[hi].b[bi] = orig - h;
            let minus = loss_of(&probe)?;
            probe.heads[hi].b[bi] = orig;
            check(grads.heads[hi].b[bi], plus, minus);
        }
    }
    Ok(max_rel)
}

/// Bottleneck features for every utterance of a stacked corpus.
pub fn extract_bnf(
    net: &MultiTargetNet,
    stacked: &BTreeMap<String, StackedSequence>,
    period_ms: u32,
) -> Result<FeatureSet> {
    let mut out = FeatureSet::new();
    for (utt, seq) in stacked {
        let fwd = forward(net, &seq.data)?;
        out.insert(
            utt.clone(),
            FeatureSequence::new(utt.clone(), period_ms, fwd.bottleneck.mapv(|v| v as f32)),
        );
    }
    Ok(out)
}
