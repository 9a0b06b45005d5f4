//! Slow reference implementations used only by tests: exhaustive DTW path
//! enumeration, numerical-integration Gaussian KL, brute-force decoding by
//! enumerating every labeling, and a naive-DFT re-implementation of the
//! cepstral front end. Each computes the target quantity through a path
//! independent of the production code it checks.

use ndarray::Array2;

use crate::frontend::{
    hz_to_mel, mel_to_hz, window_and_shift, DELTA_WINDOW, LOG_FLOOR, MEL_FILTERS, NUM_CEPSTRA,
    PRE_EMPHASIS,
};
use crate::hmmtok::TokenSet;
use crate::matching::{DtwOutcome, FrameMetric};
use crate::types::{FeatureSequence, Segment};

fn better(cost: f64, len: usize, than: Option<(f64, usize)>) -> bool {
    match than {
        None => true,
        Some((c, l)) => cost < c || (cost == c && len < l),
    }
}

/// Exhaustive token DTW: every monotone path covering the full query with a
/// free document start and end.
pub fn token_dtw_brute(doc: &[usize], query: &[usize], s: &Array2<f64>) -> DtwOutcome {
    let (d_len, q_len) = (doc.len(), query.len());
    let w = |i: usize, j: usize| s[[doc[i], query[j]]];
    let mut best: Option<(f64, usize)> = None;

    fn explore(
        i: usize,
        j: usize,
        cost: f64,
        len: usize,
        d_len: usize,
        q_len: usize,
        w: &dyn Fn(usize, usize) -> f64,
        best: &mut Option<(f64, usize)>,
    ) {
        let cost = cost + w(i, j);
        let len = len + 1;
        if j == q_len - 1 && better(cost, len, *best) {
            *best = Some((cost, len));
        }
        if i + 1 < d_len {
            explore(i + 1, j, cost, len, d_len, q_len, w, best);
        }
        if j + 1 < q_len {
            explore(i, j + 1, cost, len, d_len, q_len, w, best);
        }
        if i + 1 < d_len && j + 1 < q_len {
            explore(i + 1, j + 1, cost, len, d_len, q_len, w, best);
        }
    }

    for start in 0..d_len {
        explore(start, 0, 0.0, 0, d_len, q_len, &w, &mut best);
    }
    let (cost, len) = best.expect("non-empty sequences");
    DtwOutcome {
        cost,
        path_len: len,
        normalized: cost / len as f64,
    }
}

/// Exhaustive feature DTW with both endpoints anchored.
pub fn feature_dtw_brute(
    a: &FeatureSequence,
    b: &FeatureSequence,
    metric: FrameMetric,
) -> DtwOutcome {
    let xa = a.to_f64();
    let xb = b.to_f64();
    let mut best: Option<(f64, usize)> = None;

    #[allow(clippy::too_many_arguments)]
    fn explore(
        i: usize,
        j: usize,
        cost: f64,
        len: usize,
        xa: &Array2<f64>,
        xb: &Array2<f64>,
        metric: FrameMetric,
        best: &mut Option<(f64, usize)>,
    ) {
        let cost = cost + metric.distance(xa.row(i), xb.row(j));
        let len = len + 1;
        let (ta, tb) = (xa.nrows(), xb.nrows());
        if i == ta - 1 && j == tb - 1 {
            if better(cost, len, *best) {
                *best = Some((cost, len));
            }
            return;
        }
        if i + 1 < ta {
            explore(i + 1, j, cost, len, xa, xb, metric, best);
        }
        if j + 1 < tb {
            explore(i, j + 1, cost, len, xa, xb, metric, best);
        }
        if i + 1 < ta && j + 1 < tb {
            explore(i + 1, j + 1, cost, len, xa, xb, metric, best);
        }
    }

    explore(0, 0, 0.0, 0, &xa, &xb, metric, &mut best);
    let (cost, len) = best.expect("non-empty sequences");
    DtwOutcome {
        cost,
        path_len: len,
        normalized: cost / len as f64,
    }
}

/// KL divergence between two univariate Gaussians by Simpson quadrature over
/// a wide interval around the first distribution's mass.
pub fn gaussian_kl_quadrature(mean_p: f64, var_p: f64, mean_q: f64, var_q: f64) -> f64 {
    let sd = var_p.sqrt();
    let lo = mean_p - 15.0 * sd;
    let hi = mean_p + 15.0 * sd;
    let n = 40_000usize; // even
    let h = (hi - lo) / n as f64;
    let ln_p = |x: f64| -0.5 * ((x - mean_p) * (x - mean_p) / var_p) - 0.5 * (2.0 * std::f64::consts::PI * var_p).ln();
    let ln_q = |x: f64| -0.5 * ((x - mean_q) * (x - mean_q) / var_q) - 0.5 * (2.0 * std::f64::consts::PI * var_q).ln();
    let f = |x: f64| {
        let lp = ln_p(x);
        lp.exp() * (lp - ln_q(x))
    };
    let mut sum = f(lo) + f(hi);
    for k in 1..n {
        let x = lo + k as f64 * h;
        sum += f(x) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    sum * h / 3.0
}

/// Brute-force decoding for single-state token models: enumerates every
/// segmentation of the utterance and every token assignment, scoring each
/// with the same entry/loop/exit structure as the production decoder.
pub fn decode_brute(x: &Array2<f64>, tokens: &TokenSet) -> (Vec<Segment>, f64) {
    assert_eq!(tokens.layer.m, 1, "brute decoder covers m = 1 only");
    let t_len = x.nrows();
    let n = tokens.models.len();
    let ln_prior = -(n as f64).ln();
    let emis = |k: usize, t: usize| -> f64 {
        let model = &tokens.models[k];
        let mut quad = 0.0;
        let mut ln_det = 0.0;
        for j in 0..x.ncols() {
            let diff = x[[t, j]] - model.means[[0, j]];
            quad += diff * diff / model.vars[[0, j]];
            ln_det += model.vars[[0, j]].ln();
        }
        -0.5 * (x.ncols() as f64 * (2.0 * std::f64::consts::PI).ln() + ln_det) - 0.5 * quad
    };

    let mut best_score = f64::NEG_INFINITY;
    let mut best: Vec<Segment> = Vec::new();
    // Compositions of t_len as bitmasks over the t_len - 1 interior cuts.
    for cuts in 0..(1u32 << (t_len - 1)) {
        let mut bounds = vec![0usize];
        for pos in 1..t_len {
            if cuts & (1 << (pos - 1)) != 0 {
                bounds.push(pos);
            }
        }
        bounds.push(t_len);
        let k_segs = bounds.len() - 1;
        let mut assignment = vec![0usize; k_segs];
        loop {
            // Score in strict time order, mirroring the DP accumulation.
            let mut score = 0.0;
            for seg in 0..k_segs {
                let tok = assignment[seg];
                let loop_p = tokens.models[tok].self_loop[0];
                score += ln_prior + emis(tok, bounds[seg]);
                for t in bounds[seg] + 1..bounds[seg + 1] {
                    score += loop_p.ln() + emis(tok, t);
                }
                score += (1.0 - loop_p).ln();
            }
            if score > best_score {
                best_score = score;
                best = (0..k_segs)
                    .map(|s| Segment::new(assignment[s], bounds[s], bounds[s + 1]))
                    .collect();
            }
            // Next token assignment.
            let mut digit = 0usize;
            loop {
                if digit == k_segs {
                    break;
                }
                assignment[digit] += 1;
                if assignment[digit] < n {
                    break;
                }
                assignment[digit] = 0;
                digit += 1;
            }
            if digit == k_segs {
                break;
            }
        }
    }
    (best, best_score)
}

/// Independent cepstral reference: the same pinned recipe computed with a
/// naive DFT and directly coded filterbank, DCT and regression deltas.
pub fn mfcc39_reference(samples: &[i16], sample_rate: u32) -> Array2<f64> {
    let (window, shift) = window_and_shift(sample_rate);
    assert!(samples.len() >= window);
    let x: Vec<f64> = samples.iter().map(|&s| s as f64 / 32768.0).collect();
    let mut pre = vec![x[0]];
    for t in 1..x.len() {
        pre.push(x[t] - PRE_EMPHASIS * x[t - 1]);
    }
    let n_frames = (x.len() - window) / shift + 1;
    let nfft = window.next_power_of_two();
    let bins = nfft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let mel_hi = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..MEL_FILTERS + 2)
        .map(|j| mel_to_hz(mel_hi * j as f64 / (MEL_FILTERS + 1) as f64))
        .collect();

    let mut statics = vec![vec![0.0f64; NUM_CEPSTRA + 1]; n_frames];
    for t in 0..n_frames {
        let mut frame: Vec<f64> = (0..window)
            .map(|i| {
                let w = if window == 1 {
                    1.0
                } else {
                    0.54 - 0.46
                        * (2.0 * std::f64::consts::PI * i as f64 / (window - 1) as f64).cos()
                };
                pre[t * shift + i] * w
            })
            .collect();
        let energy: f64 = frame.iter().map(|v| v * v).sum();
        frame.resize(nfft, 0.0);
        // Naive DFT power spectrum.
        let mut power = vec![0.0f64; bins];
        for (k, p) in power.iter_mut().enumerate() {
            let mut re = 0.0;
            let mut im = 0.0;
            for (i, &v) in frame.iter().enumerate() {
                let phase = -2.0 * std::f64::consts::PI * k as f64 * i as f64 / nfft as f64;
                re += v * phase.cos();
                im += v * phase.sin();
            }
            *p = re * re + im * im;
        }
        let mut mel_energy = vec![0.0f64; MEL_FILTERS];
        for (fi, me) in mel_energy.iter_mut().enumerate() {
            let (lo, center, hi) = (edges[fi], edges[fi + 1], edges[fi + 2]);
            for (k, &p) in power.iter().enumerate() {
                let f = k as f64 * sample_rate as f64 / nfft as f64;
                let weight = if f >= lo && f <= center {
                    (f - lo) / (center - lo)
                } else if f > center && f <= hi {
                    (hi - f) / (hi - center)
                } else {
                    0.0
                };
                *me += weight.max(0.0) * p;
            }
        }
        for q in 1..=NUM_CEPSTRA {
            let mut c = 0.0;
            for (j, &e) in mel_energy.iter().enumerate() {
                c += e.max(LOG_FLOOR).ln()
                    * (std::f64::consts::PI * q as f64 * (j as f64 + 0.5) / MEL_FILTERS as f64)
                        .cos();
            }
            statics[t][q - 1] = c * (2.0 / MEL_FILTERS as f64).sqrt();
        }
        statics[t][NUM_CEPSTRA] = energy.max(LOG_FLOOR).ln();
    }

    let reg = |src: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let denom: f64 = 2.0 * (1..=DELTA_WINDOW).map(|u| (u * u) as f64).sum::<f64>();
        (0..src.len())
            .map(|t| {
                (0..src[0].len())
                    .map(|d| {
                        let mut num = 0.0;
                        for u in 1..=DELTA_WINDOW {
                            let fwd = (t + u).min(src.len() - 1);
                            let bwd = t.saturating_sub(u);
                            num += u as f64 * (src[fwd][d] - src[bwd][d]);
                        }
                        num / denom
                    })
                    .collect()
            })
            .collect()
    };
    let d1 = reg(&statics);
    let d2 = reg(&d1);
    let width = 3 * (NUM_CEPSTRA + 1);
    let mut out = Array2::zeros((n_frames, width));
    for t in 0..n_frames {
        for d in 0..NUM_CEPSTRA + 1 {
            out[[t, d]] = statics[t][d];
            out[[t, NUM_CEPSTRA + 1 + d]] = d1[t][d];
            out[[t, 2 * (NUM_CEPSTRA + 1) + d]] = d2[t][d];
        }
    }
    out
}
