//! Forecast scoring, naive baselines, and residual anomaly detection.
//!
//! All metrics score in physical units: `evaluate` normalizes each window
//! with the checkpoint's stored statistics, forwards, and denormalizes
//! before comparing. MAPE divides only where |target| clears an epsilon —
//! sewer depths and flows sit near zero at night — and reports how many
//! points it skipped. Anomalies are maximal runs of large forecast
//! residuals, z-scored against clean-validation residual statistics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{TimeSeriesPanel, Window, CHANNELS, CHANNEL_NAMES};
use crate::graph::{NodeId, PipeGraph};
use crate::model::{HydroNet, ModelError, ModelParams};
use crate::tensor::{Tensor, TensorError};
use crate::train::{Checkpoint, TrainError};

/// |target| must exceed this (physical units) to enter MAPE.
pub const MAPE_EPSILON: f64 = 1e-3;
/// Default z-score threshold for anomaly flags.
pub const DEFAULT_Z_THRESHOLD: f64 = 3.0;
/// Default minimum run length, in steps, for an anomaly event.
pub const DEFAULT_MIN_DURATION: usize = 3;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no points to score")]
    EmptyInput,
    #[error("every point fell below the MAPE epsilon")]
    AllExcluded,
    #[error("shapes differ: {0}")]
    ShapeMismatch(String),
    #[error("seasonal baseline needs {need} history steps, have {have}")]
    InsufficientHistory { have: usize, need: usize },
    #[error("residuals at node {node} channel {channel} have zero variance")]
    ZeroResidualVariance { node: String, channel: String },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Mean absolute error over all elements.
pub fn mae(pred: &Tensor, target: &Tensor) -> Result<f64, EvalError> {
    check_pair(pred, target)?;
    let n = pred.len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t).abs())
        .sum::<f64>()
        / n)
}

/// Root mean squared error over all elements.
pub fn rmse(pred: &Tensor, target: &Tensor) -> Result<f64, EvalError> {
    check_pair(pred, target)?;
    let n = pred.len() as f64;
    let ms = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum::<f64>()
        / n;
    Ok(ms.sqrt())
}

/// Mean |error|/|target| over points with |target| > epsilon; returns the
/// ratio and how many points were excluded.
pub fn mape(pred: &Tensor, target: &Tensor, epsilon: f64) -> Result<(f64, usize), EvalError> {
    check_pair(pred, target)?;
    let mut sum = 0.0;
    let mut used = 0usize;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        if t.abs() > epsilon {
            sum += (p - t).abs() / t.abs();
            used += 1;
        }
    }
    if used == 0 {
        return Err(EvalError::AllExcluded);
    }
    Ok((sum / used as f64, pred.len() - used))
}

fn check_pair(pred: &Tensor, target: &Tensor) -> Result<(), EvalError> {
    if pred.shape() != target.shape() {
        return Err(EvalError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.len() == 0 {
        return Err(EvalError::EmptyInput);
    }
    Ok(())
}

/// Scores for one channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelMetrics {
    pub mae: f64,
    pub rmse: f64,
    /// None when every point fell below the MAPE epsilon.
    pub mape: Option<f64>,
    pub mape_excluded: usize,
}

/// Scores per horizon step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    /// 1-based forecast step.
    pub step: usize,
    pub depth: ChannelMetrics,
    pub flow: ChannelMetrics,
}

/// Full per-channel report with a per-horizon breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub depth: ChannelMetrics,
    pub flow: ChannelMetrics,
    pub per_horizon: Vec<HorizonMetrics>,
    pub windows: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct Accumulator {
    count: usize,
    sum_abs: f64,
    sum_sq: f64,
    ratio_sum: f64,
    ratio_count: usize,
}

impl Accumulator {
    fn push(&mut self, pred: f64, target: f64) {
        let e = pred - target;
        self.count += 1;
        self.sum_abs += e.abs();
        self.sum_sq += e * e;
        if target.abs() > MAPE_EPSILON {
            self.ratio_sum += e.abs() / target.abs();
            self.ratio_count += 1;
        }
    }

    fn merge(&mut self, other: &Accumulator) {
        self.count += other.count;
        self.sum_abs += other.sum_abs;
        self.sum_sq += other.sum_sq;
        self.ratio_sum += other.ratio_sum;
        self.ratio_count += other.ratio_count;
    }

    fn finish(&self) -> Result<ChannelMetrics, EvalError> {
        if self.count == 0 {
            return Err(EvalError::EmptyInput);
        }
        let n = self.count as f64;
        Ok(ChannelMetrics {
            mae: self.sum_abs / n,
            rmse: (self.sum_sq / n).sqrt(),
            mape: (self.ratio_count > 0).then(|| self.ratio_sum / self.ratio_count as f64),
            mape_excluded: self.count - self.ratio_count,
        })
    }
}

/// Score pre-computed forecast/target pairs, both `[H,N,2]` in physical
/// units. The report aggregates every pair and each horizon step.
pub fn score_pairs<'a, I>(pairs: I) -> Result<MetricReport, EvalError>
where
    I: IntoIterator<Item = (&'a Tensor, &'a Tensor)>,
{
    let mut totals = [Accumulator::default(); CHANNELS];
    let mut horizon: Vec<[Accumulator; CHANNELS]> = Vec::new();
    let mut windows = 0usize;
    for (pred, target) in pairs {
        check_pair(pred, target)?;
        let shape = pred.shape();
        if shape.len() != 3 || shape[2] != CHANNELS {
            return Err(EvalError::ShapeMismatch(format!(
                "expected [H,N,{CHANNELS}], got {shape:?}"
            )));
        }
        let (h, n) = (shape[0], shape[1]);
        if horizon.len() < h {
            horizon.resize(h, [Accumulator::default(); CHANNELS]);
        }
        for step in 0..h {
            for node in 0..n {
                for c in 0..CHANNELS {
                    let i = (step * n + node) * CHANNELS + c;
                    horizon[step][c].push(pred.data()[i], target.data()[i]);
                }
            }
        }
        windows += 1;
    }
    for row in &horizon {
        for c in 0..CHANNELS {
            totals[c].merge(&row[c]);
        }
    }
    Ok(MetricReport {
        depth: totals[0].finish()?,
        flow: totals[1].finish()?,
        per_horizon: horizon
            .iter()
            .enumerate()
            .map(|(i, row)| {
                Ok(HorizonMetrics {
                    step: i + 1,
                    depth: row[0].finish()?,
                    flow: row[1].finish()?,
                })
            })
            .collect::<Result<_, EvalError>>()?,
        windows,
    })
}

/// Score a checkpoint on test windows given in physical units: inputs are
/// normalized with the stored statistics, forecasts denormalized back.
pub fn evaluate(
    ckpt: &Checkpoint,
    windows: &[Window],
    graph: &PipeGraph,
) -> Result<MetricReport, EvalError> {
    ckpt.verify_graph(graph)?;
    let model = HydroNet::new(ckpt.model_config.clone(), graph)?;
    let mut preds = Vec::with_capacity(windows.len());
    for w in windows {
        let x = ckpt.norm.normalize_tensor(&w.input);
        let y = model.forward(&x, &ckpt.params)?;
        preds.push(ckpt.norm.denormalize_tensor(&y));
    }
    score_pairs(preds.iter().zip(windows.iter().map(|w| &w.target)))
}

/// Repeat the window's last observed step H times.
pub fn persistence_forecast(window: &Tensor, horizon: usize) -> Result<Tensor, EvalError> {
    let shape = window.shape();
    if shape.len() != 3 || shape[0] == 0 {
        return Err(EvalError::ShapeMismatch(format!(
            "expected non-empty [L,N,C], got {shape:?}"
        )));
    }
    let (l, n, c) = (shape[0], shape[1], shape[2]);
    let mut out = Tensor::zeros(&[horizon, n, c]);
    let last = &window.data()[(l - 1) * n * c..];
    for step in 0..horizon {
        out.data_mut()[step * n * c..(step + 1) * n * c].copy_from_slice(last);
    }
    Ok(out)
}

/// Forecast steps `t..t+H` by reading one period back, folding indices
/// that land at or past `t` back by whole periods. Period 1 degenerates to
/// persistence.
pub fn seasonal_naive_forecast(
    panel: &TimeSeriesPanel,
    t: usize,
    period: usize,
    horizon: usize,
) -> Result<Tensor, EvalError> {
    if period == 0 || t < period {
        return Err(EvalError::InsufficientHistory {
            have: t,
            need: period.max(1),
        });
    }
    let n = panel.node_count();
    let mut out = Tensor::zeros(&[horizon, n, CHANNELS]);
    for k in 0..horizon {
        let mut idx = t + k - period;
        while idx >= t {
            idx -= period;
        }
        for node in 0..n {
            for c in 0..CHANNELS {
                out.data_mut()[(k * n + node) * CHANNELS + c] = panel.value(idx, node, c);
            }
        }
    }
    Ok(out)
}

/// Persistence baseline over a window set.
pub fn evaluate_persistence(windows: &[Window]) -> Result<MetricReport, EvalError> {
    let preds = windows
        .iter()
        .map(|w| persistence_forecast(&w.input, w.target.shape()[0]))
        .collect::<Result<Vec<_>, _>>()?;
    score_pairs(preds.iter().zip(windows.iter().map(|w| &w.target)))
}

/// Seasonal-naive baseline over a window set drawn from `panel`; windows
/// whose origin lacks a full period of history are skipped.
pub fn evaluate_seasonal(
    panel: &TimeSeriesPanel,
    windows: &[Window],
    period: usize,
) -> Result<MetricReport, EvalError> {
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for w in windows {
        let origin = w.start + w.input.shape()[0];
        match seasonal_naive_forecast(panel, origin, period, w.target.shape()[0]) {
            Ok(p) => {
                preds.push(p);
                targets.push(&w.target);
            }
            Err(EvalError::InsufficientHistory { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    score_pairs(preds.iter().zip(targets.into_iter()))
}

/// One-step-ahead forecasts along a whole panel: row `t` of the result
/// predicts panel step `offset + t` from the `lookback` steps before it.
/// Values are physical units; `offset` equals `lookback`.
pub fn rolling_one_step_forecast(
    model: &HydroNet,
    params: &ModelParams,
    norm: &crate::dataset::NormStats,
    panel: &TimeSeriesPanel,
    lookback: usize,
) -> Result<(Tensor, usize), EvalError> {
    let t_len = panel.len();
    if t_len <= lookback {
        return Err(EvalError::InsufficientHistory {
            have: t_len,
            need: lookback + 1,
        });
    }
    let n = panel.node_count();
    let mut out = Tensor::zeros(&[t_len - lookback, n, CHANNELS]);
    let row = n * CHANNELS;
    for t in lookback..t_len {
        let mut window = Tensor::zeros(&[lookback, n, CHANNELS]);
        window
            .data_mut()
            .copy_from_slice(&panel.values().data()[(t - lookback) * row..t * row]);
        let x = norm.normalize_tensor(&window);
        let y = model.forward(&x, params)?;
        let y = norm.denormalize_tensor(&y);
        // First horizon step only.
        out.data_mut()[(t - lookback) * row..(t - lookback + 1) * row]
            .copy_from_slice(&y.data()[..row]);
    }
    Ok((out, lookback))
}

/// Per-node, per-channel residual moments fit on clean data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    /// Row-major `[node][channel]`, aligned with the panel's node order.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Fit residual moments of `observed − forecast`; forecast row `t` aligns
/// with panel step `offset + t`.
pub fn fit_residual_stats(
    observed: &TimeSeriesPanel,
    forecast: &Tensor,
    offset: usize,
) -> Result<ResidualStats, EvalError> {
    let n = observed.node_count();
    let steps = forecast.shape()[0];
    if forecast.shape() != [steps, n, CHANNELS] || offset + steps > observed.len() {
        return Err(EvalError::ShapeMismatch(format!(
            "forecast {:?} at offset {offset} vs panel of {} steps × {n} nodes",
            forecast.shape(),
            observed.len()
        )));
    }
    if steps == 0 {
        return Err(EvalError::EmptyInput);
    }
    let mut mean = vec![0.0; n * CHANNELS];
    let mut std = vec![0.0; n * CHANNELS];
    for node in 0..n {
        for c in 0..CHANNELS {
            let mut sum = 0.0;
            for t in 0..steps {
                sum += observed.value(offset + t, node, c) - forecast.get(&[t, node, c]);
            }
            let mu = sum / steps as f64;
            let mut var = 0.0;
            for t in 0..steps {
                let r = observed.value(offset + t, node, c) - forecast.get(&[t, node, c]);
                var += (r - mu) * (r - mu);
            }
            let sigma = (var / steps as f64).sqrt();
            if sigma == 0.0 {
                return Err(EvalError::ZeroResidualVariance {
                    node: observed.node_order()[node].to_string(),
                    channel: CHANNEL_NAMES[c].to_string(),
                });
            }
            mean[node * CHANNELS + c] = mu;
            std[node * CHANNELS + c] = sigma;
        }
    }
    Ok(ResidualStats { mean, std })
}

/// A maximal run of out-of-band forecast residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyEvent {
    pub node: NodeId,
    pub channel: String,
    /// First flagged panel step.
    pub start: usize,
    /// One past the last flagged panel step.
    pub end: usize,
    pub peak_z: f64,
}

/// Flag events where |z| of the forecast residual exceeds `k` for at least
/// `m` consecutive steps. Event bounds are absolute panel steps,
/// end-exclusive; events never overlap per (node, channel).
pub fn detect_anomalies(
    observed: &TimeSeriesPanel,
    forecast: &Tensor,
    offset: usize,
    stats: &ResidualStats,
    k: f64,
    m: usize,
) -> Result<Vec<AnomalyEvent>, EvalError> {
    let n = observed.node_count();
    let steps = forecast.shape()[0];
    if forecast.shape() != [steps, n, CHANNELS]
        || offset + steps > observed.len()
        || stats.mean.len() != n * CHANNELS
    {
        return Err(EvalError::ShapeMismatch(format!(
            "forecast {:?} at offset {offset}, stats over {} cells, panel {} × {n}",
            forecast.shape(),
            stats.mean.len(),
            observed.len()
        )));
    }
    let m = m.max(1);
    let mut events = Vec::new();
    for node in 0..n {
        for c in 0..CHANNELS {
            let (mu, sigma) = (stats.mean[node * CHANNELS + c], stats.std[node * CHANNELS + c]);
            if sigma == 0.0 {
                return Err(EvalError::ZeroResidualVariance {
                    node: observed.node_order()[node].to_string(),
                    channel: CHANNEL_NAMES[c].to_string(),
                });
            }
            let mut run_start: Option<usize> = None;
            let mut peak = 0.0f64;
            for t in 0..=steps {
                let hot = t < steps && {
                    let r = observed.value(offset + t, node, c) - forecast.get(&[t, node, c]);
                    let z = ((r - mu) / sigma).abs();
                    if z > k {
                        peak = if run_start.is_some() { peak.max(z) } else { z };
                        true
                    } else {
                        false
                    }
                };
                match (run_start, hot) {
                    (None, true) => run_start = Some(t),
                    (Some(s), false) => {
                        if t - s >= m {
                            events.push(AnomalyEvent {
                                node: observed.node_order()[node].clone(),
                                channel: CHANNEL_NAMES[c].to_string(),
                                start: offset + s,
                                end: offset + t,
                                peak_z: peak,
                            });
                        }
                        run_start = None;
                    }
                    _ => {}
                }
            }
        }
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::NormStats;
    use crate::graph::{build_graph, PipeEdge};
    use crate::model::{init_params, HydroNetConfig};
    use crate::train::{graph_fingerprint, TrainConfig};
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn pipe(from: &str, to: &str, diameter: f64, slope: f64) -> PipeEdge {
        PipeEdge {
            from: from.into(),
            to: to.into(),
            length: 300.0 + diameter * 100.0,
            roughness: 0.011 + slope,
            diameter,
            slope,
            gis_length: 310.0 + diameter * 90.0,
            max_flow: 2.0 + diameter,
            max_velocity: 3.0 + slope * 10.0,
            max_over_full_flow: 0.5 + slope,
            max_over_full_depth: 0.4 + slope,
        }
    }

    fn chain3() -> PipeGraph {
        build_graph(
            vec!["A".into(), "B".into(), "C".into()],
            vec![pipe("A", "B", 1.0, 0.01), pipe("B", "C", 1.5, 0.02)],
            "C".into(),
        )
        .unwrap()
    }

    fn panel_from_fn(
        steps: usize,
        n: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> TimeSeriesPanel {
        let mut values = Tensor::zeros(&[steps, n, CHANNELS]);
        for t in 0..steps {
            for node in 0..n {
                for c in 0..CHANNELS {
                    values.data_mut()[(t * n + node) * CHANNELS + c] = f(t, node, c);
                }
            }
        }
        let nodes: Vec<NodeId> = (0..n).map(|i| NodeId::new(format!("m{i}"))).collect();
        let timestamps: Vec<i64> = (0..steps as i64).map(|t| t * 600).collect();
        TimeSeriesPanel::new(timestamps, nodes, values).unwrap()
    }

    #[test]
    fn metric_hand_values() {
        let t = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let z = Tensor::zeros(&[2]);
        assert_eq!(mae(&t, &t).unwrap(), 0.0);
        assert_eq!(rmse(&t, &t).unwrap(), 0.0);
        assert_eq!(mae(&z, &t).unwrap(), 3.5);
        assert!((rmse(&z, &t).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);

        let pred = Tensor::new(vec![2], vec![90.0, 110.0]).unwrap();
        let target = Tensor::new(vec![2], vec![100.0, 100.0]).unwrap();
        let (m, excluded) = mape(&pred, &target, MAPE_EPSILON).unwrap();
        assert!((m - 0.10).abs() < 1e-12);
        assert_eq!(excluded, 0);
    }

    #[test]
    fn mape_excludes_near_zero_targets() {
        let pred = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let target = Tensor::new(vec![3], vec![0.0, 1e-4, 2.0]).unwrap();
        let (m, excluded) = mape(&pred, &target, MAPE_EPSILON).unwrap();
        assert_eq!(excluded, 2);
        assert!((m - 0.5).abs() < 1e-15);

        let tiny = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            mape(&pred.reshaped(vec![3]).unwrap(), &Tensor::zeros(&[3]), MAPE_EPSILON),
            Err(EvalError::AllExcluded)
        ));
        assert!(matches!(
            mape(&tiny, &tiny, MAPE_EPSILON),
            Err(EvalError::AllExcluded)
        ));
    }

    #[test]
    fn empty_and_mismatched_inputs_are_rejected() {
        let a = Tensor::zeros(&[0]);
        assert!(matches!(mae(&a, &a), Err(EvalError::EmptyInput)));
        let b = Tensor::zeros(&[2]);
        let c = Tensor::zeros(&[3]);
        assert!(matches!(rmse(&b, &c), Err(EvalError::ShapeMismatch(_))));
    }

    #[test]
    fn mae_never_exceeds_rmse() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(7);
        for _ in 0..1000 {
            let len = rng.random_range(1..20);
            let mut p = Tensor::zeros(&[len]);
            let mut t = Tensor::zeros(&[len]);
            for v in p.data_mut() {
                *v = rng.random_range(-100.0..100.0);
            }
            for v in t.data_mut() {
                *v = rng.random_range(-100.0..100.0);
            }
            let a = mae(&p, &t).unwrap();
            let r = rmse(&p, &t).unwrap();
            assert!(a <= r + 1e-12, "mae {a} > rmse {r}");
        }
    }

    #[test]
    fn metrics_ignore_node_permutation() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
        let mut pred = Tensor::zeros(&[4, 5, CHANNELS]);
        let mut target = Tensor::zeros(&[4, 5, CHANNELS]);
        for v in pred.data_mut() {
            *v = rng.random_range(0.0..5.0);
        }
        for v in target.data_mut() {
            *v = rng.random_range(0.0..5.0);
        }
        let perm = [3usize, 0, 4, 1, 2];
        let permute = |x: &Tensor| {
            let mut out = Tensor::zeros(&[4, 5, CHANNELS]);
            for t in 0..4 {
                for (pos, &orig) in perm.iter().enumerate() {
                    for c in 0..CHANNELS {
                        out.data_mut()[(t * 5 + pos) * CHANNELS + c] = x.get(&[t, orig, c]);
                    }
                }
            }
            out
        };
        let (pp, tp) = (permute(&pred), permute(&target));
        // Permutation reorders the accumulation, so agreement holds to a
        // few ulps rather than bitwise.
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-14 * a.abs().max(1.0);
        assert!(close(mae(&pred, &target).unwrap(), mae(&pp, &tp).unwrap()));
        assert!(close(rmse(&pred, &target).unwrap(), rmse(&pp, &tp).unwrap()));
        let a = score_pairs([(&pred, &target)]).unwrap();
        let b = score_pairs([(&pp, &tp)]).unwrap();
        assert!(close(a.depth.mae, b.depth.mae));
        assert!(close(a.flow.rmse, b.flow.rmse));
    }

    #[test]
    fn score_pairs_oracle_predictions_are_zero() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(13);
        let mut t = Tensor::zeros(&[3, 2, CHANNELS]);
        for v in t.data_mut() {
            *v = rng.random_range(0.5..2.0);
        }
        let report = score_pairs([(&t, &t), (&t, &t)]).unwrap();
        assert_eq!(report.windows, 2);
        assert_eq!(report.depth.mae, 0.0);
        assert_eq!(report.flow.rmse, 0.0);
        assert_eq!(report.depth.mape, Some(0.0));
        assert_eq!(report.per_horizon.len(), 3);
        assert!(report.per_horizon.iter().all(|h| h.depth.mae == 0.0));
    }

    #[test]
    fn persistence_repeats_last_step() {
        let window = panel_from_fn(4, 2, |t, n, c| (t * 10 + n * 2 + c) as f64);
        let f = persistence_forecast(window.values(), 3).unwrap();
        assert_eq!(f.shape(), &[3, 2, CHANNELS]);
        for step in 0..3 {
            for n in 0..2 {
                for c in 0..CHANNELS {
                    assert_eq!(f.get(&[step, n, c]), (30 + n * 2 + c) as f64);
                }
            }
        }
    }

    #[test]
    fn persistence_ramp_mae_is_midpoint() {
        // Slope-1 ramp: errors 1..=12, MAE = 6.5 exactly.
        let panel = panel_from_fn(24, 1, |t, _, _| t as f64);
        let window = panel.slice(0, 12);
        let pred = persistence_forecast(window.values(), 12).unwrap();
        let truth = panel.slice(12, 24);
        assert_eq!(mae(&pred, truth.values()).unwrap(), 6.5);
    }

    #[test]
    fn seasonal_naive_is_exact_on_periodic_series() {
        let period = 6;
        let panel = panel_from_fn(30, 2, |t, n, c| {
            ((t % period) * 100 + n * 10 + c) as f64
        });
        let f = seasonal_naive_forecast(&panel, 12, period, 10).unwrap();
        for k in 0..10 {
            for n in 0..2 {
                for c in 0..CHANNELS {
                    assert_eq!(f.get(&[k, n, c]), panel.value(12 + k, n, c));
                }
            }
        }
    }

    #[test]
    fn seasonal_period_one_is_persistence() {
        let panel = panel_from_fn(10, 2, |t, n, c| (t * 7 + n + c) as f64);
        let f = seasonal_naive_forecast(&panel, 6, 1, 4).unwrap();
        let window = panel.slice(0, 6);
        let p = persistence_forecast(window.values(), 4).unwrap();
        assert_eq!(f.data(), p.data());
    }

    #[test]
    fn seasonal_requires_one_period_of_history() {
        let panel = panel_from_fn(10, 1, |t, _, _| t as f64);
        assert!(matches!(
            seasonal_naive_forecast(&panel, 3, 5, 2),
            Err(EvalError::InsufficientHistory { have: 3, need: 5 })
        ));
    }

    fn manual_checkpoint(
        graph: &PipeGraph,
        config: HydroNetConfig,
        norm: NormStats,
    ) -> Checkpoint {
        Checkpoint {
            params: init_params(&config).unwrap(),
            model_config: config,
            train_config: TrainConfig::default(),
            norm,
            graph_fingerprint: graph_fingerprint(graph),
            best_val_loss: 0.1,
            epoch: 1,
        }
    }

    fn small_config() -> HydroNetConfig {
        HydroNetConfig {
            lookback: 6,
            horizon: 3,
            hidden_channels: 4,
            edge_embed_dim: 3,
            temporal_kernel: 2,
            blocks: 2,
            bidirectional: false,
            seed: 3,
        }
    }

    #[test]
    fn evaluate_denormalizes_with_stored_stats() {
        // Zero parameters force a zero normalized forecast, which must
        // denormalize to the stored per-channel means.
        let graph = chain3();
        let config = small_config();
        let norm = NormStats {
            per_node: false,
            mean: vec![10.0, 20.0],
            std: vec![2.0, 4.0],
        };
        let mut ckpt = manual_checkpoint(&graph, config.clone(), norm);
        for (_, t) in ckpt.params.iter_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let panel = panel_from_fn(12, 3, |t, n, c| (10 + t + n + 10 * c) as f64);
        let windows = crate::dataset::make_windows(
            &panel,
            &crate::dataset::WindowSpec {
                lookback: 6,
                horizon: 3,
            },
        )
        .unwrap();
        let report = evaluate(&ckpt, &windows, &graph).unwrap();
        // Hand-computed: every depth forecast is 10.0, every flow 20.0.
        let mut acc = [Accumulator::default(), Accumulator::default()];
        for w in &windows {
            let shape = w.target.shape();
            for i in 0..w.target.len() {
                let c = i % CHANNELS;
                acc[c].push(if c == 0 { 10.0 } else { 20.0 }, w.target.data()[i]);
            }
            assert_eq!(shape[2], CHANNELS);
        }
        assert_eq!(report.depth.mae, acc[0].finish().unwrap().mae);
        assert_eq!(report.flow.rmse, acc[1].finish().unwrap().rmse);
    }

    #[test]
    fn evaluate_rejects_foreign_graph() {
        let graph = chain3();
        let other = build_graph(
            vec!["A".into(), "B".into()],
            vec![pipe("A", "B", 1.2, 0.013)],
            "B".into(),
        )
        .unwrap();
        let ckpt = manual_checkpoint(
            &graph,
            small_config(),
            NormStats {
                per_node: false,
                mean: vec![0.0, 0.0],
                std: vec![1.0, 1.0],
            },
        );
        let panel = panel_from_fn(12, 2, |t, n, c| (t + n + c) as f64);
        let windows = crate::dataset::make_windows(
            &panel,
            &crate::dataset::WindowSpec {
                lookback: 6,
                horizon: 3,
            },
        )
        .unwrap();
        assert!(matches!(
            evaluate(&ckpt, &windows, &other),
            Err(EvalError::Train(TrainError::FingerprintMismatch { .. }))
        ));
    }

    #[test]
    fn rolling_forecast_of_zero_model_is_the_mean() {
        let graph = chain3();
        let config = small_config();
        let norm = NormStats {
            per_node: false,
            mean: vec![5.0, 7.0],
            std: vec![1.5, 2.5],
        };
        let mut params = init_params(&config).unwrap();
        for (_, t) in params.iter_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let model = HydroNet::new(config, &graph).unwrap();
        let panel = panel_from_fn(20, 3, |t, n, c| (t + n + c) as f64);
        let (f, offset) = rolling_one_step_forecast(&model, &params, &norm, &panel, 6).unwrap();
        assert_eq!(offset, 6);
        assert_eq!(f.shape(), &[14, 3, CHANNELS]);
        for t in 0..14 {
            for n in 0..3 {
                assert_eq!(f.get(&[t, n, 0]), 5.0);
                assert_eq!(f.get(&[t, n, 1]), 7.0);
            }
        }
    }

    fn unit_stats(n: usize) -> ResidualStats {
        ResidualStats {
            mean: vec![0.0; n * CHANNELS],
            std: vec![1.0; n * CHANNELS],
        }
    }

    #[test]
    fn perfect_forecast_yields_no_events() {
        let panel = panel_from_fn(20, 2, |t, n, c| (t + n + c) as f64);
        let forecast = panel.slice(4, 20).values().clone();
        let events =
            detect_anomalies(&panel, &forecast, 4, &unit_stats(2), 3.0, 3).unwrap();
        assert!(events.is_empty());
    }

    #[test]
    fn short_spikes_are_filtered_by_duration() {
        let panel = panel_from_fn(20, 1, |_, _, _| 0.0);
        let mut forecast = Tensor::zeros(&[16, 1, CHANNELS]);
        // One isolated 2-step spike on depth: below m=3.
        forecast.data_mut()[5 * CHANNELS] = -10.0;
        forecast.data_mut()[6 * CHANNELS] = -10.0;
        let events =
            detect_anomalies(&panel, &forecast, 4, &unit_stats(1), 3.0, 3).unwrap();
        assert!(events.is_empty());

        // Same spike with m=2 becomes an event at absolute steps 9..11.
        let events =
            detect_anomalies(&panel, &forecast, 4, &unit_stats(1), 3.0, 2).unwrap();
        assert_eq!(events.len(), 1);
        let e = &events[0];
        assert_eq!((e.start, e.end), (9, 11));
        assert_eq!(e.channel, "depth");
        assert_eq!(e.node.to_string(), "m0");
        assert_eq!(e.peak_z, 10.0);
    }

    #[test]
    fn runs_split_per_channel_and_stay_disjoint() {
        let panel = panel_from_fn(30, 1, |_, _, _| 0.0);
        let mut forecast = Tensor::zeros(&[26, 1, CHANNELS]);
        // Depth: two runs separated by a cold step; flow: one long run.
        for t in 3..7 {
            forecast.data_mut()[t * CHANNELS] = 5.0;
        }
        for t in 8..12 {
            forecast.data_mut()[t * CHANNELS] = -4.0;
        }
        for t in 10..20 {
            forecast.data_mut()[t * CHANNELS + 1] = 6.0;
        }
        let events =
            detect_anomalies(&panel, &forecast, 4, &unit_stats(1), 3.0, 3).unwrap();
        let depth: Vec<_> = events.iter().filter(|e| e.channel == "depth").collect();
        let flow: Vec<_> = events.iter().filter(|e| e.channel == "flow").collect();
        assert_eq!(depth.len(), 2);
        assert_eq!(flow.len(), 1);
        assert_eq!((depth[0].start, depth[0].end), (7, 11));
        assert_eq!((depth[1].start, depth[1].end), (12, 16));
        assert_eq!((flow[0].start, flow[0].end), (14, 24));
        for e in &events {
            assert!(e.end - e.start >= 3);
            assert!(e.peak_z > 3.0);
        }
        // Disjoint per channel.
        assert!(depth[0].end <= depth[1].start);
    }

    #[test]
    fn run_extending_to_series_end_is_closed() {
        let panel = panel_from_fn(12, 1, |_, _, _| 0.0);
        let mut forecast = Tensor::zeros(&[8, 1, CHANNELS]);
        for t in 5..8 {
            forecast.data_mut()[t * CHANNELS] = 7.0;
        }
        let events =
            detect_anomalies(&panel, &forecast, 4, &unit_stats(1), 3.0, 3).unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!((events[0].start, events[0].end), (9, 12));
    }

    #[test]
    fn residual_stats_zero_variance_is_an_error() {
        let panel = panel_from_fn(10, 1, |t, _, _| t as f64);
        let forecast = panel.slice(2, 10).values().clone();
        // observed − forecast ≡ 0: no spread to z-score against.
        assert!(matches!(
            fit_residual_stats(&panel, &forecast, 2),
            Err(EvalError::ZeroResidualVariance { .. })
        ));
    }

    #[test]
    fn residual_stats_match_hand_moments() {
        let panel = panel_from_fn(8, 1, |t, _, c| if c == 0 { t as f64 } else { 1.0 });
        // Forecast zero: depth residuals are 4,5,6,7 (μ=5.5, σ²=1.25);
        // flow residuals all 1 → zero variance → error unless flow varies.
        let mut forecast = Tensor::zeros(&[4, 1, CHANNELS]);
        for t in 0..4 {
            forecast.data_mut()[t * CHANNELS + 1] = (t % 2) as f64;
        }
        let stats = fit_residual_stats(&panel, &forecast, 4).unwrap();
        assert_eq!(stats.mean[0], 5.5);
        assert!((stats.std[0] - 1.25f64.sqrt()).abs() < 1e-15);
    }

    #[cfg(test)]
    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn mae_le_rmse(values in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..64)) {
                let (p, t): (Vec<f64>, Vec<f64>) = values.into_iter().unzip();
                let len = p.len();
                let pred = Tensor::new(vec![len], p).unwrap();
                let target = Tensor::new(vec![len], t).unwrap();
                let a = mae(&pred, &target).unwrap();
                let r = rmse(&pred, &target).unwrap();
                prop_assert!(a <= r + 1e-9);
            }

            #[test]
            fn events_are_disjoint_and_long_enough(
                pattern in proptest::collection::vec(0f64..8.0, 10..60),
                m in 1usize..5,
            ) {
                let steps = pattern.len();
                let panel = panel_from_fn(steps + 2, 1, |_, _, _| 0.0);
                let mut forecast = Tensor::zeros(&[steps, 1, CHANNELS]);
                for (t, &v) in pattern.iter().enumerate() {
                    forecast.data_mut()[t * CHANNELS] = v;
                }
                let events = detect_anomalies(
                    &panel, &forecast, 2, &unit_stats(1), 3.0, m,
                ).unwrap();
                let mut last_end = 0usize;
                for e in &events {
                    prop_assert!(e.end - e.start >= m);
                    prop_assert!(e.start >= last_end);
                    prop_assert!(e.peak_z > 3.0);
                    last_end = e.end;
                }
            }
        }
    }
}
