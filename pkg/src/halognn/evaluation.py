"""Rollouts and validation metrics: k-step RMSE, next-step error, temporal stats.

A predictor is any callable ``predict(trajectory, t, state) -> (n_nodes, n_out)``
returning physical-unit predictions for the configured output channels;
``make_predictor`` wraps a trained model. Metrics are computed in physical
units with all output channels pooled into one scalar.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .dist import full_inference
from .errors import ValidationError
from .mesh import Trajectory
from .model import ModelParams, apply_delta
from .training import Normalizer

STATIONARY_THRESHOLD = 0.8


def make_predictor(params: ModelParams, normalizer: Normalizer):
    def predict(trajectory: Trajectory, t: int, state: np.ndarray) -> np.ndarray:
        return full_inference(params, normalizer, trajectory, t, state=state)
    return predict


@dataclass(frozen=True)
class RolloutResult:
    start: int
    states: np.ndarray  # (horizon, n_nodes, n_channels), predictions for t0+1..t0+k


def rollout(predictor, trajectory: Trajectory, t0: int, horizon: int) -> RolloutResult:
    """Autoregressive prediction: each predicted state seeds the next step."""
    if t0 < 0 or horizon < 1 or t0 + horizon >= trajectory.n_steps:
        raise ValidationError(
            f"rollout horizon overflow: start {t0} + horizon {horizon} "
            f"needs ground truth up to step {t0 + horizon} of {trajectory.n_steps}")
    state = trajectory.states[t0].copy()
    steps = []
    for i in range(horizon):
        pred = predictor(trajectory, t0 + i, state)
        state = apply_delta(state, pred, trajectory.schema)
        steps.append(state.copy())
    return RolloutResult(start=t0, states=np.stack(steps))


def rmse(predicted: np.ndarray, truth: np.ndarray) -> float:
    """Root mean squared error pooled over every element of the given arrays."""
    predicted = np.asarray(predicted, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if predicted.shape != truth.shape:
        raise ValidationError(f"shape mismatch {predicted.shape} vs {truth.shape}")
    diff = predicted - truth
    return float(np.sqrt(np.mean(diff * diff)))


def rollout_rmse(predictor, trajectory: Trajectory, t0: int, horizon: int) -> float:
    """k-step rollout error over the output channels, physical units."""
    result = rollout(predictor, trajectory, t0, horizon)
    out_idx = trajectory.schema.output_indices()
    truth = trajectory.states[t0 + 1:t0 + 1 + horizon][:, :, out_idx]
    return rmse(result.states[:, :, out_idx], truth)


def nextstep_error(predictor, trajectory: Trajectory) -> float:
    """1-step prediction error pooled over every possible starting step."""
    out_idx = trajectory.schema.output_indices()
    sse = 0.0
    count = 0
    for t in range(trajectory.n_steps - 1):
        pred = predictor(trajectory, t, trajectory.states[t])
        nxt = apply_delta(trajectory.states[t], pred, trajectory.schema)
        diff = nxt[:, out_idx] - trajectory.states[t + 1][:, out_idx]
        sse += float((diff * diff).sum())
        count += diff.size
    return math.sqrt(sse / count)


def normalized_error_field(predicted: np.ndarray, target: np.ndarray
                           ) -> tuple[np.ndarray, bool]:
    """Per-node |error| scaled by the target field's value range.

    A constant target makes the range zero; the field is then reported as
    undefined (zeros, flag False) rather than dividing by zero.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if predicted.shape != target.shape:
        raise ValidationError(f"shape mismatch {predicted.shape} vs {target.shape}")
    spread = float(target.max() - target.min())
    if spread == 0.0:
        return np.zeros_like(target), False
    return np.abs(predicted - target) / spread, True


def temporal_stats(states: np.ndarray) -> tuple[float, float]:
    """Trajectory-level temporal mean and mean per-(node, channel) temporal std.

    ``states`` is (n_steps, n_nodes, n_channels); the std uses the population
    convention over time.
    """
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 3 or states.shape[0] < 1:
        raise ValidationError(f"states must be (t, n, c) with t >= 1, got {states.shape}")
    mu = float(states.mean())
    per_node_std = states.std(axis=0)  # population std over time, per (node, channel)
    return mu, float(per_node_std.mean())


def relative_error(stat_pred: float, stat_true: float) -> float:
    """(predicted - true) / true; NaN flags a zero denominator."""
    if stat_true == 0.0:
        return math.nan
    return (stat_pred - stat_true) / stat_true


# ---------------------------------------------------------------------------
# Validation-set reports
# ---------------------------------------------------------------------------

@dataclass
class TrajectoryMetrics:
    name: str
    rmse: dict[str, float]          # horizon label -> value
    nextstep: float
    e_temporal_mean: float
    e_temporal_std: float
    stationary: bool                # |e_temporal_std| beyond the threshold


@dataclass
class MetricReport:
    horizons: list[str]
    per_trajectory: list[TrajectoryMetrics]
    aggregate_mean: dict[str, float]
    aggregate_se: dict[str, float]
    single_trajectory: bool         # standard error is 0 by convention


def _horizon_label(h) -> str:
    return "full" if h == "full" else str(int(h))


def _resolve_horizon(h, trajectory: Trajectory) -> int:
    if h == "full":
        return trajectory.n_steps - 1
    h = int(h)
    return min(h, trajectory.n_steps - 1)


def evaluate_set(predictor, trajectories: list[Trajectory], horizons,
                 names: list[str] | None = None) -> MetricReport:
    """Per-trajectory metrics plus mean and standard error over the set.

    Standard error uses the (n-1) sample standard deviation divided by sqrt(n).
    """
    if not trajectories:
        raise ValidationError("empty evaluation set")
    names = names or [f"trajectory{i}" for i in range(len(trajectories))]
    labels = [_horizon_label(h) for h in horizons]
    rows = []
    for name, traj in zip(names, trajectories):
        out_idx = traj.schema.output_indices()
        full = rollout(predictor, traj, 0, traj.n_steps - 1)
        per_h = {}
        for h, label in zip(horizons, labels):
            k = _resolve_horizon(h, traj)
            truth = traj.states[1:1 + k][:, :, out_idx]
            per_h[label] = rmse(full.states[:k][:, :, out_idx], truth)
        mu_p, sd_p = temporal_stats(full.states[:, :, out_idx])
        mu_t, sd_t = temporal_stats(traj.states[1:][:, :, out_idx])
        e_mu = relative_error(mu_p, mu_t)
        e_sd = relative_error(sd_p, sd_t)
        rows.append(TrajectoryMetrics(
            name=name, rmse=per_h,
            nextstep=nextstep_error(predictor, traj),
            e_temporal_mean=e_mu, e_temporal_std=e_sd,
            stationary=(not math.isnan(e_sd)) and abs(e_sd) > STATIONARY_THRESHOLD))
    metric_values = {f"rmse_{label}": [r.rmse[label] for r in rows] for label in labels}
    metric_values["nextstep"] = [r.nextstep for r in rows]
    mean, se = {}, {}
    n = len(rows)
    for key, vals in metric_values.items():
        arr = np.asarray(vals)
        mean[key] = float(arr.mean())
        se[key] = float(arr.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return MetricReport(horizons=labels, per_trajectory=rows,
                        aggregate_mean=mean, aggregate_se=se,
                        single_trajectory=(n == 1))


def write_metrics_csv(report: MetricReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trajectory", "horizon", "metric", "value", "flag"])
        for r in report.per_trajectory:
            for label in report.horizons:
                writer.writerow([r.name, label, "rmse", f"{r.rmse[label]:.12e}", ""])
            writer.writerow([r.name, "", "nextstep", f"{r.nextstep:.12e}", ""])
            for key, val in (("e_temporal_mean", r.e_temporal_mean),
                             ("e_temporal_std", r.e_temporal_std)):
                flag = "undefined" if math.isnan(val) else ""
                writer.writerow([r.name, "", key, f"{val:.12e}", flag])
            if r.stationary:
                writer.writerow([r.name, "", "stationary", "1", "near-stationary"])
        se_flag = "single-trajectory" if report.single_trajectory else ""
        for key in report.aggregate_mean:
            writer.writerow(["__aggregate__", "", f"{key}_mean",
                             f"{report.aggregate_mean[key]:.12e}", ""])
            writer.writerow(["__aggregate__", "", f"{key}_se",
                             f"{report.aggregate_se[key]:.12e}", se_flag])
