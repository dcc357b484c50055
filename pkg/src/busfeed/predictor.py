"""Apply a trained model: next-position prediction, rollout, stop detection, metrics."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .domain import Block, FeatureTuple, ScalerParams
from .ingest import apply_scaler
from .neuralnet import LstmParams, TrainConfig, forward, load_model, save_model


@dataclass(frozen=True)
class Model:
    """A trained network bundled with its scaler and configuration."""

    params: LstmParams
    scaler: ScalerParams
    config: TrainConfig

    @property
    def window_length(self) -> int:
        return self.config.k - 1

    @property
    def stop_mode(self) -> bool:
        return self.params.stop_mode

    def to_bytes(self) -> bytes:
        return save_model(self.params, self.scaler, self.config)

    @staticmethod
    def from_bytes(blob: bytes) -> "Model":
        params, scaler, cfg = load_model(blob)
        return Model(params=params, scaler=scaler, config=cfg)


@dataclass(frozen=True)
class PredictionRequest:
    """A window of recent raw tuples plus how many steps to predict."""

    recent_window: tuple
    steps_ahead: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "recent_window", tuple(self.recent_window))
        if not all(isinstance(t, FeatureTuple) for t in self.recent_window):
            raise ValueError("recent_window must hold FeatureTuples")
        if self.steps_ahead < 1:
            raise ValueError(f"steps_ahead must be >= 1, got {self.steps_ahead}")


@dataclass(frozen=True)
class EvaluationReport:
    """Held-out accuracy and latency summary."""

    rmse_lat: float
    rmse_lon: float
    lat_errors: tuple
    lon_errors: tuple
    mean_latency_s: float
    rows: tuple  # (real_lat, real_lon, pred_lat, pred_lon) per test block

    def __post_init__(self) -> None:
        if self.rmse_lat < 0 or self.rmse_lon < 0:
            raise ValueError("rmse must be non-negative")
        if not self.mean_latency_s > 0:
            raise ValueError("latency must be positive")

    def to_text(self) -> str:
        return (f"predictions={len(self.rows)}\n"
                f"rmse_lat_deg={self.rmse_lat!r}\n"
                f"rmse_lon_deg={self.rmse_lon!r}\n"
                f"mean_latency_s={self.mean_latency_s!r}\n")

    def write_pred_vs_real(self, stream) -> None:
        stream.write("real_lat,real_lon,pred_lat,pred_lon\n")
        for real_lat, real_lon, pred_lat, pred_lon in self.rows:
            stream.write(f"{real_lat!r},{real_lon!r},{pred_lat!r},{pred_lon!r}\n")


def rmse(errors: Sequence[float]) -> float:
    """Root mean squared error of a non-empty error sequence."""
    arr = np.asarray(errors, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("rmse of an empty sequence")
    return float(np.sqrt(np.mean(arr * arr)))


def _normalize_window(window, model: Model) -> np.ndarray:
    if len(window) != model.window_length:
        raise ValueError(f"window length {len(window)} does not match "
                         f"model k-1 = {model.window_length}")
    lo_hi = model.scaler.bounds()
    rows = np.empty((len(window), 3))
    for i, t in enumerate(window):
        for j, value in enumerate((t.lat, t.lon, t.sp)):
            lo, hi = lo_hi[j]
            rows[i, j] = (value - lo) / (hi - lo)
    return rows


def _denormalize(y: np.ndarray, scaler: ScalerParams) -> FeatureTuple:
    out = []
    for value, (lo, hi) in zip(y, scaler.bounds()):
        out.append(float(value) * (hi - lo) + lo)
    return FeatureTuple(*out)


def predict_next(request: PredictionRequest, model: Model) -> FeatureTuple:
    """One-step prediction in raw units; the scaler is applied internally."""
    x = _normalize_window(request.recent_window, model)
    y, _ = forward(x, model.params)
    return _denormalize(y, model.scaler)


def rollout(request: PredictionRequest, model: Model,
            observed: Optional[Sequence[FeatureTuple]] = None) -> list:
    """Multi-step prediction.

    Autoregressive by default: each prediction is appended to the window
    and fed back. When `observed` is given (teacher-forced mode) the true
    tuples advance the window instead, yielding a sequence of one-step
    predictions along a known trace.
    """
    if observed is not None and len(observed) < request.steps_ahead:
        raise ValueError("observed trace shorter than steps_ahead")
    window = list(request.recent_window)
    out = []
    for step in range(request.steps_ahead):
        pred = predict_next(PredictionRequest(tuple(window), 1), model)
        out.append(pred)
        window.pop(0)
        window.append(pred if observed is None else observed[step])
    return out


def predict_stops(trace_windows: Sequence, stop_model: Model) -> list:
    """Predicted location plus stop probability for each window.

    A point counts as a declared stop when its probability exceeds 0.5
    (the argmax of the two classes, ties resolved to not-stop).
    """
    if not stop_model.stop_mode:
        raise ValueError("predict_stops requires a stop-mode model")
    out = []
    for window in trace_windows:
        x = _normalize_window(window, stop_model)
        y, probs = forward(x, stop_model.params)
        out.append((_denormalize(y, stop_model.scaler), float(probs[1])))
    return out


def evaluate(test_blocks: Sequence[Block], model: Model) -> EvaluationReport:
    """One-step predictions over raw test blocks with RMSE and latency.

    Latency is wall-clock per single prediction, matching how the model
    would be called when tracking one vehicle.
    """
    if not test_blocks:
        raise ValueError("empty test set")
    lat_errors = []
    lon_errors = []
    rows = []
    elapsed = 0.0
    for block in test_blocks:
        request = PredictionRequest(block.features, 1)
        start = time.perf_counter()
        pred = predict_next(request, model)
        elapsed += time.perf_counter() - start
        truth = block.label_tuple
        lat_errors.append(pred.lat - truth.lat)
        lon_errors.append(pred.lon - truth.lon)
        rows.append((truth.lat, truth.lon, pred.lat, pred.lon))
    return EvaluationReport(
        rmse_lat=rmse(lat_errors),
        rmse_lon=rmse(lon_errors),
        lat_errors=tuple(lat_errors),
        lon_errors=tuple(lon_errors),
        mean_latency_s=elapsed / len(test_blocks),
        rows=tuple(rows),
    )
