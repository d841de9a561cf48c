"""
Reality-gap analysis: residuals against virtual sensors, trimmed per-sensor
normal fits, the sim-to-real fine-tuning set and real-to-sim detachment.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import norm

from . import regressor
from .repository import RepositoryRecord
from .truss import N_SENSORS, AssetConfiguration, SensorVector, TrussModel, simulate

DEFAULT_TRIM = 0.025
MIN_RESIDUALS = 40


class InsufficientValidationData(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ResidualPool:
    """Residuals physical - virtual, shape (n_instances, 42), in instance order."""

    residuals: np.ndarray

    def __post_init__(self):
        r = np.array(self.residuals, dtype=float)
        if r.ndim != 2 or r.shape[1] != N_SENSORS:
            raise ValueError(f"residual pool must have shape (n, {N_SENSORS})")
        if not np.all(np.isfinite(r)):
            raise ValueError("residual pool contains non-finite values")
        r.setflags(write=False)
        object.__setattr__(self, "residuals", r)

    def __len__(self):
        return len(self.residuals)


@dataclass(frozen=True, eq=False)
class GapDistributionSet:
    mean: np.ndarray
    std: np.ndarray
    count: np.ndarray
    window: int = 0
    trim: float = DEFAULT_TRIM
    seed: int | None = None

    def __post_init__(self):
        for name in ("mean", "std", "count"):
            a = np.array(getattr(self, name), dtype=int if name == "count" else float)
            if a.shape != (N_SENSORS,):
                raise ValueError(f"gap set {name} must have {N_SENSORS} entries")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if np.any(self.std < 0):
            raise ValueError("gap std must be >= 0")

    @classmethod
    def zeros(cls) -> "GapDistributionSet":
        return cls(np.zeros(N_SENSORS), np.zeros(N_SENSORS), np.full(N_SENSORS, 2))

    def to_dict(self) -> dict:
        return {
            "schema": "dtgap.gap-estimate/1",
            "window": self.window,
            "trim": self.trim,
            "seed": self.seed,
            "sensors": [
                {"mean": float(m), "std": float(s), "count": int(c)}
                for m, s, c in zip(self.mean, self.std, self.count)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GapDistributionSet":
        s = d["sensors"]
        return cls([x["mean"] for x in s], [x["std"] for x in s], [x["count"] for x in s],
                   d["window"], d["trim"], d["seed"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def compute_residuals(
    instances: Sequence[tuple[SensorVector, AssetConfiguration]], model: TrussModel
) -> ResidualPool:
    """Residual of each physical reading against a simulation at its predicted configuration."""
    if len(instances) == 0:
        raise ValueError("no instances to compute residuals for")
    rows = []
    for i, (physical, config) in enumerate(instances):
        try:
            virtual = simulate(model, config)
        except Exception as exc:
            raise type(exc)(f"instance {i}: {exc}") from exc
        rows.append(physical.values - virtual.values)
    return ResidualPool(np.stack(rows))


def trimmed_normal_factor(p: float) -> float:
    """Std of N(0, 1) truncated to its central ``1 - 2p`` mass."""
    if p <= 0:
        return 1.0
    z = norm.ppf(1.0 - p)
    return math.sqrt(1.0 - 2.0 * z * norm.pdf(z) / (1.0 - 2.0 * p))


def fit_gap_distributions(pool: ResidualPool, trim: float = DEFAULT_TRIM,
                          seed: int | None = None) -> GapDistributionSet:
    """
    Fit one normal per sensor from the central mass of its residuals.

    ``floor(trim * n)`` residuals are dropped from each tail; the kept values
    give the sample mean and an (n - 1) std. The std is rescaled by the
    truncated-normal factor for the dropped fraction, so it estimates the full
    gap spread, and is never allowed to exceed the untrimmed sample std.
    """
    r = pool.residuals
    n = len(r)
    if n < MIN_RESIDUALS:
        raise InsufficientValidationData(
            f"insufficient validation data: sensor 0 has {n} residuals, need >= {MIN_RESIDUALS}"
        )
    k = int(math.floor(trim * n))
    kept = np.sort(r, axis=0)[k : n - k]
    mean = kept.mean(axis=0)
    trimmed_std = kept.std(axis=0, ddof=1)
    full_std = r.std(axis=0, ddof=1)
    std = np.minimum(trimmed_std / trimmed_normal_factor(k / n), full_std)
    return GapDistributionSet(mean, std, np.full(N_SENSORS, len(kept)), n, trim, seed)


def build_finetune_dataset(records: Sequence[RepositoryRecord], gaps: GapDistributionSet,
                           seed: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Gap-tailored training pairs from design-phase simulation records.

    Each record's readings get one independent draw per sensor from the
    fitted gap normal; labels are the record configurations. Returns
    ``(X, Y)`` with shapes (n, 42) and (n, config_dim).
    """
    if len(records) == 0:
        raise ValueError("no design-sim records to fine-tune on")
    rng = np.random.default_rng(seed)
    X = np.stack([r.sensors for r in records])
    Y = np.stack([r.config.as_vector() for r in records])
    noise = rng.standard_normal(X.shape)
    return X + (gaps.mean + gaps.std * noise), Y


def detach(physical: SensorVector, gaps: GapDistributionSet, model: regressor.RegressionModel,
           truss: TrussModel) -> tuple[SensorVector, AssetConfiguration]:
    """Predict the configuration behind a physical reading and strip the estimated gap mean."""
    config = truss.clamp_config(regressor.predict_array(model, physical.values))
    truss.check_config(config)
    return SensorVector(physical.values - gaps.mean, "detached"), config
