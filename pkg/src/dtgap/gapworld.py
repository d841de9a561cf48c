"""
The emulated physical asset.

Physical readings are virtual readings plus three independent per-sensor
normal disturbances: sensor drift, environment and human interaction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .truss import N_SENSORS, AssetConfiguration, SensorVector, TrussModel, simulate, simulate_array

FACTORS = ("sensor_drift", "environment", "interaction")


@dataclass(frozen=True, eq=False)
class GapInjectionSpec:
    """
    True gap parameters per sensor.

    ``mean`` and ``std`` have shape (3, 42): one row per factor in
    :data:`FACTORS`, in meters.
    """

    mean: np.ndarray
    std: np.ndarray
    seed: int = 0

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float)
        std = np.array(self.std, dtype=float)
        if mean.shape != (3, N_SENSORS) or std.shape != (3, N_SENSORS):
            raise ValueError(f"gap spec arrays must have shape (3, {N_SENSORS})")
        if np.any(std < 0) or not np.all(np.isfinite(mean)) or not np.all(np.isfinite(std)):
            raise ValueError("gap spec std must be >= 0 and all values finite")
        if not (0 <= int(self.seed) < 2**64):
            raise ValueError("seed must be an unsigned 64-bit integer")
        mean.setflags(write=False)
        std.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)
        object.__setattr__(self, "seed", int(self.seed))

    @classmethod
    def zeros(cls, seed: int = 0) -> "GapInjectionSpec":
        return cls(np.zeros((3, N_SENSORS)), np.zeros((3, N_SENSORS)), seed)

    @classmethod
    def random(
        cls,
        seed: int,
        mean_bound: float = 5e-4,
        std_range: tuple[float, float] = (1e-4, 5e-4),
    ) -> "GapInjectionSpec":
        """Draw default magnitudes: means in +-mean_bound, stds uniform in std_range."""
        rng = np.random.default_rng(seed)
        mean = rng.uniform(-mean_bound, mean_bound, size=(3, N_SENSORS))
        std = rng.uniform(*std_range, size=(3, N_SENSORS))
        return cls(mean, std, seed)

    def to_dict(self) -> dict:
        return {
            "schema": "dtgap.gap-spec/1",
            "seed": self.seed,
            "factors": {
                name: {"mean": self.mean[k].tolist(), "std": self.std[k].tolist()}
                for k, name in enumerate(FACTORS)
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GapInjectionSpec":
        if d.get("schema") != "dtgap.gap-spec/1":
            raise ValueError(f"unsupported gap-spec schema {d.get('schema')!r}")
        factors = d["factors"]
        mean = [factors[name]["mean"] for name in FACTORS]
        std = [factors[name]["std"] for name in FACTORS]
        return cls(mean, std, d["seed"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "GapInjectionSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class WorldInstance:
    config: AssetConfiguration
    virtual: SensorVector
    physical: SensorVector
    draws: np.ndarray  # (3, 42); kept for test oracles, never shown to the RGA side


def total_gap_distribution(spec: GapInjectionSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-sensor mean and variance of the summed gap (independent normals add)."""
    return spec.mean.sum(axis=0), (spec.std**2).sum(axis=0)


def draw_gaps(spec: GapInjectionSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    """Gap draws of shape (n, 3, 42); each factor is sampled independently."""
    z = rng.standard_normal((n, 3, N_SENSORS))
    return spec.mean + spec.std * z


def _add_draws(virtual: np.ndarray, draws: np.ndarray) -> np.ndarray:
    return virtual + draws[..., 0, :] + draws[..., 1, :] + draws[..., 2, :]


def observe(
    model: TrussModel,
    config: AssetConfiguration,
    spec: GapInjectionSpec,
    rng: np.random.Generator,
) -> WorldInstance:
    virtual = simulate(model, config)
    draws = draw_gaps(spec, rng, 1)[0]
    physical = _add_draws(virtual.values, draws)
    return WorldInstance(config, virtual, SensorVector(physical, "physical"), draws)


def observe_array(
    model: TrussModel,
    configs: list[AssetConfiguration],
    spec: GapInjectionSpec,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`observe`: returns (virtual, physical), each (n, 42).

    Consumes the generator exactly as ``n`` sequential ``observe`` calls would.
    """
    virtual = simulate_array(model, configs)
    draws = draw_gaps(spec, rng, len(configs))
    return virtual, _add_draws(virtual, draws)
