"""
Historical repository: append-only JSON-lines records plus a JSON manifest of
per-sensor summary statistics.

Layout of a repository directory::

    records.jsonl   one record per line (schema below)
    manifest.json   record count, per-sensor mean/std/n, Welford state,
                    byte offset of the last record the statistics cover

Record line schema::

    {"config": {"health": [5 floats], "load_n": float, "load_pos": int,
                "temp_c": float},
     "sensors": [42 floats], "prov": "design-sim" | "deployment-detached",
     "tags": [str, ...], "ts": iso8601, "seed": u64}

The manifest is replaced atomically after every append, so a reader that
loads the manifest and then reads ``records_offset`` bytes of the record file
always sees a consistent snapshot.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from scipy.stats import norm

from .truss import N_SENSORS, AssetConfiguration, SensorVector

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
PROVENANCES = ("design-sim", "deployment-detached")
NOVEL_TAG = "novel-critical"
FORCED_TAG = "forced-augment"
Z_975 = float(norm.ppf(0.975))

RECORDS_FILE = "records.jsonl"
MANIFEST_FILE = "manifest.json"

_EPOCH = datetime(2024, 1, 1, tzinfo=timezone.utc)


class SchemaError(ValueError):
    pass


class InsufficientStatistics(ValueError):
    pass


def logical_clock(index: int) -> str:
    """Deterministic timestamp for the ``index``-th record of a repository."""
    return (_EPOCH + timedelta(seconds=index)).isoformat()


def wall_clock(index: int) -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass(frozen=True, eq=False)
class RepositoryRecord:
    config: AssetConfiguration
    sensors: np.ndarray
    prov: str = "design-sim"
    tags: tuple[str, ...] = ()
    ts: str | None = None
    seed: int | None = None

    def __post_init__(self):
        sensors = self.sensors.values if isinstance(self.sensors, SensorVector) else self.sensors
        sensors = np.array(sensors, dtype=float)
        if sensors.shape != (N_SENSORS,) or not np.all(np.isfinite(sensors)):
            raise SchemaError(f"record needs {N_SENSORS} finite sensor values")
        if self.prov not in PROVENANCES:
            raise SchemaError(f"unknown provenance {self.prov!r}")
        if self.prov == "design-sim" and self.seed is None:
            raise SchemaError("design-sim records must carry their generating seed")
        if self.seed is not None and not (0 <= int(self.seed) < 2**64):
            raise SchemaError("seed must be an unsigned 64-bit integer")
        sensors.setflags(write=False)
        object.__setattr__(self, "sensors", sensors)
        object.__setattr__(self, "tags", tuple(self.tags))

    def to_json(self) -> str:
        return json.dumps(
            {
                "config": self.config.to_dict(),
                "sensors": self.sensors.tolist(),
                "prov": self.prov,
                "tags": list(self.tags),
                "ts": self.ts,
                "seed": None if self.seed is None else int(self.seed),
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "RepositoryRecord":
        d = json.loads(line)
        c = d["config"]
        if len(c["health"]) != 5 or not isinstance(c["load_pos"], int):
            raise SchemaError("malformed config block")
        return cls(AssetConfiguration.from_dict(c), d["sensors"], d["prov"], tuple(d["tags"]),
                   d["ts"], d["seed"])

    def dedup_key(self) -> str:
        return json.dumps([self.config.to_dict(), self.sensors.tolist(), self.prov,
                           list(self.tags), self.seed])


@dataclass(frozen=True, eq=False)
class RepositoryManifest:
    """Per-sensor pooled statistics over every record (Welford/Chan running form)."""

    record_count: int = 0
    mean: np.ndarray = field(default_factory=lambda: np.zeros(N_SENSORS))
    m2: np.ndarray = field(default_factory=lambda: np.zeros(N_SENSORS))
    watermark: int = 0
    records_offset: int = 0
    schema_version: int = SCHEMA_VERSION

    @property
    def n(self) -> int:
        return self.record_count

    @property
    def std(self) -> np.ndarray:
        if self.record_count < 2:
            return np.zeros(N_SENSORS)
        return np.sqrt(self.m2 / (self.record_count - 1))

    def merged(self, block: np.ndarray) -> "RepositoryManifest":
        """Statistics after appending ``block`` (k, 42) of sensor rows."""
        k = len(block)
        if k == 0:
            return self
        b_mean = block.mean(axis=0)
        b_m2 = ((block - b_mean) ** 2).sum(axis=0)
        n = self.record_count
        total = n + k
        delta = b_mean - self.mean
        mean = self.mean + delta * (k / total)
        m2 = self.m2 + b_m2 + delta**2 * (n * k / total)
        return replace(self, record_count=total, mean=mean, m2=m2, watermark=total)

    @classmethod
    def recompute(cls, sensors) -> "RepositoryManifest":
        """Statistics computed from scratch in one batch."""
        return cls().merged(np.asarray(sensors, float).reshape(-1, N_SENSORS))

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "record_count": self.record_count,
            "watermark": self.watermark,
            "records_offset": self.records_offset,
            "sensors": {"mean": self.mean.tolist(), "std": self.std.tolist(), "n": self.record_count},
            "welford_m2": self.m2.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RepositoryManifest":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise SchemaError(f"manifest schema version {d.get('schema_version')} != {SCHEMA_VERSION}")
        return cls(d["record_count"], np.array(d["sensors"]["mean"], float),
                   np.array(d["welford_m2"], float), d["watermark"], d["records_offset"])


class Repository:
    """
    Append-only record store.

    ``Repository(path)`` opens or creates an on-disk repository;
    ``Repository()`` is an in-memory one (used for isolated experiment cells).
    Timestamps come from ``clock(index)``; the default logical clock keeps
    generated files byte-reproducible.
    """

    def __init__(self, path: str | Path | None = None, clock: Callable[[int], str] = logical_clock,
                 dedup: bool = False):
        self.path = Path(path) if path is not None else None
        self.clock = clock
        self.dedup = dedup
        self._records: list[RepositoryRecord] = []
        self._keys: set[str] = set()
        self.manifest = RepositoryManifest()
        if self.path is not None:
            self.path.mkdir(parents=True, exist_ok=True)
            if (self.path / MANIFEST_FILE).exists():
                self._load()
            else:
                (self.path / RECORDS_FILE).touch()
                self._write_manifest()

    # -- persistence ------------------------------------------------------

    def _load(self):
        manifest = RepositoryManifest.from_dict(json.loads((self.path / MANIFEST_FILE).read_text()))
        with open(self.path / RECORDS_FILE, "rb") as fh:
            data = fh.read(manifest.records_offset)
        for lineno, line in enumerate(data.decode().splitlines(), start=1):
            try:
                self._records.append(RepositoryRecord.from_json(line))
            except (KeyError, TypeError, ValueError) as exc:
                raise SchemaError(f"{self.path / RECORDS_FILE}:{lineno}: malformed record ({exc})") from exc
        if len(self._records) != manifest.record_count:
            raise SchemaError("manifest record count does not match record file")
        self._keys = {r.dedup_key() for r in self._records} if self.dedup else set()
        self.manifest = manifest

    def _write_manifest(self):
        fd, tmp = tempfile.mkstemp(dir=self.path, prefix=".manifest-")
        with os.fdopen(fd, "w") as fh:
            json.dump(self.manifest.to_dict(), fh)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.path / MANIFEST_FILE)

    # -- operations -------------------------------------------------------

    def __len__(self):
        return len(self._records)

    @property
    def records(self) -> list[RepositoryRecord]:
        return list(self._records)

    def ingest(self, records: Iterable[RepositoryRecord]) -> RepositoryManifest:
        """Append records and update the manifest. Returns the new manifest."""
        fresh = []
        for rec in records:
            if not isinstance(rec, RepositoryRecord):
                raise SchemaError(f"not a repository record: {type(rec).__name__}")
            if self.dedup:
                key = rec.dedup_key()
                if key in self._keys:
                    continue
                self._keys.add(key)
            if rec.ts is None:
                rec = replace(rec, ts=self.clock(len(self._records) + len(fresh)))
            fresh.append(rec)
        if not fresh:
            return self.manifest
        manifest = self.manifest.merged(np.stack([r.sensors for r in fresh]))
        if self.path is not None:
            payload = "".join(r.to_json() + "\n" for r in fresh).encode()
            with open(self.path / RECORDS_FILE, "ab") as fh:
                fh.write(payload)
                fh.flush()
                os.fsync(fh.fileno())
            manifest = replace(manifest, records_offset=self.manifest.records_offset + len(payload))
        self._records.extend(fresh)
        self.manifest = manifest
        if self.path is not None:
            self._write_manifest()
        return manifest

    def query(self, provenance: str | None = None, tags: Iterable[str] = (),
              ranges: dict | None = None) -> list[RepositoryRecord]:
        """
        Records matching every given filter, ordered by (timestamp, insertion index).

        ``ranges`` maps ``"health"`` (all groups), ``"load_n"``, ``"load_pos"``
        or ``"temp_c"`` to an inclusive ``(lo, hi)`` pair.
        """
        if provenance is not None and provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {provenance!r}")
        ranges = dict(ranges or {})
        for key, (lo, hi) in ranges.items():
            if key not in ("health", "load_n", "load_pos", "temp_c"):
                raise ValueError(f"unknown range filter {key!r}")
            if not lo <= hi:
                raise ValueError(f"empty range for {key}: ({lo}, {hi})")
        tags = set(tags)

        def keep(r: RepositoryRecord) -> bool:
            if provenance is not None and r.prov != provenance:
                return False
            if not tags.issubset(r.tags):
                return False
            for key, (lo, hi) in ranges.items():
                vals = r.config.health if key == "health" else (getattr(r.config, key),)
                if not all(lo <= v <= hi for v in vals):
                    return False
            return True

        hits = [(r.ts, i, r) for i, r in enumerate(self._records) if keep(r)]
        hits.sort(key=lambda t: (t[0], t[1]))
        return [r for _, _, r in hits]

    def copy(self) -> "Repository":
        """In-memory copy sharing no mutable state with this repository."""
        other = Repository(clock=self.clock, dedup=self.dedup)
        other._records = list(self._records)
        other._keys = set(self._keys)
        other.manifest = replace(self.manifest, records_offset=0)
        return other

    def save_as(self, path: str | Path) -> "Repository":
        """Write every record into a new on-disk repository at ``path``."""
        target = Repository(path, clock=self.clock, dedup=self.dedup)
        if len(target):
            raise FileExistsError(f"{path} already holds a repository")
        target.ingest(self._records)
        return target


def is_novel(detached, manifest: RepositoryManifest) -> tuple[bool, list[int]]:
    """
    Per-sensor 95% interval screen against the pooled repository statistics.

    Sensor ``j`` offends when ``|x_j - mean_j| > z * std_j`` with ``z`` the
    two-sided 95% standard-normal quantile; the reading is novel if any
    sensor offends.
    """
    if manifest.record_count < 2:
        raise InsufficientStatistics("insufficient repository statistics (need n >= 2)")
    x = detached.values if isinstance(detached, SensorVector) else np.asarray(detached, float)
    offending = np.flatnonzero(np.abs(x - manifest.mean) > Z_975 * manifest.std)
    return bool(len(offending)), offending.tolist()


def augment(repo: Repository, record: RepositoryRecord, force: bool = False) -> RepositoryManifest:
    """Add a detached reading as a new critical condition."""
    novel, _ = is_novel(record.sensors, repo.manifest)
    tags = [t for t in record.tags if t != NOVEL_TAG] + [NOVEL_TAG]
    if not novel:
        if not force:
            raise ValueError("record is not novel; pass force=True to augment anyway")
        log.warning("force-augmenting a non-novel record")
        tags.append(FORCED_TAG)
    return repo.ingest([replace(record, prov="deployment-detached", tags=tuple(tags), ts=None)])
