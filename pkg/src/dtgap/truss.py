"""
Planar truss model of the bridge and its direct-stiffness solver.

The bridge is a Pratt truss with ``n_bays`` panels, a bottom and a top chord
of ``n_bays + 1`` nodes each, verticals at every panel point and one diagonal
per panel (both diagonals in the middle panel so the structure stays mirror
symmetric). The left bottom node is pinned, the right bottom node sits on a
roller. Every other node carries a vertical-displacement sensor, which gives
42 sensors for the default 21-bay layout.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg

N_SENSORS = 42
GROUP_NAMES = ("bottom_chord", "top_chord", "vertical", "left_diagonal", "right_diagonal")
DOMAINS = ("virtual", "physical", "detached")


class UnstableStructureError(RuntimeError):
    """Raised when the reduced stiffness matrix is singular or indefinite."""

    def __init__(self, rank_deficiency: int, n_free: int):
        self.rank_deficiency = rank_deficiency
        self.n_free = n_free
        super().__init__(
            f"unstable structure: reduced stiffness matrix is not positive definite "
            f"(rank deficiency {rank_deficiency} of {n_free} free DOFs)"
        )


@dataclass(frozen=True)
class AssetConfiguration:
    """Latent state of one asset: per-group health, point load and temperature."""

    health: tuple[float, ...]
    load_n: float
    load_pos: int
    temp_c: float

    def __post_init__(self):
        object.__setattr__(self, "health", tuple(float(h) for h in self.health))
        object.__setattr__(self, "load_n", float(self.load_n))
        object.__setattr__(self, "load_pos", int(self.load_pos))
        object.__setattr__(self, "temp_c", float(self.temp_c))

    def as_vector(self) -> np.ndarray:
        return np.array([*self.health, self.load_n, float(self.load_pos), self.temp_c])

    @classmethod
    def from_vector(cls, v: Sequence[float], n_groups: int = len(GROUP_NAMES)) -> "AssetConfiguration":
        v = np.asarray(v, dtype=float)
        return cls(
            health=tuple(v[:n_groups]),
            load_n=v[n_groups],
            load_pos=int(round(v[n_groups + 1])),
            temp_c=v[n_groups + 2],
        )

    def to_dict(self) -> dict:
        return {
            "health": list(self.health),
            "load_n": self.load_n,
            "load_pos": self.load_pos,
            "temp_c": self.temp_c,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AssetConfiguration":
        return cls(tuple(d["health"]), d["load_n"], d["load_pos"], d["temp_c"])


@dataclass(frozen=True)
class SensorVector:
    """The 42 vertical displacements (m), tagged with the domain they come from."""

    values: np.ndarray
    domain: str = "virtual"

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        values.setflags(write=False)
        if values.shape != (N_SENSORS,):
            raise ValueError(f"sensor vector must have {N_SENSORS} values, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("sensor vector contains non-finite values")
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown sensor domain {self.domain!r}")
        object.__setattr__(self, "values", values)

    def __len__(self):
        return N_SENSORS


@dataclass(frozen=True, eq=False)
class TrussModel:
    """
    Immutable planar truss.

    Attributes
    ----------
    nodes : ndarray, shape (n_nodes, 2)
        Node coordinates in meters.
    members : ndarray, shape (n_members, 2)
        Node index pairs.
    areas, moduli : ndarray, shape (n_members,)
        Cross-section area (m^2) and Young's modulus (Pa) per member.
    groups : ndarray, shape (n_members,)
        Member-group id; health factors are indexed by group.
    supports : tuple of (node, fix_x, fix_y)
    sensors : tuple of int
        Nodes whose vertical displacement is reported, in sensor order.
    load_nodes : tuple of int
        ``load_nodes[k]`` is the node loaded when ``load_pos == k``; ``None``
        marks support positions that cannot be loaded.
    """

    nodes: np.ndarray
    members: np.ndarray
    areas: np.ndarray
    moduli: np.ndarray
    groups: np.ndarray
    supports: tuple
    sensors: tuple
    load_nodes: tuple
    n_groups: int = len(GROUP_NAMES)
    thermal_alpha: float = 0.0
    t_ref: float = 20.0
    temp_range: tuple = (-20.0, 50.0)
    reference_load: float = 0.0
    _free: np.ndarray = field(init=False, repr=False)
    _dof_index: np.ndarray = field(init=False, repr=False)
    _entry_index: np.ndarray = field(init=False, repr=False)
    _entry_member: np.ndarray = field(init=False, repr=False)
    _entry_value: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        members = np.asarray(self.members, dtype=int)
        groups = np.asarray(self.groups, dtype=int)
        if groups.shape != (len(members),):
            raise ValueError("every member needs exactly one group id")
        if groups.min() < 0 or groups.max() >= self.n_groups:
            raise ValueError("member group id out of range")
        for name, value in (("nodes", nodes), ("members", members), ("groups", groups)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "areas", np.asarray(self.areas, dtype=float))
        object.__setattr__(self, "moduli", np.asarray(self.moduli, dtype=float))

        n_dof = 2 * len(nodes)
        fixed = np.zeros(n_dof, dtype=bool)
        for node, fix_x, fix_y in self.supports:
            fixed[2 * node] |= bool(fix_x)
            fixed[2 * node + 1] |= bool(fix_y)
        free = np.flatnonzero(~fixed)
        dof_index = np.full(n_dof, -1)
        dof_index[free] = np.arange(len(free))
        object.__setattr__(self, "_free", free)
        object.__setattr__(self, "_dof_index", dof_index)

        # Scatter table for K: entry e adds scale[member[e]] * value[e] to flat slot index[e].
        nf = len(free)
        idx, mem, val = [], [], []
        for m, (i, j) in enumerate(members):
            d = nodes[j] - nodes[i]
            length = float(np.hypot(*d))
            if length < 1e-12:
                raise ValueError(f"member {m} has zero length")
            c, s = d / length
            k = self.moduli[m] * self.areas[m] / length
            t = np.array([-c, -s, c, s])
            ke = k * np.outer(t, t)
            dofs = dof_index[[2 * i, 2 * i + 1, 2 * j, 2 * j + 1]]
            for a in range(4):
                for b in range(4):
                    if dofs[a] >= 0 and dofs[b] >= 0:
                        idx.append(dofs[a] * nf + dofs[b])
                        mem.append(m)
                        val.append(ke[a, b])
        object.__setattr__(self, "_entry_index", np.array(idx, dtype=np.intp))
        object.__setattr__(self, "_entry_member", np.array(mem, dtype=np.intp))
        object.__setattr__(self, "_entry_value", np.array(val))

    @property
    def n_free(self) -> int:
        return len(self._free)

    @property
    def n_members(self) -> int:
        return len(self.members)

    def sensor_dofs(self) -> np.ndarray:
        """Reduced-DOF indices of the sensed vertical displacements."""
        return self._dof_index[[2 * n + 1 for n in self.sensors]]

    def valid_load_positions(self) -> list[int]:
        return [k for k, n in enumerate(self.load_nodes) if n is not None]

    def check_config(self, config: AssetConfiguration) -> None:
        """Raise ``ValueError`` if ``config`` is not valid for this truss."""
        if len(config.health) != self.n_groups:
            raise ValueError(f"expected {self.n_groups} health factors, got {len(config.health)}")
        for g, h in enumerate(config.health):
            if not (0.0 < h <= 1.0):
                raise ValueError(f"health of group {g} must lie in (0, 1], got {h}")
        if not (config.load_n >= 0.0) or not np.isfinite(config.load_n):
            raise ValueError(f"load magnitude must be finite and >= 0, got {config.load_n}")
        pos = config.load_pos
        if not (0 <= pos < len(self.load_nodes)) or self.load_nodes[pos] is None:
            raise ValueError(f"load position {pos} is not a loadable bottom node")
        lo, hi = self.temp_range
        if not (lo <= config.temp_c <= hi):
            raise ValueError(f"temperature {config.temp_c} outside operating range [{lo}, {hi}]")

    def config_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Lower/upper bounds of the configuration vector used for clamping predictions."""
        positions = self.valid_load_positions()
        lo = [1e-3] * self.n_groups + [0.0, min(positions), self.temp_range[0]]
        hi = [1.0] * self.n_groups + [np.inf, max(positions), self.temp_range[1]]
        return np.array(lo), np.array(hi)

    def clamp_config(self, vector: np.ndarray) -> AssetConfiguration:
        lo, hi = self.config_bounds()
        v = np.clip(np.asarray(vector, dtype=float), lo, hi)
        return AssetConfiguration.from_vector(v, self.n_groups)


def member_scale(model: TrussModel, config: AssetConfiguration) -> np.ndarray:
    """Axial-stiffness multiplier of every member: group health times thermal modulus factor."""
    thermal = 1.0 - model.thermal_alpha * (config.temp_c - model.t_ref)
    return np.asarray(config.health)[model.groups] * thermal


def assemble_stiffness(model: TrussModel, config: AssetConfiguration) -> np.ndarray:
    """Reduced (free-DOF) global stiffness matrix for ``config``."""
    model.check_config(config)
    scale = member_scale(model, config)
    weights = scale[model._entry_member] * model._entry_value
    nf = model.n_free
    flat = np.bincount(model._entry_index, weights=weights, minlength=nf * nf)
    return flat.reshape(nf, nf)


def _factor(K: np.ndarray):
    try:
        c, lower = scipy.linalg.cho_factor(K, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        c = None
    # Round-off can let a mechanism through with a vanishing pivot.
    if c is None or np.min(np.diag(c)) ** 2 <= 1e-12 * np.max(np.diag(K)):
        rank = np.linalg.matrix_rank(K)
        raise UnstableStructureError(max(K.shape[0] - rank, 1), K.shape[0])
    return c, lower


def load_vector(model: TrussModel, config: AssetConfiguration) -> np.ndarray:
    model.check_config(config)
    f = np.zeros(model.n_free)
    node = model.load_nodes[config.load_pos]
    f[model._dof_index[2 * node + 1]] = -config.load_n
    return f


def solve_displacements(model: TrussModel, config: AssetConfiguration, loads: np.ndarray) -> np.ndarray:
    """Free-DOF displacements under an explicit reduced load vector."""
    K = assemble_stiffness(model, config)
    return scipy.linalg.cho_solve(_factor(K), np.asarray(loads, dtype=float), check_finite=False)


def simulate(model: TrussModel, config: AssetConfiguration) -> SensorVector:
    """Virtual sensor readings (vertical displacements, m) for one configuration."""
    u = solve_displacements(model, config, load_vector(model, config))
    return SensorVector(u[model.sensor_dofs()], "virtual")


def simulate_batch(model: TrussModel, configs: Sequence[AssetConfiguration]) -> list[SensorVector]:
    for i, config in enumerate(configs):
        try:
            model.check_config(config)
        except ValueError as exc:
            raise ValueError(f"config {i}: {exc}") from exc
    return [simulate(model, c) for c in configs]


def simulate_array(model: TrussModel, configs: Sequence[AssetConfiguration]) -> np.ndarray:
    """Stacked readings, shape (n, 42); same values as :func:`simulate_batch`."""
    if len(configs) == 0:
        return np.zeros((0, N_SENSORS))
    return np.stack([s.values for s in simulate_batch(model, configs)])


def pratt_truss(
    n_bays: int = 21,
    bay_length: float = 1.5,
    height: float = 2.5,
    youngs_modulus: float = 2.0e11,
    areas: dict | None = None,
    thermal_alpha: float = 3.6e-4,
    t_ref: float = 20.0,
    temp_range: tuple = (-20.0, 50.0),
    reference_load: float = 25000.0,
) -> TrussModel:
    """Build the bridge truss. Bottom nodes are ``0..n_bays``, top nodes follow."""
    areas = {
        "bottom_chord": 3.0e-3,
        "top_chord": 3.0e-3,
        "vertical": 1.5e-3,
        "left_diagonal": 1.5e-3,
        "right_diagonal": 1.5e-3,
        **(areas or {}),
    }
    nb = n_bays + 1
    bottom = [(i * bay_length, 0.0) for i in range(nb)]
    top = [(i * bay_length, height) for i in range(nb)]
    nodes = np.array(bottom + top)

    members, groups = [], []

    def add(i, j, group):
        members.append((i, j))
        groups.append(GROUP_NAMES.index(group))

    for i in range(n_bays):
        add(i, i + 1, "bottom_chord")
    for i in range(n_bays):
        add(nb + i, nb + i + 1, "top_chord")
    for i in range(nb):
        add(i, nb + i, "vertical")
    # Pratt diagonals slope down toward midspan; the middle panel of an odd
    # layout carries both so the truss is mirror symmetric.
    mid = n_bays / 2.0
    for i in range(n_bays):
        centre = i + 0.5
        if centre <= mid:
            add(nb + i, i + 1, "left_diagonal")
        if centre >= mid:
            add(nb + i + 1, i, "right_diagonal")

    group_area = np.array([areas[g] for g in GROUP_NAMES])
    groups = np.array(groups)
    supports = ((0, True, True), (n_bays, False, True))
    sensors = tuple(list(range(1, n_bays)) + list(range(nb, 2 * nb)))
    load_nodes = tuple(None if i in (0, n_bays) else i for i in range(nb))
    return TrussModel(
        nodes=nodes,
        members=np.array(members),
        areas=group_area[groups],
        moduli=np.full(len(members), youngs_modulus),
        groups=groups,
        supports=supports,
        sensors=sensors,
        load_nodes=load_nodes,
        thermal_alpha=thermal_alpha,
        t_ref=t_ref,
        temp_range=tuple(temp_range),
        reference_load=reference_load,
    )


def default_config_path() -> Path:
    return Path(str(resources.files("dtgap") / "data" / "structure.cfg"))


def load_structure(path: str | Path | None = None) -> TrussModel:
    """Read a structure-config file (INI-style key/value text) and build the truss."""
    path = Path(path) if path is not None else default_config_path()
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(path)
    s = parser["structure"]
    if s.getint("version") != 1:
        raise ValueError(f"unsupported structure-config version {s.get('version')}")
    model = pratt_truss(
        n_bays=s.getint("n_bays"),
        bay_length=s.getfloat("bay_length_m"),
        height=s.getfloat("height_m"),
        youngs_modulus=s.getfloat("youngs_modulus_pa"),
        areas={
            "bottom_chord": s.getfloat("area_bottom_chord_m2"),
            "top_chord": s.getfloat("area_top_chord_m2"),
            "vertical": s.getfloat("area_vertical_m2"),
            "left_diagonal": s.getfloat("area_diagonal_m2"),
            "right_diagonal": s.getfloat("area_diagonal_m2"),
        },
        thermal_alpha=s.getfloat("thermal_alpha_per_c"),
        t_ref=s.getfloat("t_ref_c"),
        temp_range=(s.getfloat("temp_min_c"), s.getfloat("temp_max_c")),
        reference_load=s.getfloat("reference_load_n"),
    )
    if len(model.sensors) != N_SENSORS:
        raise ValueError(f"structure yields {len(model.sensors)} sensors, expected {N_SENSORS}")
    return model
