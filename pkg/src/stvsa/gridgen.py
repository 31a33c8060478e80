"""Surrogate post-fault voltage trajectories on the IEEE 39-bus graph.

This replaces a full time-domain grid simulation with a coupled first-order
voltage-recovery model that still produces the stable/unstable dichotomy
caused by induction-motor stalling. For node ``i`` with target voltage
``u_i(t)``::

    dv_i/dt = a (u_i - v_i) - S_i max(0, v_th - v_i) + eps * sum_{j ~ i} (v_j - v_i)

``S_i = s * mu * rho * w_i`` is the stall coefficient (motor fraction ``mu``,
load ratio ``rho``, per-node motor share ``w_i`` drawn from the scenario
stream; pure generator buses 30-38 carry no motor load). While the fault is
on, ``u_i = v_ref - kappa * exp(-beta * hops(i, fault_bus))`` and the state
starts at that depressed level; after clearing ``u_i = v_ref``. Voltages are
floored at ``v_floor`` (a collapsed bus cannot go negative). The model is
cooperative (coupling weights are non-negative) and decreasing in ``S``, so
more motor stress never raises any voltage.

Recorded channels per node and step, all deterministic in ``v`` and topology:

0. voltage magnitude ``v_i``
1. active-injection proxy ``(deg_i / max_deg) * v_i**2`` (constant-impedance draw)
2. reactive-injection proxy ``dv_i/dt`` (backward difference of the record)
3. incident-flow proxy ``sum_{j ~ i} (v_i - v_j)``
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Sequence

import numpy as np

from . import kernels
from .core.rng import RngStream, derive_stream, stream_id_for
from .core.types import Dataset, GridTopology, Label, Provenance, Sample

log = logging.getLogger(__name__)

FAULT_DURATIONS = (0.1, 0.2, 0.3)
GENERATOR_BUSES = tuple(range(29, 38))  # buses 30..38, zero-based


class SimulationError(RuntimeError):
    def __init__(self, message: str, step: int, scenario: int | None = None):
        super().__init__(message)
        self.step = step
        self.scenario = scenario


@dataclass(frozen=True)
class SimConfig:
    record_dt: float = 0.01
    integrate_dt: float = 0.001
    horizon: float = 1.5
    recovery_gain: float = 4.0
    coupling: float = 1.5
    stall_gain: float = 16.0
    stall_threshold: float = 0.8
    v_ref: float = 1.0
    dip_decay: float = 0.2
    v_floor: float = 0.0
    motor_share_range: tuple[float, float] = (0.5, 1.5)
    stable_level: float = 0.9
    unstable_level: float = 0.75
    tail_fraction: float = 0.2

    def __post_init__(self):
        for name in ("record_dt", "integrate_dt", "horizon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        ratio = self.record_dt / self.integrate_dt
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError("integrate_dt must divide record_dt")
        steps = self.horizon / self.record_dt
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("horizon must be an integer number of record steps")
        if self.recovery_gain < 0 or self.coupling < 0 or self.stall_gain < 0:
            raise ValueError("gains must be non-negative")
        if not 0 < self.tail_fraction <= 1:
            raise ValueError("tail_fraction must be in (0, 1]")
        object.__setattr__(self, "motor_share_range", tuple(self.motor_share_range))

    @property
    def substeps(self) -> int:
        return int(round(self.record_dt / self.integrate_dt))

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.record_dt))

    @property
    def sample_rate(self) -> float:
        return 1.0 / self.record_dt


@dataclass(frozen=True)
class ScenarioParams:
    load_ratio: float
    motor_fraction: float
    fault_bus: int
    fault_duration: float
    voltage_dip: float
    stream: RngStream = field(compare=True)

    def __post_init__(self):
        if not 0.8 <= self.load_ratio <= 1.2:
            raise ValueError(f"load_ratio {self.load_ratio} outside [0.8, 1.2]")
        if not 0.1 <= self.motor_fraction <= 0.9:
            raise ValueError(f"motor_fraction {self.motor_fraction} outside [0.1, 0.9]")
        if not any(math.isclose(self.fault_duration, d) for d in FAULT_DURATIONS):
            raise ValueError(f"fault_duration must be one of {FAULT_DURATIONS}")
        if not 0.3 <= self.voltage_dip <= 0.7:
            raise ValueError(f"voltage_dip {self.voltage_dip} outside [0.3, 0.7]")
        if self.fault_bus < 0:
            raise ValueError("fault_bus must be a node index")

    def as_meta(self) -> dict:
        d = asdict(self)
        d["stream"] = [self.stream.master_seed, self.stream.stream_id]
        return d


def build_ieee39_topology() -> GridTopology:
    text = resources.files("stvsa.data").joinpath("ieee39_edges.txt").read_text()
    edges = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            i, j = line.split()
            edges.append((int(i) - 1, int(j) - 1))
    return GridTopology(39, tuple(edges))


def sample_scenario_params(stream: RngStream, topo: GridTopology) -> ScenarioParams:
    rng = stream.child("params").generator()
    return ScenarioParams(
        load_ratio=float(rng.uniform(0.8, 1.2)),
        motor_fraction=float(rng.uniform(0.1, 0.9)),
        fault_bus=int(rng.integers(topo.node_count)),
        fault_duration=float(FAULT_DURATIONS[int(rng.integers(len(FAULT_DURATIONS)))]),
        voltage_dip=float(rng.uniform(0.3, 0.7)),
        stream=stream,
    )


def motor_shares(p: ScenarioParams, topo: GridTopology, cfg: SimConfig) -> np.ndarray:
    lo, hi = cfg.motor_share_range
    w = p.stream.child("motor_shares").generator().uniform(lo, hi, size=topo.node_count)
    if topo.node_count == 39:
        w[list(GENERATOR_BUSES)] = 0.0
    return w


def _integrate(params: Sequence[ScenarioParams], topo: GridTopology, cfg: SimConfig) -> np.ndarray:
    """Voltage records [B, T, N] for a batch of scenarios."""
    B, N = len(params), topo.node_count
    stall = np.empty((B, N))
    target = np.empty((B, N))
    fault_sub = np.empty(B, dtype=np.int64)
    for b, p in enumerate(params):
        if p.fault_bus >= N:
            raise ValueError(f"fault_bus {p.fault_bus} out of range for {N} nodes")
        stall[b] = cfg.stall_gain * p.motor_fraction * p.load_ratio * motor_shares(p, topo, cfg)
        target[b] = cfg.v_ref - p.voltage_dip * np.exp(-cfg.dip_decay * topo.hops_from(p.fault_bus))
        fault_sub[b] = int(round(p.fault_duration / cfg.integrate_dt))
    idx, valid = topo.padded_neighbors()
    v, bad = kernels.integrate_trajectories(
        np.ascontiguousarray(target),
        np.ascontiguousarray(stall),
        np.ascontiguousarray(target),
        fault_sub,
        np.ascontiguousarray(idx, dtype=np.int64),
        np.ascontiguousarray(valid, dtype=np.uint8),
        float(cfg.recovery_gain),
        float(cfg.coupling),
        float(cfg.v_ref),
        float(cfg.stall_threshold),
        float(cfg.v_floor),
        float(cfg.integrate_dt),
        cfg.substeps,
        cfg.n_steps,
    )
    for b in np.flatnonzero(bad >= 0):
        raise SimulationError(f"non-finite state at integration step {bad[b]}", int(bad[b]), int(b))
    return v


def trajectory_channels(v: np.ndarray, topo: GridTopology, cfg: SimConfig) -> np.ndarray:
    """Map voltage records [B, T, N] to features [B, N, T, 4]."""
    deg = topo.degrees().astype(np.float64)
    adj = topo.adjacency().astype(np.float64)
    active = (deg / deg.max()) * v**2
    rate = np.zeros_like(v)
    rate[:, 1:] = (v[:, 1:] - v[:, :-1]) / cfg.record_dt
    flow = deg * v - v @ adj  # sum_j (v_i - v_j)
    feats = np.stack([v, active, rate, flow], axis=-1)  # [B, T, N, 4]
    return np.ascontiguousarray(feats.transpose(0, 2, 1, 3))


def label_rule(traj: Sample | np.ndarray, cfg: SimConfig = SimConfig()) -> Label:
    """Confident labels from the node-mean voltage over the final part of the window.

    Stable if it stays above ``stable_level`` there, unstable if it stays below
    ``unstable_level``, otherwise unlabeled. Expects raw (per-unit) features.
    """
    f = traj.features if isinstance(traj, Sample) else np.asarray(traj)
    mean_v = f[:, :, 0].mean(axis=0)
    tail = mean_v[-max(1, int(math.ceil(cfg.tail_fraction * len(mean_v) - 1e-9))):]
    if np.all(tail > cfg.stable_level):
        return Label.STABLE
    if np.all(tail < cfg.unstable_level):
        return Label.UNSTABLE
    return Label.UNLABELED


def _to_samples(params, feats, cfg):
    return [
        Sample(f.astype(np.float32), label_rule(f, cfg), Provenance.SIMULATED, p.as_meta())
        for p, f in zip(params, feats)
    ]


def simulate_scenario(p: ScenarioParams, topo: GridTopology, cfg: SimConfig = SimConfig()) -> Sample:
    v = _integrate([p], topo, cfg)
    return _to_samples([p], trajectory_channels(v, topo, cfg), cfg)[0]


def scenario_stream(master_seed: int, index: int) -> RngStream:
    return derive_stream(master_seed, stream_id_for("gridgen", index))


def generate_dataset(n: int, topo: GridTopology, cfg: SimConfig = SimConfig(), master_seed: int = 0,
                     batch: int = 512) -> Dataset:
    """Simulate ``n`` scenarios with parameters drawn from per-scenario streams."""
    if n < 1:
        raise ValueError("n must be >= 1")
    samples: list[Sample] = []
    for start in range(0, n, batch):
        idx = range(start, min(n, start + batch))
        params = [sample_scenario_params(scenario_stream(master_seed, i), topo) for i in idx]
        try:
            v = _integrate(params, topo, cfg)
        except SimulationError as exc:
            raise SimulationError(
                f"scenario {start + exc.scenario}: {exc}", exc.step, start + exc.scenario
            ) from exc
        samples.extend(_to_samples(params, trajectory_channels(v, topo, cfg), cfg))
    ds = Dataset.from_samples(topo, samples, seed=master_seed)
    log.info("generated %d scenarios: %s", n, label_mix(ds))
    return ds


def label_mix(ds: Dataset) -> dict[str, float]:
    n = max(len(ds), 1)
    return {k: v / n for k, v in ds.label_counts().items()}
