from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Any, Iterable, Iterator, Mapping, Sequence

import numpy as np

N_CHANNELS = 4
CHANNEL_NAMES = ("voltage", "active_proxy", "reactive_proxy", "flow_proxy")


class Label(IntEnum):
    UNLABELED = -1
    UNSTABLE = 0
    STABLE = 1


class Provenance(str, Enum):
    SIMULATED = "simulated"
    GAN_SYNTHETIC = "gan_synthetic"
    ADVERSARIAL_WB = "adversarial_wb"
    ADVERSARIAL_BB = "adversarial_bb"
    DOS = "dos"
    COMPOSITE_WB = "composite_wb"
    COMPOSITE_BB = "composite_bb"
    NOISY = "noisy"


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class GridTopology:
    """Undirected grid graph. ``neighborhoods[i]`` includes ``i`` itself."""

    node_count: int
    edges: tuple[tuple[int, int], ...]
    neighborhoods: tuple[frozenset[int], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = int(self.node_count)
        if n <= 0:
            raise TopologyError("node_count must be positive")
        seen: set[tuple[int, int]] = set()
        canon = []
        for i, j in self.edges:
            i, j = int(i), int(j)
            if not (0 <= i < n and 0 <= j < n):
                raise TopologyError(f"edge ({i}, {j}) out of range for {n} nodes")
            if i == j:
                raise TopologyError(f"self-loop edge at node {i}")
            e = (min(i, j), max(i, j))
            if e in seen:
                raise TopologyError(f"duplicate edge {e}")
            seen.add(e)
            canon.append(e)
        nbrs: list[set[int]] = [{i} for i in range(n)]
        for i, j in canon:
            nbrs[i].add(j)
            nbrs[j].add(i)
        object.__setattr__(self, "node_count", n)
        object.__setattr__(self, "edges", tuple(canon))
        object.__setattr__(self, "neighborhoods", tuple(frozenset(s) for s in nbrs))
        if np.any(self.hops_from(0) < 0):
            raise TopologyError("graph is not connected")

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.node_count, self.node_count), dtype=np.int8)
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1
        return a

    def neighbor_mask(self) -> np.ndarray:
        """Boolean [N, N]; True where j is in the (self-inclusive) neighborhood of i."""
        return self.adjacency().astype(bool) | np.eye(self.node_count, dtype=bool)

    def degrees(self) -> np.ndarray:
        return self.adjacency().sum(axis=1).astype(np.int64)

    def padded_neighbors(self) -> tuple[np.ndarray, np.ndarray]:
        """Neighbor index table [N, max_deg] (self excluded, ascending) and its validity mask."""
        deg = self.degrees()
        width = max(int(deg.max(initial=0)), 1)
        idx = np.zeros((self.node_count, width), dtype=np.int64)
        valid = np.zeros((self.node_count, width), dtype=bool)
        for i, nb in enumerate(self.neighborhoods):
            others = sorted(nb - {i})
            idx[i, : len(others)] = others
            valid[i, : len(others)] = True
        return idx, valid

    def hops_from(self, source: int) -> np.ndarray:
        """BFS hop distance from ``source``; -1 for unreachable nodes."""
        dist = np.full(self.node_count, -1, dtype=np.int64)
        dist[source] = 0
        queue = deque([source])
        while queue:
            u = queue.popleft()
            for v in sorted(self.neighborhoods[u]):
                if dist[v] < 0:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        return dist


@dataclass(frozen=True)
class Sample:
    features: np.ndarray  # [N, T, F]
    label: Label = Label.UNLABELED
    provenance: Provenance = Provenance.SIMULATED
    meta: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        f = np.asarray(self.features)
        if f.ndim != 3 or f.shape[1] < 1:
            raise ValueError(f"features must be [nodes, steps>=1, channels], got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ValueError("features must be finite")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "label", Label(int(self.label)))
        object.__setattr__(self, "provenance", Provenance(self.provenance))

    def replace(self, **changes) -> "Sample":
        kw = dict(features=self.features, label=self.label, provenance=self.provenance, meta=self.meta)
        kw.update(changes)
        return Sample(**kw)


@dataclass(frozen=True)
class NormStats:
    mins: tuple[float, ...]
    maxs: tuple[float, ...]

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.mins, dtype=np.float64), np.asarray(self.maxs, dtype=np.float64)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    if a.flags.writeable:
        a = a.copy()
        a.flags.writeable = False
    return a


class Dataset:
    """Immutable, ordered collection of samples sharing one topology.

    Features are held as one stacked float32 array ``[S, N, T, F]``; indexing
    yields :class:`Sample` views.
    """

    __slots__ = ("topology", "features", "labels", "provenance", "meta", "norm_stats", "seed")

    def __init__(
        self,
        topology: GridTopology,
        features: np.ndarray,
        labels: Sequence[int] | np.ndarray,
        provenance: Sequence[Provenance | str],
        meta: Sequence[Mapping[str, Any]] | None = None,
        norm_stats: NormStats | None = None,
        seed: int = 0,
    ):
        features = np.asarray(features, dtype=np.float32)
        if features.ndim != 4:
            raise ValueError(f"features must be [samples, nodes, steps, channels], got {features.shape}")
        s = features.shape[0]
        if features.shape[1] != topology.node_count:
            raise ValueError(f"sample node count {features.shape[1]} != topology {topology.node_count}")
        if s and features.shape[2] < 1:
            raise ValueError("samples need at least one time step")
        labels = np.asarray(labels, dtype=np.int8).reshape(-1)
        provenance = tuple(Provenance(p) for p in provenance)
        meta = tuple(dict(m) for m in meta) if meta is not None else tuple({} for _ in range(s))
        if not (len(labels) == len(provenance) == len(meta) == s):
            raise ValueError("labels/provenance/meta length must equal sample count")
        if s and not np.all(np.isfinite(features)):
            raise ValueError("features must be finite")
        if np.any((labels < -1) | (labels > 1)):
            raise ValueError("labels must be -1, 0 or 1")
        for name, value in (
            ("topology", topology),
            ("features", _frozen(features)),
            ("labels", _frozen(labels)),
            ("provenance", provenance),
            ("meta", meta),
            ("norm_stats", norm_stats),
            ("seed", int(seed)),
        ):
            object.__setattr__(self, name, value)

    def __setattr__(self, name, value):
        raise AttributeError("Dataset is immutable")

    @classmethod
    def from_samples(cls, topology: GridTopology, samples: Iterable[Sample], *,
                     shape: tuple[int, int] | None = None, **kw) -> "Dataset":
        samples = list(samples)
        if samples:
            feats = np.stack([np.asarray(s.features, dtype=np.float32) for s in samples])
        else:
            t, f = shape if shape is not None else (1, N_CHANNELS)
            feats = np.zeros((0, topology.node_count, t, f), dtype=np.float32)
        return cls(
            topology,
            feats,
            [int(s.label) for s in samples],
            [s.provenance for s in samples],
            [s.meta for s in samples],
            **kw,
        )

    def __len__(self) -> int:
        return int(self.features.shape[0])

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.features[i], Label(int(self.labels[i])), self.provenance[i], self.meta[i])

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))

    @property
    def samples(self) -> list[Sample]:
        return list(self)

    @property
    def n_steps(self) -> int:
        return int(self.features.shape[2])

    @property
    def n_channels(self) -> int:
        return int(self.features.shape[3])

    def subset(self, indices: Sequence[int] | np.ndarray) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        return Dataset(
            self.topology,
            self.features[idx],
            self.labels[idx],
            [self.provenance[i] for i in idx],
            [self.meta[i] for i in idx],
            norm_stats=self.norm_stats,
            seed=self.seed,
        )

    def evolve(self, **changes) -> "Dataset":
        kw = dict(
            topology=self.topology,
            features=self.features,
            labels=self.labels,
            provenance=self.provenance,
            meta=self.meta,
            norm_stats=self.norm_stats,
            seed=self.seed,
        )
        kw.update(changes)
        return Dataset(**kw)

    def label_counts(self) -> dict[str, int]:
        return {
            "stable": int(np.sum(self.labels == Label.STABLE)),
            "unstable": int(np.sum(self.labels == Label.UNSTABLE)),
            "unlabeled": int(np.sum(self.labels == Label.UNLABELED)),
        }

    def __repr__(self) -> str:
        return f"Dataset(n={len(self)}, shape={self.features.shape[1:]}, labels={self.label_counts()})"


def concat_datasets(parts: Sequence[Dataset]) -> Dataset:
    if not parts:
        raise ValueError("nothing to concatenate")
    head = parts[0]
    for p in parts[1:]:
        if p.topology != head.topology or p.features.shape[1:] != head.features.shape[1:]:
            raise ValueError("datasets disagree on topology or sample shape")
    return Dataset(
        head.topology,
        np.concatenate([p.features for p in parts]),
        np.concatenate([p.labels for p in parts]),
        [pv for p in parts for pv in p.provenance],
        [m for p in parts for m in p.meta],
        norm_stats=head.norm_stats,
        seed=head.seed,
    )
