"""Dataset directory format: ``manifest.json`` + ``features.bin``."""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .tensorio import TensorFormatError, read_tensor, write_tensor
from .types import Dataset, GridTopology, NormStats

FORMAT_NAME = "stvsa-dataset"
FORMAT_VERSION = 1


class ManifestError(TensorFormatError):
    pass


def write_dataset(ds: Dataset, path: str | os.PathLike) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "node_count": ds.topology.node_count,
        "edges": [list(e) for e in ds.topology.edges],
        "sample_count": len(ds),
        "dims": list(ds.features.shape),
        "norm_stats": None
        if ds.norm_stats is None
        else {"mins": list(ds.norm_stats.mins), "maxs": list(ds.norm_stats.maxs)},
        "seed": ds.seed,
        "samples": [
            {"label": int(lab), "provenance": prov.value, "meta": meta}
            for lab, prov, meta in zip(ds.labels, ds.provenance, ds.meta)
        ],
    }
    write_tensor(path / "features.bin", ds.features)
    tmp = path / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, path / "manifest.json")


def read_dataset(path: str | os.PathLike) -> Dataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    if manifest.get("format") != FORMAT_NAME or manifest.get("version") != FORMAT_VERSION:
        raise ManifestError("unrecognised manifest format/version")
    feats = read_tensor(path / "features.bin")
    if list(feats.shape) != manifest["dims"] or feats.dtype != np.float32:
        raise ManifestError(f"features.bin shape {feats.shape} disagrees with manifest {manifest['dims']}")
    recs = manifest["samples"]
    if len(recs) != manifest["sample_count"] or feats.shape[0] != len(recs):
        raise ManifestError("sample count mismatch")
    ns = manifest["norm_stats"]
    return Dataset(
        GridTopology(manifest["node_count"], tuple(tuple(e) for e in manifest["edges"])),
        feats,
        [r["label"] for r in recs],
        [r["provenance"] for r in recs],
        [r["meta"] for r in recs],
        norm_stats=None if ns is None else NormStats(tuple(ns["mins"]), tuple(ns["maxs"])),
        seed=manifest["seed"],
    )
