import importlib.util
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from stvsa import _pykernels, kernels
from stvsa.gridgen import SimConfig

ROOT = Path(__file__).resolve().parents[1]
_spec = importlib.util.spec_from_file_location("bench_kernels", ROOT / "benchmarks" / "bench_kernels.py")
bench = importlib.util.module_from_spec(_spec)
_spec.loader.exec_module(bench)

needs_compiled = pytest.mark.skipif(kernels.compiled_backend is None, reason="compiled extension not built")


def test_backend_name_is_consistent():
    assert kernels.BACKEND in ("cython", "python")
    if kernels.compiled_backend is not None and os.environ.get("STVSA_PURE_PYTHON") != "1":
        assert kernels.BACKEND == "cython"


@needs_compiled
def test_integrator_backends_bit_equal():
    args = bench.integrator_args(6, SimConfig(record_dt=0.05))
    a = _pykernels.integrate_trajectories(*args)
    b = kernels.compiled_backend.integrate_trajectories(*args)
    assert bench.same(a, b)


@needs_compiled
@pytest.mark.parametrize("lam", [0.0, 0.5, 1e6])
def test_membership_backends_bit_equal(lam):
    d2, g, _ = bench.sfcm_args(500, c=3)
    d2[:3] = 0.0  # samples sitting exactly on a centre
    a = _pykernels.sfcm_memberships(d2, g, lam)
    b = kernels.compiled_backend.sfcm_memberships(d2, g, lam)
    assert bench.same(a, b)
    assert np.allclose(np.asarray(a).sum(axis=1), 1.0)


def _generate_digest(env_extra):
    code = ("import hashlib; from stvsa.gridgen import SimConfig, build_ieee39_topology, generate_dataset;"
            "from stvsa.kernels import BACKEND;"
            "ds = generate_dataset(12, build_ieee39_topology(), SimConfig(record_dt=0.05), master_seed=3);"
            "print(BACKEND, hashlib.sha256(ds.features.tobytes() + ds.labels.tobytes()).hexdigest())")
    env = dict(os.environ) | env_extra
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return out.stdout.split()


def test_pure_python_fallback_matches_default_backend():
    backend, digest = _generate_digest({"STVSA_PURE_PYTHON": "1"})
    assert backend == "python"
    default_backend, default_digest = _generate_digest({"STVSA_PURE_PYTHON": "0"})
    assert default_backend == kernels.BACKEND or os.environ.get("STVSA_PURE_PYTHON") == "1"
    assert digest == default_digest
