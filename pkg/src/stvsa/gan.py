"""Conditional Wasserstein GAN with gradient penalty and a spectrally normalised critic.

Samples ``[N, T, F]`` are handled as ``N*F`` channels over ``T`` time steps.
The generator embeds the label, lifts ``(z, embedding)`` to a short sequence
and upsamples it with transposed convolutions; the critic is a strided
convolution stack whose every weight is spectrally normalised, conditioned by
label-embedding channels. Generation quality is measured with sliced
Wasserstein distance, RBF-kernel MMD and a Frechet distance over the
penultimate features of a frozen reference classifier.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial.distance import cdist
from scipy.stats import wasserstein_distance
from torch import nn
from torch.nn.utils.parametrizations import spectral_norm

from .core.rng import RngStream, torch_seeded
from .core.tensorio import read_tensor, write_tensor
from .core.types import Dataset, Label, Provenance, Sample
from .lgat import ClassifierModel, LSTMBaseline, fit_classifier

log = logging.getLogger(__name__)


class GanDivergenceError(RuntimeError):
    def __init__(self, message: str, critic_trace: list[float], generator_trace: list[float]):
        super().__init__(message)
        self.critic_trace = critic_trace
        self.generator_trace = generator_trace


@dataclass(frozen=True)
class GanConfig:
    noise_dim: int = 64
    gp_coefficient: float = 10.0
    critic_steps: int = 5
    generator_lr: float = 1e-3
    critic_lr: float = 1e-3
    betas: tuple[float, float] = (0.0, 0.9)
    batch_size: int = 64
    label_embed_dim: int = 8
    power_iterations: int = 1
    n_steps: int = 2000  # generator updates
    width: int = 64

    def __post_init__(self):
        if not self.gp_coefficient > 0:
            raise ValueError("gp_coefficient must be > 0")
        if self.critic_steps < 1:
            raise ValueError("critic_steps must be >= 1")
        if self.width < 1 or self.width % 2:
            raise ValueError("width must be a positive even number")
        if self.noise_dim < 1 or self.batch_size < 1 or self.power_iterations < 1:
            raise ValueError("noise_dim, batch_size and power_iterations must be positive")
        if self.n_steps < 0:
            raise ValueError("n_steps must be >= 0")
        object.__setattr__(self, "betas", tuple(self.betas))

    def to_dict(self) -> dict:
        return asdict(self)


# --- spectral normalisation ------------------------------------------------------

def spectral_norm_estimate(W, max_iter: int = 1000, tol: float = 1e-12, seed: int = 0) -> float:
    """Largest singular value by power iteration from a fixed random start."""
    W = torch.as_tensor(W)
    if W.dim() != 2:
        W = W.reshape(W.shape[0], -1)
    if not torch.any(W != 0):
        raise ValueError("spectral normalisation of an all-zero matrix")
    g = torch.Generator().manual_seed(seed)
    v = torch.randn(W.shape[1], generator=g, dtype=W.dtype)
    v = v / v.norm()
    sigma = 0.0
    for _ in range(max_iter):
        u = W @ v
        u = u / u.norm()
        v = W.T @ u
        new = float(v.norm())
        v = v / new
        if abs(new - sigma) <= tol * new:
            sigma = new
            break
        sigma = new
    return sigma


def spectral_normalize(W, max_iter: int = 1000):
    """``W / sigma_max(W)``; numpy in, numpy out (torch in, torch out)."""
    is_np = not isinstance(W, torch.Tensor)
    Wt = torch.as_tensor(np.asarray(W, dtype=np.float64)) if is_np else W
    out = Wt / spectral_norm_estimate(Wt.detach(), max_iter=max_iter)
    return out.numpy() if is_np else out


# --- networks ---------------------------------------------------------------------

class Generator(nn.Module):
    def __init__(self, n_nodes: int, n_steps: int, n_channels: int, cfg: GanConfig):
        super().__init__()
        self.shape = (n_nodes, n_steps, n_channels)
        self.cfg = cfg
        w = cfg.width
        self.t0 = max(1, math.ceil(n_steps / 4))
        self.embed = nn.Embedding(2, cfg.label_embed_dim)
        self.lift = nn.Linear(cfg.noise_dim + cfg.label_embed_dim, 2 * w * self.t0)
        self.up = nn.Sequential(
            nn.ConvTranspose1d(2 * w, w, kernel_size=4, stride=2, padding=1),
            nn.ReLU(),
            nn.ConvTranspose1d(w, w, kernel_size=4, stride=2, padding=1),
            nn.ReLU(),
        )
        self.out = nn.Conv1d(w, n_nodes * n_channels, kernel_size=3, padding=1)

    def forward(self, z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        N, T, Fc = self.shape
        h = F.relu(self.lift(torch.cat([z, self.embed(y)], dim=1)))
        h = self.up(h.reshape(len(z), -1, self.t0))
        h = self.out(h)[..., :T]  # [B, N*F, T]; linear so training never saturates
        return h.reshape(len(z), N, Fc, T).transpose(2, 3)


def maxmin(x: torch.Tensor) -> torch.Tensor:
    """Sort channel pairs (GroupSort of size 2).

    Unlike (leaky) ReLU this keeps gradient norms intact, so a spectrally
    normalised critic can still reach the unit input-gradient norm the
    penalty asks for without collapsing to a linear function.
    """
    a, b = x.chunk(2, dim=1)
    return torch.cat([torch.maximum(a, b), torch.minimum(a, b)], dim=1)


def _sn(module: nn.Module, cfg: GanConfig) -> nn.Module:
    return spectral_norm(module, n_power_iterations=cfg.power_iterations)


class Critic(nn.Module):
    """Scores ``D(x | y)``; all weights spectrally normalised on every forward pass."""

    def __init__(self, n_nodes: int, n_steps: int, n_channels: int, cfg: GanConfig):
        super().__init__()
        w = cfg.width
        self.embed = nn.Embedding(2, cfg.label_embed_dim)
        c_in = n_nodes * n_channels + cfg.label_embed_dim
        self.conv1 = _sn(nn.Conv1d(c_in, w, kernel_size=3, stride=2, padding=1), cfg)
        self.conv2 = _sn(nn.Conv1d(w, 2 * w, kernel_size=3, stride=2, padding=1), cfg)
        l2 = (n_steps - 1) // 2 + 1
        l2 = (l2 - 1) // 2 + 1
        self.head = _sn(nn.Linear(2 * w * l2, 1), cfg)

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        B, N, T, Fc = x.shape
        h = x.transpose(2, 3).reshape(B, N * Fc, T)
        e = self.embed(y)[:, :, None].expand(-1, -1, T)
        h = maxmin(self.conv1(torch.cat([h, e], dim=1)))
        h = maxmin(self.conv2(h))
        return self.head(h.flatten(1))[:, 0]

    def weight_matrices(self) -> list[torch.Tensor]:
        """Effective (normalised) weights reshaped to matrices."""
        return [m.weight.reshape(m.weight.shape[0], -1) for m in (self.conv1, self.conv2, self.head)]


# --- losses ------------------------------------------------------------------------

def gradient_penalty(D, x_real: torch.Tensor, x_fake: torch.Tensor, y, stream: RngStream,
                     lam: float = 10.0) -> torch.Tensor:
    """``lam * E[(||grad_xhat D(xhat|y)||_2 - 1)^2]`` on random interpolates.

    The gradient is built with ``create_graph=True`` so the penalty itself is
    differentiable in the critic parameters (double backward).
    """
    if x_real.shape != x_fake.shape:
        raise ValueError("real and fake batches differ in shape")
    eps_shape = (x_real.shape[0],) + (1,) * (x_real.dim() - 1)
    eps = torch.rand(eps_shape, generator=stream.torch_generator(), dtype=torch.float64).to(x_real.dtype)
    xh = (eps * x_real.detach() + (1 - eps) * x_fake.detach()).requires_grad_(True)
    score = D(xh, y)
    if score.requires_grad:
        (grad,) = torch.autograd.grad(score.sum(), xh, create_graph=True, allow_unused=True)
    else:
        grad = None
    if grad is None:
        grad = torch.zeros_like(xh)
    if not torch.all(torch.isfinite(grad)):
        raise GanDivergenceError("non-finite critic input gradient", [], [])
    norms = torch.sqrt(torch.sum(grad.flatten(1) ** 2, dim=1) + 1e-30)
    return lam * torch.mean((norms - 1) ** 2)


def _noise(n: int, cfg: GanConfig, stream: RngStream, dtype=torch.float32) -> torch.Tensor:
    return torch.randn(n, cfg.noise_dim, generator=stream.torch_generator(), dtype=torch.float32).to(dtype)


def critic_loss(D, G, batch, cfg: GanConfig, stream: RngStream) -> torch.Tensor:
    """``-(E D(x|y) - E D(G(z|y)|y)) + L_GP``; ``batch`` is ``(x_real, y)``."""
    x, y = batch
    with torch.no_grad():
        fake = G(_noise(len(x), cfg, stream.child("z"), x.dtype), y)
    w = D(x, y).mean() - D(fake, y).mean()
    return -w + gradient_penalty(D, x, fake, y, stream.child("gp"), cfg.gp_coefficient)


def generator_loss(D, G, batch, cfg: GanConfig, stream: RngStream) -> torch.Tensor:
    x, y = batch
    return -D(G(_noise(len(x), cfg, stream.child("z"), x.dtype), y), y).mean()


# --- training -----------------------------------------------------------------------

@dataclass
class GanState:
    generator: Generator
    critic: Critic
    cfg: GanConfig
    seed: int
    g_opt: torch.optim.Optimizer | None = None
    d_opt: torch.optim.Optimizer | None = None
    critic_trace: list[float] = field(default_factory=list)
    generator_trace: list[float] = field(default_factory=list)

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return self.generator.shape


def init_gan(sample_shape: tuple[int, int, int], cfg: GanConfig, seed: int) -> GanState:
    stream = RngStream(seed, 0).child("gan")
    with torch_seeded(stream.child("init")):
        G = Generator(*sample_shape, cfg)
        D = Critic(*sample_shape, cfg)
    return GanState(G, D, cfg, seed)


def train_sncwgan_gp(real: Dataset, cfg: GanConfig = GanConfig(), seed: int = 0) -> GanState:
    """Alternate ``critic_steps`` critic updates with one generator update, ``cfg.n_steps`` times."""
    labels = np.asarray(real.labels, dtype=np.int64)
    if np.any(labels < 0):
        raise ValueError("GAN training data must be fully labeled")
    if not (np.any(labels == 0) and np.any(labels == 1)):
        raise ValueError("GAN training data needs both categories")
    state = init_gan(real.features.shape[1:], cfg, seed)
    G, D = state.generator, state.critic
    state.g_opt = torch.optim.Adam(G.parameters(), lr=cfg.generator_lr, betas=cfg.betas)
    state.d_opt = torch.optim.Adam(D.parameters(), lr=cfg.critic_lr, betas=cfg.betas)
    x_all = torch.from_numpy(np.array(real.features))
    y_all = torch.from_numpy(labels)
    stream = RngStream(seed, 0).child("gan", "train")
    n = len(real)
    G.train()
    D.train()
    for step in range(cfg.n_steps):
        st = stream.child(step)
        rng = st.child("batches").generator()
        for k in range(cfg.critic_steps):
            idx = torch.as_tensor(rng.integers(0, n, size=min(cfg.batch_size, n)))
            state.d_opt.zero_grad()
            loss_d = critic_loss(D, G, (x_all[idx], y_all[idx]), cfg, st.child("critic", k))
            if not torch.isfinite(loss_d):
                raise GanDivergenceError(f"non-finite critic loss at step {step}",
                                         state.critic_trace, state.generator_trace)
            loss_d.backward()
            state.d_opt.step()
        idx = torch.as_tensor(rng.integers(0, n, size=min(cfg.batch_size, n)))
        state.g_opt.zero_grad()
        loss_g = generator_loss(D, G, (x_all[idx], y_all[idx]), cfg, st.child("generator"))
        if not torch.isfinite(loss_g):
            raise GanDivergenceError(f"non-finite generator loss at step {step}",
                                     state.critic_trace, state.generator_trace)
        loss_g.backward()
        state.g_opt.step()
        state.critic_trace.append(float(loss_d.detach()))
        state.generator_trace.append(float(loss_g.detach()))
        if step % 100 == 0:
            log.debug("gan step %d critic %.4f generator %.4f", step, state.critic_trace[-1],
                      state.generator_trace[-1])
    G.eval()
    D.eval()
    return state


def _counts(label_counts) -> dict[int, int]:
    if isinstance(label_counts, Mapping):
        out = {}
        for k, v in label_counts.items():
            key = Label[k.upper()] if isinstance(k, str) else Label(int(k))
            if key == Label.UNLABELED:
                raise ValueError("cannot synthesize unlabeled samples")
            out[int(key)] = int(v)
    else:
        unstable, stable = label_counts
        out = {0: int(unstable), 1: int(stable)}
    if any(v < 0 for v in out.values()):
        raise ValueError("counts must be non-negative")
    return out


@torch.no_grad()
def synthesize_features(state: GanState, label_counts, seed: int, batch: int = 512):
    counts = _counts(label_counts)
    G = state.generator
    G.eval()
    stream = RngStream(seed, 0).child("synthesize")
    feats, labels = [], []
    for lab in sorted(counts):
        for i, s in enumerate(range(0, counts[lab], batch)):
            m = min(batch, counts[lab] - s)
            z = _noise(m, state.cfg, stream.child(lab, i))
            feats.append(G(z, torch.full((m,), lab, dtype=torch.long)).numpy())
            labels.append(np.full(m, lab, dtype=np.int8))
    if not feats:
        return np.zeros((0, *state.sample_shape), dtype=np.float32), np.zeros(0, dtype=np.int8)
    return np.clip(np.concatenate(feats), 0, 1).astype(np.float32), np.concatenate(labels)


def synthesize(state: GanState, label_counts, seed: int) -> list[Sample]:
    """Exactly ``label_counts`` samples per category, clipped to [0, 1]."""
    feats, labels = synthesize_features(state, label_counts, seed)
    return [Sample(f, int(l), Provenance.GAN_SYNTHETIC, {"gan_seed": seed, "gan_index": i})
            for i, (f, l) in enumerate(zip(feats, labels))]


def synthesize_dataset(state: GanState, topology, label_counts, seed: int, **kw) -> Dataset:
    feats, labels = synthesize_features(state, label_counts, seed)
    meta = [{"gan_seed": seed, "gan_index": i} for i in range(len(labels))]
    return Dataset(topology, feats, labels, [Provenance.GAN_SYNTHETIC] * len(labels), meta, **kw)


# --- checkpoints ---------------------------------------------------------------------

def save_gan(state: GanState, path: str | os.PathLike) -> None:
    """Parameters/buffers as tensor files, a JSON manifest and a loss CSV."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for net_name, net in (("generator", state.generator), ("critic", state.critic)):
        for key, t in net.state_dict().items():
            fname = f"{net_name}.{key}.bin"
            write_tensor(path / fname, t.detach().numpy().astype(np.float32))
            entries.append({"net": net_name, "key": key, "file": fname})
    manifest = {"format": "stvsa-gan", "version": 1, "config": state.cfg.to_dict(), "seed": state.seed,
                "sample_shape": list(state.sample_shape), "tensors": entries}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    write_loss_csv(state, path / "losses.csv")


def write_loss_csv(state: GanState, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "critic_loss", "generator_loss"])
        for i, (c, g) in enumerate(zip(state.critic_trace, state.generator_trace)):
            w.writerow([i, repr(c), repr(g)])


def load_gan(path: str | os.PathLike) -> GanState:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format") != "stvsa-gan":
        raise ValueError(f"{path} is not a GAN checkpoint")
    cfg = GanConfig(**manifest["config"])
    state = init_gan(tuple(manifest["sample_shape"]), cfg, manifest["seed"])
    dicts = {"generator": {}, "critic": {}}
    for e in manifest["tensors"]:
        dicts[e["net"]][e["key"]] = torch.from_numpy(read_tensor(path / e["file"]).copy())
    state.generator.load_state_dict(dicts["generator"])
    state.critic.load_state_dict(dicts["critic"])
    state.generator.eval()
    state.critic.eval()
    csv_path = path / "losses.csv"
    if csv_path.exists():
        with open(csv_path) as fh:
            for row in csv.DictReader(fh):
                state.critic_trace.append(float(row["critic_loss"]))
                state.generator_trace.append(float(row["generator_loss"]))
    return state


# --- generation quality ------------------------------------------------------------------

N_PROJECTIONS = 128
METRIC_SEED = 20240501
MAX_METRIC_SAMPLES = 1000


def _flat(x) -> np.ndarray:
    x = x.features if isinstance(x, Dataset) else np.asarray(x)
    return np.asarray(x, dtype=np.float64).reshape(len(x), -1)


def _subsample(x: np.ndarray, limit: int) -> np.ndarray:
    # depends only on the set itself, so metrics stay symmetric in their arguments
    if len(x) <= limit:
        return x
    idx = np.sort(np.random.default_rng(METRIC_SEED).choice(len(x), limit, replace=False))
    return x[idx]


def sliced_wasserstein(a, b, n_projections: int = N_PROJECTIONS, seed: int = METRIC_SEED) -> float:
    """Mean 1-D Wasserstein-1 distance over random unit directions (exact in one dimension)."""
    a, b = _flat(a), _flat(b)
    if a.shape[1] != b.shape[1] or len(a) == 0 or len(b) == 0:
        raise ValueError("need non-empty sets of equal dimension")
    d = a.shape[1]
    if d == 1:
        return float(wasserstein_distance(a[:, 0], b[:, 0]))
    theta = np.random.default_rng(seed).standard_normal((d, n_projections))
    theta /= np.linalg.norm(theta, axis=0, keepdims=True)
    pa, pb = a @ theta, b @ theta
    return float(np.mean([wasserstein_distance(pa[:, k], pb[:, k]) for k in range(n_projections)]))


def mmd_rbf(a, b, max_samples: int = MAX_METRIC_SAMPLES) -> float:
    """Biased MMD^2 with a Gaussian kernel, bandwidth = median pooled pairwise distance."""
    a, b = _subsample(_flat(a), max_samples), _subsample(_flat(b), max_samples)
    pooled = np.concatenate([a, b])
    dist = cdist(pooled, pooled)
    off = dist[np.triu_indices(len(pooled), k=1)]
    bw = float(np.median(off)) if off.size else 0.0
    if bw <= 0:
        positive = off[off > 0]
        bw = float(positive.min()) if positive.size else 1.0
    k = np.exp(-(dist**2) / (2 * bw**2))
    n = len(a)
    val = k[:n, :n].mean() + k[n:, n:].mean() - 2 * k[:n, n:].mean()
    return float(max(val, 0.0))


def _sqrtm_psd(s: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(s)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(fa: np.ndarray, fb: np.ndarray, ridge: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of two feature sets."""
    fa, fb = np.asarray(fa, dtype=np.float64), np.asarray(fb, dtype=np.float64)
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    sa = np.atleast_2d(np.cov(fa, rowvar=False)) if len(fa) > 1 else np.zeros((fa.shape[1],) * 2)
    sb = np.atleast_2d(np.cov(fb, rowvar=False)) if len(fb) > 1 else np.zeros((fb.shape[1],) * 2)
    eye = np.eye(len(sa))
    if np.linalg.matrix_rank(sa) < len(sa) or np.linalg.matrix_rank(sb) < len(sb):
        log.info("singular feature covariance; adding ridge %g", ridge)
        sa, sb = sa + ridge * eye, sb + ridge * eye
    ra = _sqrtm_psd(sa)
    cross = np.sum(np.sqrt(np.clip(np.linalg.eigvalsh(ra @ sb @ ra), 0, None)))
    val = float(np.sum((mu_a - mu_b) ** 2) + np.trace(sa) + np.trace(sb) - 2 * cross)
    return max(val, 0.0)


def train_reference_classifier(real: Dataset, seed: int = 0, epochs: int = 30) -> LSTMBaseline:
    """Frozen feature extractor for FD: the LSTM baseline trained on clean data."""
    labels = np.asarray(real.labels, dtype=np.int64)
    if np.any(labels < 0):
        raise ValueError("reference classifier needs labeled data")
    stream = RngStream(seed, 0).child("reference")
    with torch_seeded(stream.child("init")):
        model = LSTMBaseline(real.n_channels)
    fit_classifier(model, real.features, labels, lr=1e-3, batch_size=64, epochs=epochs,
                   stream=stream.child("fit"))
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@torch.no_grad()
def _embed(model: ClassifierModel, x) -> np.ndarray:
    x = x.features if isinstance(x, Dataset) else np.asarray(x)
    ref = model._ref()
    out = [model.embed(torch.as_tensor(np.array(x[i : i + 256]), dtype=ref.dtype)).numpy()
           for i in range(0, len(x), 256)]
    return np.concatenate(out)


def eval_generation_quality(real, fake, reference: ClassifierModel | None = None) -> dict[str, float]:
    """``{wd, mmd, fd}`` between two sample sets of equal sample shape."""
    ra = real.features if isinstance(real, Dataset) else np.asarray(real)
    fa = fake.features if isinstance(fake, Dataset) else np.asarray(fake)
    if len(ra) == 0 or len(fa) == 0 or ra.shape[1:] != fa.shape[1:]:
        raise ValueError("need non-empty sets with equal sample shape")
    if reference is None:
        if not isinstance(real, Dataset):
            raise ValueError("pass a reference classifier or a labeled real Dataset")
        reference = train_reference_classifier(real)
    return {
        "wd": sliced_wasserstein(ra, fa),
        "mmd": mmd_rbf(ra, fa),
        "fd": frechet_distance(_embed(reference, ra), _embed(reference, fa)),
    }


def noise_baseline(real, seed: int = METRIC_SEED) -> np.ndarray:
    """Standard-normal samples shaped like ``real``: the reference point for 'no learning'."""
    ra = real.features if isinstance(real, Dataset) else np.asarray(real)
    return np.random.default_rng(seed).standard_normal(ra.shape).astype(np.float32)
