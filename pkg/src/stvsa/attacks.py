"""Composite cyber-attacks on trajectory samples.

FGSM perturbations (single step, white-box loop, surrogate-based black-box),
Poisson-driven DoS masking, their composition ``(x + delta*sign(grad)) * M``,
and Gaussian measurement noise at a given SNR.

All functions work on feature arrays shaped ``[N, T, F]`` or ``[B, N, T, F]``;
the ``*_dataset`` helpers wrap them for :class:`Dataset` and set provenance.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import gammaln

from .core.rng import RngStream, torch_seeded
from .core.types import Dataset, Provenance, Sample
from .lgat import ClassifierModel, LSTMBaseline

log = logging.getLogger(__name__)

SNR_CAP_DB = 300.0


@dataclass(frozen=True)
class AttackConfig:
    delta: float = 0.04
    max_fgsm_iterations: int = 1000
    success_threshold: float = 0.5
    dos_lambda: float = 2.0
    dos_window: int = 10
    dos_cap: int | None = None  # None -> number of channels
    surrogate_lr: float = 1e-4
    surrogate_batch: int = 128
    surrogate_iterations: int = 1000
    surrogate_hidden: int = 32

    def __post_init__(self):
        if not 0 <= self.delta <= 0.1:  # 0 admitted so the attacks can be switched off
            raise ValueError("delta must lie in [0, 0.1]")
        if self.dos_lambda < 0:
            raise ValueError("dos_lambda must be >= 0")
        if self.dos_window < 1:
            raise ValueError("dos_window must be >= 1")
        if self.max_fgsm_iterations < 0:
            raise ValueError("max_fgsm_iterations must be >= 0")
        if self.dos_cap is not None and self.dos_cap < 0:
            raise ValueError("dos_cap must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DosMask:
    mask: np.ndarray  # same shape as the sample features, entries in {0, 1}
    draws: np.ndarray  # Poisson counts, [..., N, n_windows]
    zeroed: np.ndarray  # cells actually zeroed per window, min(k, cap, cells)


def _unwrap(x):
    """Features of a Sample (plus the sample itself) or of a bare array."""
    if isinstance(x, Sample):
        return x.features, x
    return x, None


def _rewrap(out, sample: Sample | None, prov: Provenance):
    if sample is None:
        return out
    return sample.replace(features=np.asarray(out, dtype=sample.features.dtype), provenance=prov)


def _batched(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ValueError(f"expected [N, T, F] or [B, N, T, F] features, got {x.shape}")
    return x, False


def _labels(y, n: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(y, dtype=np.int64).reshape(-1), (n,)).copy()


# --- FGSM -------------------------------------------------------------------

def _inside_box(out: np.ndarray, x: np.ndarray, delta: float) -> np.ndarray:
    """Step entries whose float rounding landed just outside ``|out - x| <= delta`` back in, one ulp at a time.

    Only rounding-sized excesses are touched; inputs lying outside [0, 1]
    legitimately move further than ``delta`` when clipped and are left alone.
    """
    x64 = x.astype(np.float64)
    excess = np.abs(out.astype(np.float64) - x64) - delta
    slack = 8 * np.spacing(np.abs(x).astype(out.dtype) + np.asarray(delta, dtype=out.dtype)).astype(np.float64)
    over = (excess > 0) & (excess <= slack)
    if over.any():
        out = out.copy()
        toward = x.astype(out.dtype)
        while over.any():
            out[over] = np.nextafter(out[over], toward[over])
            over &= np.abs(out.astype(np.float64) - x64) > delta
    return out


def fgsm_perturb(model: ClassifierModel, x, y, delta: float, target=None,
                 return_flags: bool = False):
    """``clip(x + delta * sign(grad_x L(f(x), y)), 0, 1)``.

    With ``target`` set the step descends the loss towards the target label
    instead. Samples whose input gradient is identically zero come back
    unchanged; ``return_flags`` also returns that per-sample flag. A
    :class:`Sample` input yields a Sample tagged ``adversarial_wb``.
    """
    x, sample = _unwrap(x)
    xb, single = _batched(x)
    y = _labels(y, len(xb))
    if target is None:
        g = model.input_gradient(xb, y)
        step = np.sign(g)
    else:
        g = model.input_gradient(xb, _labels(target, len(xb)))
        step = -np.sign(g)
    zero = ~np.any(g.reshape(len(xb), -1) != 0, axis=1)
    out = np.clip(xb + np.asarray(delta, dtype=xb.dtype) * step.astype(xb.dtype), 0, 1).astype(xb.dtype)
    out = _inside_box(out, xb, delta)
    out[zero] = xb[zero]
    out = _rewrap(out[0] if single else out, sample, Provenance.ADVERSARIAL_WB)
    if return_flags:
        return out, (zero[0] if single else zero)
    return out


def _success(model: ClassifierModel, x: np.ndarray, y: np.ndarray, target, thr: float) -> np.ndarray:
    p = model.predict_proba(x)
    if target is None:
        return p[np.arange(len(y)), y] < thr
    return p[np.arange(len(y)), target] >= thr


def whitebox_attack(model: ClassifierModel, x, y, cfg: AttackConfig = AttackConfig(), target=None):
    """Iterated FGSM: perturb, re-predict, stop once the label flips.

    Each step re-linearises at the current iterate and the accumulated
    perturbation is projected back onto the ``delta`` box around the original
    input. A sample stops early (as a failure) when a step no longer moves it.
    Returns ``(x_adv, success, iterations)``.
    """
    x, sample = _unwrap(x)
    xb, single = _batched(x)
    n = len(xb)
    y = _labels(y, n)
    tgt = None if target is None else _labels(target, n)
    delta = np.asarray(cfg.delta, dtype=xb.dtype)
    lo, hi = np.clip(xb - delta, 0, 1), np.clip(xb + delta, 0, 1)
    xa = xb.copy()
    success = np.zeros(n, dtype=bool)
    iters = np.zeros(n, dtype=np.int64)
    active = np.arange(n)
    for it in range(cfg.max_fgsm_iterations + 1):
        won = _success(model, xa[active], y[active], None if tgt is None else tgt[active],
                       cfg.success_threshold)
        success[active[won]] = True
        iters[active] = it
        active = active[~won]
        if it == cfg.max_fgsm_iterations or len(active) == 0:
            break
        stepped = fgsm_perturb(model, xa[active], y[active], cfg.delta,
                               target=None if tgt is None else tgt[active])
        stepped = _inside_box(np.minimum(np.maximum(stepped, lo[active]), hi[active]), xb[active], cfg.delta)
        moved = np.any((stepped != xa[active]).reshape(len(active), -1), axis=1)
        xa[active] = stepped
        active = active[moved]
        if len(active) == 0:
            break
    if single:
        return _rewrap(xa[0], sample, Provenance.ADVERSARIAL_WB), bool(success[0]), int(iters[0])
    return xa, success, iters


def train_surrogate(transfer_set: Dataset, cfg: AttackConfig = AttackConfig(),
                    stream: RngStream | None = None) -> LSTMBaseline:
    """Fit the attacker's stand-in model (node-mean LSTM + linear head) with Adam."""
    stream = stream or RngStream(transfer_set.seed, 0).child("surrogate")
    labels = np.asarray(transfer_set.labels, dtype=np.int64)
    if np.any(labels < 0):
        raise ValueError("surrogate transfer set must be fully labeled")
    with torch_seeded(stream.child("init")):
        model = LSTMBaseline(transfer_set.n_channels, cfg.surrogate_hidden)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.surrogate_lr)
    rng = stream.child("batches").generator()
    x = torch.from_numpy(np.array(transfer_set.features))
    yt = torch.as_tensor(labels)
    n = len(transfer_set)
    order, pos = rng.permutation(n), 0
    model.train()
    for _ in range(cfg.surrogate_iterations):
        if pos + min(cfg.surrogate_batch, n) > n:
            order, pos = rng.permutation(n), 0
        idx = torch.as_tensor(order[pos : pos + cfg.surrogate_batch])
        pos += len(idx)
        opt.zero_grad()
        F.cross_entropy(model(x[idx]), yt[idx]).backward()
        opt.step()
    model.eval()
    model.train_accuracy = float(np.mean(model.predict(transfer_set.features) == labels))
    log.info("surrogate training accuracy %.3f", model.train_accuracy)
    return model


def blackbox_attack(target_model: ClassifierModel, surrogate: ClassifierModel, x, y,
                    cfg: AttackConfig = AttackConfig()):
    """White-box loop on the surrogate; the target is only queried for predictions.

    Returns ``(x_adv, transferred)``.
    """
    x, sample = _unwrap(x)
    x_adv, _, _ = whitebox_attack(surrogate, x, y, cfg)
    xb, single = _batched(x_adv)
    transferred = _success(target_model, xb, _labels(y, len(xb)), None, cfg.success_threshold)
    if single:
        return _rewrap(x_adv, sample, Provenance.ADVERSARIAL_BB), bool(transferred[0])
    return x_adv, transferred


# --- DoS ----------------------------------------------------------------------

def poisson_pmf(k, lam: float):
    """``exp(-lam) lam**k / k!`` evaluated in log space."""
    k = np.asarray(k, dtype=np.float64)
    if lam < 0 or np.any(k < 0):
        raise ValueError("need lam >= 0 and k >= 0")
    if lam == 0:
        out = (k == 0).astype(np.float64)
    else:
        out = np.exp(-lam + k * np.log(lam) - gammaln(k + 1))
    return float(out) if out.ndim == 0 else out


def sample_dos_mask(shape, cfg: AttackConfig, stream: RngStream) -> DosMask:
    """Per node and per ``dos_window`` steps, zero ``min(k, cap)`` random cells, ``k ~ Poisson(lam)``.

    A window holds ``window_len * F`` channel-timestep cells; the final window
    may be shorter.
    """
    *lead, T, Fc = shape
    w = cfg.dos_window
    cap = Fc if cfg.dos_cap is None else cfg.dos_cap
    n_win = -(-T // w)
    rng = stream.generator()
    draws = rng.poisson(cfg.dos_lambda, size=(*lead, n_win))
    cells = np.full(n_win, w * Fc)
    cells[-1] = (T - (n_win - 1) * w) * Fc
    zeroed = np.minimum(np.minimum(draws, cap), cells)
    keys = rng.random(size=(*lead, n_win, w * Fc))
    keys[..., -1, cells[-1]:] = np.inf  # padding cells past the end are never picked
    rank = np.argsort(np.argsort(keys, axis=-1), axis=-1)
    drop = rank < zeroed[..., None]
    mask = (~drop).astype(np.float32).reshape(*lead, n_win * w, Fc)[..., :T, :]
    return DosMask(np.ascontiguousarray(mask), draws, zeroed)


def dos_attack(x, cfg: AttackConfig, stream: RngStream):
    x, sample = _unwrap(x)
    x = np.asarray(x)
    return _rewrap(x * sample_dos_mask(x.shape, cfg, stream).mask.astype(x.dtype), sample, Provenance.DOS)


# --- composite -------------------------------------------------------------------

def composite_attack(model_or_surrogate: ClassifierModel, x, y, cfg: AttackConfig,
                     stream: RngStream, mode: Literal["wb", "bb"] = "wb",
                     return_mask: bool = False):
    """FGSM step (gradients from the target in ``wb`` mode, from a surrogate in ``bb``),
    then an elementwise product with a fresh DoS mask."""
    if mode not in ("wb", "bb"):
        raise ValueError(f"mode must be 'wb' or 'bb', got {mode!r}")
    x, sample = _unwrap(x)
    x = np.asarray(x)
    perturbed = fgsm_perturb(model_or_surrogate, x, y, cfg.delta)
    dos = sample_dos_mask(x.shape, cfg, stream)
    out = perturbed * dos.mask.astype(perturbed.dtype)
    out = _rewrap(out, sample, Provenance.COMPOSITE_WB if mode == "wb" else Provenance.COMPOSITE_BB)
    return (out, dos) if return_mask else out


# --- noise ---------------------------------------------------------------------

def add_gaussian_noise(x, snr_db: float, stream: RngStream) -> np.ndarray:
    """Zero-mean Gaussian noise with variance ``P_signal / 10**(snr/10)`` per sample."""
    if not np.isfinite(snr_db) and snr_db < 0:
        raise ValueError("snr_db must not be -inf")
    snr = min(float(snr_db), SNR_CAP_DB)
    x, sample = _unwrap(x)
    xb, single = _batched(x)
    power = np.mean(xb.astype(np.float64) ** 2, axis=(1, 2, 3))
    if np.any(power == 0):
        raise ValueError("cannot set an SNR for a zero-power sample")
    sigma = np.sqrt(power / 10 ** (snr / 10))
    noise = stream.generator().standard_normal(xb.shape) * sigma[:, None, None, None]
    out = (xb.astype(np.float64) + noise).astype(xb.dtype)
    return _rewrap(out[0] if single else out, sample, Provenance.NOISY)


# --- dataset helpers ------------------------------------------------------------

def _chunks(n: int, size: int):
    for s in range(0, n, size):
        yield slice(s, min(n, s + size))


def composite_features(model: ClassifierModel, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
                       stream: RngStream, mode: Literal["wb", "bb"], chunk: int = 256) -> np.ndarray:
    """:func:`composite_attack` over a large batch, one derived mask stream per chunk."""
    x = np.asarray(x)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        return x.copy()
    return np.concatenate([composite_attack(model, x[sl], y[sl], cfg, stream.child("dos", i), mode)
                           for i, sl in enumerate(_chunks(len(x), chunk))])


def attack_dataset(ds: Dataset, model: ClassifierModel, cfg: AttackConfig, stream: RngStream,
                   mode: Literal["wb", "bb"], chunk: int = 256) -> Dataset:
    """Composite-attack every sample; labels are kept, provenance becomes composite_*."""
    if np.any(ds.labels < 0):
        raise ValueError("attacks need the true labels of every sample")
    feats = composite_features(model, ds.features, ds.labels, cfg, stream, mode, chunk)
    prov = Provenance.COMPOSITE_WB if mode == "wb" else Provenance.COMPOSITE_BB
    return ds.evolve(features=feats, provenance=[prov] * len(ds))


def noisy_dataset(ds: Dataset, snr_db: float, stream: RngStream) -> Dataset:
    if np.isinf(snr_db) and snr_db > 0:
        return ds
    feats = add_gaussian_noise(ds.features, snr_db, stream) if len(ds) else ds.features
    return ds.evolve(features=feats, provenance=[Provenance.NOISY] * len(ds))
