"""Training regimes, evaluation metrics, cross-validation and the robustness studies.

Models are trained with mini-batch Adam. Adversarial training swaps a fixed
share of the training samples for composite-attacked versions that keep their
true labels; white-box versions are regenerated against the current
parameters every epoch, black-box versions come from a fixed surrogate.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from .attacks import AttackConfig, add_gaussian_noise, composite_features, train_surrogate
from .core.normalize import normalize_dataset
from .core.rng import RngStream, torch_seeded
from .core.tensorio import read_tensor, write_tensor
from .core.types import Dataset, GridTopology, Provenance
from .lgat import LGAT, ClassifierModel, LgatConfig, LSTMBaseline, fit_classifier

log = logging.getLogger(__name__)

MODEL_KINDS = ("lgat", "lstm")
CLEAN_MIX = (1.0, 0.0, 0.0)
# Training regimes of the attack study: fractions (clean, wb composite, bb composite).
STUDY_REGIMES = {
    "clean": CLEAN_MIX,
    "wb_mixed": (0.5, 0.5, 0.0),
    "bb_mixed": (0.5, 0.0, 0.5),
}
SNR_LEVELS = (math.inf, 50.0, 40.0, 30.0)
WINDOWS = (0.03, 0.06, 0.09, 0.12)
METRIC_NAMES = ("acc", "auc", "mcc", "f1")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 64
    epochs: int = 240
    adversarial_mix: tuple[float, float, float] = (0.5, 0.25, 0.25)
    split_ratio: float = 0.8
    folds: int = 5

    def __post_init__(self):
        mix = tuple(float(f) for f in self.adversarial_mix)
        if len(mix) != 3 or any(f < 0 for f in mix) or abs(sum(mix) - 1) > 1e-9:
            raise ValueError("adversarial_mix must be three non-negative fractions summing to 1")
        object.__setattr__(self, "adversarial_mix", mix)
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if not 0 < self.split_ratio < 1:
            raise ValueError("split_ratio must lie in (0, 1)")
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("need lr >= 0, batch_size >= 1, epochs >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


# --- metrics -------------------------------------------------------------------------

@dataclass
class MetricsReport:
    acc: float
    auc: float
    mcc: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int
    flags: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seed: int | None = None

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> dict:
        return asdict(self)


def auc_rank(y_true, scores) -> float | None:
    """Mann-Whitney AUC of scores for the positive class, ties counted half; None if undefined."""
    y = np.asarray(y_true).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def compute_metrics(y_true, y_pred, scores) -> MetricsReport:
    """ACC, rank AUC, MCC and F1 with stable (1) as the positive class.

    Undefined quantities (zero denominators, single-class AUC) are reported
    as 0 (MCC, F1) or 0.5 (AUC) and named in ``flags``.
    """
    y = np.asarray(y_true, dtype=np.int64)
    p = np.asarray(y_pred, dtype=np.int64)
    if y.shape != p.shape or len(y) == 0:
        raise ValueError("need equally sized, non-empty label arrays")
    tp = int(np.sum((p == 1) & (y == 1)))
    tn = int(np.sum((p == 0) & (y == 0)))
    fp = int(np.sum((p == 1) & (y == 0)))
    fn = int(np.sum((p == 0) & (y == 1)))
    flags = []
    f1_den = 2 * tp + fp + fn
    if f1_den == 0:
        f1 = 0.0
        flags.append("f1_undefined")
    else:
        f1 = 2 * tp / f1_den
    mcc_den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if mcc_den == 0:
        mcc = 0.0
        flags.append("mcc_undefined")
    else:
        mcc = (tp * tn - fp * fn) / math.sqrt(mcc_den)
    auc = auc_rank(y, scores)
    if auc is None:
        auc = 0.5
        flags.append("auc_undefined")
    return MetricsReport(float((tp + tn) / len(y)), auc, float(mcc), float(f1), tp, fp, fn, tn, flags)


def evaluate(model: ClassifierModel, test: Dataset, config: dict | None = None,
             seed: int | None = None) -> MetricsReport:
    if np.any(test.labels < 0):
        raise ValueError("evaluation needs a fully labeled test set")
    proba = model.predict_proba(test.features)
    rep = compute_metrics(test.labels, np.argmax(proba, axis=1), proba[:, 1])
    rep.config = dict(config or {})
    rep.seed = seed
    return rep


# --- splitting ------------------------------------------------------------------------

def stratified_folds(labels, k: int, seed: int) -> list[np.ndarray]:
    """Partition indices into ``k`` folds with per-class counts within one of n_c / k."""
    y = np.asarray(labels)
    if k > len(y):
        raise ValueError(f"{k} folds for {len(y)} samples")
    rng = RngStream(seed, 0).child("folds").generator()
    order = np.concatenate([rng.permutation(np.flatnonzero(y == c)) for c in np.unique(y)])
    fold_of = np.empty(len(y), dtype=np.int64)
    fold_of[order] = np.arange(len(y)) % k
    return [np.sort(np.flatnonzero(fold_of == f)) for f in range(k)]


def split_indices(labels, ratio: float = 0.8, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Stratified (train, test) index arrays; each category is cut at ``round(ratio * n_c)``."""
    y = np.asarray(labels)
    rng = RngStream(seed, 0).child("split").generator()
    train, test = [np.zeros(0, dtype=np.int64)], [np.zeros(0, dtype=np.int64)]
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        cut = int(round(ratio * len(idx)))
        train.append(idx[:cut])
        test.append(idx[cut:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def split_train_test(ds: Dataset, ratio: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Honour ``split`` tags in the sample meta when every sample has one, else split stratified."""
    tags = [m.get("split") for m in ds.meta]
    if len(ds) and all(t in ("train", "test") for t in tags):
        tags = np.array(tags)
        return ds.subset(np.flatnonzero(tags == "train")), ds.subset(np.flatnonzero(tags == "test"))
    tr, te = split_indices(ds.labels, ratio, seed)
    return ds.subset(tr), ds.subset(te)


def assign_splits(ds: Dataset, ratio: float = 0.8, seed: int = 0) -> Dataset:
    """Record a stratified train/test split as ``split`` tags in the sample meta."""
    tr, _ = split_indices(ds.labels, ratio, seed)
    is_train = np.zeros(len(ds), dtype=bool)
    is_train[tr] = True
    return ds.evolve(meta=[dict(m, split="train" if t else "test") for m, t in zip(ds.meta, is_train)])


def prepare_dataset(labeled: Dataset, ratio: float = 0.8, seed: int = 0) -> Dataset:
    """Tag a stratified split and min-max normalise everything with training-split statistics."""
    tagged = assign_splits(labeled, ratio, seed)
    train_idx = [i for i, m in enumerate(tagged.meta) if m["split"] == "train"]
    return normalize_dataset(tagged, train_idx)


def mix_partition(n: int, mix: Sequence[float], stream: RngStream) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Disjoint (clean, wb, bb) index sets of sizes n - round(n f_wb) - round(n f_bb), round(n f_wb), round(n f_bb)."""
    n_wb = int(round(n * mix[1]))
    n_bb = min(int(round(n * mix[2])), n - n_wb)
    perm = stream.generator().permutation(n)
    wb, bb, clean = perm[:n_wb], perm[n_wb : n_wb + n_bb], perm[n_wb + n_bb :]
    return np.sort(clean), np.sort(wb), np.sort(bb)


# --- training -------------------------------------------------------------------------

def make_model(kind: str, topology: GridTopology, n_channels: int, lgat_cfg: LgatConfig,
               stream: RngStream) -> ClassifierModel:
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    with torch_seeded(stream.child("init")):
        if kind == "lgat":
            return LGAT(topology, n_channels, lgat_cfg)
        return LSTMBaseline(n_channels, lgat_cfg.lstm_hidden)


def _require_trainable(ds: Dataset) -> np.ndarray:
    y = np.asarray(ds.labels, dtype=np.int64)
    if np.any(y < 0):
        raise ValueError("training set has unlabeled samples")
    if not (np.any(y == 0) and np.any(y == 1)):
        raise ValueError("training set must contain both categories")
    return y


def _mixed_features(model, surrogate, x, y, parts, attack_cfg: AttackConfig, stream: RngStream):
    _, wb, bb = parts
    out = np.array(x)
    if len(wb):
        model.eval()
        out[wb] = composite_features(model, x[wb], y[wb], attack_cfg, stream.child("wb"), "wb")
    if len(bb):
        out[bb] = composite_features(surrogate, x[bb], y[bb], attack_cfg, stream.child("bb"), "bb")
    return out


def train_classifier(model_kind: str, train: Dataset, cfg: TrainConfig = TrainConfig(), seed: int = 0, *,
                     lgat_cfg: LgatConfig = LgatConfig(), attack_cfg: AttackConfig = AttackConfig(),
                     surrogate: ClassifierModel | None = None) -> ClassifierModel:
    """Train one classifier; the loss trace is attached as ``model.loss_trace``.

    Unless ``cfg.adversarial_mix`` is all-clean, a fixed subset of the training
    samples is replaced by composite-attacked versions each epoch.
    """
    y = _require_trainable(train)
    stream = RngStream(seed, 0).child("train", model_kind)
    model = make_model(model_kind, train.topology, train.n_channels, lgat_cfg, stream)
    refresh = None
    if cfg.adversarial_mix != CLEAN_MIX:
        parts = mix_partition(len(train), cfg.adversarial_mix, stream.child("mix"))
        if len(parts[2]) and surrogate is None:
            surrogate = train_surrogate(train, attack_cfg, stream.child("surrogate"))
        x0 = train.features

        def refresh(epoch, m):
            return _mixed_features(m, surrogate, x0, y, parts, attack_cfg, stream.child("adv", epoch))

    model.loss_trace = fit_classifier(model, train.features, y, lr=cfg.lr, batch_size=cfg.batch_size,
                                      epochs=cfg.epochs, stream=stream.child("fit"), refresh=refresh)
    model.eval()
    return model


def build_mixed_training_set(clean: Dataset, target: ClassifierModel, cfg: TrainConfig, seed: int, *,
                             attack_cfg: AttackConfig = AttackConfig(),
                             surrogate: ClassifierModel | None = None) -> Dataset:
    """Replace the configured fractions by composite-attacked samples (true labels kept)."""
    if cfg.adversarial_mix == CLEAN_MIX:
        return clean
    y = _require_trainable(clean)
    stream = RngStream(seed, 0).child("mixed_set")
    parts = mix_partition(len(clean), cfg.adversarial_mix, stream.child("mix"))
    if len(parts[2]) and surrogate is None:
        surrogate = train_surrogate(clean, attack_cfg, stream.child("surrogate"))
    feats = _mixed_features(target, surrogate, clean.features, y, parts,
                            attack_cfg, stream.child("adv"))
    prov = list(clean.provenance)
    for i in parts[1]:
        prov[i] = Provenance.COMPOSITE_WB
    for i in parts[2]:
        prov[i] = Provenance.COMPOSITE_BB
    return clean.evolve(features=feats, provenance=prov)


# --- cross-validation ---------------------------------------------------------------------

@dataclass
class CrossValidation:
    folds: list[MetricsReport]

    def summary(self) -> dict[str, dict[str, float]]:
        out = {}
        for name in METRIC_NAMES:
            vals = np.array([getattr(r, name) for r in self.folds])
            out[name] = {"mean": float(vals.mean()), "std": float(vals.std())}
        return out


def kfold_cv(dataset: Dataset, cfg: TrainConfig = TrainConfig(), seed: int = 0, *, model_kind: str = "lgat",
             lgat_cfg: LgatConfig = LgatConfig(), attack_cfg: AttackConfig = AttackConfig()) -> CrossValidation:
    """Stratified k-fold: every sample is tested exactly once.

    Each training portion must contain both categories; this is checked for
    all folds before any training starts.
    """
    if np.any(dataset.labels < 0):
        raise ValueError("cross-validation needs a fully labeled dataset")
    folds = stratified_folds(dataset.labels, cfg.folds, seed)
    everything = np.arange(len(dataset))
    trains = [np.setdiff1d(everything, f) for f in folds]
    for i, tr in enumerate(trains):
        present = set(np.unique(dataset.labels[tr]).tolist())
        if present != {0, 1}:
            raise ValueError(f"fold {i}: training portion lacks a category")
    reports = []
    for i, (tr, te) in enumerate(zip(trains, folds)):
        model = train_classifier(model_kind, dataset.subset(tr), cfg, seed + i, lgat_cfg=lgat_cfg,
                                 attack_cfg=attack_cfg)
        reports.append(evaluate(model, dataset.subset(te), {"fold": i}, seed + i))
    return CrossValidation(reports)


# --- study reports ---------------------------------------------------------------------------

@dataclass
class StudyReport:
    """A named grid of result cells (one per row) plus per-seed detail and metadata."""

    name: str
    rows: list[dict]
    per_seed: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "rows": self.rows, "per_seed": self.per_seed, "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> "StudyReport":
        return cls(d["name"], d["rows"], d.get("per_seed", []), d.get("meta", {}))

    def value(self, column: str = "acc", **where) -> float:
        hits = [r for r in self.rows if all(r.get(k) == v for k, v in where.items())]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows match {where}")
        return hits[0][column]


def _metric_row(rep: MetricsReport) -> dict:
    return {k: getattr(rep, k) for k in (*METRIC_NAMES, "tp", "fp", "fn", "tn")} | {"flags": list(rep.flags)}


def _aggregate(per_seed: list[dict], keys: Sequence[str]) -> list[dict]:
    groups: dict[tuple, list[dict]] = {}
    for r in per_seed:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    rows = []
    for key, rs in groups.items():
        row = dict(zip(keys, key))
        for m in METRIC_NAMES:
            vals = np.array([r[m] for r in rs], dtype=np.float64)
            row[m] = float(vals.mean())
            row[f"{m}_std"] = float(vals.std())
        row["n_seeds"] = len(rs)
        rows.append(row)
    return rows


def _finite(x: float):
    return "inf" if math.isinf(x) else x


# --- studies ----------------------------------------------------------------------------------

def run_attack_study(dataset: Dataset, cfg: TrainConfig = TrainConfig(), seeds: Sequence[int] = (0,), *,
                     lgat_cfg: LgatConfig = LgatConfig(), attack_cfg: AttackConfig = AttackConfig(),
                     regimes: dict[str, tuple] | None = None, include_baseline: bool = True,
                     split_seed: int = 0, keep_models: bool = False) -> StudyReport:
    """Train every regime (plus the clean LSTM baseline) and test on clean / WB / BB sets.

    WB test sets are regenerated against each evaluated model; the BB test set
    is built once per seed from an attacker surrogate trained on the training
    split, separate from any surrogate used for training.
    """
    regimes = dict(STUDY_REGIMES if regimes is None else regimes)
    train, test = split_train_test(dataset, cfg.split_ratio, split_seed)
    y_test = np.asarray(test.labels, dtype=np.int64)
    per_seed, models = [], {}
    for seed in seeds:
        st = RngStream(seed, 0).child("attack_study")
        attacker = train_surrogate(train, attack_cfg, st.child("attacker_surrogate"))
        defender = train_surrogate(train, attack_cfg, st.child("defender_surrogate"))
        bb_test = test.evolve(features=composite_features(attacker, test.features, y_test, attack_cfg,
                                                          st.child("bb_test"), "bb"))
        plan = [("lgat", name, mix) for name, mix in regimes.items()]
        if include_baseline:
            plan.append(("lstm", "clean", CLEAN_MIX))
        for kind, regime, mix in plan:
            model = train_classifier(kind, train, replace(cfg, adversarial_mix=mix), seed,
                                     lgat_cfg=lgat_cfg, attack_cfg=attack_cfg, surrogate=defender)
            wb_test = test.evolve(features=composite_features(model, test.features, y_test, attack_cfg,
                                                              st.child("wb_test", kind, regime), "wb"))
            for condition, ds in (("clean", test), ("wb", wb_test), ("bb", bb_test)):
                rep = evaluate(model, ds)
                per_seed.append({"model": kind, "regime": regime, "condition": condition, "seed": seed}
                                | _metric_row(rep))
            if keep_models:
                models[(kind, regime, seed)] = model
            log.info("attack study seed %d: %s/%s done", seed, kind, regime)
    report = StudyReport(
        "attack",
        _aggregate(per_seed, ("model", "regime", "condition")),
        per_seed,
        {"train_config": cfg.to_dict(), "lgat_config": lgat_cfg.to_dict(), "attack_config": attack_cfg.to_dict(),
         "regimes": {k: list(v) for k, v in regimes.items()}, "seeds": list(seeds),
         "n_train": len(train), "n_test": len(test)},
    )
    if keep_models:
        report.models = models
    return report


def robust_accuracy(report: StudyReport, regime: str, model: str = "lgat") -> float:
    """Mean of WB- and BB-attacked accuracy of one training regime."""
    return 0.5 * (report.value(model=model, regime=regime, condition="wb")
                  + report.value(model=model, regime=regime, condition="bb"))


def run_noise_study(test: Dataset, models, seeds: Sequence[int] = (0,),
                    snrs: Sequence[float] = SNR_LEVELS) -> StudyReport:
    """Evaluate at each SNR; ``models`` is one model or one per seed."""
    if isinstance(models, ClassifierModel):
        models = [models] * len(seeds)
    if len(models) != len(seeds):
        raise ValueError("need one model per seed")
    per_seed = []
    for seed, model in zip(seeds, models):
        for snr in snrs:
            if math.isinf(snr) and snr > 0:
                noisy = test
            else:
                stream = RngStream(seed, 0).child("noise", float(snr))
                noisy = test.evolve(features=add_gaussian_noise(test.features, snr, stream))
            per_seed.append({"snr_db": _finite(float(snr)), "seed": seed} | _metric_row(evaluate(model, noisy)))
    return StudyReport("noise", _aggregate(per_seed, ("snr_db",)), per_seed,
                       {"seeds": list(seeds), "snr_db": [_finite(float(s)) for s in snrs]})


def truncate_window(ds: Dataset, seconds: float, sample_rate: float) -> Dataset:
    steps = int(round(seconds * sample_rate))
    if steps < 1:
        raise ValueError(f"window of {seconds} s is shorter than one step at {sample_rate} Hz")
    if steps > ds.n_steps:
        raise ValueError(f"window of {steps} steps exceeds the {ds.n_steps}-step horizon")
    return ds.evolve(features=ds.features[:, :, :steps])


def run_window_study(dataset: Dataset, cfg: TrainConfig = TrainConfig(), seeds: Sequence[int] = (0,), *,
                     sample_rate: float = 100.0, windows: Sequence[float] = WINDOWS, model_kind: str = "lgat",
                     lgat_cfg: LgatConfig = LgatConfig(), split_seed: int = 0) -> StudyReport:
    """Retrain clean models on the first ``window`` seconds of every sample."""
    train, test = split_train_test(dataset, cfg.split_ratio, split_seed)
    clean_cfg = replace(cfg, adversarial_mix=CLEAN_MIX)
    per_seed = []
    for w in windows:
        tr, te = truncate_window(train, w, sample_rate), truncate_window(test, w, sample_rate)
        for seed in seeds:
            model = train_classifier(model_kind, tr, clean_cfg, seed, lgat_cfg=lgat_cfg)
            per_seed.append({"window_s": float(w), "steps": tr.n_steps, "seed": seed}
                            | _metric_row(evaluate(model, te)))
    return StudyReport("window", _aggregate(per_seed, ("window_s", "steps")), per_seed,
                       {"seeds": list(seeds), "sample_rate": sample_rate, "model": model_kind,
                        "train_config": clean_cfg.to_dict(), "lgat_config": lgat_cfg.to_dict()})


# --- model checkpoints -------------------------------------------------------------------------

def save_classifier(model: ClassifierModel, path: str | os.PathLike, extra: dict | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = []
    for key, t in model.state_dict().items():
        fname = f"{key}.bin"
        write_tensor(path / fname, t.detach().numpy().astype(np.float32))
        tensors.append({"key": key, "file": fname})
    manifest = {
        "format": "stvsa-classifier",
        "version": 1,
        "kind": model.kind,
        "n_channels": int(model.lstm.input_size),
        "lstm_hidden": int(model.lstm.hidden_size),
        "lgat_config": model.cfg.to_dict() if isinstance(model, LGAT) else None,
        "loss_trace": list(getattr(model, "loss_trace", [])),
        "tensors": tensors,
        "extra": extra or {},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_classifier(path: str | os.PathLike, topology: GridTopology | None = None) -> ClassifierModel:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format") != "stvsa-classifier":
        raise ValueError(f"{path} is not a classifier checkpoint")
    if manifest["kind"] == "lgat":
        if topology is None:
            raise ValueError("an L-GAT checkpoint needs the grid topology")
        model: ClassifierModel = LGAT(topology, manifest["n_channels"], LgatConfig(**manifest["lgat_config"]))
    else:
        model = LSTMBaseline(manifest["n_channels"], manifest["lstm_hidden"])
    state = {e["key"]: torch.from_numpy(read_tensor(path / e["file"]).copy()) for e in manifest["tensors"]}
    model.load_state_dict(state)
    model.loss_trace = manifest.get("loss_trace", [])
    model.eval()
    return model
