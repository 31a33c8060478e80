"""Command-line entry point: ``stvsa <subcommand> [--config FILE] [--seed N] [--workdir DIR] [--set k=v]``.

Stages and their workdir artifacts::

    generate   datasets/raw
    label      datasets/labeled, reports/sfcm.json
    augment    datasets/augmented, checkpoints/gan, reports/gan_quality.json
    train      checkpoints/model
    attack     checkpoints/attacker_surrogate, datasets/test_wb, datasets/test_bb
    evaluate   reports/evaluation.{json,csv}
    study X    reports/study_X.{json,csv}   (X in attack, noise, window)
    assess     reports/assessment.{json,csv} (or --output)

Every stage writes ``manifests/<stage>.json`` with its inputs, outputs, seed
and config hash; ``all`` skips stages whose manifest matches the current
config. Exit codes: 0 success, 1 config error, 2 usage error, 3 stage failure.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import math
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
from filelock import FileLock, Timeout

from . import __version__
from .attacks import composite_features, train_surrogate
from .config import ConfigError, RunConfig, load_config
from .core.dsio import read_dataset, write_dataset
from .core.normalize import apply_norm
from .core.rng import RngStream, stream_id_for
from .core.types import Dataset, Label, NormStats, concat_datasets
from .gan import (eval_generation_quality, noise_baseline, save_gan, synthesize_dataset, train_reference_classifier,
                  train_sncwgan_gp, write_loss_csv)
from .gridgen import build_ieee39_topology, generate_dataset
from .pipeline import (StudyReport, assign_splits, evaluate, load_classifier, prepare_dataset, run_attack_study,
                       run_noise_study, run_window_study, save_classifier, split_train_test, train_classifier)
from .sfcm import label_dataset

log = logging.getLogger("stvsa")

EXIT_OK, EXIT_CONFIG, EXIT_USAGE, EXIT_STAGE = 0, 1, 2, 3
STUDIES = ("attack", "noise", "window")
PIPELINE = ("generate", "label", "augment", "train", "attack", "evaluate",
            "study_attack", "study_noise", "study_window")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage} failed: {message}")
        self.stage = stage


# --- report emission ----------------------------------------------------------------------------

def _csv_cell(v):
    if isinstance(v, (list, tuple)):
        return ";".join(str(x) for x in v)
    return v


def emit_report(studies: Sequence[StudyReport], out_stem: str | os.PathLike, *, plots: bool = False,
                meta: dict | None = None) -> list[Path]:
    """Write ``<stem>.json`` (full results) and ``<stem>.csv`` (one row per grid cell).

    With ``plots`` set, accuracy-vs-SNR, accuracy-vs-window and robustness bar
    charts are also written for the studies that have them.
    """
    stem = Path(out_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    doc = {"meta": meta or {}, "studies": [s.to_dict() for s in studies]}
    json_path = stem.with_suffix(".json")
    json_path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n")
    columns: list[str] = ["study"]
    rows = []
    for s in studies:
        for r in s.rows:
            rows.append({"study": s.name} | r)
            columns.extend(k for k in r if k not in columns)
    csv_path = stem.with_suffix(".csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _csv_cell(r.get(k, "")) for k in columns})
    written = [json_path, csv_path]
    if plots:
        written.extend(_plot_studies(studies, stem))
    return written


def read_report(path: str | os.PathLike) -> list[StudyReport]:
    doc = json.loads(Path(path).read_text())
    return [StudyReport.from_dict(d) for d in doc["studies"]]


def _plot_studies(studies: Sequence[StudyReport], stem: Path) -> list[Path]:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib is not installed; skipping plots")
        return []
    out = []
    for s in studies:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        if s.name == "noise" and s.rows:
            labels = [str(r["snr_db"]) for r in s.rows]
            ax.errorbar(range(len(labels)), [r["acc"] for r in s.rows], yerr=[r.get("acc_std", 0.0) for r in s.rows],
                        marker="o")
            ax.set_xticks(range(len(labels)), labels)
            ax.set_xlabel("SNR (dB)")
        elif s.name == "window" and s.rows:
            ax.errorbar([r["window_s"] for r in s.rows], [r["acc"] for r in s.rows],
                        yerr=[r.get("acc_std", 0.0) for r in s.rows], marker="o")
            ax.set_xlabel("observation window (s)")
        elif s.name == "attack" and s.rows:
            conds = sorted({r["condition"] for r in s.rows})
            groups = sorted({(r["model"], r["regime"]) for r in s.rows})
            width = 0.8 / max(len(conds), 1)
            for k, c in enumerate(conds):
                vals = [next((r["acc"] for r in s.rows if (r["model"], r["regime"]) == g
                              and r["condition"] == c), 0.0) for g in groups]
                ax.bar(np.arange(len(groups)) + k * width, vals, width, label=c)
            ax.set_xticks(np.arange(len(groups)) + 0.4 - width / 2, [f"{m}/{r}" for m, r in groups],
                          rotation=20)
            ax.legend(title="test set")
        else:
            plt.close(fig)
            continue
        ax.set_ylabel("accuracy")
        ax.set_title(f"{s.name} study")
        fig.tight_layout()
        path = stem.with_name(f"{stem.name}_{s.name}.png")
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
        out.append(path)
    return out


# --- workdir plumbing -------------------------------------------------------------------------

@contextlib.contextmanager
def staged(final: Path) -> Iterator[Path]:
    """Yield a scratch path that replaces ``final`` only if the block succeeds."""
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = final.with_name(final.name + ".partial")
    if tmp.is_dir():
        shutil.rmtree(tmp)
    elif tmp.exists():
        tmp.unlink()
    try:
        yield tmp
    except BaseException:
        if tmp.is_dir():
            shutil.rmtree(tmp)
        elif tmp.exists():
            tmp.unlink()
        raise
    if final.is_dir():
        shutil.rmtree(final)
    os.replace(tmp, final)


class Run:
    """One pipeline run over a workdir: stage seeds, provenance stamps and manifests."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.hash = cfg.config_hash()
        self.topology = build_ieee39_topology()

    def seed(self, stage: str) -> int:
        return stream_id_for("stage", stage, self.cfg.master_seed) >> 1

    def study_seeds(self) -> list[int]:
        return [stream_id_for("study", self.cfg.master_seed, s) >> 33 for s in self.cfg.run.study_seeds]

    def provenance(self, stage: str) -> dict:
        return {"config_hash": self.hash, "master_seed": self.cfg.master_seed, "stage": stage,
                "stage_seed": self.seed(stage), "version": __version__}

    def stamp(self, directory: Path, stage: str) -> None:
        (directory / "provenance.json").write_text(json.dumps(self.provenance(stage), indent=2, sort_keys=True))

    def path(self, rel: str) -> Path:
        return self.cfg.workdir / rel

    def manifest_path(self, stage: str) -> Path:
        return self.cfg.manifest_dir / f"{stage}.json"

    def write_manifest(self, stage: str, inputs: Sequence[str], outputs: Sequence[str]) -> None:
        doc = self.provenance(stage) | {"inputs": list(inputs), "outputs": list(outputs),
                                        "config": self.cfg.sections()}
        self.cfg.manifest_dir.mkdir(parents=True, exist_ok=True)
        self.manifest_path(stage).write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False))

    def is_done(self, stage: str) -> bool:
        p = self.manifest_path(stage)
        if not p.is_file():
            return False
        doc = json.loads(p.read_text())
        return doc.get("config_hash") == self.hash and all(self.path(o).exists() for o in doc["outputs"])

    def dataset(self, rel: str, stage: str) -> Dataset:
        p = self.path(rel)
        if not (p / "manifest.json").is_file():
            raise StageError(stage, f"missing input {rel}; run the stage that produces it first")
        return read_dataset(p)

    def save_dataset(self, ds: Dataset, rel: str, stage: str) -> None:
        with staged(self.path(rel)) as tmp:
            write_dataset(ds, tmp)
            self.stamp(tmp, stage)

    def model(self, rel: str, stage: str):
        p = self.path(rel)
        if not (p / "manifest.json").is_file():
            raise StageError(stage, f"missing input {rel}; run the train stage first")
        return load_classifier(p, self.topology)

    def save_model(self, model, rel: str, stage: str, extra: dict | None = None) -> None:
        with staged(self.path(rel)) as tmp:
            save_classifier(model, tmp, (extra or {}) | {"provenance": self.provenance(stage)})

    def report(self, studies: Sequence[StudyReport], rel: str, stage: str) -> list[str]:
        stem = self.path(rel)
        files = emit_report(studies, stem, plots=self.cfg.run.plots, meta=self.provenance(stage))
        return [str(f.relative_to(self.cfg.workdir)) for f in files]


def _norm_extra(ds: Dataset) -> dict:
    ns = ds.norm_stats
    return {"norm_stats": None if ns is None else {"mins": list(ns.mins), "maxs": list(ns.maxs)}}


def _synthetic_counts(base: Dataset, total: int) -> dict[str, int]:
    """Per-category synthetic counts that bring the labeled set to ``total`` as evenly as possible."""
    need = max(0, total - len(base))
    counts = base.label_counts()
    stable = min(need, max(0, total // 2 - counts["stable"]))
    if stable + max(0, total - total // 2 - counts["unstable"]) < need:
        stable = need - min(need, max(0, total - total // 2 - counts["unstable"]))
    return {"stable": stable, "unstable": need - stable}


# --- stages ------------------------------------------------------------------------------------

def stage_generate(run: Run) -> None:
    cfg = run.cfg
    ds = generate_dataset(cfg.run.initial_samples, run.topology, cfg.sim, cfg.master_seed)
    run.save_dataset(ds, "datasets/raw", "generate")
    run.write_manifest("generate", [], ["datasets/raw"])


def stage_label(run: Run) -> None:
    raw = run.dataset("datasets/raw", "label")
    labeled, res = label_dataset(raw, run.cfg.sfcm)
    ds = prepare_dataset(labeled, run.cfg.train.split_ratio, run.seed("label"))
    run.save_dataset(ds, "datasets/labeled", "label")
    summary = {"provenance": run.provenance("label"), "n_iter": res.n_iter,
               "objective_trace": [float(v) for v in res.state.objective_trace],
               "label_counts": ds.label_counts(),
               "sfcm_labeled": int(sum(m.get("label_source") == "sfcm" for m in ds.meta))}
    out = run.path("reports/sfcm.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(summary, indent=2, sort_keys=True, allow_nan=False))
    run.write_manifest("label", ["datasets/raw"], ["datasets/labeled", "reports/sfcm.json"])


def stage_augment(run: Run) -> None:
    cfg = run.cfg
    base = run.dataset("datasets/labeled", "augment")
    train, _ = split_train_test(base, cfg.train.split_ratio, run.seed("label"))
    seed = run.seed("augment")
    state = train_sncwgan_gp(train, cfg.gan, seed)
    counts = _synthetic_counts(base, cfg.run.augmented_total)
    parts = [base]
    quality = {}
    if counts["stable"] + counts["unstable"]:
        synth = synthesize_dataset(state, base.topology, counts, seed, norm_stats=base.norm_stats)
        synth = assign_splits(synth, cfg.train.split_ratio, seed)
        parts.append(synth)
        reference = train_reference_classifier(train, seed)
        quality = {"generated": eval_generation_quality(train.features, synth.features, reference),
                   "noise_baseline": eval_generation_quality(train.features, noise_baseline(train.features),
                                                             reference)}
    augmented = concat_datasets(parts).evolve(seed=cfg.master_seed)
    run.save_dataset(augmented, "datasets/augmented", "augment")
    with staged(run.path("checkpoints/gan")) as tmp:
        save_gan(state, tmp)
        run.stamp(tmp, "augment")
    write_loss_csv(state, run.path("checkpoints/gan") / "losses.csv")
    doc = {"provenance": run.provenance("augment"), "synthetic_counts": counts,
           "label_counts": augmented.label_counts(), "quality": quality}
    run.path("reports/gan_quality.json").write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False))
    run.write_manifest("augment", ["datasets/labeled"],
                       ["datasets/augmented", "checkpoints/gan", "reports/gan_quality.json"])


def stage_train(run: Run) -> None:
    cfg = run.cfg
    ds = run.dataset("datasets/augmented", "train")
    train, _ = split_train_test(ds, cfg.train.split_ratio, run.seed("label"))
    model = train_classifier("lgat", train, cfg.train, run.seed("train"), lgat_cfg=cfg.lgat,
                             attack_cfg=cfg.attack)
    run.save_model(model, "checkpoints/model", "train", _norm_extra(ds))
    run.write_manifest("train", ["datasets/augmented"], ["checkpoints/model"])


def stage_attack(run: Run) -> None:
    cfg = run.cfg
    ds = run.dataset("datasets/augmented", "attack")
    model = run.model("checkpoints/model", "attack")
    train, test = split_train_test(ds, cfg.train.split_ratio, run.seed("label"))
    stream = RngStream(run.seed("attack"), 0)
    surrogate = train_surrogate(train, cfg.attack, stream.child("surrogate"))
    run.save_model(surrogate, "checkpoints/attacker_surrogate", "attack", _norm_extra(ds))
    y = test.labels.astype(np.int64)
    for mode, target in (("wb", model), ("bb", surrogate)):
        feats = composite_features(target, test.features, y, cfg.attack, stream.child(mode), mode)
        prov = "composite_wb" if mode == "wb" else "composite_bb"
        run.save_dataset(test.evolve(features=feats, provenance=[prov] * len(test)), f"datasets/test_{mode}",
                         "attack")
    run.write_manifest("attack", ["datasets/augmented", "checkpoints/model"],
                       ["checkpoints/attacker_surrogate", "datasets/test_wb", "datasets/test_bb"])


def stage_evaluate(run: Run) -> None:
    cfg = run.cfg
    ds = run.dataset("datasets/augmented", "evaluate")
    model = run.model("checkpoints/model", "evaluate")
    _, test = split_train_test(ds, cfg.train.split_ratio, run.seed("label"))
    rows = []
    for condition, data in (("clean", test), ("wb", run.dataset("datasets/test_wb", "evaluate")),
                            ("bb", run.dataset("datasets/test_bb", "evaluate"))):
        rep = evaluate(model, data)
        rows.append({"condition": condition, "n": rep.n, "acc": rep.acc, "auc": rep.auc, "mcc": rep.mcc,
                     "f1": rep.f1, "tp": rep.tp, "fp": rep.fp, "fn": rep.fn, "tn": rep.tn,
                     "flags": list(rep.flags)})
    files = run.report([StudyReport("evaluation", rows, meta={"train_config": cfg.train.to_dict()})],
                       "reports/evaluation", "evaluate")
    run.write_manifest("evaluate", ["datasets/augmented", "checkpoints/model", "datasets/test_wb",
                                    "datasets/test_bb"], files)


def stage_study(run: Run, which: str) -> None:
    cfg = run.cfg
    stage = f"study_{which}"
    ds = run.dataset("datasets/augmented", stage)
    seeds = run.study_seeds()
    inputs = ["datasets/augmented"]
    if which == "attack":
        report = run_attack_study(ds, cfg.train, seeds, lgat_cfg=cfg.lgat, attack_cfg=cfg.attack,
                                  split_seed=run.seed("label"))
    elif which == "noise":
        model = run.model("checkpoints/model", stage)
        inputs.append("checkpoints/model")
        _, test = split_train_test(ds, cfg.train.split_ratio, run.seed("label"))
        report = run_noise_study(test, model, seeds)
    else:
        report = run_window_study(ds, cfg.train, seeds, sample_rate=cfg.sim.sample_rate, lgat_cfg=cfg.lgat,
                                  split_seed=run.seed("label"))
    files = run.report([report], f"reports/{stage}", stage)
    run.write_manifest(stage, inputs, files)


def assess(run: Run, dataset_dir: Path, model_dir: Path, out_stem: Path) -> list[Path]:
    """Score every post-fault window of a dataset: stable probability and verdict per sample."""
    model = load_classifier(model_dir, run.topology)
    ds = read_dataset(dataset_dir)
    feats = ds.features
    if ds.norm_stats is None:
        stats = json.loads((model_dir / "manifest.json").read_text())["extra"].get("norm_stats")
        if stats is None:
            raise StageError("assess", "raw input but the model carries no normalization statistics")
        feats = apply_norm(feats, NormStats(tuple(stats["mins"]), tuple(stats["maxs"])))
    proba = model.predict_proba(feats)[:, 1]
    rows = []
    for i, p in enumerate(proba):
        row = {"index": i, "p_stable": float(p), "verdict": "stable" if p >= 0.5 else "unstable"}
        if ds.labels[i] >= 0:
            row["label"] = Label(int(ds.labels[i])).name.lower()
        rows.append(row)
    report = StudyReport("assessment", rows, meta={"input": str(dataset_dir), "model": str(model_dir),
                                                   "n_stable": int(np.sum(proba >= 0.5)),
                                                   "n_unstable": int(np.sum(proba < 0.5))})
    return emit_report([report], out_stem, meta=run.provenance("assess"))


STAGES: dict[str, Callable[[Run], None]] = {
    "generate": stage_generate,
    "label": stage_label,
    "augment": stage_augment,
    "train": stage_train,
    "attack": stage_attack,
    "evaluate": stage_evaluate,
    "study_attack": lambda run: stage_study(run, "attack"),
    "study_noise": lambda run: stage_study(run, "noise"),
    "study_window": lambda run: stage_study(run, "window"),
}


# --- argument parsing ------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML run configuration")
    p.add_argument("--seed", type=int, help="master seed (overrides run.master_seed)")
    p.add_argument("--workdir", type=Path, help="run directory (default: $STVSA_WORKDIR or ./stvsa_run)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value; repeatable")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stvsa", description="Adversarially robust short-term voltage "
                                     "stability assessment pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    helps = {
        "generate": "simulate the initial scenario dataset",
        "label": "label boundary samples with semi-supervised fuzzy c-means, split and normalize",
        "augment": "train the conditional GAN and fill the dataset up to augmented_total",
        "attack": "build white-box and black-box composite-attacked test sets",
        "train": "train the robust L-GAT classifier",
        "evaluate": "score the trained model on clean and attacked test sets",
    }
    for name, text in helps.items():
        _common(sub.add_parser(name, help=text))
    study = sub.add_parser("study", help="run a robustness study")
    study.add_argument("kind", choices=STUDIES)
    _common(study)
    assess_p = sub.add_parser("assess", help="score a dataset of post-fault windows")
    assess_p.add_argument("--input", type=Path, required=True, help="dataset directory")
    assess_p.add_argument("--model", type=Path, help="classifier checkpoint (default: workdir/checkpoints/model)")
    assess_p.add_argument("--output", type=Path, help="report stem (default: workdir/reports/assessment)")
    _common(assess_p)
    all_p = sub.add_parser("all", help="run every stage, resuming from completed manifests")
    all_p.add_argument("--force", action="store_true", help="rerun stages even if their manifest matches")
    _common(all_p)
    return parser


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def run_subcommand(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    _configure_logging(args.verbose)
    try:
        cfg = load_config(args.config, args.overrides, seed=args.seed, workdir=args.workdir,
                          default_workdir=os.environ.get("STVSA_WORKDIR", "stvsa_run"))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    torch.set_num_threads(cfg.run.threads)
    cfg.workdir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(cfg.workdir / ".stvsa.lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        print(f"stage failure: workdir {cfg.workdir} is in use by another run", file=sys.stderr)
        return EXIT_STAGE
    run = Run(cfg)
    stage = args.command
    try:
        if args.command == "all":
            for stage in PIPELINE:
                if not args.force and run.is_done(stage):
                    log.info("skipping %s: manifest matches config %s", stage, run.hash[:12])
                    continue
                log.info("running %s", stage)
                STAGES[stage](run)
        elif args.command == "study":
            stage = f"study_{args.kind}"
            STAGES[stage](run)
        elif args.command == "assess":
            model_dir = args.model or cfg.checkpoint_dir / "model"
            out = args.output or cfg.report_dir / "assessment"
            for f in assess(run, args.input, model_dir, out):
                print(f)
        else:
            STAGES[stage](run)
    except Exception as exc:  # noqa: BLE001 - every stage failure maps to one exit code
        log.debug("stage failure", exc_info=True)
        msg = str(exc) if isinstance(exc, StageError) else f"stage {stage} failed: {exc}"
        print(msg, file=sys.stderr)
        return EXIT_STAGE
    finally:
        lock.release()
    return EXIT_OK


def main() -> None:
    sys.exit(run_subcommand())


if __name__ == "__main__":
    main()
