"""Reproducible runs: train/evaluate pipelines, the technique ablation grid, manifests."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import itertools
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import Dataset, make_dataset
from .network import MultiExitModel, build_model, checkpoint_bytes
from .training import TrainingLog, train_phase1, train_phase2
from .inference import anytime_eval


def git_blob_hash(content: bytes) -> str:
    """SHA-1 of ``b"blob <len>\\0" + content``, as ``git hash-object`` prints it."""
    return hashlib.sha1(b"blob %d\0" % len(content) + content).hexdigest()


def write_manifest(run_dir, cfg: RunConfig, data: Dataset, artifacts: list[str],
                   checkpoint: str | None = None) -> dict:
    """Write ``manifest.json`` listing every artifact with its content hash."""
    run_dir = Path(run_dir)
    manifest = {
        "config": cfg.to_text().splitlines(),
        "dataset_seed": cfg.data.seed,
        "dataset_sha256": data.fingerprint(),
        "checkpoint": checkpoint,
        "checkpoint_hash": git_blob_hash((run_dir / checkpoint).read_bytes()) if checkpoint else None,
        "artifacts": {name: git_blob_hash((run_dir / name).read_bytes()) for name in sorted(artifacts)},
    }
    with open(run_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def verify_manifest(run_dir) -> list[str]:
    """Names of manifest artifacts that are missing or whose hash differs."""
    run_dir = Path(run_dir)
    with open(run_dir / "manifest.json") as f:
        manifest = json.load(f)
    bad = []
    for name, digest in manifest["artifacts"].items():
        path = run_dir / name
        if not path.exists() or git_blob_hash(path.read_bytes()) != digest:
            bad.append(name)
    return bad


def new_model(cfg: RunConfig, data: Dataset) -> MultiExitModel:
    return build_model(cfg.model_config(data.input_dim, data.num_classes), cfg.model.init_seed)


def train_run(cfg: RunConfig, data: Dataset | None = None) -> tuple[MultiExitModel, TrainingLog, Dataset]:
    data = make_dataset(cfg.data) if data is None else data
    model = new_model(cfg, data)
    log = train_phase1(model, data, cfg.train)
    log.extend(train_phase2(model, data, cfg.train))
    return model, log, data


@dataclass
class AblationRow:
    ge: bool
    isc: bool
    ofa: bool
    seed: int
    exit_accuracy: list[float]
    grad_var_block1: float

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.exit_accuracy))


ABLATION_GRID = list(itertools.product((False, True), repeat=3))


def run_ablation(cfg: RunConfig, seeds, data: Dataset | None = None, progress=None) -> list[AblationRow]:
    """Train every GE x ISC x OFA combination for each seed and report test accuracy.

    ``seed`` sets both the initialization and the batch order. Phase 1 only
    depends on GE (ISC and OFA act in phase 2), so it is trained once per
    (seed, GE) pair and copied into the four phase-2 cells.
    """
    data = make_dataset(cfg.data) if data is None else data
    rows = []
    for seed in seeds:
        for ge in (False, True):
            base_train = dataclasses.replace(cfg.train, ge_enabled=ge, isc_enabled=False, seed=seed)
            base_cfg = dataclasses.replace(cfg, train=base_train,
                                           model=dataclasses.replace(cfg.model, init_seed=seed))
            phase1_model = new_model(base_cfg, data)
            log1 = train_phase1(phase1_model, data, base_train)
            gv = float(np.nanmean(log1.grad_var_block1())) if log1.rows else float("nan")
            for isc, ofa in itertools.product((False, True), repeat=2):
                tcfg = dataclasses.replace(base_train, isc_enabled=isc, ofa_enabled=ofa)
                mcfg = dataclasses.replace(phase1_model.cfg, isc_enabled=isc)
                model = build_model(mcfg, seed)
                for name, p in phase1_model.params.items():
                    model.params[name].data = p.data.copy()
                train_phase2(model, data, tcfg)
                acc = anytime_eval(model, data.x_test, data.y_test)
                rows.append(AblationRow(ge, isc, ofa, seed, acc, gv))
                if progress:
                    progress(rows[-1])
    return rows


def summarize_ablation(rows: list[AblationRow]) -> list[AblationRow]:
    """Average the per-seed rows into one row per technique combination."""
    out = []
    for ge, isc, ofa in ABLATION_GRID:
        sel = [r for r in rows if (r.ge, r.isc, r.ofa) == (ge, isc, ofa)]
        if not sel:
            continue
        acc = np.mean([r.exit_accuracy for r in sel], axis=0)
        out.append(AblationRow(ge, isc, ofa, -1, [float(a) for a in acc],
                               float(np.mean([r.grad_var_block1 for r in sel]))))
    return out


def write_ablation_csv(rows: list[AblationRow], path) -> None:
    k = len(rows[0].exit_accuracy) if rows else 0
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["ge", "isc", "ofa"] + [f"acc_exit_{i}" for i in range(1, k + 1)]
                   + ["mean_accuracy", "grad_var_block1"])
        for r in rows:
            w.writerow([int(r.ge), int(r.isc), int(r.ofa)] + [repr(a) for a in r.exit_accuracy]
                       + [repr(r.mean_accuracy), repr(r.grad_var_block1)])


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path


def checkpoint_hash(model: MultiExitModel) -> str:
    return git_blob_hash(checkpoint_bytes(model))
