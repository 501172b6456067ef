"""End-to-end stages over a fixed output layout.

::

    <out>/config.json
    <out>/data/{priv,aux,test}/manifest.csv   (+ feats/*.dsf)
    <out>/data/split.json
    <out>/teacher/teacher.dpm, ledger.json, log.jsonl, curve.csv
    <out>/probs/aux_probs.csv
    <out>/student/student.dpm
    <out>/reports/*.json, sweep.csv

Each stage reads only what earlier stages wrote. ``train_student`` touches
nothing but ``data/aux`` and ``probs``, so the private data and the teacher
can be deleted once the auxiliary set is labeled.
"""

from __future__ import annotations

import csv
import itertools
import json
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import accountant, datamodel as dm, distill, dpsgd
from .config import RunConfig
from .metrics import EvalReport, evaluate as score
from .model import ModelParams, checkpoint_hash, load_checkpoint, predict_proba, save_checkpoint

ROLES = ("teacher", "released")
SWEEP_AXES = ("sigma", "awdp", "dsaf", "n_aux", "seeds")


class ReleaseError(ValueError):
    """Only an audio-only model can be evaluated as the released artifact."""


@dataclass(frozen=True)
class Layout:
    root: Path

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))

    @property
    def config(self) -> Path:
        return self.root / "config.json"

    def manifest(self, part: str) -> Path:
        return self.root / "data" / part / "manifest.csv"

    @property
    def split(self) -> Path:
        return self.root / "data" / "split.json"

    @property
    def teacher_dir(self) -> Path:
        return self.root / "teacher"

    @property
    def teacher(self) -> Path:
        return self.teacher_dir / "teacher.dpm"

    @property
    def probs(self) -> Path:
        return self.root / "probs" / "aux_probs.csv"

    @property
    def student(self) -> Path:
        return self.root / "student" / "student.dpm"

    @property
    def reports(self) -> Path:
        return self.root / "reports"


def _write_config(cfg: RunConfig, lay: Layout) -> None:
    lay.root.mkdir(parents=True, exist_ok=True)
    lay.config.write_text(cfg.to_json() + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# stages


def gen_data(cfg: RunConfig) -> dict[str, list[int]]:
    """Generate (or ingest) the dataset and write the recording-disjoint split.

    Returns class counts per part.
    """
    lay = Layout(cfg.out_dir)
    _write_config(cfg, lay)
    if cfg.data.manifest is not None:
        data = dm.read_manifest(cfg.data.manifest)
    else:
        data = dm.synth_generate(cfg.synth, cfg.seed)
    man = dm.split(data, cfg.data.n_priv, cfg.data.n_aux, cfg.seed)
    lay.split.parent.mkdir(parents=True, exist_ok=True)
    lay.split.write_text(man.to_json() + "\n", encoding="utf-8")
    parts = {"priv": list(man.priv_ids), "aux": list(man.aux_ids), "test": dm.held_out_ids(data, man)}
    counts = {}
    for name, ids in parts.items():
        subset = data.subset(ids)
        path = lay.manifest(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        dm.write_manifest(subset, path, path.parent / "feats")
        counts[name] = [int(c) for c in subset.class_counts]
    return counts


def _read(lay: Layout, part: str, K: int) -> dm.Dataset:
    path = lay.manifest(part)
    if not path.exists():
        raise FileNotFoundError(f"{path} is missing; run gen-data first")
    return dm.read_manifest(path, K)


def train_teacher(cfg: RunConfig, check_clipping: bool = False) -> dict:
    """DP-SGD teacher on ``data/priv``; writes checkpoint, ledger, log and the epoch curve."""
    lay = Layout(cfg.out_dir)
    priv = _read(lay, "priv", cfg.K)
    dp = cfg.dp_config()
    result = dpsgd.train_teacher(priv, cfg.model, dp, cfg.awdp, cfg.dropout_p, cfg.frontend,
                                 check_clipping=check_clipping)
    lay.teacher_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.params, lay.teacher)
    ledger = result.ledger.to_dict()
    (lay.teacher_dir / "ledger.json").write_text(json.dumps(ledger, indent=1, sort_keys=True) + "\n")
    dpsgd.write_log(result.log, lay.teacher_dir / "log.jsonl")
    with open(lay.teacher_dir / "curve.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "step", "probe_acc", "epsilon"])
        for r in result.log:
            eps = "no DP" if r["epsilon"] is None else f"{r['epsilon']:.6f}"
            w.writerow([f"{r['epoch']:.4f}", r["step"], f"{r['probe_acc']:.6f}", eps])
    return ledger


def epsilon(q: float, sigma: float, steps: int, delta: float = 1e-5) -> tuple[float, float]:
    return accountant.compute_epsilon(q, sigma, steps, delta)


def label_aux(cfg: RunConfig) -> distill.TeacherProbFile:
    lay = Layout(cfg.out_dir)
    if not lay.teacher.exists():
        raise FileNotFoundError(f"{lay.teacher} is missing; run train-teacher first")
    teacher = load_checkpoint(lay.teacher)
    aux = _read(lay, "aux", cfg.K)
    lay.probs.parent.mkdir(parents=True, exist_ok=True)
    return distill.label_aux(teacher, aux, cfg.query_mode, cfg.frontend, checkpoint_hash(lay.teacher), lay.probs)


def train_student(cfg: RunConfig) -> ModelParams:
    """Distill the audio-only student from ``data/aux`` and ``probs`` only."""
    lay = Layout(cfg.out_dir)
    if not lay.probs.exists():
        raise FileNotFoundError(f"{lay.probs} is missing; run label-aux first")
    aux = _read(lay, "aux", cfg.K).without_privileged()
    probs = distill.TeacherProbFile.read(lay.probs)
    model_cfg = replace(cfg.model, multimodal=False)
    student = distill.train_student(aux, probs, cfg.kd_config(), model_cfg, cfg.frontend)
    lay.student.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(student, lay.student)
    return student


def evaluate_model(cfg: RunConfig, params: ModelParams, data: dm.Dataset, role: str) -> EvalReport:
    if role not in ROLES:
        raise ValueError(f"role must be one of {ROLES}")
    if role == "released" and params.multimodal:
        raise ReleaseError("a multimodal teacher is never released; evaluate it with role=teacher")
    X = dpsgd.prepare_inputs(data, cfg.frontend)
    M = None
    if params.multimodal:
        if cfg.query_mode == "privileged" and data.multimodal:
            M = dpsgd.prepare_privileged(data)
        else:
            M = np.zeros((len(data), params.d_m))
    preds = np.argmax(predict_proba(params, X, M), axis=1)
    return score(preds, data.labels, data.K)


def evaluate(cfg: RunConfig, checkpoint: str | Path, manifest: str | Path, role: str,
             report_name: str | None = None) -> EvalReport:
    params = load_checkpoint(checkpoint)
    data = dm.read_manifest(manifest, cfg.K)
    if role == "released":
        data = data.without_privileged()
    report = evaluate_model(cfg, params, data, role)
    if report_name:
        lay = Layout(cfg.out_dir)
        lay.reports.mkdir(parents=True, exist_ok=True)
        (lay.reports / f"{report_name}.json").write_text(report.to_json() + "\n")
    return report


# --------------------------------------------------------------------------
# whole pipeline and sweep


def run_cell(cfg: RunConfig) -> dict:
    """gen-data, train-teacher, label-aux, train-student, then evaluate both models on ``data/test``."""
    lay = Layout(cfg.out_dir)
    gen_data(cfg)
    ledger = train_teacher(cfg)
    label_aux(cfg)
    train_student(cfg)
    test = lay.manifest("test")
    t = evaluate(cfg, lay.teacher, test, "teacher", "teacher")
    s = evaluate(cfg, lay.student, test, "released", "student")
    row = {"sigma": cfg.privacy.sigma, "awdp": cfg.awdp.enabled, "dsaf": cfg.frontend.dsaf,
           "n_aux": cfg.data.n_aux, "seed": cfg.seed, "q": cfg.q, "steps": cfg.steps,
           "epsilon": ledger["epsilon"]}
    row.update(_report_fields("teacher", t))
    row.update(_report_fields("student", s))
    return row


def _report_fields(prefix: str, r: EvalReport) -> dict:
    out = {f"{prefix}_{k}": getattr(r, k) for k in ("macro_f1", "bal_acc", "maj_pred", "overall_acc")}
    out[f"{prefix}_collapse_flag"] = int(r.collapse_flag)
    for k in ("precision", "recall", "f1"):
        out[f"{prefix}_{k}"] = ";".join(f"{v:.6f}" for v in getattr(r, k))
    out[f"{prefix}_confusion"] = "|".join(";".join(str(v) for v in row) for row in r.confusion)
    return out


def grid_cells(cfg: RunConfig, grid: dict) -> list[RunConfig]:
    """Expand ``{sigma, awdp, dsaf, n_aux, seeds}`` into one config per cell.

    Missing axes keep the base config's value. Cells live in ``<out>/sweep/cell-NNN``.
    """
    unknown = set(grid) - set(SWEEP_AXES)
    if unknown:
        raise ValueError(f"unknown sweep axes {sorted(unknown)}")
    axes = [
        list(grid.get("sigma", [cfg.privacy.sigma])),
        list(grid.get("awdp", [cfg.awdp.enabled])),
        list(grid.get("dsaf", [cfg.frontend.dsaf])),
        list(grid.get("n_aux", [cfg.data.n_aux])),
        list(grid.get("seeds", [cfg.seed])),
    ]
    root = Path(cfg.out_dir) / "sweep"
    cells = []
    for i, (sigma, aw, ds, n_aux, seed) in enumerate(itertools.product(*axes)):
        cells.append(replace(
            cfg,
            privacy=replace(cfg.privacy, sigma=float(sigma)),
            awdp=replace(cfg.awdp, enabled=bool(aw)),
            frontend=replace(cfg.frontend, dsaf=bool(ds)),
            data=replace(cfg.data, n_aux=int(n_aux)),
            seed=int(seed),
            out_dir=str(root / f"cell-{i:03d}"),
        ))
    return cells


def _run_and_clean(cfg: RunConfig, keep: bool) -> dict:
    row = run_cell(cfg)
    if not keep:
        shutil.rmtree(Path(cfg.out_dir) / "data", ignore_errors=True)
    return row


def sweep(cfg: RunConfig, grid: dict, jobs: int = 1, keep: bool = False) -> list[dict]:
    """Run every grid cell and write ``reports/sweep.csv`` (one row per cell)."""
    cells = grid_cells(cfg, grid)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_and_clean, cells, [keep] * len(cells)))
    else:
        rows = [_run_and_clean(c, keep) for c in cells]
    lay = Layout(cfg.out_dir)
    lay.reports.mkdir(parents=True, exist_ok=True)
    if rows:
        with open(lay.reports / "sweep.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return rows
