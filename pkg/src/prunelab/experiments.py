"""Experiment runners behind the CLI subcommands.

A run directory ``<out>/<run_id>/`` holds

    config.yaml       snapshot of the config that produced the run
    telemetry.csv     per-epoch dense training telemetry
    snapshots/        dense snapshots (checkpoint files + index.json)
    models/           sparse checkpoints and masks, one pair per cell
    report.csv        append-only RunReport rows
    cells.jsonl       ledger of finished cells keyed by cell digest
    compare.md / rewind.csv / noise.csv / bench.csv   command outputs

Every grid command looks up each cell's digest in ``cells.jsonl`` first and
skips cells that already succeeded, so re-running a command resumes it.
"""

from __future__ import annotations

import csv
import json
import logging
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import checkpoints as ck
from .config import RunConfig, cell_digest, dump_config, run_id
from .data import generate, split
from .model import init_model
from .noise import ALL_KINDS, NoiseSpec
from .prune import (
    Iterative,
    SparseModel,
    effective_param_count,
    iterative_prune,
    load_mask,
    naive_prune,
    one_shot_prune,
    save_mask,
)
from .train import TelemetryCSV, evaluate, train

log = logging.getLogger(__name__)

REPORT_FIELDS = ("method", "recovery", "sparsity", "rewind_epoch", "round", "test_wer", "nonzero_params", "wall_seconds")


class RunDir:
    def __init__(self, cfg: RunConfig, out: str | None = None):
        self.cfg = cfg
        self.run_id = run_id(cfg)
        self.path = Path(out or cfg.out) / self.run_id
        self.snapshots = self.path / "snapshots"
        self.models = self.path / "models"
        self.report = self.path / "report.csv"
        self.ledger = self.path / "cells.jsonl"

    def create(self) -> "RunDir":
        self.models.mkdir(parents=True, exist_ok=True)
        cfg_path = self.path / "config.yaml"
        if not cfg_path.exists():
            cfg_path.write_text(dump_config(self.cfg))
        return self

    def store(self) -> ck.SnapshotStore:
        return ck.SnapshotStore(self.snapshots, self.run_id)

    def done_cells(self) -> dict[str, dict]:
        if not self.ledger.exists():
            return {}
        out = {}
        for line in self.ledger.read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                out[rec["digest"]] = rec
        return out

    def record(self, digest: str, status: str, cell: dict, rows=(), error: str = "") -> None:
        if rows:
            new = not self.report.exists()
            with open(self.report, "a", newline="") as f:
                w = csv.DictWriter(f, REPORT_FIELDS)
                if new:
                    w.writeheader()
                for r in rows:
                    w.writerow(r)
        with open(self.ledger, "a") as f:
            f.write(json.dumps({"digest": digest, "status": status, "cell": cell, "rows": list(rows), "error": error}) + "\n")


def snapshot_epochs(cfg: RunConfig) -> list[int]:
    if cfg.snapshot_epochs is not None:
        eps = set(cfg.snapshot_epochs)
    else:
        eps = set(ck.scaled_snapshot_epochs(cfg.schedule.total_epochs))
    return sorted(eps | {0, cfg.schedule.total_epochs})


def datasets(cfg: RunConfig):
    return split(generate(cfg.data), cfg.train_fraction, cfg.data.seed)


def _train_kwargs(cfg: RunConfig) -> dict:
    return {"augment": cfg.augment_policy(), "data_seed": cfg.seed, "separator": cfg.data.word_separator_token}


def _wer(cfg: RunConfig, state, test) -> float:
    score = evaluate(state, test, cfg.data.word_separator_token, severity=cfg.severity)
    return 100.0 * score.wer


# ---------------------------------------------------------------- train-dense


def train_dense(cfg: RunConfig, out: str | None = None) -> str:
    """Train the dense model and store its snapshots; a finished run is left as is."""
    rd = RunDir(cfg, out).create()
    T = cfg.schedule.total_epochs
    if rd.snapshots.exists() and T in rd.store().epochs:
        log.info("run %s already trained", rd.run_id)
        return rd.run_id
    # an interrupted run restarts from scratch: optimizer state is not snapshotted
    shutil.rmtree(rd.snapshots, ignore_errors=True)
    (rd.path / "telemetry.csv").unlink(missing_ok=True)
    store = rd.store()
    wanted = set(snapshot_epochs(cfg))
    tr, _ = datasets(cfg)
    state = init_model(cfg.model, cfg.seed)
    store.save(state)

    def hook(s):
        if s.epoch_tag in wanted:
            store.save(s)

    t0 = time.monotonic()
    train(state, tr, cfg.schedule, on_epoch_end=hook, telemetry=TelemetryCSV(rd.path / "telemetry.csv"),
          **_train_kwargs(cfg))
    log.info("dense run %s trained in %.1fs", rd.run_id, time.monotonic() - t0)
    return rd.run_id


def _require_dense(rd: RunDir) -> ck.SnapshotStore:
    T = rd.cfg.schedule.total_epochs
    if not rd.snapshots.exists() or T not in rd.store().epochs:
        raise FileNotFoundError(f"run {rd.run_id} has no final dense snapshot; run train-dense first")
    return rd.store()


# ------------------------------------------------------------- grid plumbing


@dataclass(frozen=True)
class Cell:
    kind: str  # "dense" | "oneshot" | "chain"
    method: str
    sparsity: float
    rewind_epoch: int | None = None

    def as_dict(self) -> dict:
        return {"kind": self.kind, "method": self.method, "sparsity": self.sparsity, "rewind_epoch": self.rewind_epoch}

    @property
    def tag(self) -> str:
        t = f"{self.method}_s{round(self.sparsity * 100):02d}"
        return t + (f"_t{self.rewind_epoch}" if self.rewind_epoch is not None else "")


def _row(method, recovery, sparsity, rewind_epoch, rnd, wer, nonzero, secs) -> dict:
    return {
        "method": method, "recovery": recovery, "sparsity": f"{sparsity:.4f}",
        "rewind_epoch": "" if rewind_epoch is None else rewind_epoch, "round": "" if rnd is None else rnd,
        "test_wer": f"{wer:.4f}", "nonzero_params": nonzero, "wall_seconds": f"{secs:.2f}",
    }


def _method_parts(method: str) -> tuple[str, str]:
    if method in ("naive", "dense"):
        return method, ""
    if method.startswith("iter-"):
        return "iterative", method[5:]
    if method.startswith("rewind"):
        return "one-shot", "rewind"
    return "one-shot", method


def _save_model(rd: RunDir, name: str, sm: SparseModel) -> None:
    ck.save_state(rd.models / f"{name}.ckpt", sm.state, rd.run_id)
    save_mask(rd.models / f"{name}.mask", sm.mask)


def _run_cell(cfg: RunConfig, out: str | None, cell: Cell) -> list[dict]:
    """Worker: executes one cell and returns its report rows (no shared writes)."""
    rd = RunDir(cfg, out)
    store = _require_dense(rd)
    tr, te = datasets(cfg)
    T = cfg.schedule.total_epochs
    t0 = time.monotonic()
    method, recovery = _method_parts(cell.method)
    if cell.kind == "dense":
        dense = store.load(T)
        wer = _wer(cfg, dense, te)
        return [_row(method, recovery, 0.0, cell.rewind_epoch, None, wer, dense.param_count, time.monotonic() - t0)]
    if cell.kind == "chain":
        return _run_chain(rd, store, tr, te, cell)
    kwargs = _train_kwargs(cfg)
    if cell.method == "naive":
        sm = naive_prune(store.load(T), cell.sparsity)
    else:
        rec = "rewind" if cell.rewind_epoch is not None else cell.method
        sm = one_shot_prune(store, cell.sparsity, rec, tr, cfg.schedule, cell.rewind_epoch,
                            finetune_epochs=cfg.grid.finetune_epochs, finetune_lr=cfg.grid.finetune_lr, **kwargs)
    _save_model(rd, cell.tag, sm)
    wer = _wer(cfg, sm.state, te)
    nonzero = effective_param_count(sm.state, sm.mask)[1]
    return [_row(method, recovery, cell.sparsity, cell.rewind_epoch, None, wer, nonzero, time.monotonic() - t0)]


def _run_chain(rd: RunDir, store, tr, te, cell: Cell) -> list[dict]:
    """One iterative chain to ``cell.sparsity``; every round is reported and stored,
    and an interrupted chain resumes from its last stored round."""
    cfg = rd.cfg
    g = cfg.grid
    method = Iterative(rounds=g.rounds, recovery=cell.method[5:], schedule=g.iterative_schedule, round_epochs=g.round_epochs)
    rows = []
    t0 = time.monotonic()
    resume = None
    for k in range(1, g.rounds + 1):
        base = rd.models / f"{cell.method}_r{k:02d}"
        files = [base.with_suffix(x) for x in (".ckpt", ".mask", ".json")]
        if not all(f.exists() for f in files):
            break
        row = json.loads(files[2].read_text())
        rows.append(row)
        resume = SparseModel(ck.load_state(files[0]), load_mask(files[1]), method, float(row["sparsity"]), round=k)

    def on_round(sm: SparseModel):
        nonlocal t0
        name = f"{cell.method}_r{sm.round:02d}"
        _save_model(rd, name, sm)
        wer = _wer(cfg, sm.state, te)
        nonzero = effective_param_count(sm.state, sm.mask)[1]
        row = _row("iterative", method.recovery, sm.target, None, sm.round, wer, nonzero, time.monotonic() - t0)
        (rd.models / f"{name}.json").write_text(json.dumps(row))  # written last: marks the round complete
        rows.append(row)
        t0 = time.monotonic()

    iterative_prune(store, cell.sparsity, method, tr, cfg.schedule, on_round=on_round, resume_from=resume,
                    **_train_kwargs(cfg))
    return rows


def _execute(rd: RunDir, cells: list[Cell], jobs: int) -> tuple[list[dict], list[str]]:
    """Run cells not yet in the ledger; returns (all rows incl. earlier ones, errors)."""
    done = rd.done_cells()
    rows, errors, todo = [], [], []
    for c in cells:
        d = cell_digest(rd.run_id, **c.as_dict())
        rec = done.get(d)
        if rec is not None and rec["status"] == "ok":
            rows.extend(rec["rows"])
        else:
            todo.append((d, c))

    def finish(d, c, fut_result=None, exc=None):
        if exc is None:
            rd.record(d, "ok", c.as_dict(), fut_result)
            rows.extend(fut_result)
        else:
            msg = f"{type(exc).__name__}: {exc}"
            log.error("cell %s failed: %s", c.tag, msg)
            rd.record(d, "error", c.as_dict(), error=msg)
            errors.append(f"{c.tag}: {msg}")

    if jobs <= 1:
        for d, c in todo:
            try:
                res = _run_cell(rd.cfg, str(rd.path.parent), c)
            except Exception as exc:  # per-cell failures are recorded, the grid goes on
                finish(d, c, exc=exc)
            else:
                finish(d, c, res)
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = [(d, c, pool.submit(_run_cell, rd.cfg, str(rd.path.parent), c)) for d, c in todo]
            for d, c, f in futs:  # results are written by this process only, in grid order
                try:
                    res = f.result()
                except Exception as exc:
                    finish(d, c, exc=exc)
                else:
                    finish(d, c, res)
    return rows, errors


# ------------------------------------------------------------ compare-methods


def compare_methods(cfg: RunConfig, out: str | None = None, sparsities=None, methods=None, jobs: int = 1):
    rd = RunDir(cfg, out).create()
    _require_dense(rd)
    sparsities = sorted(cfg.grid.sparsities if sparsities is None else sparsities)
    methods = list(cfg.grid.methods if methods is None else methods)
    cells = [Cell("dense", "dense", 0.0)]
    for m in methods:
        if m.startswith("iter-"):
            top = max((s for s in sparsities if s > 0), default=0.0)
            if top > 0:
                cells.append(Cell("chain", m, top))
        else:
            cells.extend(Cell("oneshot", m, s) for s in sparsities if s > 0)
    rows, errors = _execute(rd, cells, jobs)
    table = comparison_table(rows, sparsities, methods)
    (rd.path / "compare.md").write_text(table)
    return rd, table, errors


def _method_key(row: dict) -> str:
    if row["method"] == "iterative":
        return "iter-" + row["recovery"]
    return row["method"] if row["method"] == "naive" else row["recovery"]


def comparison_table(rows: list[dict], sparsities, methods) -> str:
    """Markdown: rows = sparsity, columns = methods, cells = "WER (nonzero params)"."""
    dense = next((r for r in rows if r["method"] == "dense"), None)
    lookup = {}
    for r in rows:
        if r["method"] == "dense" or r["rewind_epoch"] not in ("", None):
            continue
        lookup[(_method_key(r), round(float(r["sparsity"]), 4))] = r
    head = "| Sparsity | " + " | ".join(methods) + " |"
    lines = [head, "|" + "---|" * (len(methods) + 1)]
    for s in sparsities:
        cells = []
        for m in methods:
            r = dense if s == 0 else lookup.get((m, round(s, 4)))
            cells.append("n/a" if r is None else f"{float(r['test_wer']):.2f} ({int(r['nonzero_params']):,})")
        lines.append(f"| {round(100 * s)}% | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


# -------------------------------------------------------------- ablate-rewind


def ablate_rewind(cfg: RunConfig, out: str | None = None, sparsities=None, epochs=None, jobs: int = 1):
    """Generalized rewinding to each stored epoch ``t`` at each sparsity.

    Requested epochs are mapped to the nearest stored snapshot.
    """
    rd = RunDir(cfg, out).create()
    store = _require_dense(rd)
    sparsities = list(cfg.grid.rewind_sparsities if sparsities is None else sparsities)
    if epochs is None:
        epochs = cfg.grid.rewind_epochs or ck.scaled_snapshot_epochs(cfg.schedule.total_epochs)
    stored = store.epochs
    mapped = sorted({ck.nearest_epoch(e, stored) for e in epochs})
    cells = [Cell("oneshot", f"rewind@{t}", s, t) for s in sparsities for t in mapped]
    rows, errors = _execute(rd, cells, jobs)
    by_cell = {(round(float(r["sparsity"]), 4), int(r["rewind_epoch"])): r for r in rows if r["rewind_epoch"] != ""}
    with open(rd.path / "rewind.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sparsity", "t", "wer"])
        for s in sparsities:
            for t in mapped:
                r = by_cell.get((round(s, 4), t))
                if r is not None:
                    w.writerow([s, t, r["test_wer"]])
    return rd, mapped, errors


# ----------------------------------------------------------------- eval-noise


def list_models(rd: RunDir) -> list[str]:
    names = ["dense"] if rd.snapshots.exists() else []
    return names + sorted(p.stem for p in rd.models.glob("*.ckpt"))


def load_model(rd: RunDir, model_id: str):
    if model_id == "dense":
        return _require_dense(rd).load(rd.cfg.schedule.total_epochs)
    path = rd.models / f"{model_id}.ckpt"
    if not path.exists():
        raise FileNotFoundError(f"no model {model_id!r} in run {rd.run_id}; available: {list_models(rd)}")
    return ck.load_state(path)


def eval_noise(cfg: RunConfig, out: str | None = None, model_ids=None, kinds=None, levels=None):
    rd = RunDir(cfg, out).create()
    kinds = list(cfg.grid.noise_kinds if kinds is None else kinds)
    for k in kinds:
        if k not in ALL_KINDS:
            raise ValueError(f"unknown noise kind {k!r}")
    levels = list(cfg.grid.noise_levels if levels is None else levels)
    model_ids = list(model_ids or ["dense"])
    _, te = datasets(cfg)
    rows = []
    for mid in model_ids:
        state = load_model(rd, mid)
        clean = None
        for k in kinds:
            for lvl in levels:
                if lvl == 0:  # clean input is the same for every kind
                    if clean is None:
                        clean = _wer(cfg, state, te)
                    wer = clean
                else:
                    score = evaluate(state, te, cfg.data.word_separator_token, noise=NoiseSpec(k, lvl),
                                     seed=cfg.seed, severity=cfg.severity)
                    wer = 100.0 * score.wer
                rows.append({"model": mid, "kind": k, "level": lvl, "wer": f"{wer:.4f}"})
    with open(rd.path / "noise.csv", "w", newline="") as f:
        w = csv.DictWriter(f, ["model", "kind", "level", "wer"])
        w.writeheader()
        w.writerows(rows)
    return rd, rows


def summary(rd: RunDir) -> dict:
    info = {"run_id": rd.run_id, "path": str(rd.path)}
    if rd.snapshots.exists():
        info["snapshots"] = rd.store().epochs
    info["models"] = list_models(rd)
    done = rd.done_cells()
    info["cells_ok"] = sum(r["status"] == "ok" for r in done.values())
    info["cells_failed"] = sum(r["status"] != "ok" for r in done.values())
    return info

