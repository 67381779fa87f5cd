"""Ratio-grid sweep orchestration with a hash-keyed, resumable cell cache.

A sweep cell is one (ratio, plane, model, seed) training run evaluated on the
plane's fixed WA-only test manifest. Cells are independent, persisted as JSON
immediately after completion, and never recomputed when their content key is
already cached. The optimal ratio is the largest NA fraction whose relative
IoU shortfall against the only-WA baseline stays within epsilon on every
requested plane.
"""

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .dataset import AssortmentSpec, DatasetManifest, PatientSplit, assort
from .hashing import derive_seed, stable_hash
from .metrics import MetricPair, aggregate
from .models import ModelSpec, build_model
from .training import TrainConfig, evaluate, train

ONLY_WA = (0, 1)
ONLY_NA = (1, 0)
DEFAULT_RATIOS: tuple[tuple[int, int], ...] = (
    (1, 9), (2, 8), (3, 7), (4, 6), (5, 5), (6, 4), (7, 3), (8, 2), (9, 1),
    ONLY_WA, ONLY_NA,
)


def ratio_label(ratio: tuple[int, int]) -> str:
    n, m = ratio
    if (n, m) == ONLY_WA:
        return "only-WA"
    if (n, m) == ONLY_NA:
        return "only-NA"
    return f"{n:02d}:{m:02d}"


def na_fraction(ratio: tuple[int, int]) -> float:
    n, m = ratio
    return n / (n + m)


def doping_criterion(iou_wa: float, iou_doped: float, epsilon: float) -> tuple[bool, float]:
    """Relative IoU shortfall against the only-WA baseline.

    margin = (iou_wa - iou_doped) / iou_wa; the ratio passes when the margin
    is at most epsilon. A doped IoU above the baseline passes with a
    negative margin.
    """
    if iou_wa <= 0:
        raise ValueError(f"only-WA baseline IoU must be > 0, got {iou_wa}")
    margin = (iou_wa - iou_doped) / iou_wa
    return margin <= epsilon, margin


def select_optimal_ratio(
    iou_grid: dict[tuple[int, int], dict[str, float]],
    planes: list[str],
    epsilon: float,
) -> tuple[int, int] | None:
    """Largest-NA-fraction ratio passing the criterion in every plane.

    ``iou_grid`` maps ratio -> plane -> IoU and must contain the only-WA
    baseline row for each requested plane.
    """
    if ONLY_WA not in iou_grid:
        raise ValueError("iou grid is missing the only-WA baseline row")
    for plane in planes:
        if plane not in iou_grid[ONLY_WA]:
            raise ValueError(f"only-WA baseline missing plane {plane!r}")
    candidates = []
    for ratio, per_plane in iou_grid.items():
        if ratio == ONLY_WA:
            continue
        ok = True
        for plane in planes:
            if plane not in per_plane:
                raise ValueError(f"ratio {ratio_label(ratio)} missing plane {plane!r}")
            passed, _ = doping_criterion(iou_grid[ONLY_WA][plane], per_plane[plane], epsilon)
            ok = ok and passed
        if ok:
            candidates.append(ratio)
    if not candidates:
        return None
    return max(candidates, key=na_fraction)


@dataclass(frozen=True)
class SweepConfig:
    ratios: tuple[tuple[int, int], ...] = DEFAULT_RATIOS
    planes: tuple[str, ...] = ("axial", "coronal", "sagittal")
    model_specs: tuple[ModelSpec, ...] = (ModelSpec(),)
    train_config: TrainConfig = TrainConfig()
    total_samples: int = 200
    val_samples: int = 50
    seeds: tuple[int, ...] = (0,)
    epsilon: float = 0.05
    overlay_slices: int = 4

    def validate(self) -> None:
        if not self.ratios:
            raise ValueError("ratios must be nonempty")
        for n, m in self.ratios:
            AssortmentSpec(n, m, self.total_samples, 0).validate()
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must be in (0, 1)")
        if self.total_samples < 1 or self.val_samples < 1:
            raise ValueError("total_samples and val_samples must be >= 1")
        if not self.seeds:
            raise ValueError("at least one replication seed is required")
        for spec in self.model_specs:
            spec.validate()
        self.train_config.validate()

    def to_dict(self) -> dict:
        return {
            "ratios": [list(r) for r in self.ratios],
            "planes": list(self.planes),
            "model_specs": [s.to_dict() for s in self.model_specs],
            "train_config": self.train_config.to_dict(),
            "total_samples": self.total_samples,
            "val_samples": self.val_samples,
            "seeds": list(self.seeds),
            "epsilon": self.epsilon,
            "overlay_slices": self.overlay_slices,
        }


@dataclass
class CellResult:
    ratio: tuple[int, int]
    plane: str
    architecture: str
    seed: int
    key: str
    status: str = "ok"  # ok | failed
    error: str = ""
    iou: float | None = None
    dsc: float | None = None
    n_test_slices: int = 0
    best_epoch: int = 0
    stopped_epoch: int = 0
    test_manifest_hash: str = ""
    plane_test_hash: str = ""
    train_manifest_hash: str = ""
    created_at: str = ""
    duration_s: float = 0.0

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["ratio"] = list(self.ratio)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CellResult":
        d = dict(d)
        d["ratio"] = tuple(d["ratio"])
        return cls(**d)


@dataclass
class SweepResult:
    config: SweepConfig
    cells: dict[tuple, CellResult] = field(default_factory=dict)
    test_manifest_hash: str = ""
    optimal_ratio: tuple[int, int] | None = None
    config_hash: str = ""
    newly_computed: list[tuple] = field(default_factory=list)
    cached: list[tuple] = field(default_factory=list)

    def iou_grid(self, architecture: str | None = None) -> dict[tuple[int, int], dict[str, float]]:
        """ratio -> plane -> median IoU over replication seeds for one model."""
        arch = architecture or self.config.model_specs[0].architecture
        grid: dict[tuple[int, int], dict[str, list[float]]] = {}
        for cell in self.cells.values():
            if cell.architecture != arch or cell.status != "ok" or cell.iou is None:
                continue
            grid.setdefault(cell.ratio, {}).setdefault(cell.plane, []).append(cell.iou)
        return {
            ratio: {plane: float(np.median(vals)) for plane, vals in per_plane.items()}
            for ratio, per_plane in grid.items()
        }

    @property
    def failed_cells(self) -> list[CellResult]:
        return [c for c in self.cells.values() if c.status != "ok"]


def optimal_ratio(result: SweepResult, epsilon: float | None = None) -> tuple[int, int] | None:
    """Apply the doping criterion to a sweep's median IoU grid."""
    eps = result.config.epsilon if epsilon is None else epsilon
    return select_optimal_ratio(result.iou_grid(), list(result.config.planes), eps)


def _cell_key(descriptor: dict) -> str:
    return stable_hash(descriptor)


def _cell_descriptor(config, ratio, plane, spec, seed, plane_test_hash) -> dict:
    return {
        "ratio": list(ratio),
        "plane": plane,
        "model_spec": spec.to_dict(),
        "seed": seed,
        "train_config": config.train_config.to_dict(),
        "total_samples": config.total_samples,
        "val_samples": config.val_samples,
        "plane_test_hash": plane_test_hash,
    }


def _build_cell_manifests(config, pools, ratio, plane, cell_seed):
    split = pools[plane]
    train_manifest = assort(
        split.train_na,
        split.train_wa,
        AssortmentSpec(ratio[0], ratio[1], config.total_samples, derive_seed(cell_seed, "train")),
    )
    val_manifest = assort(
        split.val_na,
        split.val_wa,
        AssortmentSpec(ratio[0], ratio[1], config.val_samples, derive_seed(cell_seed, "val")),
    )
    val_manifest = replace(val_manifest, split="val")
    return train_manifest, val_manifest, split.test


def _execute_cell(payload: dict) -> dict:
    """Train and evaluate one cell; returns the CellResult fields.

    Module-level so worker processes can unpickle it.
    """
    start = time.time()
    spec = ModelSpec.from_dict(payload["model_spec"])
    train_config = TrainConfig.from_dict(payload["train_config"])
    cell_seed = payload["cell_seed"]
    model = build_model(spec, derive_seed(cell_seed, "init"))
    model, history = train(
        model,
        payload["train_manifest"],
        payload["val_manifest"],
        replace(train_config, seed=derive_seed(cell_seed, "fit")),
    )
    records = evaluate(model, payload["test_manifest"], train_config.threshold)
    agg = aggregate(records, group_by="plane")[payload["plane"]]
    out = {
        "iou": agg.iou,
        "dsc": agg.dsc,
        "n_test_slices": len(records),
        "best_epoch": history.best_epoch,
        "stopped_epoch": history.stopped_epoch,
        "duration_s": time.time() - start,
    }
    if payload["overlay_slices"] > 0:
        from .report import render_overlay

        out["overlay_png"] = render_overlay(
            model,
            payload["test_manifest"],
            payload["overlay_path"],
            n_slices=payload["overlay_slices"],
            threshold=train_config.threshold,
        )
    return out


def _write_atomic(path: Path, payload: dict) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def cell_cache_dir(out_dir: str | Path) -> Path:
    """Cell cache location; the DOPESEG_CACHE env var overrides it."""
    env = os.environ.get("DOPESEG_CACHE")
    return Path(env) if env else Path(out_dir) / "cells"


def run_sweep(
    config: SweepConfig,
    pools: dict[str, PatientSplit],
    out_dir: str | Path,
    resume: bool = True,
    workers: int = 1,
    on_cell=None,
) -> SweepResult:
    """Run every (ratio, plane, model, seed) cell, reusing cached results.

    Cells are keyed by a content hash of everything that determines their
    outcome; completed cells are loaded, not recomputed. Per-cell failures
    are recorded and do not abort the sweep. ``on_cell`` is invoked with each
    CellResult right after it is persisted.
    """
    config.validate()
    for plane in config.planes:
        if plane not in pools:
            raise ValueError(f"pools missing plane {plane!r}")
    cache = cell_cache_dir(out_dir)
    cache.mkdir(parents=True, exist_ok=True)

    plane_test_hash = {p: pools[p].test.content_hash() for p in config.planes}
    combined_test_hash = stable_hash({p: plane_test_hash[p] for p in config.planes})

    result = SweepResult(
        config=config,
        test_manifest_hash=combined_test_hash,
        config_hash=stable_hash(config.to_dict()),
    )

    pending = []  # (id_key, key_hash, ratio, plane, spec, seed)
    for seed in config.seeds:
        for spec in config.model_specs:
            for plane in config.planes:
                for ratio in config.ratios:
                    descriptor = _cell_descriptor(config, ratio, plane, spec, seed, plane_test_hash[plane])
                    key_hash = _cell_key(descriptor)
                    id_key = (ratio_label(ratio), plane, spec.architecture, seed)
                    cell_path = cache / f"{key_hash}.json"
                    if resume and cell_path.exists():
                        cell = CellResult.from_dict(json.loads(cell_path.read_text()))
                        result.cells[id_key] = cell
                        result.cached.append(id_key)
                        if on_cell:
                            on_cell(cell)
                    else:
                        pending.append((id_key, key_hash, ratio, plane, spec, seed))

    def make_payload(item):
        id_key, key_hash, ratio, plane, spec, seed = item
        cell_seed = derive_seed(seed, ratio_label(ratio), plane, spec.architecture)
        train_manifest, val_manifest, test_manifest = _build_cell_manifests(
            config, pools, ratio, plane, cell_seed
        )
        return {
            "model_spec": spec.to_dict(),
            "train_config": config.train_config.to_dict(),
            "cell_seed": cell_seed,
            "plane": plane,
            "train_manifest": train_manifest,
            "val_manifest": val_manifest,
            "test_manifest": test_manifest,
            "overlay_slices": config.overlay_slices,
            "overlay_path": str(cache / f"{key_hash}_overlay.png"),
            "train_manifest_hash": train_manifest.content_hash(),
        }

    def finish(item, outcome: dict | None, error: str = ""):
        id_key, key_hash, ratio, plane, spec, seed = item
        cell = CellResult(
            ratio=ratio,
            plane=plane,
            architecture=spec.architecture,
            seed=seed,
            key=key_hash,
            created_at=datetime.now(timezone.utc).isoformat(),
            test_manifest_hash=combined_test_hash,
            plane_test_hash=plane_test_hash[plane],
        )
        if outcome is None:
            cell.status = "failed"
            cell.error = error
        else:
            cell.train_manifest_hash = outcome.pop("train_manifest_hash")
            outcome.pop("overlay_png", None)
            for k, v in outcome.items():
                setattr(cell, k, v)
        _write_atomic(cache / f"{key_hash}.json", cell.to_dict())
        result.cells[id_key] = cell
        result.newly_computed.append(id_key)
        if on_cell:
            on_cell(cell)

    if workers <= 1:
        for item in pending:
            payload = make_payload(item)
            try:
                outcome = _execute_cell(payload)
                outcome["train_manifest_hash"] = payload["train_manifest_hash"]
                finish(item, outcome)
            except Exception as exc:  # cell failures must not abort the sweep
                finish(item, None, error=f"{type(exc).__name__}: {exc}")
    elif pending:
        import multiprocessing as mp

        ctx = mp.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            futures = {}
            for item in pending:
                payload = make_payload(item)
                fut = pool.submit(_execute_cell, payload)
                futures[fut] = (item, payload["train_manifest_hash"])
            for fut in as_completed(futures):
                item, tm_hash = futures[fut]
                try:
                    outcome = fut.result()
                    outcome["train_manifest_hash"] = tm_hash
                    finish(item, outcome)
                except Exception as exc:
                    finish(item, None, error=f"{type(exc).__name__}: {exc}")

    if ONLY_WA in config.ratios:
        try:
            result.optimal_ratio = optimal_ratio(result)
        except ValueError:
            result.optimal_ratio = None
    return result


@dataclass
class ImprovementReport:
    """Relative IoU improvements of one training ratio over another."""

    baseline_ratio: tuple[int, int]
    target_ratio: tuple[int, int]
    rows: list[dict]  # architecture, plane, baseline_iou, target_iou, improvement
    model_means: dict[str, float]
    formula: str = "relative improvement = (IoU_target - IoU_baseline) / IoU_baseline"


def improvement_report(
    result: SweepResult, baseline_ratio: tuple[int, int], target_ratio: tuple[int, int]
) -> ImprovementReport:
    """Per-model, per-plane relative IoU gain of target over baseline ratio."""
    rows = []
    means: dict[str, list[float]] = {}
    for spec in result.config.model_specs:
        grid = result.iou_grid(spec.architecture)
        for ratio in (baseline_ratio, target_ratio):
            if ratio not in grid:
                raise ValueError(f"{spec.architecture}: missing cells for ratio {ratio_label(ratio)}")
        for plane in result.config.planes:
            base = grid[baseline_ratio].get(plane)
            target = grid[target_ratio].get(plane)
            if base is None or target is None:
                raise ValueError(f"{spec.architecture}: missing plane {plane!r} cells")
            improvement = (target - base) / base
            rows.append(
                {
                    "architecture": spec.architecture,
                    "plane": plane,
                    "baseline_iou": base,
                    "target_iou": target,
                    "improvement": improvement,
                }
            )
            means.setdefault(spec.architecture, []).append(improvement)
    return ImprovementReport(
        baseline_ratio=baseline_ratio,
        target_ratio=target_ratio,
        rows=rows,
        model_means={arch: float(np.mean(vals)) for arch, vals in means.items()},
    )


def load_sweep_cells(out_dir: str | Path) -> list[CellResult]:
    """Read every persisted cell record under a sweep output directory."""
    cache = cell_cache_dir(out_dir)
    cells = []
    for path in sorted(cache.glob("*.json")):
        cells.append(CellResult.from_dict(json.loads(path.read_text())))
    return cells
