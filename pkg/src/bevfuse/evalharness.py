"""Detection scoring, the corruption sweep, and resistance-ability reports.

Metric is center-distance mAP: greedy one-to-one matching per class and
distance threshold, interpolated (monotone-precision) average precision,
then an unweighted mean over classes and thresholds. Robustness is the
mean over corruption families and severities of the corrupted-to-clean
metric ratio.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .corruption import FAMILIES, CorruptionSpec, corrupt_sample
from .detector import Detection, decode, encode, head
from .fusion import Availability, FusionConfig, StepInfo, dispatch
from .tensor import ParamStore
from .trainer import BevCache, Regime, concat_fuse
from .world import GridConfig, ObjectBox, Sample, WorldConfig


@dataclass
class EvalConfig:
    distance_thresholds_m: tuple = (0.5, 1.0, 2.0, 4.0)
    score_threshold: float = 0.5
    nms_radius_m: float = 1.0
    families: tuple = FAMILIES
    severities: tuple = (1, 2, 3)
    regimes: tuple = ("lc", "l", "c")
    corruption_seed: int = 0

    def __post_init__(self):
        t = self.distance_thresholds_m
        if any(a <= 0 for a in t) or any(a >= b for a, b in zip(t, t[1:])):
            raise ValueError("distance thresholds must be positive and "
                             "strictly increasing")


@dataclass
class MetricReport:
    metric_name: str
    regime: str
    clean_value: float
    cells: dict[tuple[str, int], float] = field(default_factory=dict)
    mra: float | None = None


# ---------------------------------------------------------------------------
# matching and AP


def match_detections(preds: list[Detection], gts: list[ObjectBox],
                     threshold_m: float) -> list[tuple[int, bool]]:
    """Greedy one-to-one matching in score order.

    Each prediction, highest score first (stable order preserved on ties),
    claims the nearest unmatched same-class ground truth within
    threshold_m. Returns (original prediction index, matched) pairs in the
    greedy order.
    """
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    taken = [False] * len(gts)
    results = []
    for i in order:
        p = preds[i]
        best, best_d = -1, threshold_m
        for j, gt in enumerate(gts):
            if taken[j] or gt.class_id != p.box.class_id:
                continue
            d = math.dist(p.box.center_xy, gt.center_xy)
            if d <= best_d:
                best, best_d = j, d
        if best >= 0:
            taken[best] = True
            results.append((i, True))
        else:
            results.append((i, False))
    return results


def average_precision(matches: list[tuple[float, bool]], num_gt: int) -> float:
    """Area under the interpolated precision-recall curve.

    matches are (score, matched) over the whole dataset. Degenerate cases:
    no ground truth and no predictions -> 1; predictions but no ground
    truth -> 0; ground truth but no predictions -> 0.
    """
    if num_gt < 0:
        raise ValueError("negative ground-truth count")
    if num_gt == 0:
        return 1.0 if not matches else 0.0
    if not matches:
        return 0.0
    ranked = sorted(matches, key=lambda m: -m[0])
    flags = np.array([m[1] for m in ranked], dtype=np.float64)
    tp = np.cumsum(flags)
    fp = np.cumsum(1.0 - flags)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, interp):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def map_score(ap_cells: dict[tuple[int, float], float]) -> float:
    """Unweighted mean over classes, then over distance thresholds."""
    if not ap_cells:
        raise ValueError("no (class, threshold) cells")
    thresholds = sorted({t for _, t in ap_cells})
    per_threshold = []
    for t in thresholds:
        vals = [v for (c, tt), v in ap_cells.items() if tt == t]
        per_threshold.append(float(np.mean(vals)))
    return float(np.mean(per_threshold))


def compute_mra(clean_value: float,
                cells: dict[tuple[str, int], float]) -> float:
    """Mean over families and the three severities of cell / clean ratios."""
    if clean_value <= 0:
        raise ValueError(f"clean value {clean_value} must be positive")
    families = sorted({f for f, _ in cells})
    if not families:
        raise ValueError("no corruption cells")
    total = 0.0
    for fam in families:
        for sev in (1, 2, 3):
            if (fam, sev) not in cells:
                raise ValueError(f"missing cell ({fam}, s{sev})")
            total += cells[(fam, sev)] / clean_value
    return total / (3 * len(families))


# ---------------------------------------------------------------------------
# sweep


def _availability(regime: str) -> Availability:
    return {"lc": Availability(True, True),
            "l": Availability(True, False),
            "c": Availability(False, True)}[regime]


def _forward(cache: BevCache, idx: int, regime: str, params: ParamStore,
             fusion: FusionConfig, baseline: bool):
    if baseline:
        # the concat baseline has no identity path: a missing modality is
        # presented as an all-zero grid
        lid = cache.lidar(idx) if regime in ("lc", "l") else None
        cam = cache.camera(idx) if regime in ("lc", "c") else None
        ref = lid or cam
        from .tensor import Tensor
        zero = Tensor(np.zeros(ref.shape, dtype=np.float32))
        fused = concat_fuse(lid.tensor if lid else zero,
                            cam.tensor if cam else zero, params)
        return head(encode(fused, params), params)
    avail = _availability(regime)
    lid = cache.lidar(idx) if avail.a_lid else None
    cam = cache.camera(idx) if avail.a_cam else None
    # decay fusion at inference: the schedule has run out, so the other
    # modality carries zero weight
    info = StepInfo(step=1, total_steps=1)
    grid = dispatch(avail, fusion, lid, cam, params, info)
    return head(encode(grid, params), params)


def evaluate_cell(samples: list[Sample], params: ParamStore,
                  gc: GridConfig, world: WorldConfig, fusion: FusionConfig,
                  regime: str, spec: CorruptionSpec, cfg: EvalConfig,
                  baseline: bool = False) -> float:
    """mAP of one (regime, corruption) cell over the whole sample list."""
    corrupted = [corrupt_sample(s, spec, world) for s in samples]
    cache = BevCache(corrupted, gc)
    per_class_matches: dict[tuple[int, float], list] = {}
    num_gt: dict[int, int] = {c: 0 for c in range(world.num_classes)}
    for s in samples:
        for b in s.scene.boxes:
            num_gt[b.class_id] = num_gt.get(b.class_id, 0) + 1

    for idx, sample in enumerate(samples):
        pred = _forward(cache, idx, regime, params, fusion, baseline)
        dets = decode(pred, gc, cfg.score_threshold, cfg.nms_radius_m)
        gts = sample.scene.boxes
        for thr in cfg.distance_thresholds_m:
            for cls in num_gt:
                cls_preds = [d for d in dets if d.box.class_id == cls]
                cls_gts = [g for g in gts if g.class_id == cls]
                matched = match_detections(cls_preds, cls_gts, thr)
                bucket = per_class_matches.setdefault((cls, thr), [])
                for pi, ok in matched:
                    bucket.append((cls_preds[pi].score, ok))

    ap_cells = {key: average_precision(matches, num_gt[key[0]])
                for key, matches in per_class_matches.items()}
    for thr in cfg.distance_thresholds_m:
        for cls in num_gt:
            ap_cells.setdefault((cls, thr),
                                average_precision([], num_gt[cls]))
    return map_score(ap_cells)


def evaluate(samples: list[Sample], params: ParamStore, gc: GridConfig,
             world: WorldConfig, fusion: FusionConfig, cfg: EvalConfig,
             baseline: bool = False) -> dict[str, MetricReport]:
    """Full (regime x family x severity) sweep plus the clean reference."""
    reports = {}
    for regime in cfg.regimes:
        clean = evaluate_cell(samples, params, gc, world, fusion, regime,
                              CorruptionSpec("clean"), cfg, baseline)
        cells: dict[tuple[str, int], float] = {}
        for fam in cfg.families:
            for sev in cfg.severities:
                spec = CorruptionSpec(fam, sev, cfg.corruption_seed)
                cells[(fam, sev)] = evaluate_cell(
                    samples, params, gc, world, fusion, regime, spec, cfg,
                    baseline)
        mra = None
        if cells and clean > 0 and set(cfg.severities) == {1, 2, 3}:
            mra = compute_mra(clean, cells)
        reports[regime] = MetricReport(metric_name="map", regime=regime,
                                       clean_value=clean, cells=cells,
                                       mra=mra)
    return reports


# ---------------------------------------------------------------------------
# report emission


def report_to_dict(report: MetricReport) -> dict:
    return {
        "metric_name": report.metric_name,
        "regime": report.regime,
        "clean": report.clean_value,
        "cells": {f"{fam}:{sev}": v
                  for (fam, sev), v in sorted(report.cells.items())},
        "mra": report.mra,
    }


def report_from_dict(d: dict) -> MetricReport:
    cells = {}
    for label, v in d["cells"].items():
        fam, _, sev = label.partition(":")
        cells[(fam, int(sev))] = v
    return MetricReport(metric_name=d["metric_name"], regime=d["regime"],
                        clean_value=d["clean"], cells=cells, mra=d["mra"])


def emit_report(reports: list[MetricReport], path, fmt: str) -> None:
    """Write reports as JSON (exact floats) or CSV (6 decimal places)."""
    if fmt == "json":
        with open(path, "w") as f:
            json.dump([report_to_dict(r) for r in reports], f, indent=2)
            f.write("\n")
        return
    if fmt != "csv":
        raise ValueError(f"unknown report format {fmt!r}")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["regime", "family", "severity", "map"])
        for r in reports:
            writer.writerow([r.regime, "clean", 0, f"{r.clean_value:.6f}"])
            for (fam, sev), v in sorted(r.cells.items()):
                writer.writerow([r.regime, fam, sev, f"{v:.6f}"])
            if r.mra is not None:
                writer.writerow([r.regime, "mra", "", f"{r.mra:.6f}"])


def report_markdown(report: MetricReport) -> str:
    """Render one report's corruption x severity matrix as a text table."""
    out = io.StringIO()
    sevs = sorted({s for _, s in report.cells}) or [1, 2, 3]
    out.write(f"### regime {report.regime} ({report.metric_name})\n\n")
    out.write(f"clean: {report.clean_value:.4f}")
    if report.mra is not None:
        out.write(f"    mRA: {report.mra:.4f}")
    out.write("\n\n")
    out.write("| family | " + " | ".join(f"s{s}" for s in sevs) + " |\n")
    out.write("|---" * (len(sevs) + 1) + "|\n")
    for fam in sorted({f for f, _ in report.cells}):
        row = [f"{report.cells[(fam, s)]:.4f}" if (fam, s) in report.cells
               else "-" for s in sevs]
        out.write(f"| {fam} | " + " | ".join(row) + " |\n")
    return out.getvalue()
