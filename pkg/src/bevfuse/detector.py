"""Shared BEV encoder, center-based detection head, loss and box decoding.

One parameter set serves every availability regime: the encoder and head
never know which modality produced the grid they see. The head predicts,
per cell, an objectness logit, a cell-relative center offset, log-metric
sizes, a (sin, cos) yaw pair and class logits.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .fusion import BevGrid
from .tensor import ParamStore, Tensor
from .world import GridConfig, ObjectBox, Scene

ENCODER_WIDTH = 64
ENCODER_DEPTH = 3
LOSS_WEIGHTS = {"objectness": 1.0, "regression": 2.0, "classification": 1.0}
# positive objectness cells are ~1e-3 of the grid; weight them up so the
# background BCE sum cannot drown the foreground signal
OBJ_POS_WEIGHT = 64.0


class TrainingDivergedError(RuntimeError):
    """The loss became non-finite."""


@dataclass
class PredictionMap:
    objectness: Tensor     # [1, H, W] pre-sigmoid logits
    offsets: Tensor        # [2, H, W] cell-relative center, in cells
    sizes: Tensor          # [2, H, W] log-meters
    yaw: Tensor            # [2, H, W] (sin, cos)
    class_logits: Tensor   # [num_classes, H, W]


@dataclass
class TargetMap:
    objectness: np.ndarray
    offsets: np.ndarray
    sizes: np.ndarray
    yaw: np.ndarray
    class_ids: np.ndarray   # [H, W] int
    positive: np.ndarray    # [H, W] bool


@dataclass
class Detection:
    box: ObjectBox
    score: float


# ---------------------------------------------------------------------------
# parameters


def init_detector_params(store: ParamStore, rng: np.random.Generator,
                         in_channels: int, num_classes: int) -> None:
    """He-normal conv stacks; biases zero."""
    widths = [in_channels] + [ENCODER_WIDTH] * ENCODER_DEPTH
    for i in range(ENCODER_DEPTH):
        fan_in = widths[i] * 9
        store.add(f"enc.conv{i + 1}.w",
                  rng.normal(0.0, math.sqrt(2.0 / fan_in),
                             size=(widths[i + 1], widths[i], 3, 3)))
        store.add(f"enc.conv{i + 1}.b", np.zeros(widths[i + 1]))
    heads = {"obj": 1, "off": 2, "size": 2, "yaw": 2, "cls": num_classes}
    for name, ch in heads.items():
        store.add(f"head.{name}.w",
                  rng.normal(0.0, math.sqrt(2.0 / ENCODER_WIDTH),
                             size=(ch, ENCODER_WIDTH, 1, 1)))
        store.add(f"head.{name}.b", np.zeros(ch))


def init_concat_fusion_params(store: ParamStore, rng: np.random.Generator,
                              channels: int) -> None:
    """1x1 conv reducing concatenated [2C] channels back to C (baseline)."""
    store.add("fuse.concat.w",
              rng.normal(0.0, math.sqrt(1.0 / (2 * channels)),
                         size=(channels, 2 * channels, 1, 1)))
    store.add("fuse.concat.b", np.zeros(channels))


def concat_fuse(f_lid: Tensor, f_cam: Tensor, params: ParamStore) -> Tensor:
    stacked = T.concat_channels([f_lid, f_cam])
    return T.conv2d(stacked, params["fuse.concat.w"], params["fuse.concat.b"],
                    padding=0)


# ---------------------------------------------------------------------------
# forward path


def encode(f_in: BevGrid | Tensor, params: ParamStore) -> Tensor:
    """Three padding-preserving 3x3 conv + relu blocks, shared weights."""
    x = f_in.tensor if isinstance(f_in, BevGrid) else f_in
    expected = params["enc.conv1.w"].shape[1]
    if x.shape[0] != expected:
        raise T.ShapeError(
            f"encoder expects {expected} channels, got {x.shape[0]}")
    for i in range(ENCODER_DEPTH):
        x = T.relu(T.conv2d(x, params[f"enc.conv{i + 1}.w"],
                            params[f"enc.conv{i + 1}.b"], padding=1))
    return x


def head(features: Tensor, params: ParamStore) -> PredictionMap:
    def branch(name: str) -> Tensor:
        return T.conv2d(features, params[f"head.{name}.w"],
                        params[f"head.{name}.b"], padding=0)

    return PredictionMap(objectness=branch("obj"), offsets=branch("off"),
                         sizes=branch("size"), yaw=branch("yaw"),
                         class_logits=branch("cls"))


# ---------------------------------------------------------------------------
# targets


def build_targets(scene: Scene, gc: GridConfig) -> TargetMap:
    """Center-cell assignment; collisions keep the larger-footprint box."""
    objectness = np.zeros((1, gc.h, gc.w), dtype=np.float32)
    offsets = np.zeros((2, gc.h, gc.w), dtype=np.float32)
    sizes = np.zeros((2, gc.h, gc.w), dtype=np.float32)
    yaw = np.zeros((2, gc.h, gc.w), dtype=np.float32)
    class_ids = np.zeros((gc.h, gc.w), dtype=np.int64)
    positive = np.zeros((gc.h, gc.w), dtype=bool)
    area = np.zeros((gc.h, gc.w), dtype=np.float32)

    for box in scene.boxes:
        cx, cy = box.center_xy
        col_f = (cx + gc.extent_x) / gc.cell_size_m
        row_f = (cy + gc.extent_y) / gc.cell_size_m
        col, row = int(math.floor(col_f)), int(math.floor(row_f))
        if not (0 <= col < gc.w and 0 <= row < gc.h):
            continue
        a = box.size_lw[0] * box.size_lw[1]
        if positive[row, col] and area[row, col] >= a:
            continue
        positive[row, col] = True
        area[row, col] = a
        objectness[0, row, col] = 1.0
        offsets[0, row, col] = col_f - col
        offsets[1, row, col] = row_f - row
        sizes[0, row, col] = math.log(box.size_lw[0])
        sizes[1, row, col] = math.log(box.size_lw[1])
        yaw[0, row, col] = math.sin(box.yaw)
        yaw[1, row, col] = math.cos(box.yaw)
        class_ids[row, col] = box.class_id
    return TargetMap(objectness=objectness, offsets=offsets, sizes=sizes,
                     yaw=yaw, class_ids=class_ids, positive=positive)


def targets_to_prediction(target: TargetMap, num_classes: int,
                          logit: float = 20.0) -> PredictionMap:
    """Render a target map as a perfect prediction (decode oracle input)."""
    obj = np.where(target.objectness > 0, logit, -logit).astype(np.float32)
    cls = np.full((num_classes,) + target.positive.shape, -logit,
                  dtype=np.float32)
    rows, cols = np.nonzero(target.positive)
    cls[target.class_ids[rows, cols], rows, cols] = logit
    return PredictionMap(objectness=Tensor(obj), offsets=Tensor(target.offsets),
                         sizes=Tensor(target.sizes), yaw=Tensor(target.yaw),
                         class_logits=Tensor(cls))


# ---------------------------------------------------------------------------
# loss


def detection_loss(pred: PredictionMap, target: TargetMap) -> Tensor:
    """BCE objectness over all cells + masked L1 regression + masked CE."""
    obj = T.bce_logits_sum(pred.objectness, target.objectness,
                           pos_weight=OBJ_POS_WEIGHT)
    mask = target.positive
    reg = T.add(T.l1_sum_masked(pred.offsets, target.offsets, mask),
                T.add(T.l1_sum_masked(pred.sizes, target.sizes, mask),
                      T.l1_sum_masked(pred.yaw, target.yaw, mask)))
    cls = T.ce_softmax_sum_masked(pred.class_logits, target.class_ids, mask)
    total = T.add(T.scale(obj, LOSS_WEIGHTS["objectness"]),
                  T.add(T.scale(reg, LOSS_WEIGHTS["regression"]),
                        T.scale(cls, LOSS_WEIGHTS["classification"])))
    if not np.isfinite(total.data):
        raise TrainingDivergedError("non-finite detection loss")
    return total


# ---------------------------------------------------------------------------
# decoding


def decode(pred: PredictionMap, gc: GridConfig, score_threshold: float,
           nms_radius_m: float) -> list[Detection]:
    """Thresholded cells -> boxes, greedy center-distance suppression.

    Deterministic ordering: score descending, then row, then column.
    """
    if not 0.0 < score_threshold < 1.0:
        raise ValueError(f"score threshold {score_threshold} outside (0, 1)")
    scores = 1.0 / (1.0 + np.exp(-pred.objectness.data[0].astype(np.float64)))
    rows, cols = np.nonzero(scores >= score_threshold)
    if rows.size == 0:
        return []
    order = np.lexsort((cols, rows, -scores[rows, cols]))
    rows, cols = rows[order], cols[order]

    off = pred.offsets.data
    size = pred.sizes.data
    yaw = pred.yaw.data
    cls = pred.class_logits.data
    kept: list[Detection] = []
    kept_xy: list[tuple[float, float]] = []
    for r, c in zip(rows, cols):
        x = (c + float(off[0, r, c])) * gc.cell_size_m - gc.extent_x
        y = (r + float(off[1, r, c])) * gc.cell_size_m - gc.extent_y
        if any((x - kx) ** 2 + (y - ky) ** 2 < nms_radius_m ** 2
               for kx, ky in kept_xy):
            continue
        box = ObjectBox(
            center_xy=(x, y),
            size_lw=(math.exp(float(size[0, r, c])),
                     math.exp(float(size[1, r, c]))),
            yaw=math.atan2(float(yaw[0, r, c]), float(yaw[1, r, c])),
            class_id=int(np.argmax(cls[:, r, c])))
        kept.append(Detection(box=box, score=float(scores[r, c])))
        kept_xy.append((x, y))
    return kept


# ---------------------------------------------------------------------------
# checkpoints (ParamStore file + JSON manifest sidecar)


def manifest_path(checkpoint_path) -> str:
    return f"{checkpoint_path}.manifest.json"


def save_checkpoint(path, params: ParamStore, manifest: dict) -> None:
    tmp = f"{path}.tmp"
    params.save(tmp)
    os.replace(tmp, path)
    with open(manifest_path(path), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    params = ParamStore.load(path)
    with open(manifest_path(path)) as f:
        manifest = json.load(f)
    params.step_count = int(manifest.get("step_count", 0))
    return params, manifest
