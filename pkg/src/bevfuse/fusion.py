"""BEV fusion operators over equal-width grids and availability dispatch.

Four ways of combining a LiDAR and a camera BEV grid into one tensor:
weighted averaging, element-wise max, gated cross-attention with LiDAR
queries, and progressive modality decay. When only one modality is
available, dispatch passes its grid through untouched.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ParamStore, Tensor


class Modality(enum.Enum):
    CAMERA = "camera"
    LIDAR = "lidar"
    FUSED = "fused"


FUSION_KINDS = ("avg", "maxpool", "xattn", "pmd")


class FusionError(ValueError):
    """Invalid fusion inputs (shape/resolution mismatch, bad parameters)."""


@dataclass
class BevGrid:
    """A dense [C, H, W] feature grid in bird's-eye view."""

    tensor: Tensor
    modality: Modality
    cell_size_m: float
    frame_id: int = 0

    @property
    def shape(self) -> tuple:
        return self.tensor.shape


@dataclass(frozen=True)
class Availability:
    """Which sensor streams exist for a sample."""

    a_lid: bool
    a_cam: bool

    def __post_init__(self):
        if not (self.a_lid or self.a_cam):
            raise FusionError("at least one modality must be available")


@dataclass
class FusionConfig:
    kind: str = "avg"
    w: float = 0.5                    # avg
    heads: int = 4                    # xattn
    theta_init: float = 0.0           # xattn gate parameter
    total_steps: int = 1              # pmd alpha schedule length
    alpha_shape: str = "linear"

    def __post_init__(self):
        if self.kind not in FUSION_KINDS:
            raise FusionError(f"unknown fusion kind {self.kind!r}")
        if not 0.0 <= self.w <= 1.0:
            raise FusionError(f"avg weight {self.w} outside [0, 1]")
        if self.heads < 1:
            raise FusionError("head count must be positive")


@dataclass
class StepInfo:
    """Training-step context needed by schedule-dependent operators."""

    step: int = 0
    total_steps: int = 1
    pmd_anchor: Modality = Modality.LIDAR


def _check_pair(f_lid: BevGrid, f_cam: BevGrid) -> None:
    if f_lid.shape != f_cam.shape:
        raise FusionError(
            f"grid shape mismatch {f_lid.shape} vs {f_cam.shape}")
    if f_lid.cell_size_m != f_cam.cell_size_m:
        raise FusionError(
            f"cell size mismatch {f_lid.cell_size_m} vs {f_cam.cell_size_m}")


def _fused(t: Tensor, like: BevGrid) -> BevGrid:
    return BevGrid(t, Modality.FUSED, like.cell_size_m, like.frame_id)


def fuse_average(f_lid: BevGrid, f_cam: BevGrid, w: float = 0.5) -> BevGrid:
    """w * camera + (1 - w) * lidar, element-wise. Default is unweighted."""
    _check_pair(f_lid, f_cam)
    if not 0.0 <= w <= 1.0:
        raise FusionError(f"avg weight {w} outside [0, 1]")
    out = T.add(T.scale(f_cam.tensor, w), T.scale(f_lid.tensor, 1.0 - w))
    return _fused(out, f_lid)


def fuse_maxpool(f_lid: BevGrid, f_cam: BevGrid) -> BevGrid:
    """Element-wise max over H x W x C; gradient ties go to LiDAR."""
    _check_pair(f_lid, f_cam)
    return _fused(T.max_pair(f_lid.tensor, f_cam.tensor), f_lid)


XATTN_PARAM_NAMES = ("fuse.xattn.wq", "fuse.xattn.bq",
                     "fuse.xattn.wk", "fuse.xattn.bk",
                     "fuse.xattn.wv", "fuse.xattn.bv",
                     "fuse.xattn.wo", "fuse.xattn.bo",
                     "fuse.xattn.theta")


def init_xattn_params(store: ParamStore, channels: int,
                      rng: np.random.Generator,
                      theta_init: float = 0.0) -> None:
    std = 1.0 / math.sqrt(channels)
    for proj in ("wq", "wk", "wv", "wo"):
        store.add(f"fuse.xattn.{proj}",
                  rng.normal(0.0, std, size=(channels, channels)))
        store.add(f"fuse.xattn.b{proj[1]}", np.zeros(channels))
    store.add("fuse.xattn.theta", np.asarray([theta_init]))


def fuse_cross_attention(f_lid: BevGrid, f_cam: BevGrid, params: ParamStore,
                         heads: int = 4) -> BevGrid:
    """LiDAR-query gated cross-attention over HW tokens.

    out = lidar + sigmoid(theta) * W_o MultiHeadAttn(W_q lidar,
    W_k camera, W_v camera), with 1x1 projections realized as per-token
    linear maps and per-head scale 1/sqrt(C/heads).
    """
    _check_pair(f_lid, f_cam)
    c, h, w = f_lid.shape
    if c % heads != 0:
        raise FusionError(f"channels {c} not divisible by {heads} heads")
    dh = c // heads

    lid_tok = T.grid_to_tokens(f_lid.tensor)
    cam_tok = T.grid_to_tokens(f_cam.tensor)
    q = T.linear_tokens(lid_tok, params["fuse.xattn.wq"], params["fuse.xattn.bq"])
    k = T.linear_tokens(cam_tok, params["fuse.xattn.wk"], params["fuse.xattn.bk"])
    v = T.linear_tokens(cam_tok, params["fuse.xattn.wv"], params["fuse.xattn.bv"])

    head_outs = []
    for i in range(heads):
        qh = T.slice_cols(q, i * dh, (i + 1) * dh)
        kh = T.slice_cols(k, i * dh, (i + 1) * dh)
        vh = T.slice_cols(v, i * dh, (i + 1) * dh)
        scores = T.scale(T.matmul(qh, T.transpose2d(kh)), 1.0 / math.sqrt(dh))
        head_outs.append(T.matmul(T.softmax_rows(scores), vh))
    attended = T.concat_cols(head_outs)
    projected = T.linear_tokens(attended, params["fuse.xattn.wo"],
                                params["fuse.xattn.bo"])
    gated = T.scale_by(projected, T.sigmoid(params["fuse.xattn.theta"]))
    out = T.add(f_lid.tensor, T.tokens_to_grid(gated, h, w))
    return _fused(out, f_lid)


def alpha_schedule(step: int, total_steps: int) -> float:
    """Linear decay from 1 at step 0 to 0 at the final step."""
    if total_steps < 1:
        raise FusionError(f"total_steps {total_steps} < 1")
    if not 0 <= step <= total_steps:
        raise FusionError(f"step {step} outside [0, {total_steps}]")
    return 1.0 - step / total_steps


def fuse_pmd(anchor: BevGrid, other: BevGrid, alpha: float) -> BevGrid:
    """anchor + alpha * other (progressive modality decay)."""
    _check_pair(anchor, other)
    if not 0.0 <= alpha <= 1.0:
        raise FusionError(f"alpha {alpha} outside [0, 1]")
    out = T.add(anchor.tensor, T.scale(other.tensor, alpha))
    return _fused(out, anchor)


def dispatch(avail: Availability, config: FusionConfig,
             f_lid: BevGrid | None, f_cam: BevGrid | None,
             params: ParamStore | None = None,
             step_info: StepInfo | None = None) -> BevGrid:
    """Availability-conditional fusion: fuse when both grids exist,
    identity pass-through when only one does."""
    if avail.a_lid and f_lid is None:
        raise FusionError("LiDAR marked available but grid missing")
    if avail.a_cam and f_cam is None:
        raise FusionError("camera marked available but grid missing")

    if avail.a_lid and not avail.a_cam:
        return f_lid
    if avail.a_cam and not avail.a_lid:
        return f_cam

    if config.kind == "avg":
        return fuse_average(f_lid, f_cam, config.w)
    if config.kind == "maxpool":
        return fuse_maxpool(f_lid, f_cam)
    if config.kind == "xattn":
        if params is None:
            raise FusionError("cross-attention fusion needs parameters")
        return fuse_cross_attention(f_lid, f_cam, params, config.heads)
    if config.kind == "pmd":
        info = step_info or StepInfo()
        alpha = alpha_schedule(info.step, info.total_steps)
        if info.pmd_anchor is Modality.CAMERA:
            return fuse_pmd(f_cam, f_lid, alpha)
        return fuse_pmd(f_lid, f_cam, alpha)
    raise FusionError(f"unknown fusion kind {config.kind!r}")
