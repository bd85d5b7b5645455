"""The finite-difference verification suite behind `bevfuse grad-check`.

Every differentiable primitive, each fusion operator's full forward graph,
and the end-to-end fusion -> encoder -> head -> loss pipeline are checked
against central differences on small seeded grids.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .detector import (build_targets, detection_loss, encode, head,
                       init_detector_params)
from .fusion import (BevGrid, FusionConfig, Modality, fuse_average,
                     fuse_cross_attention, fuse_maxpool, fuse_pmd,
                     init_xattn_params)
from .tensor import ParamStore, Tensor, grad_check
from .world import GridConfig, ObjectBox, Scene

TOLERANCE = 1e-3


def _grid(t: Tensor) -> BevGrid:
    return BevGrid(t, Modality.FUSED, 0.5)


def _mean(t: Tensor) -> Tensor:
    return T.mean_all(t)


def suite(channels: int = 8, hw: int = 8, heads: int = 2,
          seed: int = 0, epsilon: float = 1e-3) -> dict[str, float]:
    """Run every check; returns max relative error per check name."""
    rng = np.random.default_rng(seed)

    def rand(*shape):
        return rng.normal(0.0, 1.0, size=shape)

    checks: dict[str, float] = {}

    # primitives. relu/max_pair inputs are nudged off their kinks.
    checks["add"] = grad_check(
        lambda a, b: _mean(T.add(a, b)), [rand(4, 5), rand(4, 5)], epsilon)
    checks["sub"] = grad_check(
        lambda a, b: _mean(T.sub(a, b)), [rand(4, 5), rand(4, 5)], epsilon)
    checks["mul"] = grad_check(
        lambda a, b: _mean(T.mul(a, b)), [rand(4, 5), rand(4, 5)], epsilon)
    checks["scale"] = grad_check(
        lambda a: _mean(T.scale(a, 0.37)), [rand(4, 5)], epsilon)
    away = rand(4, 5)
    away = np.where(np.abs(away) < 10 * epsilon, 0.5, away)
    checks["relu"] = grad_check(
        lambda a: _mean(T.relu(a)), [away], epsilon)
    checks["sigmoid"] = grad_check(
        lambda a: _mean(T.sigmoid(a)), [rand(4, 5)], epsilon)
    a0, b0 = rand(4, 5), rand(4, 5)
    gap = np.abs(a0 - b0) < 10 * epsilon
    b0 = np.where(gap, b0 + 1.0, b0)
    checks["max_pair"] = grad_check(
        lambda a, b: _mean(T.max_pair(a, b)), [a0, b0], epsilon)
    checks["linear_tokens"] = grad_check(
        lambda x, w, b: _mean(T.linear_tokens(x, w, b)),
        [rand(6, 4), rand(4, 3), rand(3)], epsilon)
    checks["matmul"] = grad_check(
        lambda a, b: _mean(T.matmul(a, b)), [rand(4, 3), rand(3, 5)], epsilon)
    checks["softmax_rows"] = grad_check(
        lambda a: _mean(T.mul(T.softmax_rows(a), a)), [rand(4, 5)], epsilon)
    checks["conv2d"] = grad_check(
        lambda x, w, b: _mean(T.conv2d(x, w, b, padding=1)),
        [rand(3, hw, hw), rand(4, 3, 3, 3), rand(4)], epsilon)

    # fusion operator graphs
    checks["fuse_average"] = grad_check(
        lambda a, b: _mean(fuse_average(_grid(a), _grid(b), 0.3).tensor),
        [rand(channels, hw, hw), rand(channels, hw, hw)], epsilon)
    fa, fb = rand(channels, hw, hw), rand(channels, hw, hw)
    fb = np.where(np.abs(fa - fb) < 10 * epsilon, fb + 1.0, fb)
    checks["fuse_maxpool"] = grad_check(
        lambda a, b: _mean(fuse_maxpool(_grid(a), _grid(b)).tensor),
        [fa, fb], epsilon)
    checks["fuse_pmd"] = grad_check(
        lambda a, b: _mean(fuse_pmd(_grid(a), _grid(b), 0.6).tensor),
        [rand(channels, hw, hw), rand(channels, hw, hw)], epsilon)

    xp = ParamStore()
    init_xattn_params(xp, channels, rng)

    def xattn(a, b, *flat):
        store = ParamStore()
        store.entries = dict(zip(xp.names(), flat))
        return _mean(fuse_cross_attention(_grid(a), _grid(b), store,
                                          heads=heads).tensor)

    checks["fuse_cross_attention"] = grad_check(
        xattn,
        [rand(channels, hw, hw), rand(channels, hw, hw)] +
        [xp[n].data.astype(np.float64) for n in xp.names()],
        epsilon)

    # end-to-end: fused grids -> encoder -> head -> loss. Weights are kept
    # small and conv biases positive so every relu pre-activation sits well
    # clear of its kink at the probe scale.
    gc = GridConfig(h=hw, w=hw, c=channels, cell_size_m=0.5)
    scene = Scene(boxes=[ObjectBox((0.4, -0.3), (1.2, 0.8), 0.3, 0)],
                  seed=0, extent_m=gc.extent_x)
    target = build_targets(scene, gc)
    dp = ParamStore()
    init_detector_params(dp, rng, channels, num_classes=2)
    for name, p in dp.entries.items():
        if name.endswith(".w"):
            scale = 0.05 if name in ("enc.conv1.w",) or name.startswith("head") \
                else 0.01
            p.data = (scale * rng.normal(size=p.data.shape)).astype(p.data.dtype)
        elif name.startswith("enc") and name.endswith(".b"):
            p.data = (1.0 + 0.1 * rng.normal(size=p.data.shape)).astype(
                p.data.dtype)
    names = dp.names()

    def end_to_end(a, b, *flat):
        store = ParamStore()
        store.entries = dict(zip(names, flat))
        fused = fuse_average(_grid(a), _grid(b), 0.5)
        pred = head(encode(fused, store), store)
        return detection_loss(pred, target)

    checks["end_to_end"] = grad_check(
        end_to_end,
        [0.1 * rand(channels, hw, hw), 0.1 * rand(channels, hw, hw)] +
        [dp[n].data.astype(np.float64) for n in names],
        epsilon, max_coords=2000, seed=seed)

    return checks
