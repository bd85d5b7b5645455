"""Regime-mixing training schedules and optimization.

Each epoch is expanded so every sample appears once per availability
regime (three regimes, or two anchored passes in decay mode), then the
expanded list is globally shuffled so mini-batches mix regimes. One
shared parameter set is updated across all regimes.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .corruption import FAMILIES, CorruptionSpec, corrupt_sample
from .detector import (PredictionMap, TrainingDivergedError, build_targets,
                       concat_fuse, detection_loss, encode, head,
                       init_concat_fusion_params, init_detector_params)
from .fusion import (Availability, BevGrid, FusionConfig, Modality, StepInfo,
                     dispatch, init_xattn_params)
from .tensor import ParamStore
from .world import (GridConfig, Sample, WorldConfig, camera_to_bev,
                    lidar_to_bev)


class Regime(enum.Enum):
    LC = "lc"
    L = "l"
    C = "c"
    ANCHOR_LIDAR = "anchor_lidar"
    ANCHOR_CAMERA = "anchor_camera"


THREE_REGIMES = (Regime.LC, Regime.L, Regime.C)
PMD_REGIMES = (Regime.ANCHOR_LIDAR, Regime.ANCHOR_CAMERA)


@dataclass
class TrainConfig:
    epochs: int | None = None       # default: 3, or 4 in pmd mode
    batch_size: int = 8
    learning_rate: float = 2e-3
    optimizer: str = "adam"
    fusion: FusionConfig = field(default_factory=FusionConfig)
    shuffle_seed: int = 7
    init_seed: int = 11
    corruption_augment: bool = False
    baseline: bool = False          # concat+conv fusion, LC-only training

    def resolved_epochs(self) -> int:
        if self.epochs is not None:
            if self.epochs < 1:
                raise ValueError(f"epochs {self.epochs} < 1")
            return self.epochs
        return 4 if self.fusion.kind == "pmd" else 3


@dataclass
class TrainingReport:
    fusion_kind: str
    epochs: int
    total_steps: int
    batch_size: int
    step_losses: list[float]
    regime_losses: dict[str, float]
    wall_time_s: float
    final_loss: float


def expand_epoch(dataset_size: int, mode: str,
                 shuffle_seed: int) -> list[tuple[int, Regime]]:
    """All (sample, regime) pairs for one epoch, globally shuffled.

    mode is "three_regime" (3N entries) or "pmd" (2N anchored entries).
    """
    if dataset_size < 1:
        raise ValueError(f"dataset size {dataset_size} < 1")
    if mode == "three_regime":
        regimes = THREE_REGIMES
    elif mode == "pmd":
        regimes = PMD_REGIMES
    elif mode == "baseline":
        regimes = (Regime.LC,)
    else:
        raise ValueError(f"unknown schedule mode {mode!r}")
    entries = [(i, r) for i in range(dataset_size) for r in regimes]
    rng = np.random.default_rng(shuffle_seed)
    order = rng.permutation(len(entries))
    return [entries[i] for i in order]


def schedule_mode(config: TrainConfig) -> str:
    if config.baseline:
        return "baseline"
    return "pmd" if config.fusion.kind == "pmd" else "three_regime"


class BevCache:
    """Lazy, memoized BEV projection of raw streams with call counters.

    Counters track actual projections, so a regime that never needs a
    modality is observable as an untouched counter.
    """

    def __init__(self, samples: list[Sample], gc: GridConfig):
        self.samples = samples
        self.gc = gc
        self.lidar_calls = 0
        self.camera_calls = 0
        self._lidar: dict[int, BevGrid] = {}
        self._camera: dict[int, BevGrid] = {}

    def lidar(self, idx: int) -> BevGrid:
        if idx not in self._lidar:
            self.lidar_calls += 1
            self._lidar[idx] = lidar_to_bev(self.samples[idx].sweep, self.gc)
        return self._lidar[idx]

    def camera(self, idx: int) -> BevGrid:
        if idx not in self._camera:
            self.camera_calls += 1
            self._camera[idx] = camera_to_bev(self.samples[idx].stream, self.gc)
        return self._camera[idx]


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptState:
    kind: str
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_update(params: ParamStore, opt: OptState) -> None:
    """SGD or bias-corrected Adam over every parameter with a gradient."""
    if opt.kind == "sgd":
        for name, p in params.entries.items():
            if p.grad is not None:
                p.data -= (opt.learning_rate * p.grad).astype(p.data.dtype)
        return
    if opt.kind != "adam":
        raise ValueError(f"unknown optimizer {opt.kind!r}")
    opt.t += 1
    bc1 = 1.0 - opt.beta1 ** opt.t
    bc2 = 1.0 - opt.beta2 ** opt.t
    for name, p in params.entries.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name not in opt.m:
            opt.m[name] = np.zeros_like(p.data)
            opt.v[name] = np.zeros_like(p.data)
        opt.m[name] = opt.beta1 * opt.m[name] + (1 - opt.beta1) * g
        opt.v[name] = opt.beta2 * opt.v[name] + (1 - opt.beta2) * g * g
        mhat = opt.m[name] / bc1
        vhat = opt.v[name] / bc2
        p.data -= (opt.learning_rate * mhat /
                   (np.sqrt(vhat) + opt.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# forward / step


def forward_regime(cache: BevCache, idx: int, regime: Regime,
                   params: ParamStore, config: TrainConfig,
                   step_info: StepInfo) -> PredictionMap:
    if config.baseline:
        fused = concat_fuse(cache.lidar(idx).tensor, cache.camera(idx).tensor,
                            params)
        return head(encode(fused, params), params)

    if regime is Regime.LC:
        grid = dispatch(Availability(True, True), config.fusion,
                        cache.lidar(idx), cache.camera(idx), params, step_info)
    elif regime is Regime.L:
        grid = dispatch(Availability(True, False), config.fusion,
                        cache.lidar(idx), None, params, step_info)
    elif regime is Regime.C:
        grid = dispatch(Availability(False, True), config.fusion,
                        None, cache.camera(idx), params, step_info)
    else:
        anchor = (Modality.LIDAR if regime is Regime.ANCHOR_LIDAR
                  else Modality.CAMERA)
        info = StepInfo(step=step_info.step, total_steps=step_info.total_steps,
                        pmd_anchor=anchor)
        grid = dispatch(Availability(True, True), config.fusion,
                        cache.lidar(idx), cache.camera(idx), params, info)
    return head(encode(grid, params), params)


def train_step(batch: list[tuple[int, Regime]], cache: BevCache,
               targets: list, params: ParamStore, opt: OptState,
               step: int, total_steps: int,
               config: TrainConfig) -> tuple[float, dict[str, float]]:
    """One optimizer update over the batch-mean loss. Returns the batch
    loss and per-regime losses."""
    if not batch:
        raise ValueError("empty batch")
    info = StepInfo(step=min(step, total_steps), total_steps=total_steps)
    params.zero_grads()
    losses = []
    per_regime: dict[str, float] = {}
    for idx, regime in batch:
        pred = forward_regime(cache, idx, regime, params, config, info)
        item_loss = detection_loss(pred, targets[idx])
        losses.append(item_loss)
        per_regime.setdefault(regime.value, 0.0)
        per_regime[regime.value] += item_loss.item()
    total = T.scale(losses[0], 1.0 / len(batch))
    for extra in losses[1:]:
        total = T.add(total, T.scale(extra, 1.0 / len(batch)))
    value = total.item()
    if not np.isfinite(value):
        raise TrainingDivergedError(f"non-finite loss at step {step}")
    T.backward(total)
    optimizer_update(params, opt)
    params.step_count += 1
    counts: dict[str, int] = {}
    for _, regime in batch:
        counts[regime.value] = counts.get(regime.value, 0) + 1
    return value, {k: per_regime[k] / counts[k] for k in per_regime}


def init_params(config: TrainConfig, gc: GridConfig,
                num_classes: int) -> ParamStore:
    rng = np.random.default_rng(config.init_seed)
    params = ParamStore()
    init_detector_params(params, rng, gc.c, num_classes)
    if config.baseline:
        init_concat_fusion_params(params, rng, gc.c)
    elif config.fusion.kind == "xattn":
        init_xattn_params(params, gc.c, rng, config.fusion.theta_init)
    return params


def _augment(samples: list[Sample], config: TrainConfig,
             world: WorldConfig) -> list[Sample]:
    rng = np.random.default_rng([config.shuffle_seed, 0xAC])
    out = []
    for s in samples:
        if rng.uniform() < 0.5:
            family = FAMILIES[int(rng.integers(0, len(FAMILIES)))]
            severity = int(rng.integers(1, 4))
            spec = CorruptionSpec(family, severity,
                                  int(rng.integers(0, 2 ** 31)))
            out.append(corrupt_sample(s, spec, world))
        else:
            out.append(s)
    return out


def run_training(samples: list[Sample], gc: GridConfig, world: WorldConfig,
                 config: TrainConfig,
                 params: ParamStore | None = None) -> tuple[ParamStore, TrainingReport]:
    """Full deterministic training loop over the expanded, shuffled epochs."""
    start = time.monotonic()
    if config.corruption_augment:
        samples = _augment(samples, config, world)
    num_classes = world.num_classes
    if params is None:
        params = init_params(config, gc, num_classes)
    cache = BevCache(samples, gc)
    targets = [build_targets(s.scene, gc) for s in samples]
    opt = OptState(kind=config.optimizer, learning_rate=config.learning_rate)

    mode = schedule_mode(config)
    epochs = config.resolved_epochs()
    per_epoch = len(expand_epoch(len(samples), mode, config.shuffle_seed))
    steps_per_epoch = (per_epoch + config.batch_size - 1) // config.batch_size
    total_steps = steps_per_epoch * epochs

    step_losses: list[float] = []
    regime_running: dict[str, list[float]] = {}
    step = 0
    for epoch in range(epochs):
        entries = expand_epoch(len(samples), mode, config.shuffle_seed + epoch)
        for lo in range(0, len(entries), config.batch_size):
            batch = entries[lo:lo + config.batch_size]
            step += 1
            loss, per_regime = train_step(batch, cache, targets, params, opt,
                                          step, total_steps, config)
            step_losses.append(loss)
            for k, v in per_regime.items():
                regime_running.setdefault(k, []).append(v)

    report = TrainingReport(
        fusion_kind="concat" if config.baseline else config.fusion.kind,
        epochs=epochs, total_steps=total_steps,
        batch_size=config.batch_size, step_losses=step_losses,
        regime_losses={k: float(np.mean(v)) for k, v in regime_running.items()},
        wall_time_s=time.monotonic() - start,
        final_loss=step_losses[-1] if step_losses else float("nan"))
    return params, report


def write_training_report(path, report: TrainingReport,
                          header: dict | None = None) -> None:
    lines = [f"fusion={report.fusion_kind}", f"epochs={report.epochs}",
             f"total_steps={report.total_steps}",
             f"batch_size={report.batch_size}"]
    for k, v in (header or {}).items():
        lines.append(f"{k}={v}")
    for k, v in sorted(report.regime_losses.items()):
        lines.append(f"regime_loss.{k}={v:.6f}")
    for i, loss in enumerate(report.step_losses, start=1):
        lines.append(f"step {i} loss {loss:.6f}")
    lines.append(f"final_loss={report.final_loss:.6f}")
    lines.append(f"wall_time_s={report.wall_time_s:.3f}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
