"""Corruption families applied to raw sensor streams before BEV projection.

Five families at three severities: LiDAR beam reduction, spatial and
temporal misalignment (LiDAR side), camera fog and motion blur. Each
family touches exactly one modality; "clean" is a bit-exact identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .world import (CameraStream, LidarSweep, ObjectBox, Sample, Scene,
                    WorldConfig, render_lidar)

FAMILIES = ("beams", "fog", "motionblur", "spatial", "temporal")
LIDAR_FAMILIES = ("beams", "spatial", "temporal")
CAMERA_FAMILIES = ("fog", "motionblur")

# severity parameter tables, index 0 unused (severities are 1-based)
BEAM_STRIDE = (None, 2, 4, 8)
FOG_CONTRAST = (None, 0.7, 0.45, 0.2)
FOG_NOISE_SIGMA = (None, 0.02, 0.05, 0.1)
BLUR_KERNEL = (None, 3, 7, 13)
MISALIGN_ROT_DEG = (None, 1.0, 3.0, 6.0)
MISALIGN_TRANS_M = (None, 0.25, 0.5, 1.0)
TEMPORAL_DT_S = (None, 0.1, 0.25, 0.5)


class CorruptionError(ValueError):
    """Unknown family or malformed corruption spec."""


@dataclass(frozen=True)
class CorruptionSpec:
    family: str
    severity: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        if self.family != "clean" and self.family not in FAMILIES:
            raise CorruptionError(f"unknown corruption family {self.family!r}")
        if self.family != "clean" and self.severity not in (1, 2, 3):
            raise CorruptionError(f"severity {self.severity} outside 1..3")

    @classmethod
    def parse(cls, text: str, rng_seed: int = 0) -> "CorruptionSpec":
        """Parse "<family>:<severity>"; bare "clean" is accepted too."""
        if text == "clean":
            return cls("clean", 1, rng_seed)
        if ":" not in text:
            raise CorruptionError(f"bad corruption spec {text!r}")
        family, _, sev = text.partition(":")
        try:
            severity = int(sev)
        except ValueError as e:
            raise CorruptionError(f"bad severity in {text!r}") from e
        return cls(family, severity, rng_seed)

    def label(self) -> str:
        if self.family == "clean":
            return "clean"
        return f"{self.family}:{self.severity}"


def apply_beam_reduce(sweep: LidarSweep, severity: int, seed: int) -> LidarSweep:
    """Keep only beams whose index is a multiple of the severity stride."""
    stride = BEAM_STRIDE[severity]
    keep = sweep.beam % stride == 0
    return LidarSweep(xy=sweep.xy[keep].copy(),
                      intensity=sweep.intensity[keep].copy(),
                      beam=sweep.beam[keep].copy(),
                      num_beams=sweep.num_beams)


def apply_fog(stream: CameraStream, severity: int, seed: int,
              contrast: float | None = None,
              noise_sigma: float | None = None) -> CameraStream:
    """Blend each view toward its mean intensity and add sensor noise.

    contrast/noise_sigma overrides exist for the severity-0 identity probe
    used in tests; normal callers pass only the severity.
    """
    t = FOG_CONTRAST[severity] if contrast is None else contrast
    sigma = FOG_NOISE_SIGMA[severity] if noise_sigma is None else noise_sigma
    rng = np.random.default_rng([seed, severity, 0xF0])
    views = stream.views.astype(np.float64)
    haze = views.mean(axis=(1, 2), keepdims=True)
    out = t * views + (1.0 - t) * haze
    if sigma > 0:
        out = out + rng.normal(0.0, sigma, size=views.shape)
    return replace(stream, views=out.astype(np.float32))


def apply_motion_blur(stream: CameraStream, severity: int, seed: int) -> CameraStream:
    """Horizontal box filter per view with reflective (symmetric) borders."""
    k = BLUR_KERNEL[severity]
    p = k // 2
    padded = np.pad(stream.views.astype(np.float64),
                    ((0, 0), (0, 0), (p, p)), mode="symmetric")
    csum = np.cumsum(padded, axis=2)
    csum = np.concatenate([np.zeros(csum.shape[:2] + (1,)), csum], axis=2)
    out = (csum[:, :, k:] - csum[:, :, :-k]) / k
    return replace(stream, views=out.astype(np.float32))


def _misalign_transform(severity: int, seed: int) -> tuple[float, np.ndarray]:
    psi = math.radians(MISALIGN_ROT_DEG[severity])
    mag = MISALIGN_TRANS_M[severity]
    rng = np.random.default_rng([seed, severity, 0x5A])
    theta = rng.uniform(0.0, 2 * math.pi)
    return psi, mag * np.array([math.cos(theta), math.sin(theta)])


def apply_spatial_misalign(sweep: LidarSweep, severity: int, seed: int,
                           psi: float | None = None,
                           translation: np.ndarray | None = None) -> LidarSweep:
    """Rigidly transform the LiDAR points while the camera frame stays put."""
    if psi is None or translation is None:
        psi, translation = _misalign_transform(severity, seed)
    c, s = math.cos(psi), math.sin(psi)
    rot = np.array([[c, -s], [s, c]])
    xy = sweep.xy.astype(np.float64) @ rot.T + translation
    return replace(sweep, xy=xy.astype(np.float32),
                   intensity=sweep.intensity.copy(), beam=sweep.beam.copy())


def advance_scene(scene: Scene, dt: float) -> Scene:
    boxes = [ObjectBox((b.center_xy[0] + b.velocity_xy[0] * dt,
                        b.center_xy[1] + b.velocity_xy[1] * dt),
                       b.size_lw, b.yaw, b.class_id, b.velocity_xy)
             for b in scene.boxes]
    return Scene(boxes=boxes, seed=scene.seed, extent_m=scene.extent_m)


def apply_temporal_misalign(sweep: LidarSweep, scene: Scene, severity: int,
                            seed: int, world: WorldConfig) -> LidarSweep:
    """Re-render LiDAR from the scene advanced by the severity's time lag."""
    dt = TEMPORAL_DT_S[severity]
    return render_lidar(advance_scene(scene, dt), world)


def corrupt_sample(sample: Sample, spec: CorruptionSpec,
                   world: WorldConfig) -> Sample:
    """Apply a family to its target modality; the other stays bit-identical."""
    if spec.family == "clean":
        return sample
    seed = spec.rng_seed ^ sample.scene.seed
    if spec.family == "beams":
        sweep = apply_beam_reduce(sample.sweep, spec.severity, seed)
        return Sample(sample.scene, sweep, sample.stream)
    if spec.family == "spatial":
        sweep = apply_spatial_misalign(sample.sweep, spec.severity, seed)
        return Sample(sample.scene, sweep, sample.stream)
    if spec.family == "temporal":
        sweep = apply_temporal_misalign(sample.sweep, sample.scene,
                                        spec.severity, seed, world)
        return Sample(sample.scene, sweep, sample.stream)
    if spec.family == "fog":
        stream = apply_fog(sample.stream, spec.severity, seed)
        return Sample(sample.scene, sample.sweep, stream)
    if spec.family == "motionblur":
        stream = apply_motion_blur(sample.stream, spec.severity, seed)
        return Sample(sample.scene, sample.sweep, stream)
    raise CorruptionError(f"unknown corruption family {spec.family!r}")
