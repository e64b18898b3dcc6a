"""The 14-channel pixel-aligned observation set and its PNG serialization.

Channel layout (H, W, 14), all values in [-1, 1]:
    0:3   front albedo      3:6   back albedo
    6:9   front normal      9:12  back normal   (camera space)
    12    front depth       13    back depth    ([near,far] -> [-1,1])

Outside the validity mask every channel equals the background constant -1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import cv2
import numpy as np

from ..camera import Camera

BACKGROUND = -1.0

ALBEDO_F = slice(0, 3)
ALBEDO_B = slice(3, 6)
NORMAL_F = slice(6, 9)
NORMAL_B = slice(9, 12)
DEPTH_F = 12
DEPTH_B = 13

CHANNEL_GROUPS = {
    "albedo_front": ALBEDO_F,
    "albedo_back": ALBEDO_B,
    "normal_front": NORMAL_F,
    "normal_back": NORMAL_B,
    "depth_front": slice(12, 13),
    "depth_back": slice(13, 14),
}


class ObservationError(ValueError):
    pass


@dataclass
class ObservationSet:
    channels: np.ndarray  # (H, W, 14) float32
    mask: np.ndarray  # (H, W) bool

    @property
    def height(self) -> int:
        return self.channels.shape[0]

    @property
    def width(self) -> int:
        return self.channels.shape[1]

    def group(self, name: str) -> np.ndarray:
        return self.channels[..., CHANNEL_GROUPS[name]]

    def validate(self, atol: float = 1e-5) -> None:
        c = self.channels
        if c.ndim != 3 or c.shape[2] != 14:
            raise ObservationError(f"expected (H,W,14), got {c.shape}")
        if self.mask.shape != c.shape[:2]:
            raise ObservationError("mask shape mismatch")
        if np.min(c) < -1.0 - atol or np.max(c) > 1.0 + atol:
            raise ObservationError(
                f"values outside [-1,1]: min={np.min(c):.4f} max={np.max(c):.4f}"
            )
        bg = c[~self.mask]
        if bg.size and np.max(np.abs(bg - BACKGROUND)) > atol:
            raise ObservationError("background pixels must equal -1 on all channels")
        m = self.mask
        if m.any():
            df = c[..., DEPTH_F][m]
            db = c[..., DEPTH_B][m]
            if np.min(db - df) < -atol:
                raise ObservationError("back depth < front depth inside the mask")


def pack_observation(
    albedo_f: np.ndarray,
    albedo_b: np.ndarray,
    normal_f: np.ndarray,
    normal_b: np.ndarray,
    z_f: np.ndarray,
    z_b: np.ndarray,
    mask: np.ndarray,
    camera: Camera,
) -> ObservationSet:
    """Assemble channels from physical quantities.

    albedo in [0,1], normals unit camera-space vectors, z in scene units
    along the view axis.  Background pixels are overwritten with -1.
    """
    h, w = mask.shape
    c = np.full((h, w, 14), BACKGROUND, dtype=np.float32)
    m = mask.astype(bool)
    c[..., ALBEDO_F][m] = 2.0 * albedo_f[m] - 1.0
    c[..., ALBEDO_B][m] = 2.0 * albedo_b[m] - 1.0
    c[..., NORMAL_F][m] = normal_f[m]
    c[..., NORMAL_B][m] = normal_b[m]
    c[..., DEPTH_F][m] = camera.z_to_channel(z_f[m])
    c[..., DEPTH_B][m] = camera.z_to_channel(z_b[m])
    np.clip(c, -1.0, 1.0, out=c)
    return ObservationSet(channels=c, mask=m)


# ---------------------------------------------------------------------------
# PNG round trip: albedo 8-bit, normals/depth 16-bit, affine maps in a sidecar
# ---------------------------------------------------------------------------

def _to_u8(x01: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x01, 0.0, 1.0) * 255.0).astype(np.uint8)


def _to_u16(x01: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x01, 0.0, 1.0) * 65535.0).astype(np.uint16)


def _write_png(path: str, arr: np.ndarray) -> None:
    if arr.ndim == 3:
        arr = arr[..., ::-1]  # RGB(A) -> BGR(A) for OpenCV
    if not cv2.imwrite(str(path), arr):
        raise ObservationError(f"failed to write {path}")


def _read_png(path: str) -> np.ndarray:
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise ObservationError(f"missing or unreadable image: {path}")
    if arr.ndim == 3:
        arr = arr[..., ::-1]
    return arr


def save_observation(obs: ObservationSet, prefix: str, camera: Camera) -> list:
    """Write the six observation images plus a JSON sidecar; returns paths."""
    c = obs.channels
    to01 = lambda x: (x + 1.0) * 0.5
    paths = []

    def emit(name, arr):
        path = f"{prefix}{name}.png"
        _write_png(path, arr)
        paths.append(path)

    emit("albedo_f", _to_u8(to01(c[..., ALBEDO_F])))
    emit("albedo_b", _to_u8(to01(c[..., ALBEDO_B])))
    emit("normal_f", _to_u16(to01(c[..., NORMAL_F])))
    emit("normal_b", _to_u16(to01(c[..., NORMAL_B])))
    emit("depth_f", _to_u16(to01(c[..., DEPTH_F])))
    emit("depth_b", _to_u16(to01(c[..., DEPTH_B])))
    sidecar = f"{prefix}obs.json"
    with open(sidecar, "w") as f:
        json.dump(
            {
                "channel_range": [-1.0, 1.0],
                "albedo_bits": 8,
                "normal_bits": 16,
                "depth_bits": 16,
                "depth_planes": [camera.near, camera.far],
            },
            f,
            indent=1,
            sort_keys=True,
        )
    paths.append(sidecar)
    return paths


def load_observation(prefix: str, mask: np.ndarray) -> ObservationSet:
    """Inverse of save_observation (up to quantization)."""
    h, w = mask.shape
    c = np.empty((h, w, 14), dtype=np.float32)
    c[..., ALBEDO_F] = _read_png(f"{prefix}albedo_f.png").astype(np.float32) / 255.0 * 2 - 1
    c[..., ALBEDO_B] = _read_png(f"{prefix}albedo_b.png").astype(np.float32) / 255.0 * 2 - 1
    c[..., NORMAL_F] = _read_png(f"{prefix}normal_f.png").astype(np.float32) / 65535.0 * 2 - 1
    c[..., NORMAL_B] = _read_png(f"{prefix}normal_b.png").astype(np.float32) / 65535.0 * 2 - 1
    c[..., DEPTH_F] = _read_png(f"{prefix}depth_f.png").astype(np.float32) / 65535.0 * 2 - 1
    c[..., DEPTH_B] = _read_png(f"{prefix}depth_b.png").astype(np.float32) / 65535.0 * 2 - 1
    c[~mask.astype(bool)] = BACKGROUND
    return ObservationSet(channels=c, mask=mask.astype(bool))
