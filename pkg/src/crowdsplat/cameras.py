"""Pinhole cameras and deterministic multi-view rigs (orbit / hemisphere)."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fileio import atomic_write_json, load_json

# Pixel centers sit at integer coordinates, so the default principal point of
# a width-W image is (W - 1) / 2.
DEFAULT_SIZE = (512, 512)
DEFAULT_FOCAL = 500.0

_WORLD_UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class Camera:
    """World-to-camera pinhole camera: x_cam = rotation @ x_world + translation.

    Camera space has x right, y down, z forward; a point is visible when its
    camera-space z exceeds ``near``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3, 3) orthonormal
    translation: np.ndarray  # (3,)
    width: int
    height: int
    near: float = 0.01

    def __post_init__(self):
        rot = np.ascontiguousarray(np.asarray(self.rotation, dtype=np.float64))
        tr = np.ascontiguousarray(np.asarray(self.translation, dtype=np.float64))
        if rot.shape != (3, 3):
            raise ValueError("camera rotation must be 3x3")
        if tr.shape != (3,):
            raise ValueError("camera translation must be a 3-vector")
        if np.max(np.abs(rot @ rot.T - np.eye(3))) > 1e-6:
            raise ValueError("camera rotation is not orthonormal")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        rot.setflags(write=False)
        tr.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def project(self, cam_points: np.ndarray) -> np.ndarray:
        """Camera-space points (N, 3) with z > 0 to pixel coordinates (N, 2)."""
        z = cam_points[:, 2]
        u = self.fx * cam_points[:, 0] / z + self.cx
        v = self.fy * cam_points[:, 1] / z + self.cy
        return np.stack([u, v], axis=1)

    def to_dict(self) -> dict:
        extrinsics = np.concatenate([self.rotation, self.translation[:, None]], axis=1)
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "near": self.near,
            "extrinsics": extrinsics.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Camera":
        ext = np.asarray(doc["extrinsics"], dtype=np.float64)
        if ext.shape != (3, 4):
            raise ValueError("camera extrinsics must be 3x4")
        return cls(
            fx=float(doc["fx"]),
            fy=float(doc["fy"]),
            cx=float(doc["cx"]),
            cy=float(doc["cy"]),
            rotation=ext[:, :3],
            translation=ext[:, 3],
            width=int(doc["width"]),
            height=int(doc["height"]),
            near=float(doc.get("near", 0.01)),
        )


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple[Camera, ...]
    rig_kind: str  # "orbit" | "hemisphere"

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        if not self.cameras:
            raise ValueError("camera rig must contain at least one camera")
        if self.rig_kind not in ("orbit", "hemisphere"):
            raise ValueError(f"unknown rig kind {self.rig_kind!r}")
        w, h = self.cameras[0].width, self.cameras[0].height
        if any(c.width != w or c.height != h for c in self.cameras):
            raise ValueError("all rig cameras must share the same image size")

    def __len__(self) -> int:
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)

    def to_dict(self) -> dict:
        return {"rig_kind": self.rig_kind, "cameras": [c.to_dict() for c in self.cameras]}

    @classmethod
    def from_dict(cls, doc: dict) -> "CameraRig":
        return cls(tuple(Camera.from_dict(c) for c in doc["cameras"]), doc["rig_kind"])


def save_rig(rig: CameraRig, path: str | Path) -> None:
    atomic_write_json(path, rig.to_dict())


def load_rig(path: str | Path) -> CameraRig:
    return CameraRig.from_dict(load_json(path))


def look_at_camera(
    position,
    look_at,
    fx: float = DEFAULT_FOCAL,
    fy: float | None = None,
    size: tuple[int, int] = DEFAULT_SIZE,
    principal: tuple[float, float] | None = None,
    near: float = 0.01,
) -> Camera:
    """Camera at ``position`` looking toward ``look_at`` with world up (0,0,1)."""
    position = np.asarray(position, dtype=np.float64)
    look_at = np.asarray(look_at, dtype=np.float64)
    forward = look_at - position
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("camera position coincides with the look-at point")
    forward = forward / norm
    right = np.cross(forward, _WORLD_UP)
    right_norm = np.linalg.norm(right)
    if right_norm < 1e-9:
        raise ValueError("look direction is parallel to the world up axis")
    right = right / right_norm
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    width, height = size
    if principal is None:
        principal = ((width - 1) / 2.0, (height - 1) / 2.0)
    return Camera(
        fx=float(fx),
        fy=float(fx if fy is None else fy),
        cx=float(principal[0]),
        cy=float(principal[1]),
        rotation=rotation,
        translation=-rotation @ position,
        width=int(width),
        height=int(height),
        near=near,
    )


def orbit_rig(
    n: int,
    radius: float,
    elevation: float = 0.0,
    look_at=(0.0, 0.0, 0.0),
    fx: float = DEFAULT_FOCAL,
    size: tuple[int, int] = DEFAULT_SIZE,
) -> CameraRig:
    """n cameras uniformly spaced on a horizontal circle around ``look_at``.

    Camera k sits at azimuth 2*pi*k/n, offset by ``elevation`` along +z, and
    looks at ``look_at``.
    """
    if n < 1:
        raise ValueError("orbit rig needs at least one camera")
    if radius <= 0:
        raise ValueError("orbit radius must be positive")
    look_at = np.asarray(look_at, dtype=np.float64)
    cameras = []
    for k in range(n):
        azimuth = 2.0 * np.pi * k / n
        position = look_at + np.array(
            [radius * np.cos(azimuth), radius * np.sin(azimuth), elevation]
        )
        cameras.append(look_at_camera(position, look_at, fx=fx, size=size))
    return CameraRig(tuple(cameras), "orbit")


def hemisphere_rig(
    n: int,
    radius: float,
    look_at=(0.0, 0.0, 0.0),
    fx: float = DEFAULT_FOCAL,
    size: tuple[int, int] = DEFAULT_SIZE,
    max_elevation_deg: float = 85.0,
) -> CameraRig:
    """n cameras on the upper hemisphere around ``look_at``.

    Deterministic Fibonacci lattice: point k gets azimuth k times the golden
    angle and a z chosen so sin(elevation) is uniformly spaced in
    (0, sin(max_elevation)]. The layout is a pure function of n.
    """
    if n < 1:
        raise ValueError("hemisphere rig needs at least one camera")
    if radius <= 0:
        raise ValueError("hemisphere radius must be positive")
    look_at = np.asarray(look_at, dtype=np.float64)
    golden_angle = np.pi * (3.0 - np.sqrt(5.0))
    z_cap = np.sin(np.deg2rad(max_elevation_deg))
    cameras = []
    for k in range(n):
        z = (k + 0.5) / n * z_cap
        r_xy = np.sqrt(max(1.0 - z * z, 0.0))
        azimuth = k * golden_angle
        position = look_at + radius * np.array(
            [r_xy * np.cos(azimuth), r_xy * np.sin(azimuth), z]
        )
        cameras.append(look_at_camera(position, look_at, fx=fx, size=size))
    return CameraRig(tuple(cameras), "hemisphere")
