"""Pin-hole cameras: ego-frame points to (u, v, depth) pixel coordinates."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from os import PathLike
from typing import NamedTuple, Sequence

import numpy as np


class PixelPoint3D(NamedTuple):
    u: float
    v: float
    d: float


@dataclass(frozen=True)
class CameraModel:
    """Intrinsics plus the rigid ego-to-camera transform ``p_cam = R p + t``.

    The camera looks down +z with +x to the right and +y down the image.
    """

    fx: float
    fy: float
    u0: float
    v0: float
    image_w: int
    image_h: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.image_w < 1 or self.image_h < 1:
            raise ValueError("image extents must be >= 1")
        if not np.allclose(rot.T @ rot, np.eye(3), rtol=0.0, atol=1e-9):
            raise ValueError("rotation is not orthonormal")
        if not np.all(np.isfinite(trans)):
            raise ValueError("translation must be finite")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def from_dict(cls, doc: dict) -> "CameraModel":
        return cls(
            fx=float(doc["fx"]),
            fy=float(doc["fy"]),
            u0=float(doc["u0"]),
            v0=float(doc["v0"]),
            image_w=int(doc["image_w"]),
            image_h=int(doc["image_h"]),
            rotation=np.asarray(doc.get("rotation", np.eye(3).ravel()), dtype=np.float64),
            translation=np.asarray(doc.get("translation", [0.0, 0.0, 0.0]), dtype=np.float64),
        )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "u0": self.u0,
            "v0": self.v0,
            "rotation": self.rotation.ravel().tolist(),
            "translation": self.translation.tolist(),
            "image_w": self.image_w,
            "image_h": self.image_h,
        }

    def scaled(self, sx: float, sy: float) -> "CameraModel":
        """Same camera expressed on a resampled pixel grid (align-corners-false)."""
        return CameraModel(
            fx=self.fx * sx,
            fy=self.fy * sy,
            u0=(self.u0 + 0.5) * sx - 0.5,
            v0=(self.v0 + 0.5) * sy - 0.5,
            image_w=max(1, int(round(self.image_w * sx))),
            image_h=max(1, int(round(self.image_h * sy))),
            rotation=self.rotation,
            translation=self.translation,
        )


def project_points(points: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Vectorised projection of N x 3 ego points to N x 3 ``(u, v, d)``.

    Points on the camera plane (z' == 0) come back with non-finite u, v.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam_pts = pts @ cam.rotation.T + cam.translation
    z = cam_pts[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * cam_pts[:, 0] / z + cam.u0
        v = cam.fy * cam_pts[:, 1] / z + cam.v0
    zero = z == 0.0
    u[zero] = np.inf
    v[zero] = np.inf
    return np.stack([u, v, z], axis=-1)


def project_point(p: Sequence[float], cam: CameraModel) -> PixelPoint3D:
    u, v, d = project_points(np.asarray(p, dtype=np.float64)[None, :], cam)[0]
    return PixelPoint3D(float(u), float(v), float(d))


def visibility_mask(uvd: np.ndarray, cam: CameraModel, d_min: float, d_max: float) -> np.ndarray:
    uvd = np.asarray(uvd, dtype=np.float64).reshape(-1, 3)
    u, v, d = uvd[:, 0], uvd[:, 1], uvd[:, 2]
    finite = np.all(np.isfinite(uvd), axis=1)
    with np.errstate(invalid="ignore"):
        inside = (
            (u >= 0) & (u <= cam.image_w - 1)
            & (v >= 0) & (v <= cam.image_h - 1)
            & (d >= d_min) & (d <= d_max)
        )
    return finite & inside


def is_visible(pt: Sequence[float], cam: CameraModel, d_min: float, d_max: float) -> bool:
    if not d_min < d_max:
        raise ValueError("need d_min < d_max")
    return bool(visibility_mask(np.asarray(pt, dtype=np.float64)[None, :], cam, d_min, d_max)[0])


def unproject(uvd: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Inverse of :func:`project_points` for points with positive depth."""
    uvd = np.asarray(uvd, dtype=np.float64).reshape(-1, 3)
    d = uvd[:, 2]
    cam_pts = np.stack(
        [(uvd[:, 0] - cam.u0) / cam.fx * d, (uvd[:, 1] - cam.v0) / cam.fy * d, d], axis=-1
    )
    # R is orthonormal: inverse of p_cam = R p + t is p = R^T (p_cam - t)
    return (cam_pts - cam.translation) @ cam.rotation


def colinear_queries(cam: CameraModel, u: float, v: float, depths: Sequence[float]) -> list[np.ndarray]:
    """Ego-frame points that all project to pixel ``(u, v)`` at the given depths."""
    depths = np.asarray(depths, dtype=np.float64).reshape(-1)
    if np.any(depths <= 0):
        raise ValueError("depths must be positive")
    uvd = np.stack([np.full_like(depths, u), np.full_like(depths, v), depths], axis=-1)
    return list(unproject(uvd, cam))


def look_rotation(forward: Sequence[float], up: Sequence[float] = (0.0, 0.0, 1.0)) -> np.ndarray:
    """Rotation whose rows are the camera axes (right, down, forward) in ego coordinates."""
    f = np.asarray(forward, dtype=np.float64)
    f = f / np.linalg.norm(f)
    right = np.cross(f, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-12:
        raise ValueError("forward is parallel to up")
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    return np.stack([right, down, f])


def ring_rig(
    num_views: int,
    image_w: int,
    image_h: int,
    fx: float | None = None,
    fy: float | None = None,
    radius: float = 0.0,
    height: float = 0.0,
) -> list[CameraModel]:
    """Cameras evenly spaced in yaw around the ego origin, looking outward horizontally."""
    if num_views < 1:
        raise ValueError("need at least one view")
    if fx is None:
        # horizontal field of view covers the yaw sector of each camera, at most 120 deg
        fov = min(2 * np.pi / num_views, np.deg2rad(120.0))
        fx = (image_w / 2) / np.tan(fov / 2)
    fy = fx if fy is None else fy
    cams = []
    for n in range(num_views):
        yaw = 2 * np.pi * n / num_views
        fwd = np.array([np.cos(yaw), np.sin(yaw), 0.0])
        rot = look_rotation(fwd)
        center = radius * fwd + np.array([0.0, 0.0, height])
        cams.append(
            CameraModel(
                fx=float(fx),
                fy=float(fy),
                u0=(image_w - 1) / 2,
                v0=(image_h - 1) / 2,
                image_w=image_w,
                image_h=image_h,
                rotation=rot,
                translation=-rot @ center,
            )
        )
    return cams


def load_rig(path: str | PathLike) -> list[CameraModel]:
    with open(path) as fh:
        doc = json.load(fh)
    return rig_from_json(doc)


def rig_from_json(doc) -> list[CameraModel]:
    if not isinstance(doc, list) or not doc:
        raise ValueError("camera rig must be a non-empty JSON array")
    return [CameraModel.from_dict(item) for item in doc]


def rig_to_json(cams: Sequence[CameraModel]) -> list[dict]:
    return [c.to_dict() for c in cams]
