"""Planar and rigid-body pose algebra and the pinhole camera model.

Conventions
-----------
* World frame: the table surface is the plane ``z = 0``, ``+z`` points up.
* Angles are degrees, counter-clockwise positive seen from above.
* Camera frame: ``x`` right, ``y`` down, ``z`` along the optical axis.
  Pixel centres sit on integer coordinates, origin at the top-left pixel.
* A camera pose is the camera-to-world transform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

ORTHO_TOL = 1e-9

# Camera looking straight down: x_cam = +x_world, y_cam = -y_world, z_cam = -z_world.
_LOOK_DOWN = np.diag([1.0, -1.0, -1.0])


def _rot_z(theta_deg: float) -> np.ndarray:
    t = math.radians(theta_deg)
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def normalize_angle(theta: float, period: float = 360.0) -> float:
    """Wrap ``theta`` into ``[0, period)``."""
    value = math.fmod(theta, period)
    if value < 0.0:
        value += period
    # fmod of a tiny negative number can round up to exactly `period`
    if value >= period:
        value = 0.0
    return value


@dataclass(frozen=True)
class PlanarPose:
    """Pose of a part lying on the table: position in meters, yaw in degrees."""

    x: float
    y: float
    theta: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.theta)):
            raise ValueError(f"non-finite planar pose {self!r}")
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))

    def to_transform(self, z: float = 0.0) -> "RigidTransform":
        return RigidTransform(_rot_z(self.theta), np.array([self.x, self.y, z]))


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=float).reshape(3, 3)
        trans = np.array(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(rot)) or not np.all(np.isfinite(trans)):
            raise ValueError("transform contains non-finite values")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation is not proper (det != +1)")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, x: float, y: float, z: float) -> "RigidTransform":
        return cls(np.eye(3), np.array([x, y, z]))

    @classmethod
    def rot_z(cls, theta_deg: float) -> "RigidTransform":
        return cls(_rot_z(theta_deg), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_row_major(cls, values) -> "RigidTransform":
        """Build from 12 numbers: a row-major 3x3 rotation followed by a translation."""
        v = [float(x) for x in values]
        if len(v) != 12:
            raise ValueError(f"expected 12 numbers, got {len(v)}")
        return cls(np.array(v[:9]).reshape(3, 3), np.array(v[9:]))

    def to_row_major(self) -> list[float]:
        return [float(x) for x in self.rotation.ravel()] + [float(x) for x in self.translation]

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        """Transform an ``(..., 3)`` array of points."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def to_planar(self) -> PlanarPose:
        """Yaw about world z and in-plane position; ignores any tilt."""
        theta = math.degrees(math.atan2(self.rotation[1, 0], self.rotation[0, 0]))
        return PlanarPose(float(self.translation[0]), float(self.translation[1]), theta)

    def almost_equal(self, other: "RigidTransform", tol: float = 1e-9) -> bool:
        return bool(np.max(np.abs(self.matrix() - other.matrix())) <= tol)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def __repr__(self):
        return f"RigidTransform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def _reorthonormalize(r: np.ndarray) -> np.ndarray:
    # Keeps long composition chains inside the orthonormality tolerance.
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Homogeneous product ``a @ b`` (apply ``b`` first, then ``a``)."""
    rot = a.rotation @ b.rotation
    trans = a.rotation @ b.translation + a.translation
    if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-12:
        rot = _reorthonormalize(rot)
    return RigidTransform(rot, trans)


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -(rt @ t.translation))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @classmethod
    def from_fov(cls, width: int = 640, height: int = 480, hfov_deg: float = 65.0) -> "CameraIntrinsics":
        """Square pixels, symmetric principal point."""
        f = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, int(width), int(height))

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def crop(self, u0: int, v0: int, width: int, height: int) -> "CameraIntrinsics":
        """Intrinsics of the sub-window whose top-left pixel is ``(u0, v0)``."""
        return CameraIntrinsics(self.fx, self.fy, self.cx - u0, self.cy - v0, int(width), int(height))

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


DEFAULT_INTRINSICS = CameraIntrinsics.from_fov(640, 480, 65.0)


def deproject(pixel, depth: float, k: CameraIntrinsics) -> np.ndarray:
    """Pixel plus depth (camera z, meters) to a camera-frame point."""
    if not depth > 0:
        raise ValueError(f"depth must be positive, got {depth}")
    u, v = float(pixel[0]), float(pixel[1])
    return np.array([(u - k.cx) * depth / k.fx, (v - k.cy) * depth / k.fy, float(depth)])


def project(point, k: CameraIntrinsics) -> np.ndarray:
    x, y, z = (float(c) for c in point)
    if not z > 0:
        raise ValueError(f"point must lie in front of the camera (z={z})")
    return np.array([k.fx * x / z + k.cx, k.fy * y / z + k.cy])


def look_down_pose(x: float, y: float, height: float, yaw_deg: float = 0.0) -> RigidTransform:
    """Camera above ``(x, y)`` looking straight down.

    ``yaw_deg`` rotates the camera about its own optical axis. Because the
    optical axis points down, a camera yaw of ``+a`` turns the image content
    by ``+a`` relative to the world, i.e. a part at world angle ``a`` appears
    at angle 0 when the camera yaw is ``-a``.
    """
    rot = _LOOK_DOWN @ _rot_z(yaw_deg)
    return RigidTransform(rot, np.array([x, y, height]))


def camera_yaw(pose: RigidTransform) -> float:
    """Inverse of the yaw used by :func:`look_down_pose` (degrees)."""
    r = _LOOK_DOWN @ pose.rotation
    return math.degrees(math.atan2(r[1, 0], r[0, 0]))


@dataclass(frozen=True, eq=False)
class Camera:
    """Intrinsics plus camera-to-world pose."""

    intrinsics: CameraIntrinsics
    pose: RigidTransform

    @classmethod
    def looking_down(cls, x: float, y: float, height: float, yaw_deg: float = 0.0,
                     intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS) -> "Camera":
        return cls(intrinsics, look_down_pose(x, y, height, yaw_deg))

    @property
    def height(self) -> float:
        return float(self.pose.translation[2])

    @property
    def yaw(self) -> float:
        return camera_yaw(self.pose)

    def crop(self, u0: int, v0: int, width: int, height: int) -> "Camera":
        return Camera(self.intrinsics.crop(u0, v0, width, height), self.pose)

    def world_to_pixel(self, point) -> np.ndarray:
        return project(invert(self.pose).apply(point), self.intrinsics)

    def pixel_to_table(self, pixel) -> np.ndarray:
        """Intersect the ray through ``pixel`` with the table plane ``z = 0``."""
        k = self.intrinsics
        d_cam = np.array([(pixel[0] - k.cx) / k.fx, (pixel[1] - k.cy) / k.fy, 1.0])
        d = self.pose.rotation @ d_cam
        o = self.pose.translation
        if d[2] >= 0 or o[2] <= 0:
            raise ValueError("ray does not hit the table")
        s = -o[2] / d[2]
        return o + s * d

    def pixel_to_world(self, pixel, depth: float) -> np.ndarray:
        return self.pose.apply(deproject(pixel, depth, self.intrinsics))

    def ray_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-pixel world ray origin (3,) and directions (H, W, 3) with unit camera-z."""
        return self.pose.translation.copy(), self._ray_directions

    @cached_property
    def _ray_directions(self) -> np.ndarray:
        return _ray_directions(self.intrinsics, self.pose.rotation)

    def table_depth_map(self) -> np.ndarray:
        """Camera-z depth of the table plane at every pixel (0 where the ray misses)."""
        o, d = self.ray_grid()
        with np.errstate(divide="ignore", invalid="ignore"):
            s = -o[2] / d[..., 2]
        return np.where((d[..., 2] < 0) & (s > 0), s, 0.0)

    def heights_from_depth(self, depth: np.ndarray) -> np.ndarray:
        """World z of the surface seen at each pixel given camera-z ``depth``."""
        o, d = self.ray_grid()
        return o[2] + depth * d[..., 2]


_RAYS: dict = {}


def _ray_directions(k: CameraIntrinsics, rotation: np.ndarray) -> np.ndarray:
    key = (k, rotation.tobytes())
    d = _RAYS.get(key)
    if d is None:
        if len(_RAYS) >= 64:
            _RAYS.clear()
        u = np.arange(k.width, dtype=float)
        v = np.arange(k.height, dtype=float)
        uu, vv = np.meshgrid(u, v)
        d_cam = np.stack([(uu - k.cx) / k.fx, (vv - k.cy) / k.fy, np.ones_like(uu)], axis=-1)
        d = d_cam @ rotation.T
        d.setflags(write=False)
        _RAYS[key] = d
    return d


def pixel_error_to_world(pixel_error: float, depth: float, k: CameraIntrinsics) -> float:
    """Lateral world error caused by a pixel error at a given depth."""
    return abs(deproject((k.cx + pixel_error, k.cy), depth, k)[0])
