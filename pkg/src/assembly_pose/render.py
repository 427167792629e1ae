"""Deterministic software rasterizer for top-down depth images.

Depth is camera-z in meters; the table is the analytic plane ``z = 0``.

Vertices are snapped to a 1/4096-pixel grid and edge functions are evaluated
in integer arithmetic, so pixel ownership along shared edges is exact
(one triangle owns each pixel centre). Triangles are drawn in a canonical
order derived from their snapped coordinates, with strict depth comparison,
so the first-drawn triangle wins depth ties and the output does not depend on
how the mesh happens to be indexed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .geometry import Camera, CameraIntrinsics, PlanarPose, RigidTransform, invert, look_down_pose
from .parts import Mesh, PartSpec

SUBPIXEL_BITS = 12
SUBPIXEL = 1 << SUBPIXEL_BITS
DEPTH_GRID = 2.0 ** -30  # m
NEAR_PLANE = 1e-3  # m
GUARD_PX = 32767  # snapped coordinates must fit in int64 products


class SceneError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Placement:
    part: PartSpec
    pose: PlanarPose


@dataclass(frozen=True, eq=False)
class Scene:
    """Parts lying on the table, plus the nominal camera-to-table distance."""

    placements: tuple = ()
    table_depth: float = 0.53

    def __post_init__(self):
        object.__setattr__(self, "placements", tuple(
            p if isinstance(p, Placement) else Placement(*p) for p in self.placements))
        if not self.table_depth > 0:
            raise SceneError("table_depth must be positive")

    def validate(self, margin: float = 0.0):
        """Reject overlapping bounding circles."""
        pl = self.placements
        for i in range(len(pl)):
            for j in range(i + 1, len(pl)):
                a, b = pl[i], pl[j]
                dist = np.hypot(a.pose.x - b.pose.x, a.pose.y - b.pose.y)
                if dist < a.part.bounding_radius + b.part.bounding_radius + margin:
                    raise SceneError(f"{a.part.name} and {b.part.name} overlap")
        return self

    def world_mesh(self) -> Mesh:
        return Mesh.concatenate(p.part.mesh.transformed(p.pose.to_transform()) for p in self.placements)

    def default_camera(self, intrinsics: CameraIntrinsics) -> Camera:
        return Camera(intrinsics, look_down_pose(0.0, 0.0, self.table_depth))


@dataclass(frozen=True, eq=False)
class DepthImage:
    data: np.ndarray  # (H, W) float64 meters, 0 = invalid

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 2:
            raise ValueError("depth image must be 2-D")
        if not np.all(np.isfinite(d)) or (d < 0).any():
            raise ValueError("depth must be finite and non-negative")
        object.__setattr__(self, "data", d)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


# --------------------------------------------------------------------------
# rasterizer


@numba.njit(cache=True)
def _raster_kernel(us, vs, zs, zbuf):
    h, w = zbuf.shape
    s = SUBPIXEL
    for t in range(us.shape[0]):
        x0, y0, x1, y1, x2, y2 = us[t, 0], vs[t, 0], us[t, 1], vs[t, 1], us[t, 2], vs[t, 2]
        z0, z1, z2 = zs[t, 0], zs[t, 1], zs[t, 2]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area == 0:
            continue
        if area < 0:
            x1, y1, x2, y2 = x2, y2, x1, y1
            z1, z2 = z2, z1
            area = -area
        # edge e_k is opposite vertex k; bias 0 includes the edge, 1 excludes it
        e0x, e0y = x2 - x1, y2 - y1
        e1x, e1y = x0 - x2, y0 - y2
        e2x, e2y = x1 - x0, y1 - y0
        b0 = 0 if (e0y > 0 or (e0y == 0 and e0x < 0)) else 1
        b1 = 0 if (e1y > 0 or (e1y == 0 and e1x < 0)) else 1
        b2 = 0 if (e2y > 0 or (e2y == 0 and e2x < 0)) else 1
        minx = min(x0, min(x1, x2))
        maxx = max(x0, max(x1, x2))
        miny = min(y0, min(y1, y2))
        maxy = max(y0, max(y1, y2))
        i0 = max(0, -((-minx) // s))
        i1 = min(w - 1, maxx // s)
        j0 = max(0, -((-miny) // s))
        j1 = min(h - 1, maxy // s)
        if i0 > i1 or j0 > j1:
            continue
        iz0, iz1, iz2 = 1.0 / z0, 1.0 / z1, 1.0 / z2
        inv_area = 1.0 / area
        for j in range(j0, j1 + 1):
            py = j * s
            for i in range(i0, i1 + 1):
                px = i * s
                w0 = e0x * (py - y1) - e0y * (px - x1)
                w1 = e1x * (py - y2) - e1y * (px - x2)
                w2 = e2x * (py - y0) - e2y * (px - x0)
                if w0 - b0 < 0 or w1 - b1 < 0 or w2 - b2 < 0:
                    continue
                invz = (w0 * iz0 + w1 * iz1 + w2 * iz2) * inv_area
                z = 1.0 / invz
                if z < zbuf[j, i]:
                    zbuf[j, i] = z


def _snap_triangles(cam_pts: np.ndarray, k: CameraIntrinsics):
    """Project camera-frame triangle corners (M, 3, 3) to snapped integer pixels."""
    z = cam_pts[..., 2]
    keep = np.all(z > NEAR_PLANE, axis=1)
    cam_pts = cam_pts[keep]
    z = cam_pts[..., 2]
    u = k.fx * cam_pts[..., 0] / z + k.cx
    v = k.fy * cam_pts[..., 1] / z + k.cy
    inside = np.all((np.abs(u) < GUARD_PX) & (np.abs(v) < GUARD_PX), axis=1)
    us = np.rint(u[inside] * SUBPIXEL).astype(np.int64)
    vs = np.rint(v[inside] * SUBPIXEL).astype(np.int64)
    zs = np.rint(z[inside] / DEPTH_GRID) * DEPTH_GRID
    return us, vs, zs


def _canonical_order(us, vs, zs):
    """Rotate each triangle's corners to start at its smallest corner, then sort triangles."""
    zq = np.rint(zs / DEPTH_GRID).astype(np.int64)
    keys = np.stack([us, vs, zq], axis=-1)  # (M, 3 corners, 3 coords)
    first = np.zeros(len(us), dtype=np.int64)
    for c in (1, 2):
        a = keys[np.arange(len(us)), first]
        b = keys[:, c]
        less = (b[:, 0] < a[:, 0]) | ((b[:, 0] == a[:, 0]) & (
            (b[:, 1] < a[:, 1]) | ((b[:, 1] == a[:, 1]) & (b[:, 2] < a[:, 2]))))
        first = np.where(less, c, first)
    idx = (first[:, None] + np.arange(3)[None, :]) % 3
    rows = np.arange(len(us))[:, None]
    us, vs, zs, zq = us[rows, idx], vs[rows, idx], zs[rows, idx], zq[rows, idx]
    order = np.lexsort([zq[:, 2], vs[:, 2], us[:, 2], zq[:, 1], vs[:, 1], us[:, 1],
                        zq[:, 0], vs[:, 0], us[:, 0]])
    return (np.ascontiguousarray(us[order]), np.ascontiguousarray(vs[order]),
            np.ascontiguousarray(zs[order]))


def rasterize(mesh: Mesh, camera: Camera, background: np.ndarray) -> np.ndarray:
    """Z-buffer ``mesh`` (world frame) over ``background`` depth."""
    zbuf = np.array(background, dtype=np.float64, copy=True)
    if len(mesh) == 0:
        return zbuf
    world_to_cam = invert(camera.pose)
    cam_pts = world_to_cam.apply(mesh.corners())
    us, vs, zs = _snap_triangles(cam_pts, camera.intrinsics)
    if len(us) == 0:
        return zbuf
    us, vs, zs = _canonical_order(us, vs, zs)
    _raster_kernel(us, vs, zs, zbuf)
    return zbuf


_BACKGROUNDS: dict = {}


def table_background(camera: Camera) -> np.ndarray:
    """Read-only table depth map, memoized per intrinsics and pose."""
    key = (camera.intrinsics, camera.pose.matrix().tobytes())
    depth = _BACKGROUNDS.get(key)
    if depth is None:
        if len(_BACKGROUNDS) >= 64:
            _BACKGROUNDS.clear()
        depth = camera.table_depth_map()
        depth.setflags(write=False)
        _BACKGROUNDS[key] = depth
    return depth


def render(scene: Scene, intrinsics: CameraIntrinsics, pose: RigidTransform | None = None) -> DepthImage:
    """Depth image of ``scene`` seen from ``pose`` (default: straight down from ``table_depth``)."""
    camera = Camera(intrinsics, pose) if pose is not None else scene.default_camera(intrinsics)
    return render_camera(scene, camera)


def render_camera(scene: Scene, camera: Camera) -> DepthImage:
    return DepthImage(rasterize(scene.world_mesh(), camera, table_background(camera)))


# --------------------------------------------------------------------------
# independent oracle


def raycast_reference(scene: Scene, intrinsics: CameraIntrinsics, pose: RigidTransform | None = None,
                      chunk: int = 128) -> DepthImage:
    """Per-pixel nearest ray/triangle hit (Moller-Trumbore), unsnapped float64.

    Slow; intended for cross-checking :func:`render` on small frames.
    """
    camera = Camera(intrinsics, pose) if pose is not None else scene.default_camera(intrinsics)
    k = intrinsics
    uu, vv = np.meshgrid(np.arange(k.width, dtype=float), np.arange(k.height, dtype=float))
    dirs = np.stack([(uu - k.cx) / k.fx, (vv - k.cy) / k.fy, np.ones_like(uu)], axis=-1).reshape(-1, 3)
    # work in the camera frame: ray origin 0, direction with unit z => t is depth
    corners = invert(camera.pose).apply(scene.world_mesh().corners())
    best = np.full(len(dirs), np.inf)
    # table plane in camera frame: n . x = c
    w2c = invert(camera.pose)
    n = w2c.rotation @ np.array([0.0, 0.0, 1.0])
    c = float(n @ w2c.translation)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_plane = c / (dirs @ n)
    best = np.where(np.isfinite(t_plane) & (t_plane > 0), t_plane, np.inf)
    if len(corners):
        v0 = corners[:, 0]
        e1 = corners[:, 1] - v0
        e2 = corners[:, 2] - v0
        for start in range(0, len(dirs), chunk):
            d = dirs[start:start + chunk]  # (R, 3)
            p = np.cross(d[:, None, :], e2[None, :, :])  # (R, M, 3)
            det = np.einsum("rmk,mk->rm", p, e1)
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / det
                tvec = -v0  # origin at zero
                u = np.einsum("rmk,mk->rm", p, tvec) * inv
                q = np.cross(tvec, e1)  # (M, 3)
                v = np.einsum("rk,mk->rm", d, q) * inv
                t = np.einsum("mk,mk->m", e2, q)[None, :] * inv
            ok = (np.abs(det) > 1e-18) & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > NEAR_PLANE)
            t = np.where(ok, t, np.inf)
            best[start:start + chunk] = np.minimum(best[start:start + chunk], t.min(axis=1))
    best[~np.isfinite(best)] = 0.0
    return DepthImage(best.reshape(k.height, k.width))


# --------------------------------------------------------------------------
# PGM I/O


def _write_pgm(path, array: np.ndarray, maxval: int):
    h, w = array.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(array, dtype=dtype).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pos += 1
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w).astype(
        np.uint16 if maxval > 255 else np.uint8)


DEPTH_PGM_UNIT = 1e-4  # 0.1 mm


def depth_to_u16(img: DepthImage) -> np.ndarray:
    return np.clip(np.floor(img.data / DEPTH_PGM_UNIT + 0.5), 0, 65535).astype(np.uint16)


def write_depth_pgm(path, img: DepthImage):
    _write_pgm(path, depth_to_u16(img), 65535)


def read_depth_pgm(path) -> DepthImage:
    return DepthImage(read_pgm(path).astype(np.float64) * DEPTH_PGM_UNIT)


def write_gray_pgm(path, data: np.ndarray):
    _write_pgm(path, np.asarray(data, dtype=np.uint8), 255)
