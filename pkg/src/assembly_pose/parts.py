"""The six challenge parts: symmetry structure, procedural meshes, STL I/O."""

from __future__ import annotations

import enum
import math
import re
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import CameraIntrinsics, RigidTransform
from .assembly import InsertionSpec

DEGENERATE_AREA = 1e-12  # m^2
DEFAULT_ASYMMETRY = 0.002  # m


class PartClass(str, enum.Enum):
    BASE_PLATE = "BasePlate"
    SHAFT_1 = "Shaft1"
    SHAFT_2 = "Shaft2"
    COMPOUND_GEAR = "CompoundGear"
    GEAR_1 = "Gear1"
    GEAR_2 = "Gear2"

    def __str__(self):
        return self.value


CLASS_ORDER = [PartClass.BASE_PLATE, PartClass.SHAFT_1, PartClass.SHAFT_2,
               PartClass.COMPOUND_GEAR, PartClass.GEAR_1, PartClass.GEAR_2]


def _class_key(text: str) -> str:
    return "".join(ch for ch in str(text).casefold() if ch.isalnum())


def part_class(value) -> PartClass:
    """Class from its value or name; case, spaces and underscores are ignored."""
    if isinstance(value, PartClass):
        return value
    key = _class_key(value)
    for c in PartClass:
        if key in (_class_key(c.value), _class_key(c.name)):
            return c
    raise ValueError(f"unknown part class {value!r}")


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3))
        t = np.ascontiguousarray(np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3))
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    def __len__(self):
        return len(self.triangles)

    def corners(self) -> np.ndarray:
        """(M, 3, 3) triangle corner coordinates."""
        return self.vertices[self.triangles]

    def areas(self) -> np.ndarray:
        c = self.corners()
        return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)

    def degenerate_triangles(self) -> np.ndarray:
        return np.flatnonzero(self.areas() <= DEGENERATE_AREA)

    def transformed(self, transform: RigidTransform) -> "Mesh":
        return Mesh(transform.apply(self.vertices), self.triangles)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @staticmethod
    def concatenate(meshes) -> "Mesh":
        verts, tris, offset = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            tris.append(m.triangles + offset)
            offset += len(m.vertices)
        if not verts:
            return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        return Mesh(np.concatenate(verts), np.concatenate(tris))


# --------------------------------------------------------------------------
# Procedural mesh builders


class _MeshBuilder:
    def __init__(self):
        self.verts: list[tuple[float, float, float]] = []
        self.tris: list[tuple[int, int, int]] = []

    def poly(self, pts):
        """Fan-triangulate a planar convex polygon, dropping repeated corners."""
        clean = []
        for p in pts:
            if not clean or p != clean[-1]:
                clean.append(p)
        if len(clean) > 1 and clean[0] == clean[-1]:
            clean.pop()
        if len(clean) < 3:
            return
        base = len(self.verts)
        self.verts.extend(clean)
        for i in range(1, len(clean) - 1):
            self.tris.append((base, base + i, base + i + 1))

    def mesh(self, offset=(0.0, 0.0, 0.0)) -> Mesh:
        v = np.array(self.verts, dtype=float).reshape(-1, 3) + np.asarray(offset, dtype=float)
        return Mesh(v, np.array(self.tris, dtype=np.int64).reshape(-1, 3))


def polar_heightfield(radii, heights, base: float = 0.0, offset=(0.0, 0.0)) -> Mesh:
    """Solid described on a polar grid around the z axis.

    ``radii`` has shape ``(m + 1, N)``: ring boundary ``i`` at angular sample
    ``j`` (angle ``2*pi*j/N``). ``heights`` has shape ``(m, N)``: the top of the
    cell between boundaries ``i`` and ``i + 1`` spanning samples ``j`` to
    ``j + 1``. Cells whose height does not exceed ``base`` are empty. Only top
    faces and walls are emitted; the underside rests on something else.
    """
    radii = np.asarray(radii, dtype=float)
    heights = np.asarray(heights, dtype=float)
    m, n = heights.shape
    assert radii.shape == (m + 1, n)
    h = np.where(heights > base, heights, base)
    ang = 2.0 * math.pi * np.arange(n) / n
    cs, sn = np.cos(ang), np.sin(ang)
    b = _MeshBuilder()

    def pt(i, j, z):
        r = radii[i, j % n]
        return (float(r * cs[j % n]), float(r * sn[j % n]), float(z))

    for j in range(n):
        j1 = j + 1
        # top faces, merged radially over equal heights
        i = 0
        while i < m:
            if h[i, j] <= base:
                i += 1
                continue
            k = i
            while k + 1 < m and h[k + 1, j] == h[i, j]:
                k += 1
            z = h[i, j]
            b.poly([pt(i, j, z), pt(k + 1, j, z), pt(k + 1, j1, z), pt(i, j1, z)])
            i = k + 1
        # radial walls on ring boundaries
        for i in range(m + 1):
            lo_in = h[i - 1, j] if i > 0 else base
            lo_out = h[i, j] if i < m else base
            if lo_in == lo_out:
                continue
            if radii[i, j] == 0.0 and radii[i, j1 % n] == 0.0:
                continue
            z0, z1 = min(lo_in, lo_out), max(lo_in, lo_out)
            b.poly([pt(i, j, z0), pt(i, j1, z0), pt(i, j1, z1), pt(i, j, z1)])
        # angular walls between sector j-1 and sector j, merged radially
        jp = (j - 1) % n
        i = 0
        while i < m:
            a, c = h[i, jp], h[i, j]
            if a == c:
                i += 1
                continue
            z0, z1 = min(a, c), max(a, c)
            k = i
            while k + 1 < m and min(h[k + 1, jp], h[k + 1, j]) == z0 and max(h[k + 1, jp], h[k + 1, j]) == z1:
                k += 1
            b.poly([pt(i, j, z0), pt(k + 1, j, z0), pt(k + 1, j, z1), pt(i, j, z1)])
            i = k + 1
    return b.mesh((offset[0], offset[1], 0.0))


def box(x0, x1, y0, y1, z0, z1) -> Mesh:
    b = _MeshBuilder()
    b.poly([(x0, y0, z1), (x1, y0, z1), (x1, y1, z1), (x0, y1, z1)])
    b.poly([(x0, y0, z0), (x1, y0, z0), (x1, y0, z1), (x0, y0, z1)])
    b.poly([(x1, y0, z0), (x1, y1, z0), (x1, y1, z1), (x1, y0, z1)])
    b.poly([(x1, y1, z0), (x0, y1, z0), (x0, y1, z1), (x1, y1, z1)])
    b.poly([(x0, y1, z0), (x0, y0, z0), (x0, y0, z1), (x0, y1, z1)])
    return b.mesh()


def tooth_profile(n_samples: int, teeth: int, root: float, tip: float) -> np.ndarray:
    """Trapezoidal teeth sampled at ``n_samples`` equally spaced angles."""
    if n_samples % teeth:
        raise ValueError("samples must be a multiple of the tooth count")
    spt = n_samples // teeth
    p = (np.arange(n_samples) % spt) / spt
    r = np.where(p < 0.25, root + (tip - root) * p / 0.25,
                 np.where(p < 0.5, tip,
                          np.where(p < 0.75, tip - (tip - root) * (p - 0.5) / 0.25, root)))
    return r


def _sector_mask(n, count, center_deg, width_deg):
    """Boolean per sector: inside one of ``count`` equally spaced windows."""
    step = 360.0 / n
    mids = (np.arange(n) + 0.5) * step
    mask = np.zeros(n, dtype=bool)
    for w in range(count):
        c = center_deg + w * 360.0 / count
        d = (mids - c + 180.0) % 360.0 - 180.0
        mask |= np.abs(d) < width_deg / 2.0
    return mask


def _window_index(n, count, center_deg, width_deg, which):
    step = 360.0 / n
    mids = (np.arange(n) + 0.5) * step
    c = center_deg + which * 360.0 / count
    d = (mids - c + 180.0) % 360.0 - 180.0
    return np.abs(d) < width_deg / 2.0


def _gear_mesh(d: dict, breaker: float = 0.0) -> Mesh:
    teeth = d["teeth"]
    n = 4 * teeth
    boundaries = [np.full(n, d["bore_r"]), np.full(n, d["hub_r"]),
                  np.full(n, d["window_r_in"]), np.full(n, d["window_r_out"])]
    if breaker > 0:
        boundaries.append(np.full(n, d["window_r_out"] + breaker))
    boundaries.append(tooth_profile(n, teeth, d["root_r"], d["tip_r"]))
    radii = np.stack(boundaries)
    m = len(boundaries) - 1
    hts = np.full((m, n), d["thickness"])
    hts[0, :] = d["hub_h"]
    windows = _sector_mask(n, d["windows"], d["window_center_deg"], d["window_width_deg"])
    hts[2, windows] = 0.0
    if breaker > 0:
        first = _window_index(n, d["windows"], d["window_center_deg"], d["window_width_deg"], 0)
        hts[3, first] = 0.0
    return polar_heightfield(radii, hts)


def _compound_gear_mesh(d: dict) -> Mesh:
    big, small = d["teeth_big"], d["teeth_small"]
    n = 4 * big
    radii = np.stack([
        np.full(n, d["bore_r"]),
        tooth_profile(n, small, d["small_root_r"], d["small_tip_r"]),
        tooth_profile(n, big, d["big_root_r"], d["big_tip_r"]),
    ])
    hts = np.stack([np.full(n, d["small_top"]), np.full(n, d["big_thickness"])])
    return polar_heightfield(radii, hts)


def _revolved_x(segments, segments_around: int = 24) -> Mesh:
    """Stepped cylinder lying on the table with its axis along x.

    ``segments`` is a list of ``(x_start, x_end, radius)`` covering the length
    contiguously. The axis height equals the largest radius, so the thickest
    section touches the table.
    """
    r_max = max(s[2] for s in segments)
    zc = r_max
    psi = 2.0 * math.pi * np.arange(segments_around) / segments_around
    cs, sn = np.cos(psi), np.sin(psi)
    b = _MeshBuilder()

    def ring(x, r, i):
        i %= segments_around
        return (float(x), float(r * cs[i]), float(zc + r * sn[i]))

    for x0, x1, r in segments:
        for i in range(segments_around):
            b.poly([ring(x0, r, i), ring(x1, r, i), ring(x1, r, i + 1), ring(x0, r, i + 1)])
    for (_, xa, ra), (_, _, rb) in zip(segments[:-1], segments[1:]):
        if ra == rb:
            continue
        for i in range(segments_around):
            b.poly([ring(xa, ra, i), ring(xa, rb, i), ring(xa, rb, i + 1), ring(xa, ra, i + 1)])
    for x, r in ((segments[0][0], segments[0][2]), (segments[-1][1], segments[-1][2])):
        centre = (float(x), 0.0, float(zc))
        for i in range(segments_around):
            b.poly([centre, ring(x, r, i), ring(x, r, i + 1)])
    return b.mesh()


def _shaft_mesh(d: dict, breaker: float) -> Mesh:
    half = d["length"] / 2.0
    shoulder = d["shoulder"]
    shift = d["asymmetry_gain"] * breaker
    segs = [(-half, -shoulder, d["end_r"]),
            (-shoulder, shoulder - shift, d["main_r"]),
            (shoulder - shift, half, d["end_r"])]
    return _revolved_x(segs)


def _tube(cx, cy, r_in, r_out, z0, z1, n=32) -> Mesh:
    radii = np.stack([np.full(n, r_in), np.full(n, r_out)])
    return polar_heightfield(radii, np.full((1, n), z1), base=z0, offset=(cx, cy))


def _peg(cx, cy, r, z0, z1, n=32) -> Mesh:
    radii = np.stack([np.zeros(n), np.full(n, r)])
    return polar_heightfield(radii, np.full((1, n), z1), base=z0, offset=(cx, cy))


def _base_plate_mesh(d: dict) -> Mesh:
    hx, hy, t = d["length"] / 2, d["width"] / 2, d["thickness"]
    parts = [box(-hx, hx, -hy, hy, 0.0, t)]
    for key in ("sleeve_a", "sleeve_b"):
        cx, cy, r_in, r_out, top = d[key]
        parts.append(_tube(cx, cy, r_in, r_out, t, top))
    cx, cy, r, top = d["peg"]
    parts.append(_peg(cx, cy, r, t, top))
    x0, x1, y0, y1, top = d["block"]
    parts.append(box(x0, x1, y0, y1, t, top))
    return Mesh.concatenate(parts)


# Dimensions in meters. Gears 50-90 mm across, shafts 8-10 mm thick,
# every insertion has R - r = 0.5 mm (search spacing d = 2(R - r) = 1 mm).
DEFAULT_DIMENSIONS: dict[PartClass, dict] = {
    PartClass.BASE_PLATE: {
        "length": 0.180, "width": 0.130, "thickness": 0.010,
        "sleeve_a": [-0.040, 0.020, 0.0040, 0.0090, 0.022],
        "sleeve_b": [0.030, -0.025, 0.0035, 0.0080, 0.020],
        "peg": [0.050, 0.035, 0.0040, 0.030],
        "block": [-0.080, -0.060, -0.055, -0.040, 0.018],
    },
    PartClass.SHAFT_1: {"length": 0.060, "shoulder": 0.018, "main_r": 0.005, "end_r": 0.0035,
                        "asymmetry_gain": 5.0},
    PartClass.SHAFT_2: {"length": 0.048, "shoulder": 0.014, "main_r": 0.004, "end_r": 0.003,
                        "asymmetry_gain": 5.0},
    PartClass.COMPOUND_GEAR: {"teeth_big": 24, "teeth_small": 12, "bore_r": 0.0055,
                              "small_root_r": 0.019, "small_tip_r": 0.022,
                              "big_root_r": 0.041, "big_tip_r": 0.045,
                              "big_thickness": 0.010, "small_top": 0.022},
    PartClass.GEAR_1: {"teeth": 20, "bore_r": 0.0045, "hub_r": 0.010, "hub_h": 0.016,
                       "window_r_in": 0.014, "window_r_out": 0.022, "windows": 4,
                       "window_center_deg": 45.0, "window_width_deg": 36.0,
                       "root_r": 0.031, "tip_r": 0.035, "thickness": 0.012},
    PartClass.GEAR_2: {"teeth": 16, "bore_r": 0.0045, "hub_r": 0.008, "hub_h": 0.016,
                       "window_r_in": 0.0105, "window_r_out": 0.017, "windows": 4,
                       "window_center_deg": 45.0, "window_width_deg": 45.0,
                       "root_r": 0.022, "tip_r": 0.025, "thickness": 0.012},
}

# (true symmetry order n, near-symmetry subclass count k)
SYMMETRY = {
    PartClass.BASE_PLATE: (1, 1),
    PartClass.SHAFT_1: (1, 2),
    PartClass.SHAFT_2: (1, 2),
    PartClass.COMPOUND_GEAR: (12, 1),
    PartClass.GEAR_1: (1, 4),
    PartClass.GEAR_2: (4, 1),
}


def generate_mesh(class_id, asymmetry_scale: float = DEFAULT_ASYMMETRY, dims: dict | None = None) -> Mesh:
    """Procedural stand-in for a part's CAD model, in the part frame.

    The part frame origin lies on the table under the part's rotation axis.
    Near-symmetric parts get a symmetry-breaking feature scaled by
    ``asymmetry_scale``; at zero they are exactly symmetric.
    """
    cls = part_class(class_id)
    if asymmetry_scale < 0:
        raise ValueError("asymmetry_scale must be non-negative")
    d = dict(DEFAULT_DIMENSIONS[cls])
    if dims:
        d.update(dims)
    if cls is PartClass.BASE_PLATE:
        return _base_plate_mesh(d)
    if cls in (PartClass.SHAFT_1, PartClass.SHAFT_2):
        return _shaft_mesh(d, asymmetry_scale)
    if cls is PartClass.COMPOUND_GEAR:
        return _compound_gear_mesh(d)
    if cls is PartClass.GEAR_1:
        return _gear_mesh(d, breaker=asymmetry_scale)
    return _gear_mesh(d)


# --------------------------------------------------------------------------
# Catalog


_GRIPPER_DOWN = np.diag([1.0, -1.0, -1.0])
_UPRIGHT = np.array([[0.0, 0.0, -1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])  # part x -> world z


@dataclass(frozen=True, eq=False)
class PartSpec:
    class_id: PartClass
    symmetry_order: int
    subclass_count: int
    bounding_radius: float
    mesh: Mesh
    grasp_in_part: RigidTransform
    target_in_plate: RigidTransform
    insertion: InsertionSpec | None = None
    asymmetry_scale: float = DEFAULT_ASYMMETRY
    dims: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.symmetry_order < 1 or self.subclass_count < 1:
            raise ValueError("symmetry order and subclass count must be >= 1")
        if not self.bounding_radius > 0:
            raise ValueError("bounding radius must be positive")

    @property
    def name(self) -> str:
        return self.class_id.value

    @property
    def effective_order(self) -> int:
        """Order treated as symmetric in stage 1 (near-symmetries folded in)."""
        return self.symmetry_order * self.subclass_count

    @property
    def angular_domain(self) -> float:
        return 360.0 / self.effective_order

    @property
    def symmetry_domain(self) -> float:
        return 360.0 / self.symmetry_order

    @property
    def top_height(self) -> float:
        return float(self.mesh.vertices[:, 2].max())

    def fixed_bbox_size(self, capture_height: float, k: CameraIntrinsics) -> tuple[float, float]:
        """Orientation-independent box: bounding diameter projected at the table."""
        return (2.0 * self.bounding_radius * k.fx / capture_height,
                2.0 * self.bounding_radius * k.fy / capture_height)


def _default_relations(cls: PartClass, d: dict, plate: dict):
    """Grasp (end-effector in part frame), placement target (part in plate frame), insertion."""
    t = plate["thickness"]
    if cls is PartClass.BASE_PLATE:
        return RigidTransform(_GRIPPER_DOWN, [0.0, 0.0, t + 0.05]), RigidTransform.identity(), None
    if cls in (PartClass.SHAFT_1, PartClass.SHAFT_2):
        sleeve = plate["sleeve_a" if cls is PartClass.SHAFT_1 else "sleeve_b"]
        grasp = RigidTransform(_GRIPPER_DOWN, [0.0, 0.0, 2.0 * d["main_r"]])
        # upright, thin end down into the sleeve bore
        target = RigidTransform(_UPRIGHT, [sleeve[0], sleeve[1], t + d["length"] / 2.0 + d["main_r"]])
        return grasp, target, InsertionSpec(R=sleeve[2], r=d["end_r"])
    if cls is PartClass.COMPOUND_GEAR:
        sa = plate["sleeve_a"]
        grasp = RigidTransform(_GRIPPER_DOWN, [0.0, 0.0, d["small_top"]])
        target = RigidTransform.from_translation(sa[0], sa[1], sa[4] + 0.002)
        return grasp, target, InsertionSpec(R=d["bore_r"], r=DEFAULT_DIMENSIONS[PartClass.SHAFT_1]["main_r"])
    if cls is PartClass.GEAR_1:
        peg = plate["peg"]
        grasp = RigidTransform(_GRIPPER_DOWN, [0.0, 0.0, d["hub_h"]])
        target = RigidTransform.from_translation(peg[0], peg[1], t)
        return grasp, target, InsertionSpec(R=d["bore_r"], r=peg[2])
    sb = plate["sleeve_b"]
    grasp = RigidTransform(_GRIPPER_DOWN, [0.0, 0.0, d["hub_h"]])
    target = RigidTransform.from_translation(sb[0], sb[1], sb[4] + 0.002)
    return grasp, target, InsertionSpec(R=d["bore_r"], r=DEFAULT_DIMENSIONS[PartClass.SHAFT_2]["main_r"])


def make_part(class_id, asymmetry_scale: float = DEFAULT_ASYMMETRY, dims: dict | None = None,
              grasp_in_part: RigidTransform | None = None,
              target_in_plate: RigidTransform | None = None,
              insertion: InsertionSpec | None = None,
              mesh: Mesh | None = None,
              plate_dims: dict | None = None) -> PartSpec:
    cls = part_class(class_id)
    d = dict(DEFAULT_DIMENSIONS[cls])
    if dims:
        d.update(dims)
    plate = dict(DEFAULT_DIMENSIONS[PartClass.BASE_PLATE])
    if plate_dims:
        plate.update(plate_dims)
    if mesh is None:
        mesh = generate_mesh(cls, asymmetry_scale, d)
    grasp, target, ins = _default_relations(cls, d, plate)
    n, k = SYMMETRY[cls]
    radius = float(np.max(np.hypot(mesh.vertices[:, 0], mesh.vertices[:, 1])))
    return PartSpec(
        class_id=cls, symmetry_order=n, subclass_count=k, bounding_radius=radius, mesh=mesh,
        grasp_in_part=grasp_in_part or grasp, target_in_plate=target_in_plate or target,
        insertion=insertion or ins, asymmetry_scale=asymmetry_scale, dims=d,
    )


def builtin_catalog(asymmetry_scale: float = DEFAULT_ASYMMETRY, overrides: dict | None = None) -> list[PartSpec]:
    """The six parts in canonical order, optionally overridden per class.

    ``overrides`` maps a class name to a dict that may contain ``dims``
    (dimension updates), ``asymmetry_scale``, ``insertion`` (``{"R": .., "r": ..}``),
    ``grasp_in_part`` / ``target_in_plate`` (12 row-major numbers) and ``stl``
    (a path to a mesh file replacing the procedural one).
    """
    overrides = {part_class(k): v for k, v in (overrides or {}).items()}
    plate_dims = (overrides.get(PartClass.BASE_PLATE) or {}).get("dims")
    parts = []
    for cls in CLASS_ORDER:
        o = overrides.get(cls, {})
        ins = o.get("insertion")
        mesh = None
        if "stl" in o:
            with open(o["stl"], "rb") as fh:
                mesh = load_stl(fh.read())
            if "stl_scale" in o:
                mesh = Mesh(mesh.vertices * float(o["stl_scale"]), mesh.triangles)
        parts.append(make_part(
            cls,
            asymmetry_scale=float(o.get("asymmetry_scale", asymmetry_scale)),
            dims=o.get("dims"),
            grasp_in_part=RigidTransform.from_row_major(o["grasp_in_part"]) if "grasp_in_part" in o else None,
            target_in_plate=RigidTransform.from_row_major(o["target_in_plate"]) if "target_in_plate" in o else None,
            insertion=InsertionSpec(R=float(ins["R"]), r=float(ins["r"])) if ins else None,
            mesh=mesh,
            plate_dims=plate_dims,
        ))
    return parts


def catalog_by_class(parts) -> dict[PartClass, PartSpec]:
    return {p.class_id: p for p in parts}


def with_asymmetry(part: PartSpec, asymmetry_scale: float) -> PartSpec:
    mesh = generate_mesh(part.class_id, asymmetry_scale, part.dims)
    return replace(part, mesh=mesh, asymmetry_scale=asymmetry_scale)


# --------------------------------------------------------------------------
# STL


class STLError(ValueError):
    pass


class TruncatedSTLError(STLError):
    pass


class MalformedSTLError(STLError):
    pass


class EmptyMeshError(STLError):
    pass


_FLOAT = r"([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?|[-+]?(?:inf|nan))"
_FACET = re.compile(
    r"facet\s+normal\s+" + r"\s+".join([_FLOAT] * 3) + r"\s+outer\s+loop\s+"
    + r"\s+".join(["vertex\\s+" + r"\s+".join([_FLOAT] * 3)] * 3)
    + r"\s+endloop\s+endfacet",
    re.IGNORECASE,
)
_TRI_RECORD = struct.Struct("<12fH")


def _looks_binary(data: bytes) -> bool:
    if len(data) >= 84:
        count = struct.unpack_from("<I", data, 80)[0]
        if len(data) == 84 + 50 * count:
            return True
    return not data.lstrip()[:5].lower() == b"solid"


def _parse_binary(data: bytes) -> Mesh:
    if len(data) < 84:
        raise TruncatedSTLError(f"binary STL shorter than its 84-byte header ({len(data)} bytes)")
    count = struct.unpack_from("<I", data, 80)[0]
    available = (len(data) - 84) // 50
    if count > available:
        raise TruncatedSTLError(f"header declares {count} triangles but only {available} records present")
    if count == 0:
        raise EmptyMeshError("STL contains no triangles")
    rec = np.frombuffer(data, dtype=np.dtype([("n", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")]),
                        count=count, offset=84)
    verts = rec["v"].astype(np.float64).reshape(-1, 3)
    return Mesh(verts, np.arange(3 * count, dtype=np.int64).reshape(-1, 3))


def _parse_ascii(text: str) -> Mesh:
    body = text.strip()
    first_nl = body.find("\n")
    header_end = first_nl if first_nl >= 0 else len(body)
    rest = body[header_end:]
    end = re.search(r"endsolid", rest, re.IGNORECASE)
    if end is None:
        raise MalformedSTLError("ASCII STL has no 'endsolid'")
    rest = rest[:end.start()]
    verts = []
    pos = 0
    while True:
        m = re.compile(r"\S").search(rest, pos)
        if m is None:
            break
        fm = _FACET.match(rest, m.start())
        if fm is None:
            line = body[:header_end + m.start()].count("\n") + 1
            snippet = rest[m.start():m.start() + 40].split("\n")[0]
            raise MalformedSTLError(f"malformed facet at line {line}: {snippet!r}")
        vals = [float(x) for x in fm.groups()]
        verts.extend([vals[3:6], vals[6:9], vals[9:12]])
        pos = fm.end()
    if not verts:
        raise EmptyMeshError("STL contains no triangles")
    count = len(verts) // 3
    return Mesh(np.array(verts, dtype=np.float64), np.arange(3 * count, dtype=np.int64).reshape(-1, 3))


def load_stl(data: bytes) -> Mesh:
    """Parse an ASCII or binary STL into a triangle soup (one vertex per corner)."""
    if _looks_binary(data):
        return _parse_binary(data)
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError:
        raise MalformedSTLError("file starts with 'solid' but is not ASCII") from None
    return _parse_ascii(text)


def _facet_normals(c: np.ndarray) -> np.ndarray:
    n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)


def serialize_stl(mesh: Mesh, header: bytes = b"assembly_pose") -> bytes:
    """Binary STL (32-bit little-endian floats)."""
    c = mesh.corners()
    normals = _facet_normals(c)
    out = bytearray(header[:80].ljust(80, b"\0"))
    out += struct.pack("<I", len(c))
    for n, tri in zip(normals, c):
        out += _TRI_RECORD.pack(*n, *tri.ravel(), 0)
    return bytes(out)


def serialize_stl_ascii(mesh: Mesh, name: str = "part") -> str:
    lines = [f"solid {name}"]
    c = mesh.corners()
    for n, tri in zip(_facet_normals(c), c):
        lines.append(f"  facet normal {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}")
        lines.append("    outer loop")
        for v in tri:
            lines.append(f"      vertex {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
        lines.append("    endloop")
        lines.append("  endfacet")
    lines.append(f"endsolid {name}")
    return "\n".join(lines) + "\n"
