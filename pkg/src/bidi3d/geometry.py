"""Analytic signed-distance scenes: primitives, CSG composition, grid baking,
trilinear sampling and marching-cubes surface extraction.

World coordinates live in the axis-aligned cube [-1, 1]^3.  A baked grid of
side N places lattice vertex i at -1 + 2i/(N-1) per axis and stores values in
a flat array with index x + N*(y + N*z), x fastest.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from ._mc_tables import CORNER_OFFSETS, EDGE_CORNERS, EDGE_TABLE, TRI_TABLE

SHAPE_KINDS = ("sphere", "box", "torus", "capsule")
CSG_OPS = ("union", "intersection", "difference")

MIN_GRID_N = 8


class SceneError(ValueError):
    """Raised for malformed scene descriptions or invalid grid parameters."""


@dataclass(frozen=True)
class AnalyticShape:
    """One rigid-transformed primitive.

    ``rotate_deg`` is an XYZ Euler triple in degrees (x applied first), and
    ``translate`` is applied after rotation.  Size fields are interpreted per
    kind: sphere uses ``radius``; box uses ``half_extents``; torus uses
    ``major_radius`` (ring, in the local xy plane) and ``radius`` (tube);
    capsule uses ``half_length`` (along local z) and ``radius``.
    """

    kind: str
    radius: float = 0.5
    half_extents: tuple[float, float, float] = (0.5, 0.5, 0.5)
    major_radius: float = 0.5
    half_length: float = 0.5
    rotate_deg: tuple[float, float, float] = (0.0, 0.0, 0.0)
    translate: tuple[float, float, float] = (0.0, 0.0, 0.0)
    color_label: int = 0


@dataclass(frozen=True)
class CsgNode:
    """CSG tree node: a part leaf or an operator over child nodes."""

    op: str  # 'part' | 'union' | 'intersection' | 'difference'
    part: int = -1
    children: tuple["CsgNode", ...] = ()


@dataclass(frozen=True)
class SceneSpec:
    parts: tuple[AnalyticShape, ...]
    csg: CsgNode | None = None  # None means union of all parts
    palette: dict[int, tuple[float, float, float]] = field(default_factory=dict)
    name: str = "scene"


@dataclass
class SdfGrid:
    """Baked signed-distance grid over [-1, 1]^3; ``values`` is flat float32."""

    n: int
    values: np.ndarray

    def as_xyz(self) -> np.ndarray:
        """View of values as an (n, n, n) array indexed [x, y, z]."""
        return self.values.reshape((self.n, self.n, self.n), order="F")


@dataclass
class TriMesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64


def lattice_coords(n: int) -> np.ndarray:
    """Per-axis world coordinates of an n-point lattice spanning [-1, 1]."""
    return -1.0 + 2.0 * np.arange(n) / (n - 1)


def grid_spacing(n: int) -> float:
    return 2.0 / (n - 1)


def rotation_matrix(rotate_deg) -> np.ndarray:
    """World-from-local rotation for XYZ Euler angles in degrees."""
    rx, ry, rz = (math.radians(a) for a in rotate_deg)
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return mz @ my @ mx


def _sdf_sphere(p: np.ndarray, radius: float) -> np.ndarray:
    return np.linalg.norm(p, axis=-1) - radius


def _sdf_box(p: np.ndarray, half_extents) -> np.ndarray:
    q = np.abs(p) - np.asarray(half_extents)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside


def _sdf_torus(p: np.ndarray, major_radius: float, radius: float) -> np.ndarray:
    ring = np.hypot(p[..., 0], p[..., 1]) - major_radius
    return np.hypot(ring, p[..., 2]) - radius


def _sdf_capsule(p: np.ndarray, half_length: float, radius: float) -> np.ndarray:
    z = np.clip(p[..., 2], -half_length, half_length)
    d = p.copy()
    d[..., 2] -= z
    return np.linalg.norm(d, axis=-1) - radius


def shape_sdf(shape: AnalyticShape, points: np.ndarray) -> np.ndarray:
    """Exact signed distance of one shape at ``points`` (..., 3)."""
    p = np.asarray(points, dtype=np.float64)
    rot = rotation_matrix(shape.rotate_deg)
    local = (p - np.asarray(shape.translate)) @ rot  # rot.T applied from the left
    if shape.kind == "sphere":
        return _sdf_sphere(local, shape.radius)
    if shape.kind == "box":
        return _sdf_box(local, shape.half_extents)
    if shape.kind == "torus":
        return _sdf_torus(local, shape.major_radius, shape.radius)
    if shape.kind == "capsule":
        return _sdf_capsule(local, shape.half_length, shape.radius)
    raise SceneError(f"unknown primitive kind {shape.kind!r}")


def _default_csg(n_parts: int) -> CsgNode:
    leaves = tuple(CsgNode("part", part=i) for i in range(n_parts))
    if n_parts == 1:
        return leaves[0]
    return CsgNode("union", children=leaves)


def _eval_node(node: CsgNode, parts, points) -> np.ndarray:
    if node.op == "part":
        return shape_sdf(parts[node.part], points)
    vals = [_eval_node(c, parts, points) for c in node.children]
    if node.op == "union":
        return np.minimum.reduce(vals)
    if node.op == "intersection":
        return np.maximum.reduce(vals)
    if node.op == "difference":
        return np.maximum(vals[0], -vals[1])
    raise SceneError(f"unknown CSG op {node.op!r}")


def eval_sdf(scene: SceneSpec, points: np.ndarray) -> np.ndarray:
    """Composite scene SDF at arbitrary points (..., 3).

    Union/intersection/difference lower to min/max/max(a, -b), so the result
    is an exact distance for single primitives and a conservative bound for
    composites.
    """
    if not scene.parts:
        raise SceneError("scene has no parts")
    node = scene.csg if scene.csg is not None else _default_csg(len(scene.parts))
    return _eval_node(node, scene.parts, np.asarray(points, dtype=np.float64))


def lattice_points(n: int) -> np.ndarray:
    """All n^3 lattice positions, flattened x-fastest to match grid layout."""
    c = lattice_coords(n)
    xs, ys, zs = np.meshgrid(c, c, c, indexing="ij")
    return np.stack(
        [xs.ravel(order="F"), ys.ravel(order="F"), zs.ravel(order="F")], axis=-1
    )


def bake_grid(scene: SceneSpec, n: int) -> SdfGrid:
    """Sample the scene SDF on the n^3 lattice (x-fastest flat layout)."""
    if n < MIN_GRID_N:
        raise SceneError(f"grid side {n} below minimum {MIN_GRID_N}")
    vals = eval_sdf(scene, lattice_points(n))
    return SdfGrid(n=n, values=vals.astype(np.float32))


def bake_color_grid(scene: SceneSpec, n: int) -> np.ndarray:
    """Per-voxel RGB from the palette of the nearest part, flat (n^3, 3)."""
    if n < MIN_GRID_N:
        raise SceneError(f"grid side {n} below minimum {MIN_GRID_N}")
    pts = lattice_points(n)
    dists = np.stack([shape_sdf(s, pts) for s in scene.parts], axis=0)
    nearest = np.argmin(dists, axis=0)
    colors = np.array(
        [scene.palette.get(s.color_label, (0.7, 0.7, 0.7)) for s in scene.parts],
        dtype=np.float32,
    )
    return colors[nearest]


def sample_trilinear(grid_values: np.ndarray, n: int, points: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of a flat x-fastest grid at world points.

    Queries outside [-1, 1]^3 clamp to the boundary value.  ``grid_values``
    may be (n^3,) or (n^3, C); the result matches points' leading shape.
    """
    p = np.asarray(points, dtype=np.float64)
    u = (p + 1.0) * ((n - 1) / 2.0)
    u = np.clip(u, 0.0, n - 1.0)
    i0 = np.minimum(np.floor(u).astype(np.int64), n - 2)
    f = u - i0
    i1 = i0 + 1

    vals = grid_values.reshape(n * n * n, -1)
    nc = vals.shape[1]

    def flat(ix, iy, iz):
        return ix + n * (iy + n * iz)

    out = np.zeros(p.shape[:-1] + (nc,), dtype=np.float64)
    for dx in (0, 1):
        wx = f[..., 0] if dx else 1.0 - f[..., 0]
        ix = i1[..., 0] if dx else i0[..., 0]
        for dy in (0, 1):
            wy = f[..., 1] if dy else 1.0 - f[..., 1]
            iy = i1[..., 1] if dy else i0[..., 1]
            for dz in (0, 1):
                wz = f[..., 2] if dz else 1.0 - f[..., 2]
                iz = i1[..., 2] if dz else i0[..., 2]
                w = (wx * wy * wz)[..., None]
                out += w * vals[flat(ix, iy, iz)]
    if grid_values.ndim == 1:
        return out[..., 0]
    return out


def sample_grid(grid: SdfGrid, points: np.ndarray) -> np.ndarray:
    return sample_trilinear(grid.values, grid.n, points)


# derived per-edge constants: lattice offset of the low corner and the axis
_EDGE_BASE = np.minimum(
    CORNER_OFFSETS[EDGE_CORNERS[:, 0]], CORNER_OFFSETS[EDGE_CORNERS[:, 1]]
)
_EDGE_AXIS = np.argmax(
    np.abs(CORNER_OFFSETS[EDGE_CORNERS[:, 0]] - CORNER_OFFSETS[EDGE_CORNERS[:, 1]]),
    axis=1,
)


def extract_mesh(grid: SdfGrid, iso: float = 0.0) -> TriMesh:
    """Marching-cubes triangle mesh of the iso level set.

    Corners with value exactly equal to ``iso`` count as inside.  Vertices are
    placed on lattice edges by linear interpolation and shared between
    adjacent cubes; exact zero-area triangles are dropped.
    """
    n = grid.n
    vals = grid.as_xyz().astype(np.float64)
    inside = vals <= iso

    cube_index = np.zeros((n - 1, n - 1, n - 1), dtype=np.int32)
    for bit, (ox, oy, oz) in enumerate(CORNER_OFFSETS):
        sl = inside[ox : n - 1 + ox, oy : n - 1 + oy, oz : n - 1 + oz]
        cube_index |= sl.astype(np.int32) << bit

    flags = EDGE_TABLE[cube_index]
    cx, cy, cz = np.nonzero(flags != 0)
    if cx.size == 0:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    cidx = cube_index[cx, cy, cz]
    cflags = flags[cx, cy, cz]
    m = cx.size

    spacing = grid_spacing(n)
    vert_ids = np.full((m, 12), -1, dtype=np.int64)
    keys, positions, slots = [], [], []
    for e in range(12):
        sel = np.nonzero((cflags >> e) & 1)[0]
        if sel.size == 0:
            continue
        ca, cb = EDGE_CORNERS[e]
        ax_, ay, az = CORNER_OFFSETS[ca]
        bx, by, bz = CORNER_OFFSETS[cb]
        va = vals[cx[sel] + ax_, cy[sel] + ay, cz[sel] + az]
        vb = vals[cx[sel] + bx, cy[sel] + by, cz[sel] + bz]
        t = (iso - va) / (vb - va)
        base = np.stack(
            [cx[sel] + _EDGE_BASE[e, 0], cy[sel] + _EDGE_BASE[e, 1], cz[sel] + _EDGE_BASE[e, 2]],
            axis=-1,
        )
        pos = -1.0 + base * spacing
        axis = _EDGE_AXIS[e]
        # interpolate along the edge axis; sign follows corner order on the axis
        lo_is_a = CORNER_OFFSETS[ca, axis] <= CORNER_OFFSETS[cb, axis]
        frac = t if lo_is_a else 1.0 - t
        pos[:, axis] += frac * spacing
        key = ((base[:, 0] * n + base[:, 1]) * n + base[:, 2]) * 3 + axis
        keys.append(key)
        positions.append(pos)
        slots.append((sel, e))

    all_keys = np.concatenate(keys)
    all_pos = np.concatenate(positions, axis=0)
    uniq, first, inverse = np.unique(all_keys, return_index=True, return_inverse=True)
    vertices = all_pos[first]
    offset = 0
    for (sel, e), k in zip(slots, keys):
        vert_ids[sel, e] = inverse[offset : offset + k.size]
        offset += k.size

    tri_rows = TRI_TABLE[cidx][:, :15].reshape(m, 5, 3)
    valid = tri_rows[:, :, 0] >= 0
    cube_of_tri = np.repeat(np.arange(m), 5)[valid.ravel()]
    edge_triples = tri_rows[valid]
    faces = vert_ids[cube_of_tri[:, None], edge_triples]

    a = vertices[faces[:, 1]] - vertices[faces[:, 0]]
    b = vertices[faces[:, 2]] - vertices[faces[:, 0]]
    area2 = np.linalg.norm(np.cross(a, b), axis=-1)
    distinct = (
        (faces[:, 0] != faces[:, 1])
        & (faces[:, 1] != faces[:, 2])
        & (faces[:, 0] != faces[:, 2])
    )
    faces = faces[distinct & (area2 > 1e-18)]
    return TriMesh(vertices=vertices, faces=faces)


def mesh_area(mesh: TriMesh) -> float:
    if mesh.faces.shape[0] == 0:
        return 0.0
    a = mesh.vertices[mesh.faces[:, 1]] - mesh.vertices[mesh.faces[:, 0]]
    b = mesh.vertices[mesh.faces[:, 2]] - mesh.vertices[mesh.faces[:, 0]]
    return float(0.5 * np.linalg.norm(np.cross(a, b), axis=-1).sum())


def validate_scene(scene: SceneSpec) -> None:
    """Raise SceneError unless the scene is well formed and fits the domain."""
    if not scene.parts:
        raise SceneError("scene has no parts")
    for i, s in enumerate(scene.parts):
        if s.kind not in SHAPE_KINDS:
            raise SceneError(f"part {i}: unknown kind {s.kind!r}")
        sizes = [s.radius]
        if s.kind == "box":
            sizes = list(s.half_extents)
        if any(v <= 0 for v in sizes):
            raise SceneError(f"part {i}: non-positive size")
    for label, rgb in scene.palette.items():
        if len(rgb) != 3 or any(not (0.0 <= v <= 1.0) for v in rgb):
            raise SceneError(f"palette entry {label} outside [0, 1]")
    if scene.csg is not None:
        _validate_csg(scene.csg, len(scene.parts))
    # fit check by baking: the boundary shell of a coarse lattice must stay
    # strictly outside every part
    n = 16
    vals = eval_sdf(scene, lattice_points(n)).reshape((n, n, n), order="F")
    boundary = np.ones((n, n, n), dtype=bool)
    boundary[1:-1, 1:-1, 1:-1] = False
    if np.any(vals[boundary] <= 0.0):
        raise SceneError("scene touches the domain boundary [-1, 1]^3")


def _validate_csg(node: CsgNode, n_parts: int) -> None:
    if node.op == "part":
        if not (0 <= node.part < n_parts):
            raise SceneError(f"CSG references unknown part {node.part}")
        return
    if node.op not in CSG_OPS:
        raise SceneError(f"unknown CSG op {node.op!r}")
    if node.op == "difference" and len(node.children) != 2:
        raise SceneError("difference takes exactly two operands")
    if not node.children:
        raise SceneError(f"{node.op} needs at least one operand")
    for c in node.children:
        _validate_csg(c, n_parts)


# --- plain-text scene files -------------------------------------------------
#
# key=value lines, '#' comments.  Parts are numbered part.<i>.<field>; vector
# values are whitespace separated.  Example:
#
#   name = ball
#   palette.0 = 0.8 0.3 0.2
#   part.0.kind = sphere
#   part.0.radius = 0.5
#   part.0.color = 0
#   csg = union(0)


def _parse_csg_expr(text: str) -> CsgNode:
    pos = 0

    def skip_ws():
        nonlocal pos
        while pos < len(text) and text[pos].isspace():
            pos += 1

    def parse() -> CsgNode:
        nonlocal pos
        skip_ws()
        m = re.match(r"\d+", text[pos:])
        if m:
            pos += m.end()
            return CsgNode("part", part=int(m.group()))
        m = re.match(r"[a-z]+", text[pos:])
        if not m or m.group() not in CSG_OPS:
            raise SceneError(f"bad CSG expression near {text[pos:pos+20]!r}")
        op = m.group()
        pos += m.end()
        skip_ws()
        if pos >= len(text) or text[pos] != "(":
            raise SceneError(f"expected '(' after {op}")
        pos += 1
        children = [parse()]
        skip_ws()
        while pos < len(text) and text[pos] == ",":
            pos += 1
            children.append(parse())
            skip_ws()
        if pos >= len(text) or text[pos] != ")":
            raise SceneError("unbalanced CSG parentheses")
        pos += 1
        return CsgNode(op, children=tuple(children))

    node = parse()
    skip_ws()
    if pos != len(text):
        raise SceneError(f"trailing CSG text {text[pos:]!r}")
    return node


def _format_csg(node: CsgNode) -> str:
    if node.op == "part":
        return str(node.part)
    return f"{node.op}({', '.join(_format_csg(c) for c in node.children)})"


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split())


def parse_scene_text(text: str) -> SceneSpec:
    from .config import parse_kv_text  # local import to avoid a cycle

    kv = parse_kv_text(text)
    name = kv.pop("name", "scene")
    palette: dict[int, tuple[float, float, float]] = {}
    part_fields: dict[int, dict[str, str]] = {}
    csg_text = kv.pop("csg", None)
    for key, value in kv.items():
        if key.startswith("palette."):
            label = int(key.split(".", 1)[1])
            rgb = _floats(value)
            if len(rgb) != 3:
                raise SceneError(f"palette.{label} needs three components")
            palette[label] = rgb
        elif key.startswith("part."):
            bits = key.split(".")
            if len(bits) != 3:
                raise SceneError(f"bad part key {key!r}")
            part_fields.setdefault(int(bits[1]), {})[bits[2]] = value
        else:
            raise SceneError(f"unknown scene key {key!r}")
    if not part_fields:
        raise SceneError("scene has no parts")
    indices = sorted(part_fields)
    if indices != list(range(len(indices))):
        raise SceneError(f"part indices must be 0..{len(indices)-1}, got {indices}")
    parts = []
    for i in indices:
        f = part_fields[i]
        try:
            kind = f.pop("kind")
        except KeyError:
            raise SceneError(f"part.{i} missing kind") from None
        shape = AnalyticShape(
            kind=kind,
            radius=float(f.pop("radius", 0.5)),
            half_extents=_floats(f.pop("half_extents", "0.5 0.5 0.5")),
            major_radius=float(f.pop("major_radius", 0.5)),
            half_length=float(f.pop("half_length", 0.5)),
            rotate_deg=_floats(f.pop("rotate", "0 0 0")),
            translate=_floats(f.pop("translate", "0 0 0")),
            color_label=int(f.pop("color", 0)),
        )
        if f:
            raise SceneError(f"part.{i} has unknown fields {sorted(f)}")
        parts.append(shape)
    csg = _parse_csg_expr(csg_text) if csg_text else None
    scene = SceneSpec(parts=tuple(parts), csg=csg, palette=palette, name=name)
    validate_scene(scene)
    return scene


def format_scene_text(scene: SceneSpec) -> str:
    lines = [f"name = {scene.name}"]
    for label in sorted(scene.palette):
        rgb = scene.palette[label]
        lines.append(f"palette.{label} = {rgb[0]:.17g} {rgb[1]:.17g} {rgb[2]:.17g}")
    for i, s in enumerate(scene.parts):
        lines.append(f"part.{i}.kind = {s.kind}")
        if s.kind in ("sphere", "torus", "capsule"):
            lines.append(f"part.{i}.radius = {s.radius:.17g}")
        if s.kind == "box":
            he = " ".join(f"{v:.17g}" for v in s.half_extents)
            lines.append(f"part.{i}.half_extents = {he}")
        if s.kind == "torus":
            lines.append(f"part.{i}.major_radius = {s.major_radius:.17g}")
        if s.kind == "capsule":
            lines.append(f"part.{i}.half_length = {s.half_length:.17g}")
        if any(s.rotate_deg):
            lines.append(f"part.{i}.rotate = " + " ".join(f"{v:.17g}" for v in s.rotate_deg))
        if any(s.translate):
            lines.append(f"part.{i}.translate = " + " ".join(f"{v:.17g}" for v in s.translate))
        lines.append(f"part.{i}.color = {s.color_label}")
    if scene.csg is not None:
        lines.append(f"csg = {_format_csg(scene.csg)}")
    return "\n".join(lines) + "\n"


def load_scene(path) -> SceneSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scene_text(fh.read())


def save_scene(path, scene: SceneSpec) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_scene_text(scene))


def builtin_scenes() -> dict[str, SceneSpec]:
    """Small library of demo scenes used by dataset generation and tests."""
    red = {0: (0.82, 0.25, 0.18)}
    blue = {0: (0.2, 0.35, 0.85)}
    sphere = SceneSpec(
        parts=(AnalyticShape("sphere", radius=0.5),), palette=red, name="sphere"
    )
    box = SceneSpec(
        parts=(AnalyticShape("box", half_extents=(0.4, 0.4, 0.4)),),
        palette=blue,
        name="box",
    )
    torus = SceneSpec(
        parts=(AnalyticShape("torus", major_radius=0.45, radius=0.18),),
        palette={0: (0.9, 0.7, 0.2)},
        name="torus",
    )
    capsule = SceneSpec(
        parts=(AnalyticShape("capsule", half_length=0.35, radius=0.22),),
        palette={0: (0.3, 0.7, 0.4)},
        name="capsule",
    )
    snowman = SceneSpec(
        parts=(
            AnalyticShape("sphere", radius=0.38, translate=(0, 0, -0.25), color_label=0),
            AnalyticShape("sphere", radius=0.26, translate=(0, 0, 0.3), color_label=1),
        ),
        csg=CsgNode(
            "union",
            children=(CsgNode("part", part=0), CsgNode("part", part=1)),
        ),
        palette={0: (0.85, 0.85, 0.9), 1: (0.75, 0.55, 0.35)},
        name="snowman",
    )
    dice = SceneSpec(
        parts=(
            AnalyticShape("box", half_extents=(0.38, 0.38, 0.38), color_label=0),
            AnalyticShape("sphere", radius=0.5, color_label=1),
        ),
        csg=CsgNode(
            "intersection",
            children=(CsgNode("part", part=0), CsgNode("part", part=1)),
        ),
        palette={0: (0.9, 0.9, 0.88), 1: (0.2, 0.2, 0.25)},
        name="dice",
    )
    shell = SceneSpec(
        parts=(
            AnalyticShape("sphere", radius=0.5, color_label=0),
            AnalyticShape("box", half_extents=(0.6, 0.6, 0.3), translate=(0, 0, 0.45), color_label=0),
        ),
        csg=CsgNode(
            "difference",
            children=(CsgNode("part", part=0), CsgNode("part", part=1)),
        ),
        palette={0: (0.55, 0.3, 0.65)},
        name="shell",
    )
    return {
        s.name: s for s in (sphere, box, torus, capsule, snowman, dice, shell)
    }
