"""Binary and text artifact formats.

Grid container ("SDFG"): magic bytes, u32 version, u32 side N, then N^3
little-endian float32 values in x-fastest order.  Version 2 inserts a u32
channel count C after N and stores C floats per voxel (voxel-major).

Images: binary PPM (P6, 8-bit) for color; binary PGM (P5, 16-bit big-endian
sample values, per the netpbm convention) for depth and transmittance, with
the linear scaling recorded in a header comment.  Meshes: OBJ with v/f lines.
"""

from __future__ import annotations

import struct

import numpy as np

from .geometry import SdfGrid, TriMesh

MAGIC = b"SDFG"


class FormatError(ValueError):
    """Raised when a file does not match its declared format."""


def write_grid_values(path, values: np.ndarray, n: int) -> None:
    """Write a grid as SDFG v1 (single channel) or v2 (C channels)."""
    values = np.asarray(values)
    flat = values.reshape(n * n * n, -1)
    channels = flat.shape[1]
    with open(path, "wb") as fh:
        if channels == 1:
            fh.write(MAGIC + struct.pack("<II", 1, n))
        else:
            fh.write(MAGIC + struct.pack("<III", 2, n, channels))
        fh.write(np.ascontiguousarray(flat, dtype="<f4").tobytes())


def read_grid_values(path):
    """Read an SDFG file; returns (values float32 (n^3,) or (n^3, C), n)."""
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) != 12 or head[:4] != MAGIC:
            raise FormatError(f"{path}: not an SDFG file")
        version, n = struct.unpack("<II", head[4:])
        if version == 1:
            channels = 1
        elif version == 2:
            channels = struct.unpack("<I", fh.read(4))[0]
        else:
            raise FormatError(f"{path}: unsupported SDFG version {version}")
        count = n * n * n * channels
        data = np.frombuffer(fh.read(4 * count), dtype="<f4")
        if data.size != count:
            raise FormatError(f"{path}: truncated payload")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes")
    vals = data.astype(np.float32)
    return (vals if channels == 1 else vals.reshape(n * n * n, channels)), n


def write_sdf_grid(path, grid: SdfGrid) -> None:
    write_grid_values(path, grid.values, grid.n)


def read_sdf_grid(path) -> SdfGrid:
    values, n = read_grid_values(path)
    if values.ndim != 1:
        raise FormatError(f"{path}: expected a single-channel grid")
    return SdfGrid(n=n, values=values)


def write_ppm(path, image: np.ndarray) -> None:
    """8-bit binary PPM from float rgb in [0, 1] (rounded)."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise FormatError("PPM wants an (H, W, 3) array")
    h, w = arr.shape[:2]
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.tobytes())


def _read_pnm_header(fh, magic: bytes):
    if fh.read(2) != magic:
        raise FormatError(f"expected {magic!r} header")
    fields = []
    while len(fields) < 3:
        line = fh.readline()
        if not line:
            raise FormatError("truncated header")
        bare = line.split(b"#", 1)[0].split()
        fields.extend(int(v) for v in bare)
    return fields[0], fields[1], fields[2]


def read_ppm(path) -> np.ndarray:
    """Float rgb in [0, 1] from an 8-bit binary PPM."""
    with open(path, "rb") as fh:
        w, h, maxval = _read_pnm_header(fh, b"P6")
        if maxval != 255:
            raise FormatError(f"{path}: only 8-bit PPM supported")
        data = np.frombuffer(fh.read(w * h * 3), dtype=np.uint8)
    if data.size != w * h * 3:
        raise FormatError(f"{path}: truncated pixels")
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def write_pgm16(path, values: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> None:
    """16-bit binary PGM of scalar values linearly mapped from [lo, hi]."""
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise FormatError("PGM wants an (H, W) array")
    h, w = arr.shape
    scaled = np.clip((arr - lo) / (hi - lo), 0.0, 1.0)
    q = np.rint(scaled * 65535.0).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n# range {lo:.17g} {hi:.17g}\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(q.tobytes())


def read_pgm16(path):
    """Returns (values in [0, 1], (lo, hi) range comment if present)."""
    lo, hi = 0.0, 1.0
    with open(path, "rb") as fh:
        head = fh.read(2)
        if head != b"P5":
            raise FormatError(f"{path}: expected P5")
        fields = []
        while len(fields) < 3:
            line = fh.readline()
            if not line:
                raise FormatError("truncated header")
            if line.startswith(b"#"):
                bits = line[1:].split()
                if len(bits) == 3 and bits[0] == b"range":
                    lo, hi = float(bits[1]), float(bits[2])
                continue
            fields.extend(int(v) for v in line.split())
        w, h, maxval = fields[:3]
        if maxval != 65535:
            raise FormatError(f"{path}: only 16-bit PGM supported")
        data = np.frombuffer(fh.read(w * h * 2), dtype=">u2")
    if data.size != w * h:
        raise FormatError(f"{path}: truncated pixels")
    return data.reshape(h, w).astype(np.float64) / 65535.0, (lo, hi)


def write_png(path, image: np.ndarray) -> None:
    """Optional PNG output (requires Pillow)."""
    from PIL import Image

    q = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path)


def write_obj(path, mesh: TriMesh) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def read_obj(path) -> TriMesh:
    verts, faces = [], []
    with open(path, "r", encoding="ascii") as fh:
        for raw in fh:
            bits = raw.split()
            if not bits:
                continue
            if bits[0] == "v":
                verts.append([float(x) for x in bits[1:4]])
            elif bits[0] == "f":
                faces.append([int(x.split("/")[0]) - 1 for x in bits[1:4]])
    return TriMesh(
        vertices=np.asarray(verts, dtype=np.float64).reshape(-1, 3),
        faces=np.asarray(faces, dtype=np.int64).reshape(-1, 3),
    )
