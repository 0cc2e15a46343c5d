"""Gaussian splat clouds: data model, binary PLY I/O, ordering, slot addressing.

A cloud is stored as one (n, 62) float32 array in file column order:
x y z | nx ny nz | f_dc_0..2 | f_rest_0..44 | opacity | scale_0..2 | rot_0..3.
Normals are carried opaquely for round-trip fidelity. The per-channel SH rest
block is channel-major: f_rest_[c*15 + j] is coefficient j of channel c,
with j 0..2 the degree-1 band, 3..7 degree 2, and 8..14 degree 3.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import ConfigError, DataError, FormatError, ParseError

PROPERTY_NAMES: tuple[str, ...] = (
    ("x", "y", "z", "nx", "ny", "nz")
    + tuple(f"f_dc_{i}" for i in range(3))
    + tuple(f"f_rest_{i}" for i in range(45))
    + ("opacity",)
    + tuple(f"scale_{i}" for i in range(3))
    + tuple(f"rot_{i}" for i in range(4))
)
N_PROPS = len(PROPERTY_NAMES)  # 62

COL_POS = slice(0, 3)
COL_NRM = slice(3, 6)
COL_DC = slice(6, 9)
COL_REST = slice(9, 54)
COL_OPACITY = 54
COL_SCALE = slice(55, 58)
COL_ROT = slice(58, 62)

# Typical field magnitudes of a splat parameter vector, used to condition
# first-layer weight inits. Order matches params59().
PARAM59_SCALE = np.concatenate(
    [
        np.full(3, 1.0),  # position
        np.full(3, 4.0),  # log-scale, centered near -4
        np.full(4, 1.0),  # quaternion
        np.full(1, 2.0),  # opacity logit
        np.full(3, 0.3),  # DC color
        np.full(45, 0.05),  # SH rest
    ]
)


@dataclass
class GaussianPoint:
    """One splat; arrays are owned copies unless taken from a cloud view."""

    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    sh_dc: np.ndarray
    sh_rest: np.ndarray

    def validate(self) -> "GaussianPoint":
        if self.sh_rest.shape != (45,):
            raise DataError(f"sh_rest must have 45 entries, got {self.sh_rest.shape}")
        for name in ("position", "scale", "rotation", "sh_dc", "sh_rest"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DataError(f"non-finite values in point field {name}")
        if not np.isfinite(self.opacity):
            raise DataError("non-finite opacity")
        return self


@dataclass
class GaussianCloud:
    """Ordered point set over a (n, 62) float32 backing array."""

    raw: np.ndarray
    source_path: str | None = None
    sort_perm: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.raw = np.ascontiguousarray(self.raw, dtype=np.float32)
        if self.raw.ndim != 2 or self.raw.shape[1] != N_PROPS:
            raise DataError(f"cloud array must be (n, {N_PROPS}), got {self.raw.shape}")
        if self.raw.shape[0] == 0:
            raise DataError("empty cloud: at least one point is required")

    @property
    def n(self) -> int:
        return self.raw.shape[0]

    @property
    def positions(self) -> np.ndarray:
        return self.raw[:, COL_POS]

    @property
    def normals(self) -> np.ndarray:
        return self.raw[:, COL_NRM]

    @property
    def sh_dc(self) -> np.ndarray:
        return self.raw[:, COL_DC]

    @property
    def sh_rest(self) -> np.ndarray:
        return self.raw[:, COL_REST]

    @property
    def opacity(self) -> np.ndarray:
        return self.raw[:, COL_OPACITY]

    @property
    def scales(self) -> np.ndarray:
        return self.raw[:, COL_SCALE]

    @property
    def rotations(self) -> np.ndarray:
        return self.raw[:, COL_ROT]

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(self.raw.copy(), self.source_path, None if self.sort_perm is None else self.sort_perm.copy())

    def point(self, i: int) -> GaussianPoint:
        row = self.raw[i]
        return GaussianPoint(
            position=row[COL_POS].copy(),
            scale=row[COL_SCALE].copy(),
            rotation=row[COL_ROT].copy(),
            opacity=float(row[COL_OPACITY]),
            sh_dc=row[COL_DC].copy(),
            sh_rest=row[COL_REST].copy(),
        )

    def params59(self) -> np.ndarray:
        """Per-point parameter vectors: position, scale, rotation, opacity, DC, rest."""
        return np.concatenate(
            [
                self.raw[:, COL_POS],
                self.raw[:, COL_SCALE],
                self.raw[:, COL_ROT],
                self.raw[:, COL_OPACITY : COL_OPACITY + 1],
                self.raw[:, COL_DC],
                self.raw[:, COL_REST],
            ],
            axis=1,
        )

    def validate(self) -> "GaussianCloud":
        if not np.all(np.isfinite(self.raw)):
            bad = int(np.flatnonzero(~np.isfinite(self.raw).all(axis=1))[0])
            raise DataError(f"non-finite values at point {bad}")
        return self


# -- PLY I/O ------------------------------------------------------------------

_END_HEADER = b"end_header\n"


def _header_bytes(count: int) -> bytes:
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {count}"]
    lines += [f"property float {name}" for name in PROPERTY_NAMES]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def read_ply(data: bytes) -> GaussianCloud:
    """Parse a binary little-endian splat PLY with the standard 62 properties."""
    idx = data.find(_END_HEADER)
    if idx < 0:
        raise ParseError("not a PLY file: no end_header found")
    lines = data[:idx].decode("ascii", errors="replace").splitlines()
    body = data[idx + len(_END_HEADER) :]
    if not lines or lines[0].strip() != "ply":
        raise ParseError("not a PLY file: missing 'ply' magic")
    fmt: str | None = None
    count: int | None = None
    props: list[tuple[str, str]] = []
    for line in lines[1:]:
        line = line.strip()
        if not line or line.startswith("comment"):
            continue
        parts = line.split()
        if parts[0] == "format":
            fmt = line
        elif parts[0] == "element":
            if parts[1] != "vertex":
                raise FormatError(f"unsupported element {parts[1]!r}; only 'vertex' clouds are handled")
            count = int(parts[2])
        elif parts[0] == "property":
            if len(parts) != 3:
                raise ParseError(f"unsupported property declaration {line!r}")
            props.append((parts[1], parts[2]))
    if fmt is None:
        raise ParseError("missing PLY format line")
    if fmt.split() != ["format", "binary_little_endian", "1.0"]:
        if "ascii" in fmt:
            raise FormatError("ASCII PLY is not supported; binary_little_endian 1.0 required")
        raise FormatError(f"unsupported PLY format line {fmt!r}")
    if count is None:
        raise ParseError("missing vertex element declaration")
    names = [name for _, name in props]
    for want in PROPERTY_NAMES:
        if want not in names:
            raise ParseError(f"missing property {want!r}")
    if names != list(PROPERTY_NAMES):
        extra = [n for n in names if n not in PROPERTY_NAMES]
        raise ParseError(f"unexpected property list (extras or misordered): {extra or names}")
    for typ, name in props:
        if typ != "float":
            raise FormatError(f"property {name!r} has type {typ!r}; all properties must be float")
    if count == 0:
        raise DataError("empty cloud: vertex count is 0")
    expected = count * N_PROPS * 4
    if len(body) != expected:
        kind = "truncated" if len(body) < expected else "oversized"
        raise DataError(f"{kind} PLY body: {len(body)} bytes, expected {expected} for {count} vertices")
    raw = np.frombuffer(body, dtype="<f4").reshape(count, N_PROPS).copy()
    return GaussianCloud(raw=raw)


def write_ply(cloud: GaussianCloud) -> bytes:
    """Serialize to binary little-endian PLY; deterministic byte output."""
    finite = np.isfinite(cloud.raw).all(axis=1)
    if not finite.all():
        raise DataError(f"non-finite field at point {int(np.flatnonzero(~finite)[0])}")
    return _header_bytes(cloud.n) + np.ascontiguousarray(cloud.raw, dtype="<f4").tobytes()


def load_cloud(path: str) -> GaussianCloud:
    with open(path, "rb") as fh:
        cloud = read_ply(fh.read())
    cloud.source_path = path
    return cloud


def save_cloud(cloud: GaussianCloud, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(write_ply(cloud))


# -- canonical ordering --------------------------------------------------------


def sort_canonical(cloud: GaussianCloud) -> tuple[GaussianCloud, np.ndarray]:
    """Sort points lexicographically by (x, y, z), stable on ties.

    Returns the sorted cloud and the permutation mapping original index to
    sorted index.
    """
    raw = cloud.raw
    order = np.lexsort((raw[:, 2], raw[:, 1], raw[:, 0]))
    perm = np.empty(cloud.n, dtype=np.intp)
    perm[order] = np.arange(cloud.n)
    out = GaussianCloud(raw[order].copy(), cloud.source_path, perm)
    return out, perm


# -- writable slot addressing ---------------------------------------------------


@dataclass(frozen=True)
class SlotSpec:
    """Which per-channel SH-rest coefficients are writable carrier slots."""

    indices: tuple[int, ...] = tuple(range(3, 15))  # degree-2 and degree-3 bands

    def __post_init__(self) -> None:
        if len(set(self.indices)) != len(self.indices):
            raise ConfigError(f"duplicate slot indices: {self.indices}")
        for idx in self.indices:
            if not 0 <= idx <= 14:
                raise ConfigError(f"slot index {idx} outside the per-channel range [0, 14]")

    @property
    def width(self) -> int:
        return 3 * len(self.indices)

    def rest_columns(self) -> np.ndarray:
        """Channel-major column offsets into the 45-wide sh_rest block."""
        return np.array([c * 15 + j for c in range(3) for j in self.indices], dtype=np.intp)

    def raw_columns(self) -> np.ndarray:
        """Column offsets into the 62-wide raw layout."""
        return COL_REST.start + self.rest_columns()


DEFAULT_SLOT_SPEC = SlotSpec()


def read_writable(point: GaussianPoint, spec: SlotSpec = DEFAULT_SLOT_SPEC) -> np.ndarray:
    return point.sh_rest[spec.rest_columns()].copy()


def write_writable(point: GaussianPoint, values: np.ndarray, spec: SlotSpec = DEFAULT_SLOT_SPEC) -> None:
    values = np.asarray(values, dtype=point.sh_rest.dtype)
    if values.shape != (spec.width,):
        raise DataError(f"expected {spec.width} slot values, got shape {values.shape}")
    point.sh_rest[spec.rest_columns()] = values


def cloud_writable(cloud: GaussianCloud, rows: np.ndarray, spec: SlotSpec = DEFAULT_SLOT_SPEC) -> np.ndarray:
    """Writable slot matrix (len(rows), w) for the given point rows."""
    return cloud.raw[np.ix_(np.asarray(rows, dtype=np.intp), spec.raw_columns())].copy()


def cloud_write_writable(
    cloud: GaussianCloud, rows: np.ndarray, values: np.ndarray, spec: SlotSpec = DEFAULT_SLOT_SPEC
) -> None:
    rows = np.asarray(rows, dtype=np.intp)
    values = np.asarray(values, dtype=np.float32)
    if values.shape != (len(rows), spec.width):
        raise DataError(f"expected slot matrix ({len(rows)}, {spec.width}), got {values.shape}")
    cloud.raw[np.ix_(rows, spec.raw_columns())] = values


# -- synthetic generation --------------------------------------------------------


def _random_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    norm[norm == 0] = 1.0
    return q / norm


def _assemble(
    rng: np.random.Generator, positions: np.ndarray
) -> GaussianCloud:
    n = positions.shape[0]
    raw = np.zeros((n, N_PROPS), dtype=np.float32)
    raw[:, COL_POS] = positions
    raw[:, COL_SCALE] = rng.normal(-4.0, 0.5, size=(n, 3))
    raw[:, COL_ROT] = _random_quaternions(rng, n)
    raw[:, COL_OPACITY] = rng.normal(2.0, 1.0, size=n)
    raw[:, COL_DC] = rng.normal(0.0, 0.3, size=(n, 3))
    raw[:, COL_REST] = rng.normal(0.0, 0.05, size=(n, 45))
    return GaussianCloud(raw)


def synth_cloud(n: int, seed: int) -> GaussianCloud:
    """Random scene-like cloud: positions uniform in [-1, 1]^3, deterministic per seed."""
    if n < 1:
        raise DataError(f"cloud size must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    positions = rng.uniform(-1.0, 1.0, size=(n, 3))
    return _assemble(rng, positions)


OBJECT_KINDS = ("sphere", "box", "helix")


def synth_object(n: int, seed: int, kind: str | None = None) -> GaussianCloud:
    """Small watermark object drawn from a library of point primitives."""
    if n < 1:
        raise DataError(f"object size must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    if kind is None:
        kind = OBJECT_KINDS[int(rng.integers(len(OBJECT_KINDS)))]
    if kind == "sphere":
        v = rng.normal(size=(n, 3))
        norm = np.linalg.norm(v, axis=1, keepdims=True)
        norm[norm == 0] = 1.0
        positions = v / norm * 0.5
    elif kind == "box":
        positions = rng.uniform(-0.5, 0.5, size=(n, 3))
        face_axis = rng.integers(3, size=n)
        face_sign = rng.choice([-0.5, 0.5], size=n)
        positions[np.arange(n), face_axis] = face_sign
    elif kind == "helix":
        t = rng.uniform(0.0, 4.0 * np.pi, size=n)
        positions = np.stack([0.4 * np.cos(t), 0.4 * np.sin(t), (t / (4.0 * np.pi) - 0.5)], axis=1)
    else:
        raise ConfigError(f"unknown object kind {kind!r}; choose from {OBJECT_KINDS}")
    positions = positions + rng.normal(0.0, 0.01, size=(n, 3))
    return _assemble(rng, positions)
