"""Watermark payload codecs.

Three modalities become injectable fixed-width patch sets:

* bits1d  — a 48-bit word replicated r times; decoding majority-votes per bit.
* feat2d  — a 4x4xC feature grid reshaped channel-major into C tokens of dim
  16, expanded x16 by four strided upsampling conv blocks (expressed as banded
  matmuls), tagged with sinusoidal position encodings; restoration predicts
  each surviving token's encoding with an MLP, snaps it to the nearest
  canonical slot, zero-fills the rest, and downsamples back.
* obj3d   — a small splat object, each point serialized to 14 attributes with
  positions normalized to the unit cube, replicated r times; decoding merges
  near-duplicate patches and averages them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import tensor as T
from .errors import DataError, ExtractionError, ParseError
from .gscloud import COL_DC, COL_OPACITY, COL_POS, COL_ROT, COL_SCALE, N_PROPS, GaussianCloud
from .nn import MLP

BIT_WIDTH = 48
FEAT_DIM = 16
OBJ_WIDTH = 14

MODALITIES = ("bits1d", "feat2d", "obj3d")

# Typical magnitudes of the 14 object-patch attributes (normalized position,
# log-scale, quaternion, opacity logit, DC color) for first-layer conditioning.
OBJ_PATCH_SCALE = np.concatenate([np.full(3, 1.0), np.full(3, 4.0), np.full(4, 1.0), [2.0], np.full(3, 0.3)])


@dataclass
class PatchSet:
    """Fixed-width patch vectors of one modality, plus bookkeeping."""

    modality: str
    patches: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.modality not in MODALITIES:
            raise DataError(f"unknown modality {self.modality!r}")
        self.patches = np.asarray(self.patches)
        if self.patches.ndim != 2 or self.patches.shape[0] < 1:
            raise DataError(f"patches must be a nonempty (k, p) matrix, got {self.patches.shape}")

    @property
    def k(self) -> int:
        return self.patches.shape[0]

    @property
    def width(self) -> int:
        return self.patches.shape[1]


# -- 1D bits -------------------------------------------------------------------


def encode_bits(bits, replicas: int) -> PatchSet:
    """Replicate a binary word into r identical 0.0/1.0 patches."""
    arr = np.asarray(bits)
    if arr.ndim != 1 or arr.size < 1:
        raise DataError(f"bits must be a nonempty vector, got shape {arr.shape}")
    if not np.all((arr == 0) | (arr == 1)):
        raise DataError("bits must be binary (0/1 values only)")
    if replicas < 1:
        raise DataError(f"replica count must be >= 1, got {replicas}")
    word = arr.astype(np.float32)
    return PatchSet("bits1d", np.tile(word, (replicas, 1)), meta={"replicas": replicas})


def decode_bits(patches: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Majority-vote bits from any nonempty patch subset; ties decode to 1.

    Returns (bits, confidence) where confidence is the vote margin / m.
    """
    arr = np.asarray(patches, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.shape[0] < 1 or arr.size == 0:
        raise ExtractionError("no patches to decode")
    m = arr.shape[0]
    ones = (arr >= 0.5).sum(axis=0)
    bits = (2 * ones >= m).astype(np.uint8)
    confidence = np.abs(2.0 * ones - m) / m
    return bits, confidence


def carrier_scramble(positions: np.ndarray, width: int = BIT_WIDTH) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic per-carrier XOR keys and bit permutations from positions.

    Scrambling replicated bit patches makes each carrier look like an
    independent uniform word (errors decorrelate, so the majority vote can
    remove them) and rotates every word bit through different head output
    positions (no position is systematically weak). Positions are float32
    and survive pruning bit-exactly, so the extractor re-derives the same
    keys and permutations.
    """
    import hashlib

    positions = np.ascontiguousarray(positions, dtype="<f4")
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise DataError(f"expected (k, 3) positions, got {positions.shape}")
    k = positions.shape[0]
    keys = np.zeros((k, width), dtype=np.uint8)
    perms = np.zeros((k, width), dtype=np.intp)
    for i, row in enumerate(positions):
        digest = hashlib.blake2b(row.tobytes(), digest_size=8, person=b"xsgs-key").digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        keys[i] = rng.integers(0, 2, width, dtype=np.uint8)
        perms[i] = rng.permutation(width)
    return keys, perms


def scramble_bit_patches(patches: np.ndarray, keys: np.ndarray, perms: np.ndarray) -> np.ndarray:
    """Per carrier i: out[i, t] = patches[i, perms[i, t]] XOR keys[i, t]."""
    arr = np.asarray(patches)
    if arr.shape != keys.shape or arr.shape != perms.shape:
        raise DataError(f"patch/key/permutation shape mismatch: {arr.shape}, {keys.shape}, {perms.shape}")
    permuted = np.take_along_axis(arr, perms, axis=1)
    return np.abs(permuted - keys.astype(arr.dtype))


def descramble_bit_values(values: np.ndarray, keys: np.ndarray, perms: np.ndarray) -> np.ndarray:
    """Invert scramble_bit_patches on soft bit values in [0, 1]."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != keys.shape or arr.shape != perms.shape:
        raise DataError(f"value/key/permutation shape mismatch: {arr.shape}, {keys.shape}, {perms.shape}")
    kf = keys.astype(np.float64)
    flipped = arr * (1.0 - kf) + (1.0 - arr) * kf
    out = np.empty_like(flipped)
    np.put_along_axis(out, perms, flipped, axis=1)
    return out


def bits_to_hex(bits: np.ndarray) -> str:
    """Pack a bit vector (MSB first) into a hex string; width must be a multiple of 4."""
    arr = np.asarray(bits).astype(np.uint8)
    if arr.size % 4 != 0:
        raise DataError(f"bit count must be a multiple of 4, got {arr.size}")
    digits = arr.reshape(-1, 4) @ np.array([8, 4, 2, 1], dtype=np.uint8)
    return "".join(f"{d:x}" for d in digits)


def hex_to_bits(text: str) -> np.ndarray:
    text = text.strip().lower().removeprefix("0x")
    if not text or any(c not in "0123456789abcdef" for c in text):
        raise DataError(f"invalid hex payload {text!r}")
    out = np.zeros(4 * len(text), dtype=np.uint8)
    for i, c in enumerate(text):
        v = int(c, 16)
        out[4 * i : 4 * i + 4] = [(v >> 3) & 1, (v >> 2) & 1, (v >> 1) & 1, v & 1]
    return out


# -- sinusoidal position encodings ----------------------------------------------


def canonical_posenc(length: int, dim: int = FEAT_DIM) -> np.ndarray:
    """Fixed sin/cos position encodings, one row per slot."""
    if dim % 2 != 0:
        raise DataError(f"encoding dim must be even, got {dim}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / dim)
    pe = np.zeros((length, dim), dtype=np.float64)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe


# -- feature-sparse codec ---------------------------------------------------------


class _UpBlock:
    """Length-doubling strided conv (kernel 4) expressed as banded matmuls."""

    def __init__(self, rng: np.random.Generator, dim: int, dtype):
        std = 1.0 / np.sqrt(2 * dim)
        self.taps = [T.Tensor(rng.normal(0.0, std, (dim, dim)).astype(dtype), requires_grad=True) for _ in range(4)]
        self.bias = T.Tensor(np.zeros((1, dim), dtype=dtype), requires_grad=True)
        self.dim = dim
        self.dtype = dtype

    def __call__(self, x: T.Tensor) -> T.Tensor:
        n = x.shape[0]
        zero = T.Tensor(np.zeros((1, self.dim), dtype=self.dtype))
        prev = T.concat([zero, T.narrow(x, 0, 0, n - 1)], axis=0)
        nxt = T.concat([T.narrow(x, 0, 1, n - 1), zero], axis=0)
        even = T.matmul(x, self.taps[1]) + T.matmul(prev, self.taps[3])
        odd = T.matmul(nxt, self.taps[0]) + T.matmul(x, self.taps[2])
        return T.reshape(T.concat([even, odd], axis=1), (2 * n, self.dim)) + self.bias

    def params(self, prefix: str) -> dict:
        out = {f"{prefix}.w{i}": w for i, w in enumerate(self.taps)}
        out[f"{prefix}.b"] = self.bias
        return out


class _DownBlock:
    """Length-halving strided conv (kernel 4) expressed as banded matmuls."""

    def __init__(self, rng: np.random.Generator, dim: int, dtype):
        std = 1.0 / np.sqrt(4 * dim)
        self.taps = [T.Tensor(rng.normal(0.0, std, (dim, dim)).astype(dtype), requires_grad=True) for _ in range(4)]
        self.bias = T.Tensor(np.zeros((1, dim), dtype=dtype), requires_grad=True)
        self.dim = dim
        self.dtype = dtype

    def __call__(self, x: T.Tensor) -> T.Tensor:
        if x.shape[0] % 2 != 0:
            raise DataError(f"downsampling needs an even token count, got {x.shape[0]}")
        half = x.shape[0] // 2
        pairs = T.reshape(x, (half, 2 * self.dim))
        evens = T.narrow(pairs, 1, 0, self.dim)
        odds = T.narrow(pairs, 1, self.dim, self.dim)
        zero = T.Tensor(np.zeros((1, self.dim), dtype=self.dtype))
        odd_prev = T.concat([zero, T.narrow(odds, 0, 0, half - 1)], axis=0)
        even_next = T.concat([T.narrow(evens, 0, 1, half - 1), zero], axis=0)
        out = (
            T.matmul(odd_prev, self.taps[0])
            + T.matmul(evens, self.taps[1])
            + T.matmul(odds, self.taps[2])
            + T.matmul(even_next, self.taps[3])
        )
        return out + self.bias

    params = _UpBlock.params


class FeatureCodec:
    """Redundancy codec mapping C tokens to 16C position-tagged patches and back."""

    def __init__(self, rng: np.random.Generator, channels: int, dtype=np.float32):
        if channels < 1:
            raise DataError(f"channel count must be >= 1, got {channels}")
        self.channels = channels
        self.length = 16 * channels
        self.dtype = dtype
        self.up_blocks = [_UpBlock(rng, FEAT_DIM, dtype) for _ in range(4)]
        self.down_blocks = [_DownBlock(rng, FEAT_DIM, dtype) for _ in range(4)]
        self.pos_mlp = MLP(rng, [FEAT_DIM, 64, 64, FEAT_DIM], dtype=dtype)
        self.refine_mlp = MLP(rng, [FEAT_DIM, 64, FEAT_DIM], dtype=dtype, zero_last=True)
        self.posenc = canonical_posenc(self.length, FEAT_DIM).astype(dtype)

    def params(self, prefix: str = "codec") -> dict:
        out: dict = {}
        for i, blk in enumerate(self.up_blocks):
            out.update(blk.params(f"{prefix}.up{i}"))
        for i, blk in enumerate(self.down_blocks):
            out.update(blk.params(f"{prefix}.down{i}"))
        out.update(self.pos_mlp.params(f"{prefix}.pos"))
        out.update(self.refine_mlp.params(f"{prefix}.refine"))
        return out

    def expand_tokens(self, tokens: T.Tensor) -> T.Tensor:
        """(C, 16) tokens -> (16C, 16) patches with position encodings added."""
        x = tokens
        for i, blk in enumerate(self.up_blocks):
            x = blk(x)
            if i < 3:
                x = T.tanh(x)
        return x + T.Tensor(self.posenc)

    def assign_slots(self, patches: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Predict each patch's slot by nearest canonical encoding.

        Returns (kept patch indices, their slot ids). Collisions keep the
        patch whose predicted encoding is closest; ties keep the earlier patch.
        """
        with T.no_grad():
            pred = self.pos_mlp(T.Tensor(np.asarray(patches, dtype=self.dtype))).data
        d2 = ((pred[:, None, :] - self.posenc[None, :, :]) ** 2).sum(axis=2)
        slots = d2.argmin(axis=1)
        dist = d2[np.arange(len(slots)), slots]
        order = np.argsort(dist, kind="stable")
        taken: dict[int, int] = {}
        for tok in order:
            s = int(slots[tok])
            if s not in taken:
                taken[s] = int(tok)
        kept = np.array(sorted(taken.values()), dtype=np.intp)
        return kept, slots[kept].astype(np.intp)

    def restore_tokens(self, patches: T.Tensor, slot_ids: np.ndarray) -> T.Tensor:
        """Place patches at known slots, zero-fill the rest, downsample to (C, 16)."""
        pe = T.Tensor(self.posenc[np.asarray(slot_ids, dtype=np.intp)])
        x = T.scatter_rows(patches - pe, slot_ids, self.length)
        for i, blk in enumerate(self.down_blocks):
            x = blk(x)
            if i < 3:
                x = T.tanh(x)
        return x + self.refine_mlp(x)


def feature_to_tokens(feature: np.ndarray) -> np.ndarray:
    """Channel-major reshape of a (4, 4, C) grid into (C, 16) tokens."""
    feature = np.asarray(feature)
    if feature.ndim != 3 or feature.shape[:2] != (4, 4):
        raise DataError(f"feature must have shape (4, 4, C), got {feature.shape}")
    return feature.reshape(16, feature.shape[2]).T.copy()


def tokens_to_feature(tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] != FEAT_DIM:
        raise DataError(f"tokens must have shape (C, {FEAT_DIM}), got {tokens.shape}")
    return tokens.T.reshape(4, 4, tokens.shape[0]).copy()


def expand_feature(feature: np.ndarray, codec: FeatureCodec) -> PatchSet:
    """Expand a (4, 4, C) feature into a feat2d patch set of k = 16C patches."""
    tokens = feature_to_tokens(feature)
    if tokens.shape[0] != codec.channels:
        raise DataError(f"feature has {tokens.shape[0]} channels, codec expects {codec.channels}")
    with T.no_grad():
        patches = codec.expand_tokens(T.Tensor(tokens.astype(codec.dtype))).data
    return PatchSet("feat2d", patches.copy(), meta={"channels": codec.channels})


def restore_feature(patches, codec: FeatureCodec) -> np.ndarray:
    """Reassemble a feature grid from any patch subset via predicted slots."""
    arr = patches.patches if isinstance(patches, PatchSet) else np.asarray(patches)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ExtractionError("no feature patches to restore")
    if arr.shape[1] != FEAT_DIM:
        raise DataError(f"feature patches must be {FEAT_DIM}-wide, got {arr.shape[1]}")
    kept, slot_ids = codec.assign_slots(arr)
    with T.no_grad():
        tokens = codec.restore_tokens(T.Tensor(arr[kept].astype(codec.dtype)), slot_ids).data
    return tokens_to_feature(tokens)


# -- 3D objects --------------------------------------------------------------------


def encode_object(obj: GaussianCloud, replicas: int) -> PatchSet:
    """Serialize each point to 14 attributes (unit-cube positions) and replicate."""
    if replicas < 1:
        raise DataError(f"replica count must be >= 1, got {replicas}")
    pos = obj.raw[:, COL_POS]
    mn = pos.min(axis=0)
    extent = pos.max(axis=0) - mn
    if np.any(extent == 0):
        raise DataError(f"degenerate object extent {extent.tolist()}; cannot normalize to the unit cube")
    unit = (pos - mn) / extent
    patch = np.concatenate(
        [
            unit,
            obj.raw[:, COL_SCALE],
            obj.raw[:, COL_ROT],
            obj.raw[:, COL_OPACITY : COL_OPACITY + 1],
            obj.raw[:, COL_DC],
        ],
        axis=1,
    ).astype(np.float32)
    return PatchSet(
        "obj3d",
        np.tile(patch, (replicas, 1)),
        meta={
            "pos_min": mn.astype(np.float64).tolist(),
            "pos_extent": extent.astype(np.float64).tolist(),
            "replicas": replicas,
            "points": obj.n,
        },
    )


def _merge_duplicates(arr: np.ndarray, tol: float) -> np.ndarray:
    """Average groups of patches within `tol` (L-inf) of each other."""
    tree = cKDTree(arr)
    parent = np.arange(arr.shape[0])

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in tree.query_pairs(r=tol, p=np.inf, output_type="ndarray"):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    roots = np.array([find(i) for i in range(arr.shape[0])])
    out = []
    for root in np.unique(roots):
        out.append(arr[roots == root].mean(axis=0))
    return np.stack(out, axis=0)


def decode_object(patches, meta: dict | None = None, tol: float = 1e-4) -> GaussianCloud:
    """Rebuild an object from any patch subset; duplicates merge by averaging.

    Positions stay in normalized unit-cube coordinates unless `meta` carries
    the encoder's pos_min/pos_extent header.
    """
    arr = patches.patches if isinstance(patches, PatchSet) else np.asarray(patches)
    if isinstance(patches, PatchSet) and meta is None:
        meta = patches.meta
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ExtractionError("no object patches to decode")
    if arr.shape[1] != OBJ_WIDTH:
        raise DataError(f"object patches must be {OBJ_WIDTH}-wide, got {arr.shape[1]}")
    merged = _merge_duplicates(np.asarray(arr, dtype=np.float64), tol)
    raw = np.zeros((merged.shape[0], N_PROPS), dtype=np.float32)
    pos = merged[:, 0:3]
    if meta and "pos_min" in meta and "pos_extent" in meta:
        pos = pos * np.asarray(meta["pos_extent"]) + np.asarray(meta["pos_min"])
    raw[:, COL_POS] = pos
    raw[:, COL_SCALE] = merged[:, 3:6]
    raw[:, COL_ROT] = merged[:, 6:10]
    raw[:, COL_OPACITY] = merged[:, 10]
    raw[:, COL_DC] = merged[:, 11:14]
    return GaussianCloud(raw)


# -- feature tensor file format ------------------------------------------------------


def feature_to_bytes(feature: np.ndarray) -> bytes:
    """Little-endian float32 array with an 8-byte header of four u16 dims."""
    feature = np.asarray(feature, dtype="<f4")
    if feature.ndim > 4:
        raise DataError(f"feature rank {feature.ndim} > 4 cannot be serialized")
    dims = list(feature.shape) + [1] * (4 - feature.ndim)
    if any(d > 0xFFFF for d in dims):
        raise DataError(f"feature dims {feature.shape} exceed the u16 header range")
    header = np.asarray(dims, dtype="<u2").tobytes()
    return header + feature.tobytes()


def feature_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < 8:
        raise ParseError(f"feature blob too short for its 8-byte header ({len(data)} bytes)")
    dims = np.frombuffer(data[:8], dtype="<u2").astype(int)
    count = int(np.prod(dims))
    body = data[8:]
    if len(body) != count * 4:
        raise DataError(f"feature body has {len(body)} bytes, header implies {count * 4}")
    arr = np.frombuffer(body, dtype="<f4").reshape(tuple(dims))
    while arr.ndim > 1 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    return arr.copy()
