"""Carrier selection: score every cover point per modality, emit disjoint top-k masks.

Self scores route attention through a single learned anchor vector (two
attention hops with residual connections), so no n x n matrix ever exists.
Cross scores use the factorized form softmax_row(Q) @ (softmax_col(K)^T V),
which builds a d x d interaction matrix instead of an n x l one. Both scores
have a streaming evaluation path that walks the cloud in fixed-size chunks,
keeping auxiliary memory flat in n; the graph path (used for training-style
differentiation) allocates Theta(n*d) but still nothing quadratic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import CapacityError, ShapeError
from .gscloud import PARAM59_SCALE, GaussianCloud
from .nn import Linear
from .payload import BIT_WIDTH, FEAT_DIM, OBJ_PATCH_SCALE, OBJ_WIDTH, MODALITIES, PatchSet

COVER_WIDTH = 59
PATCH_WIDTHS = {"bits1d": BIT_WIDTH, "feat2d": FEAT_DIM, "obj3d": OBJ_WIDTH}
_PATCH_SCALES = {"bits1d": None, "feat2d": None, "obj3d": OBJ_PATCH_SCALE}

DEFAULT_CHUNK = 8192


@dataclass
class ScoreMask:
    """Per-modality boolean carrier masks over the points of one cloud."""

    masks: dict

    def __post_init__(self) -> None:
        total = None
        for name, mask in self.masks.items():
            if name not in MODALITIES:
                raise ShapeError(f"unknown modality {name!r} in mask set")
            mask = np.asarray(mask, dtype=bool)
            self.masks[name] = mask
            if total is None:
                total = np.zeros_like(mask)
            if np.any(total & mask):
                raise ShapeError("modality masks overlap")
            total |= mask

    def sizes(self) -> dict:
        return {name: int(mask.sum()) for name, mask in self.masks.items()}

    def rows(self, modality: str) -> np.ndarray:
        return np.flatnonzero(self.masks[modality])

    def union(self) -> np.ndarray:
        out = None
        for mask in self.masks.values():
            out = mask.copy() if out is None else (out | mask)
        return out


class SelectGate:
    """Embedders, anchor attention, factorized cross attention, score linears."""

    def __init__(self, rng: np.random.Generator, dim: int = 64, dtype=np.float32):
        self.dim = dim
        self.dtype = dtype
        self.embed_cover = Linear(rng, COVER_WIDTH, dim, dtype=dtype, in_scale=PARAM59_SCALE)
        self.embed_patch = {
            m: Linear(rng, PATCH_WIDTHS[m], dim, dtype=dtype, in_scale=_PATCH_SCALES[m]) for m in MODALITIES
        }
        self.anchor = T.Tensor(rng.normal(0.0, 1.0, (1, dim)).astype(dtype), requires_grad=True)
        std = 1.0 / np.sqrt(dim)

        def mat() -> T.Tensor:
            return T.Tensor(rng.normal(0.0, std, (dim, dim)).astype(dtype), requires_grad=True)

        # anchor attention: hop 1 (anchor queries points), hop 2 (points query the summary)
        self.wq1, self.wk1, self.wv1 = mat(), mat(), mat()
        self.wq2, self.wk2, self.wv2 = mat(), mat(), mat()
        self.cross_proj = {m: (mat(), mat(), mat()) for m in MODALITIES}
        self.self_linear = Linear(rng, dim, 1, dtype=dtype)
        self.cross_linear = Linear(rng, dim, 1, dtype=dtype)

    def params(self, prefix: str = "select") -> dict:
        out = self.embed_cover.params(f"{prefix}.embed.cover")
        for m in MODALITIES:
            out.update(self.embed_patch[m].params(f"{prefix}.embed.{m}"))
        out[f"{prefix}.anchor"] = self.anchor
        for name, t in zip(("wq1", "wk1", "wv1", "wq2", "wk2", "wv2"),
                           (self.wq1, self.wk1, self.wv1, self.wq2, self.wk2, self.wv2)):
            out[f"{prefix}.{name}"] = t
        for m in MODALITIES:
            for name, t in zip(("wq", "wk", "wv"), self.cross_proj[m]):
                out[f"{prefix}.cross.{m}.{name}"] = t
        out.update(self.self_linear.params(f"{prefix}.self_linear"))
        out.update(self.cross_linear.params(f"{prefix}.cross_linear"))
        return out

    # -- graph paths (full cloud in one graph; used for training-style grads) --

    def embed(self, x, modality: str) -> T.Tensor:
        """Map cover points or payload patches into the shared d-space."""
        t = x if isinstance(x, T.Tensor) else T.Tensor(np.asarray(x, dtype=self.dtype))
        if modality == "cover":
            return self.embed_cover(t)
        if modality not in MODALITIES:
            raise ShapeError(f"unknown modality {modality!r}")
        return self.embed_patch[modality](t)

    def summarize(self, cover_emb: T.Tensor) -> T.Tensor:
        """Anchor-query attention over all points: the 1 x d cloud summary."""
        scale = 1.0 / np.sqrt(self.dim)
        q = T.matmul(self.anchor, self.wq1)
        k = T.matmul(cover_emb, self.wk1)
        v = T.matmul(cover_emb, self.wv1)
        att = T.softmax_axis(T.matmul(q, T.transpose(k)) * scale, "row")
        return self.anchor + T.matmul(att, v)

    def self_score(self, cover_emb: T.Tensor) -> T.Tensor:
        """Per-point suitability in (0, 1) from the anchor-routed summary."""
        summary = self.summarize(cover_emb)
        scale = 1.0 / np.sqrt(self.dim)
        q = T.matmul(cover_emb, self.wq2)
        k = T.matmul(summary, self.wk2)
        v = T.matmul(summary, self.wv2)
        att = T.softmax_axis(T.matmul(q, T.transpose(k)) * scale, "row")
        routed = cover_emb + T.matmul(att, v)
        return T.sigmoid(self.self_linear(routed))

    def cross_factor(self, patch_emb: T.Tensor, modality: str) -> T.Tensor:
        """The d x d payload interaction matrix softmax_col(K)^T V."""
        _, wk, wv = self.cross_proj[modality]
        k = T.matmul(patch_emb, wk)
        v = T.matmul(patch_emb, wv)
        return T.matmul(T.transpose(T.softmax_axis(k, "col")), v)

    def cross_score(self, cover_emb: T.Tensor, patch_emb: T.Tensor, modality: str) -> T.Tensor:
        """Per-point payload affinity in (0, 1); never materializes n x l."""
        wq = self.cross_proj[modality][0]
        factor = self.cross_factor(patch_emb, modality)
        q = T.softmax_axis(T.matmul(cover_emb, wq), "row")
        return T.sigmoid(self.cross_linear(T.matmul(q, factor)))

    # -- streaming paths (chunked, no graph; flat auxiliary memory) --

    def _summary_streaming(self, params59: np.ndarray, chunk: int) -> T.Tensor:
        scale = 1.0 / np.sqrt(self.dim)
        q = T.matmul(self.anchor, self.wq1)
        run_max = -np.inf
        run_den = 0.0
        run_num = np.zeros((1, self.dim), dtype=self.dtype)
        n = params59.shape[0]
        for start in range(0, n, chunk):
            xe = self.embed(params59[start : start + chunk], "cover")
            k = T.matmul(xe, self.wk1)
            v = T.matmul(xe, self.wv1)
            logits = (T.matmul(q, T.transpose(k)) * scale).data[0]
            m = max(run_max, float(logits.max()))
            w = np.exp(logits - m)
            carry = np.exp(run_max - m) if np.isfinite(run_max) else 0.0
            run_num = run_num * carry + w[None, :] @ v.data
            run_den = run_den * carry + float(w.sum())
            run_max = m
        return self.anchor + T.Tensor((run_num / run_den).astype(self.dtype))

    def score_streaming(
        self, params59: np.ndarray, patch_sets: dict, chunk: int = DEFAULT_CHUNK
    ) -> tuple[np.ndarray, dict]:
        """Self score and per-modality cross scores as flat numpy vectors."""
        n = params59.shape[0]
        with T.no_grad():
            summary = self._summary_streaming(params59, chunk)
            k2 = T.matmul(summary, self.wk2)
            v2 = T.matmul(summary, self.wv2)
            factors = {}
            for m, ps in patch_sets.items():
                patch_emb = self.embed(ps.patches, m)
                factors[m] = self.cross_factor(patch_emb, m)
            scale = 1.0 / np.sqrt(self.dim)
            self_out = np.empty(n, dtype=self.dtype)
            cross_out = {m: np.empty(n, dtype=self.dtype) for m in patch_sets}
            for start in range(0, n, chunk):
                xe = self.embed(params59[start : start + chunk], "cover")
                att = T.softmax_axis(T.matmul(xe, self.wq2) @ T.transpose(k2) * scale, "row")
                routed = xe + T.matmul(att, v2)
                self_out[start : start + chunk] = T.sigmoid(self.self_linear(routed)).data[:, 0]
                for m, factor in factors.items():
                    q = T.softmax_axis(T.matmul(xe, self.cross_proj[m][0]), "row")
                    cross = T.sigmoid(self.cross_linear(T.matmul(q, factor)))
                    cross_out[m][start : start + chunk] = cross.data[:, 0]
        return self_out, cross_out


def fuse_and_topk(self_scores, cross_scores, k: int, excluded=None) -> np.ndarray:
    """Multiply the two scores and pick the k best non-excluded points.

    Ties break toward the lower index; the result has exactly k true entries.
    """
    s = np.asarray(self_scores, dtype=np.float64).reshape(-1)
    c = np.asarray(cross_scores, dtype=np.float64).reshape(-1)
    if s.shape != c.shape:
        raise ShapeError(f"score length mismatch: {s.shape} vs {c.shape}")
    n = s.size
    if excluded is None:
        excluded = np.zeros(n, dtype=bool)
    excluded = np.asarray(excluded, dtype=bool).reshape(-1)
    if excluded.shape != s.shape:
        raise ShapeError(f"exclusion length {excluded.shape} does not match score length {s.shape}")
    available = n - int(excluded.sum())
    if k < 0 or k > available:
        raise CapacityError(
            f"cannot select {k} of {n} points: {int(excluded.sum())} excluded, {available} available"
        )
    final = s * c
    final[excluded] = -np.inf
    order = np.argsort(-final, kind="stable")
    mask = np.zeros(n, dtype=bool)
    mask[order[:k]] = True
    return mask


def select_all(
    gate: SelectGate,
    cloud: GaussianCloud,
    patch_sets: dict,
    order: tuple = MODALITIES,
    chunk: int = DEFAULT_CHUNK,
) -> ScoreMask:
    """Score once, then run exclusive top-k per modality in the fixed order."""
    present = [m for m in order if m in patch_sets]
    total = sum(patch_sets[m].k for m in present)
    if total > cloud.n:
        raise CapacityError(f"payloads need {total} carrier points but the cloud has only {cloud.n}")
    params = cloud.params59()
    self_s, cross_s = gate.score_streaming(params, {m: patch_sets[m] for m in present}, chunk=chunk)
    excluded = np.zeros(cloud.n, dtype=bool)
    masks: dict = {}
    for m in present:
        mask = fuse_and_topk(self_s, cross_s[m], patch_sets[m].k, excluded)
        masks[m] = mask
        excluded |= mask
    return ScoreMask(masks)
