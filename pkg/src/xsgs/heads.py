"""Per-modality injection and extraction heads over the writable SH slots.

Injection is residual: out = slots + MLP([slots || patch]), and the output
layer starts at zero, so an untrained head is the identity and never harms
the cover cloud. Extraction maps the (possibly watermarked) slot vector back
to a patch; for bits the outputs are logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .gscloud import DEFAULT_SLOT_SPEC, GaussianCloud, SlotSpec, cloud_write_writable, cloud_writable
from .nn import MLP
from .payload import BIT_WIDTH, FEAT_DIM, OBJ_PATCH_SCALE, OBJ_WIDTH, MODALITIES, PatchSet
from .select_gate import ScoreMask

PATCH_WIDTHS = {"bits1d": BIT_WIDTH, "feat2d": FEAT_DIM, "obj3d": OBJ_WIDTH}
_SLOT_SCALE = 0.05  # typical magnitude of high-order SH entries
HIDDEN = 128


class HeadPair:
    """Injection and extraction MLPs for one modality at a fixed slot width."""

    def __init__(self, rng: np.random.Generator, modality: str, slot_width: int, dtype=np.float32):
        if modality not in MODALITIES:
            raise ShapeError(f"unknown modality {modality!r}")
        self.modality = modality
        self.slot_width = slot_width
        self.patch_width = PATCH_WIDTHS[modality]
        slot_scale = np.full(slot_width, _SLOT_SCALE)
        patch_scale = OBJ_PATCH_SCALE if modality == "obj3d" else np.ones(self.patch_width)
        self.inject_mlp = MLP(
            rng,
            [slot_width + self.patch_width, HIDDEN, HIDDEN, slot_width],
            dtype=dtype,
            zero_last=True,
            in_scale=np.concatenate([slot_scale, patch_scale]),
        )
        self.extract_mlp = MLP(
            rng,
            [slot_width, HIDDEN, HIDDEN, self.patch_width],
            dtype=dtype,
            in_scale=slot_scale,
        )

    def params(self, prefix: str) -> dict:
        out = self.inject_mlp.params(f"{prefix}.inject")
        out.update(self.extract_mlp.params(f"{prefix}.extract"))
        return out

    def inject(self, slots: T.Tensor, patches: T.Tensor) -> T.Tensor:
        if slots.ndim != 2 or slots.shape[1] != self.slot_width:
            raise ShapeError(f"{self.modality} inject expects (k, {self.slot_width}) slots, got {slots.shape}")
        if patches.shape != (slots.shape[0], self.patch_width):
            raise ShapeError(
                f"{self.modality} inject expects (k, {self.patch_width}) patches, got {patches.shape}"
            )
        return slots + self.inject_mlp(T.concat([slots, patches], axis=1))

    def extract(self, slots: T.Tensor) -> T.Tensor:
        if slots.ndim != 2 or slots.shape[1] != self.slot_width:
            raise ShapeError(f"{self.modality} extract expects (k, {self.slot_width}) slots, got {slots.shape}")
        return self.extract_mlp(slots)


@dataclass
class InjectionRecord:
    """One modality's carrier rows and the tensors flowing through its head."""

    rows: np.ndarray
    slots: T.Tensor
    patches: T.Tensor
    injected: T.Tensor


def inject_all(
    cloud: GaussianCloud,
    masks: ScoreMask,
    patch_sets: dict,
    heads: dict,
    spec: SlotSpec = DEFAULT_SLOT_SPEC,
    patch_tensors: dict | None = None,
) -> dict:
    """Run every present modality's injection head over its masked points.

    Patches land on masked points in ascending (canonical) row order. When a
    graph-connected patch tensor is supplied via `patch_tensors`, it is used
    instead of the patch set's raw values so gradients can reach upstream
    encoders.
    """
    records: dict = {}
    for modality in MODALITIES:
        if modality not in masks.masks or modality not in patch_sets:
            continue
        rows = np.flatnonzero(masks.masks[modality])
        ps: PatchSet = patch_sets[modality]
        if len(rows) != ps.k:
            raise ContractError(
                f"{modality}: mask selects {len(rows)} points but the patch set has {ps.k} patches"
            )
        head: HeadPair = heads[modality]
        slots = T.Tensor(cloud_writable(cloud, rows, spec).astype(head.inject_mlp.layers[0].weight.dtype))
        if patch_tensors is not None and modality in patch_tensors:
            patches = patch_tensors[modality]
        else:
            patches = T.Tensor(np.asarray(ps.patches, dtype=slots.dtype))
        records[modality] = InjectionRecord(rows=rows, slots=slots, patches=patches, injected=head.inject(slots, patches))
    return records


def apply_watermark(
    cloud: GaussianCloud,
    masks: ScoreMask,
    patch_sets: dict,
    heads: dict,
    spec: SlotSpec = DEFAULT_SLOT_SPEC,
) -> tuple[GaussianCloud, dict]:
    """Replace the writable slots of masked points with injected values.

    Everything outside {masked points} x {writable slots} is bit-identical to
    the input. Returns the new cloud and the row assignment per modality.
    """
    with T.no_grad():
        records = inject_all(cloud, masks, patch_sets, heads, spec)
    out = cloud.copy()
    assignment: dict = {}
    for modality, rec in records.items():
        cloud_write_writable(out, rec.rows, rec.injected.data.astype(np.float32), spec)
        assignment[modality] = rec.rows
    return out, assignment


def write_injected(cloud: GaussianCloud, records: dict, spec: SlotSpec = DEFAULT_SLOT_SPEC) -> GaussianCloud:
    """Copy a cloud and write already-computed injected slots into it."""
    out = cloud.copy()
    for rec in records.values():
        cloud_write_writable(out, rec.rows, rec.injected.data.astype(np.float32), spec)
    return out
