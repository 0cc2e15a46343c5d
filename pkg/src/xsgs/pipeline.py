"""Inference orchestration: payload preparation, injection, detection, extraction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError
from .gscloud import GaussianCloud, cloud_writable, sort_canonical
from .heads import apply_watermark
from .payload import (
    BIT_WIDTH,
    PatchSet,
    decode_bits,
    decode_object,
    encode_bits,
    encode_object,
    expand_feature,
    carrier_scramble,
    descramble_bit_values,
    restore_feature,
    scramble_bit_patches,
)
from .select_gate import ScoreMask, select_all
from .train import WatermarkModel


def build_patch_sets(
    model: WatermarkModel,
    bits: np.ndarray | None = None,
    feature: np.ndarray | None = None,
    obj: GaussianCloud | None = None,
) -> dict:
    """Encode any subset of raw payloads with the model's configured sizes."""
    cfg = model.config
    sets: dict = {}
    if bits is not None:
        if "bits1d" not in cfg.modalities:
            raise ConfigError("this checkpoint was not trained with a 1D payload channel")
        bits = np.asarray(bits)
        if bits.shape != (BIT_WIDTH,):
            raise DataError(f"1D payload must be {BIT_WIDTH} bits, got shape {bits.shape}")
        sets["bits1d"] = encode_bits(bits, cfg.bits_replicas)
    if feature is not None:
        if "feat2d" not in cfg.modalities:
            raise ConfigError("this checkpoint was not trained with a 2D payload channel")
        feature = np.asarray(feature, dtype=np.float64)
        want = (4, 4, cfg.feat_channels)
        if feature.shape != want:
            raise DataError(f"2D payload must have shape {want}, got {feature.shape}")
        sets["feat2d"] = expand_feature(feature, model.codec)
    if obj is not None:
        if "obj3d" not in cfg.modalities:
            raise ConfigError("this checkpoint was not trained with a 3D payload channel")
        sets["obj3d"] = encode_object(obj, cfg.obj_replicas)
    if not sets:
        raise ConfigError("no payloads given; supply at least one of bits/feature/object")
    return sets


def inject_cloud(
    model: WatermarkModel, cloud: GaussianCloud, patch_sets: dict
) -> tuple[GaussianCloud, ScoreMask]:
    """Sort canonically, pick carriers, and write the watermark. Returns (cloud, truth masks)."""
    ordered, _ = sort_canonical(cloud)
    masks = select_all(model.select, ordered, patch_sets)
    if model.config.bits_scrambling and "bits1d" in patch_sets:
        rows = masks.rows("bits1d")
        keys, perms = carrier_scramble(ordered.raw[rows, 0:3])
        ps = patch_sets["bits1d"]
        patch_sets = dict(patch_sets)
        patch_sets["bits1d"] = PatchSet("bits1d", scramble_bit_patches(ps.patches, keys, perms), meta=dict(ps.meta))
    watermarked, _ = apply_watermark(ordered, masks, patch_sets, model.heads, model.slot_spec)
    return watermarked, masks


def _extract_patches(model: WatermarkModel, cloud: GaussianCloud, rows: np.ndarray, modality: str) -> np.ndarray:
    slots = cloud_writable(cloud, rows, model.slot_spec).astype(model.config.dtype)
    with T.no_grad():
        return model.heads[modality].extract(T.Tensor(slots)).data


def decode_bits_at_rows(model: WatermarkModel, ordered: GaussianCloud, rows: np.ndarray):
    """Extract and majority-decode the 1D payload from the given carrier rows."""
    logits = _extract_patches(model, ordered, rows, "bits1d")
    with T.no_grad():
        values = T.sigmoid(T.Tensor(logits)).data
    if model.config.bits_scrambling:
        keys, perms = carrier_scramble(ordered.raw[rows, 0:3])
        values = descramble_bit_values(values, keys, perms)
    return decode_bits(values)


@dataclass
class ExtractionResult:
    """Everything the extractor recovers from one cloud."""

    masks: dict
    probs: np.ndarray
    flagged_fraction: dict
    bits: np.ndarray | None = None
    bit_confidence: np.ndarray | None = None
    feature: np.ndarray | None = None
    obj: GaussianCloud | None = None
    notes: dict = field(default_factory=dict)

    def watermark_found(self) -> bool:
        return any(f > 0 for f in self.flagged_fraction.values())


def extract_cloud(model: WatermarkModel, cloud: GaussianCloud, tau: float = 0.5) -> ExtractionResult:
    """Detect carriers and decode each enabled modality from the detected points.

    Recovered 3D objects stay in normalized unit-cube coordinates; the
    encoder-side bounding box is not recoverable from the cloud alone.
    """
    cfg = model.config
    ordered, _ = sort_canonical(cloud)
    masks, probs = model.detect.detect(ordered, tau)
    result = ExtractionResult(
        masks=masks,
        probs=probs,
        flagged_fraction={m: float(masks[m].mean()) for m in cfg.modalities},
    )
    if "bits1d" in cfg.modalities:
        rows = np.flatnonzero(masks["bits1d"])
        if rows.size:
            result.bits, result.bit_confidence = decode_bits_at_rows(model, ordered, rows)
        else:
            result.notes["bits1d"] = "no carrier points detected"
    if "feat2d" in cfg.modalities:
        rows = np.flatnonzero(masks["feat2d"])
        if rows.size:
            patches = _extract_patches(model, ordered, rows, "feat2d")
            result.feature = restore_feature(patches, model.codec)
        else:
            result.notes["feat2d"] = "no carrier points detected"
    if "obj3d" in cfg.modalities:
        rows = np.flatnonzero(masks["obj3d"])
        if rows.size:
            patches = _extract_patches(model, ordered, rows, "obj3d")
            result.obj = decode_object(patches, tol=cfg.obj_merge_tol)
        else:
            result.notes["obj3d"] = "no carrier points detected"
    return result
