"""Multi-modal watermarking for 3D Gaussian splat clouds.

Hides 1D bit strings, 2D feature grids, and small 3D splat objects in the
high-order spherical-harmonic coefficients of a splat cloud, and recovers
them later from the cloud file alone.
"""

from .errors import XsgsError
from .gscloud import (
    DEFAULT_SLOT_SPEC,
    GaussianCloud,
    GaussianPoint,
    SlotSpec,
    load_cloud,
    read_ply,
    save_cloud,
    sort_canonical,
    synth_cloud,
    synth_object,
    write_ply,
)
from .payload import PatchSet, decode_bits, decode_object, encode_bits, encode_object
from .pipeline import ExtractionResult, build_patch_sets, extract_cloud, inject_cloud
from .select_gate import ScoreMask, SelectGate, fuse_and_topk, select_all
from .detect_gate import DetectGate
from .train import PRESETS, TrainConfig, WatermarkModel, load_model, save_model, train

__version__ = "0.1.0"

__all__ = [
    "XsgsError",
    "GaussianCloud",
    "GaussianPoint",
    "SlotSpec",
    "DEFAULT_SLOT_SPEC",
    "read_ply",
    "write_ply",
    "load_cloud",
    "save_cloud",
    "sort_canonical",
    "synth_cloud",
    "synth_object",
    "PatchSet",
    "encode_bits",
    "decode_bits",
    "encode_object",
    "decode_object",
    "ScoreMask",
    "SelectGate",
    "DetectGate",
    "fuse_and_topk",
    "select_all",
    "ExtractionResult",
    "build_patch_sets",
    "inject_cloud",
    "extract_cloud",
    "TrainConfig",
    "WatermarkModel",
    "PRESETS",
    "train",
    "save_model",
    "load_model",
    "__version__",
]
