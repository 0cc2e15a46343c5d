"""Degradation attacks, fidelity/robustness metrics, and the false-positive protocol."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .gscloud import DEFAULT_SLOT_SPEC, GaussianCloud, SlotSpec, sort_canonical, synth_cloud
from .payload import restore_feature
from .pipeline import _extract_patches, decode_bits_at_rows, extract_cloud, inject_cloud
from .train import WatermarkModel, stream_rng, stream_seed, sample_payloads


def prune_keep_mask(n: int, rate: float, seed: int) -> np.ndarray:
    """Boolean survivor mask after deleting floor(rate * n) uniform points."""
    if not 0.0 <= rate < 1.0:
        raise DataError(f"pruning rate must be in [0, 1), got {rate}")
    keep = np.ones(n, dtype=bool)
    n_remove = int(rate * n)
    if n_remove:
        removed = np.random.default_rng(seed).choice(n, size=n_remove, replace=False)
        keep[removed] = False
    return keep


def prune_random(cloud: GaussianCloud, rate: float, seed: int) -> GaussianCloud:
    """Delete floor(rate * n) uniformly chosen points; survivors keep their order and bits."""
    keep = prune_keep_mask(cloud.n, rate, seed)
    if keep.all():
        return cloud.copy()
    return GaussianCloud(cloud.raw[keep].copy(), cloud.source_path)


def bit_precision(extracted, truth) -> float:
    """Fraction of matching bits."""
    a = np.asarray(extracted).reshape(-1)
    b = np.asarray(truth).reshape(-1)
    if a.shape != b.shape:
        raise DataError(f"bit length mismatch: {a.shape} vs {b.shape}")
    return float((a == b).mean())


def sh_psnr(cloud_a: GaussianCloud, cloud_b: GaussianCloud, spec: SlotSpec = DEFAULT_SLOT_SPEC) -> float:
    """Parameter-space PSNR (dB) over the writable slots; +inf when identical.

    A proxy for rendered-image fidelity: this artifact has no rasterizer.
    """
    if cloud_a.n != cloud_b.n:
        raise DataError(f"cloud size mismatch: {cloud_a.n} vs {cloud_b.n}")
    cols = spec.raw_columns()
    a = cloud_a.raw[:, cols].astype(np.float64)
    b = cloud_b.raw[:, cols].astype(np.float64)
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return math.inf
    r = float(a.max() - a.min())
    return 10.0 * math.log10(r * r / mse)


def chamfer(obj_a, obj_b, chunk: int = 2048) -> float:
    """Symmetric mean nearest-neighbor squared distance over positions (brute force)."""
    a = obj_a.positions if isinstance(obj_a, GaussianCloud) else np.asarray(obj_a)
    b = obj_b.positions if isinstance(obj_b, GaussianCloud) else np.asarray(obj_b)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise DataError("chamfer distance needs two nonempty point sets")

    def one_way(src: np.ndarray, dst: np.ndarray) -> float:
        total = 0.0
        for start in range(0, src.shape[0], chunk):
            block = src[start : start + chunk]
            d2 = ((block[:, None, :] - dst[None, :, :]) ** 2).sum(axis=2)
            total += float(d2.min(axis=1).sum())
        return total / src.shape[0]

    return 0.5 * (one_way(a, b) + one_way(b, a))


def relative_mse(estimate: np.ndarray, truth: np.ndarray) -> float:
    truth = np.asarray(truth, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    denom = float((truth**2).mean())
    if denom == 0.0:
        raise DataError("relative MSE is undefined for an all-zero reference")
    return float(((estimate - truth) ** 2).mean()) / denom


def normalized_positions(obj: GaussianCloud) -> np.ndarray:
    pos = obj.positions.astype(np.float64)
    mn = pos.min(axis=0)
    extent = pos.max(axis=0) - mn
    extent[extent == 0] = 1.0
    return (pos - mn) / extent


# -- false positives ------------------------------------------------------------------


def false_positive_check(
    model: WatermarkModel,
    cloud: GaussianCloud,
    reference_bits: np.ndarray,
    tau: float = 0.5,
) -> dict:
    """Run the extractor on a clean cloud and force 1D extraction.

    Forced extraction reads the top-k points by 1D detection probability even
    when nothing crosses the threshold, so the chance-level precision against
    the reference payload is always measurable.
    """
    cfg = model.config
    ordered, _ = sort_canonical(cloud)
    masks, probs = model.detect.detect(ordered, tau)
    report = {
        "flagged_fraction": {m: float(masks[m].mean()) for m in cfg.modalities},
        "forced_bit_precision": None,
    }
    if "bits1d" in cfg.modalities:
        k = cfg.patch_count("bits1d")
        order = np.argsort(-probs[:, 0], kind="stable")
        rows = np.sort(order[:k])
        bits, _ = decode_bits_at_rows(model, ordered, rows)
        report["forced_bit_precision"] = bit_precision(bits, reference_bits)
    return report


# -- robustness suite ------------------------------------------------------------------


@dataclass
class RobustnessReport:
    """Aggregated metrics per pruning rate."""

    rates: list
    trials: int
    rows: list = field(default_factory=list)

    def validate(self) -> "RobustnessReport":
        if sorted(self.rates) != list(self.rates):
            raise DataError("pruning rates must be ascending")
        for row in self.rows:
            for key, value in row.items():
                if isinstance(value, float) and not math.isfinite(value):
                    raise DataError(f"non-finite metric {key} at rate {row.get('rate')}")
        return self

    def to_dict(self) -> dict:
        return {"trials": self.trials, "rates": list(self.rates), "rows": self.rows}


def _masks_survivor_stats(truth_masks, detected, keep: np.ndarray) -> tuple[float, float]:
    """Pooled precision/recall of detected masks against truth, on surviving points."""
    tp = fp = fn = 0
    for m, truth in truth_masks.masks.items():
        t = truth[keep]
        d = detected[m]
        tp += int((t & d).sum())
        fp += int((~t & d).sum())
        fn += int((t & ~d).sum())
    precision = tp / (tp + fp) if (tp + fp) else 1.0
    recall = tp / (tp + fn) if (tp + fn) else 1.0
    return precision, recall


def run_robustness_suite(
    model: WatermarkModel,
    rates=(0.05, 0.10, 0.15, 0.20, 0.25),
    trials: int = 20,
    seed: int = 1000,
    cloud_points: int | None = None,
    base_cloud: GaussianCloud | None = None,
) -> RobustnessReport:
    """Watermark, prune, detect, extract; aggregate metrics per rate over trials.

    Extraction runs on the detected masks (inference regime), never the truth.
    Trials draw fresh synthetic cover clouds unless `base_cloud` is given, in
    which case every trial watermarks that cloud with fresh payloads.
    """
    cfg = model.config
    n_points = cloud_points or cfg.cloud_points
    report = RobustnessReport(rates=list(rates), trials=trials)
    for rate in rates:
        acc: dict = {"rate": float(rate)}
        sums: dict = {}
        counts: dict = {}

        def add(key: str, value: float) -> None:
            sums[key] = sums.get(key, 0.0) + value
            counts[key] = counts.get(key, 0) + 1

        for trial in range(trials):
            step = 1_000_000 + trial  # eval stream, disjoint from training steps
            if base_cloud is not None:
                cloud = base_cloud
            else:
                cloud = synth_cloud(n_points, stream_seed(seed, step, "cloud"))
            patch_sets, _, refs = sample_payloads(model, step, build_graph=False)
            ordered, _ = sort_canonical(cloud)
            watermarked, truth_masks = inject_cloud(model, ordered, patch_sets)
            add("sh_psnr_db", sh_psnr(ordered, watermarked, model.slot_spec))
            prune_seed = stream_seed(seed, step, "eval", int(rate * 1000))
            keep_mask = prune_keep_mask(watermarked.n, rate, prune_seed)
            pruned = GaussianCloud(watermarked.raw[keep_mask].copy())
            keep = np.flatnonzero(keep_mask)
            result = extract_cloud(model, pruned)
            mp, mr = _masks_survivor_stats(truth_masks, result.masks, keep)
            add("mask_precision", mp)
            add("mask_recall", mr)
            if "bits1d" in cfg.modalities and result.bits is not None:
                add("bit_precision", bit_precision(result.bits, refs["bits"]))
            if "feat2d" in cfg.modalities and result.feature is not None:
                add("feat_rel_mse", relative_mse(result.feature, refs["feature"]))
            if "obj3d" in cfg.modalities and result.obj is not None:
                truth_obj = normalized_positions(refs["object"])
                add("obj_chamfer", chamfer(result.obj.positions, truth_obj))
        for key in sums:
            acc[key] = sums[key] / counts[key]
        report.rows.append(acc)
    return report.validate()


def feature_mse_at_drops(
    model: WatermarkModel,
    drops=(0.0, 0.25),
    trials: int = 8,
    seed: int = 2000,
    cloud_points: int | None = None,
) -> dict:
    """End-to-end feature relative MSE when a fraction of extracted patches is discarded."""
    cfg = model.config
    if "feat2d" not in cfg.modalities:
        raise DataError("checkpoint has no 2D payload channel")
    n_points = cloud_points or cfg.cloud_points
    out = {float(d): [] for d in drops}
    for trial in range(trials):
        step = 2_000_000 + trial
        cloud = synth_cloud(n_points, stream_seed(seed, step, "cloud"))
        patch_sets, _, refs = sample_payloads(model, step, build_graph=False)
        watermarked, truth_masks = inject_cloud(model, cloud, patch_sets)
        rows = truth_masks.rows("feat2d")
        patches = _extract_patches(model, watermarked, rows, "feat2d")
        rng = stream_rng(seed, step, "drop")
        for d in drops:
            keep = np.sort(rng.permutation(len(rows))[int(d * len(rows)) :])
            feature = restore_feature(patches[keep], model.codec)
            out[float(d)].append(relative_mse(feature, refs["feature"]))
    return {d: float(np.mean(v)) for d, v in out.items()}
