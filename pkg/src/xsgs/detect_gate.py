"""Carrier recognition: a pointwise 4-layer MLP over the 59 splat parameters.

Each point gets three independent sigmoid probabilities, one per payload
modality; thresholding gives the detected masks. Detection is strictly
pointwise, so it parallelizes trivially and survives any pruning of the cloud.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .gscloud import PARAM59_SCALE, GaussianCloud
from .nn import MLP
from .payload import MODALITIES
from .select_gate import COVER_WIDTH, ScoreMask

HIDDEN_SIZES = (128, 128, 64)


class DetectGate:
    """MLP 59 -> 128 -> 128 -> 64 -> 3 with sigmoid heads."""

    def __init__(self, rng: np.random.Generator, dtype=np.float32):
        self.dtype = dtype
        self.mlp = MLP(rng, [COVER_WIDTH, *HIDDEN_SIZES, len(MODALITIES)], dtype=dtype, in_scale=PARAM59_SCALE)

    def params(self, prefix: str = "detect") -> dict:
        return self.mlp.params(prefix)

    def logits(self, params59) -> T.Tensor:
        t = params59 if isinstance(params59, T.Tensor) else T.Tensor(np.asarray(params59, dtype=self.dtype))
        if t.ndim != 2 or t.shape[1] != COVER_WIDTH:
            raise ShapeError(f"detect gate expects (n, {COVER_WIDTH}) inputs, got {t.shape}")
        return self.mlp(t)

    def probabilities(self, cloud: GaussianCloud) -> np.ndarray:
        with T.no_grad():
            return T.sigmoid(self.logits(cloud.params59())).data

    def detect(self, cloud: GaussianCloud, tau: float = 0.5) -> tuple[dict, np.ndarray]:
        """Per-modality masks (prob >= tau, boundary inclusive) plus raw probabilities.

        Masks are independent thresholds and may overlap; they are returned as
        a plain dict rather than a ScoreMask, whose disjointness invariant only
        binds selection-side ground truth.
        """
        probs = self.probabilities(cloud)
        flags = probs >= tau
        masks = {m: flags[:, j].copy() for j, m in enumerate(MODALITIES)}
        return masks, probs


def mask_truth_matrix(masks: ScoreMask, n: int) -> np.ndarray:
    """(n, 3) float target matrix in fixed modality column order."""
    out = np.zeros((n, len(MODALITIES)), dtype=np.float64)
    for j, m in enumerate(MODALITIES):
        if m in masks.masks:
            out[:, j] = masks.masks[m].astype(np.float64)
    return out


def mask_bce(probs, truth) -> T.Tensor:
    """Mean binary cross-entropy on probabilities, clip-stabilized.

    Training uses the logits form (tensor.bce_with_logits); this is the
    probability-space evaluation, exact at matching hard 0/1 inputs.
    """
    p = probs if isinstance(probs, T.Tensor) else T.Tensor(np.asarray(probs, dtype=np.float64))
    y = np.asarray(truth.data if isinstance(truth, T.Tensor) else truth, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"probability/truth shape mismatch: {p.shape} vs {y.shape}")
    eps = 1e-12
    pos = T.log(p + eps) * y
    negt = T.log((1.0 - p) + eps) * (1.0 - y)
    return -T.mean_all(pos + negt)
