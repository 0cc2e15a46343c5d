"""Training orchestration.

Each step: draw a fresh synthetic cloud and payloads, select carrier points,
inject patches, then (a) train the detect gate on a gradient-detached copy of
the watermarked cloud with its own optimizer, and (b) extract at the true
masks and update the injection/extraction heads, select gate, and feature
codec with the main optimizer. Detect-gate gradients never reach injection
weights; extraction during training always uses the ground-truth masks.

All randomness derives from (seed, step, stream, item), so runs and resumed
runs are bit-reproducible.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .detect_gate import DetectGate, mask_truth_matrix
from .errors import CheckpointError, ConfigError, ContractError
from .gscloud import GaussianCloud, SlotSpec, cloud_writable, sort_canonical, synth_cloud, synth_object
from .heads import HeadPair, inject_all, write_injected
from .nn import load_params
from .payload import BIT_WIDTH, FeatureCodec, PatchSet, encode_bits, encode_object, feature_to_tokens
from .select_gate import ScoreMask, SelectGate, select_all

MODALITY_ORDER = ("bits1d", "feat2d", "obj3d")

_STREAM = {"cloud": 1, "bits": 2, "feat": 3, "obj": 4, "drop": 5, "eval": 6}


def stream_rng(seed: int, step: int, stream: str, item: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, step, _STREAM[stream], item)))


def stream_seed(seed: int, step: int, stream: str, item: int = 0) -> int:
    return int(np.random.SeedSequence((seed, step, _STREAM[stream], item)).generate_state(1)[0])


@dataclass
class TrainConfig:
    """Dimensions, payload sizes, loss weights, and optimizer settings."""

    modalities: tuple = ("bits1d",)
    bits_replicas: int = 64
    feat_channels: int = 8
    obj_points: int = 32
    obj_replicas: int = 8
    dim: int = 64
    slot_indices: tuple = tuple(range(3, 15))
    sh_weight: float = 0.2
    bits_weight: float = 0.005
    feat_weight: float = 0.8
    obj_weight: float = 1.5
    mask_weight: float = 1.0
    codec_recon_weight: float = 1.0
    codec_pos_weight: float = 0.1
    codec_drop_max: float = 0.25
    lr: float = 1e-3
    detect_lr: float = 1e-3
    batch_size: int = 2
    steps: int = 2000
    seed: int = 0
    cloud_points: int = 4096
    dtype_name: str = "float32"
    # scramble replicated bit patches per carrier (position-keyed XOR and
    # bit permutation) so decoding errors decorrelate across replicas and
    # across head output positions; the majority vote then removes them
    bits_scrambling: bool = True
    # merge radius for decoded object patches at extraction time; wide enough
    # to cluster noisy replicas of one point, far below typical point spacing
    obj_merge_tol: float = 0.05

    def __post_init__(self) -> None:
        self.modalities = tuple(self.modalities)
        self.slot_indices = tuple(int(i) for i in self.slot_indices)
        if not self.modalities:
            raise ConfigError("at least one payload modality must be enabled")
        for m in self.modalities:
            if m not in MODALITY_ORDER:
                raise ConfigError(f"unknown modality {m!r}")
        for name in ("sh_weight", "bits_weight", "feat_weight", "obj_weight", "mask_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.obj_points < 4:
            raise ConfigError("obj_points must be >= 4 for a non-degenerate object")
        if self.dtype_name not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype_name!r}")
        if self.total_patches() > self.cloud_points:
            raise ConfigError(
                f"enabled payloads need {self.total_patches()} carriers, cloud has {self.cloud_points} points"
            )

    def patch_count(self, modality: str) -> int:
        if modality == "bits1d":
            return self.bits_replicas
        if modality == "feat2d":
            return 16 * self.feat_channels
        if modality == "obj3d":
            return self.obj_points * self.obj_replicas
        raise ConfigError(f"unknown modality {modality!r}")

    def total_patches(self) -> int:
        return sum(self.patch_count(m) for m in self.modalities)

    @property
    def dtype(self):
        return np.float32 if self.dtype_name == "float32" else np.float64

    @property
    def slot_spec(self) -> SlotSpec:
        return SlotSpec(self.slot_indices)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["modalities"] = list(self.modalities)
        out["slot_indices"] = list(self.slot_indices)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


# Desk-scale presets. The cover-fidelity weight stays at the base value;
# raising it to 2.0 pins the injected residual an order of magnitude below
# the natural slot noise, and measured bit accuracy never leaves chance.
PRESETS = {
    "bits48-desk": TrainConfig(
        modalities=("bits1d",),
        bits_replicas=64,
        cloud_points=4096,
        batch_size=1,
        steps=3000,
        seed=7,
    ),
    "joint-desk": TrainConfig(
        modalities=("bits1d", "feat2d", "obj3d"),
        bits_replicas=64,
        feat_channels=8,
        obj_points=32,
        obj_replicas=8,
        cloud_points=2048,
        batch_size=1,
        steps=4000,
        seed=11,
    ),
}


class WatermarkModel:
    """All trainable components plus the slot layout they share."""

    def __init__(self, config: TrainConfig):
        self.config = config
        dtype = config.dtype
        seeds = np.random.SeedSequence((config.seed, 0)).spawn(4 + len(MODALITY_ORDER))
        r_select, r_detect, r_codec, _r_spare = (np.random.default_rng(s) for s in seeds[:4])
        self.slot_spec = config.slot_spec
        self.select = SelectGate(r_select, config.dim, dtype)
        self.detect = DetectGate(r_detect, dtype)
        self.heads = {
            m: HeadPair(np.random.default_rng(seeds[4 + i]), m, self.slot_spec.width, dtype)
            for i, m in enumerate(MODALITY_ORDER)
        }
        self.codec = FeatureCodec(r_codec, config.feat_channels, dtype)

    def named_params(self) -> dict:
        out = self.select.params("select")
        out.update(self.detect.params("detect"))
        for m in MODALITY_ORDER:
            out.update(self.heads[m].params(f"heads.{m}"))
        out.update(self.codec.params("codec"))
        return out

    def main_params(self) -> dict:
        return {k: v for k, v in self.named_params().items() if not k.startswith("detect.")}

    def detect_params(self) -> dict:
        return self.detect.params("detect")


# -- payload sampling -------------------------------------------------------------


def sample_payloads(
    model: WatermarkModel, step: int, item: int = 0, build_graph: bool = True, independent_bits: bool = False
) -> tuple[dict, dict, dict]:
    """Fresh random payloads for one training item.

    Returns (patch_sets, graph patch tensors, reference payloads). The feat2d
    patches come from the codec's expansion, graph-connected when training.
    """
    cfg = model.config
    patch_sets: dict = {}
    patch_tensors: dict = {}
    refs: dict = {}
    if "bits1d" in cfg.modalities:
        rng = stream_rng(cfg.seed, step, "bits", item)
        if independent_bits:
            # training draws a fresh word per patch: the heads are pointwise,
            # so this multiplies word samples per step without changing the
            # replica structure the decoder sees at inference
            patches = rng.integers(0, 2, (cfg.bits_replicas, BIT_WIDTH)).astype(np.float32)
            patch_sets["bits1d"] = PatchSet("bits1d", patches, meta={"replicas": cfg.bits_replicas})
            refs["bits"] = patches.astype(np.uint8)
        else:
            word = rng.integers(0, 2, BIT_WIDTH)
            patch_sets["bits1d"] = encode_bits(word, cfg.bits_replicas)
            refs["bits"] = word.astype(np.uint8)
    if "feat2d" in cfg.modalities:
        feature = stream_rng(cfg.seed, step, "feat", item).normal(0.0, 1.0, (4, 4, cfg.feat_channels))
        tokens = feature_to_tokens(feature).astype(cfg.dtype)
        if build_graph:
            patches_t = model.codec.expand_tokens(T.Tensor(tokens))
        else:
            with T.no_grad():
                patches_t = model.codec.expand_tokens(T.Tensor(tokens))
        patch_sets["feat2d"] = PatchSet("feat2d", patches_t.data.copy(), meta={"channels": cfg.feat_channels})
        patch_tensors["feat2d"] = patches_t
        refs["feature"] = feature
        refs["tokens"] = tokens
    if "obj3d" in cfg.modalities:
        obj = synth_object(cfg.obj_points, stream_seed(cfg.seed, step, "obj", item))
        patch_sets["obj3d"] = encode_object(obj, cfg.obj_replicas)
        refs["object"] = obj
    return patch_sets, patch_tensors, refs


# -- losses ------------------------------------------------------------------------


def _mse(a: T.Tensor, b: T.Tensor) -> T.Tensor:
    d = a - b
    return T.mean_all(d * d)


def _avg(terms: list) -> T.Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def total_loss(
    original: GaussianCloud,
    watermarked: GaussianCloud,
    masks: ScoreMask,
    extracted: dict,
    truths: dict,
    detect_probs: np.ndarray,
    config: TrainConfig,
) -> tuple[float, dict]:
    """Weighted training objective from already-computed pieces (numpy level).

    `extracted` maps modality to the extraction-head outputs at the true
    masks (logits for bits1d); `truths` maps modality to the injected patch
    values (the bit word patches for bits1d). The optional rendered-view term
    does not exist in this renderer-free artifact.
    """
    for m in extracted:
        if m not in config.modalities:
            raise ContractError(f"loss term requested for disabled modality {m!r}")
    spec = config.slot_spec
    rows = np.flatnonzero(masks.union())
    if original.n != watermarked.n:
        raise ContractError(f"cloud size mismatch: {original.n} vs {watermarked.n}")
    breakdown: dict = {}
    a = cloud_writable(original, rows, spec).astype(np.float64)
    b = cloud_writable(watermarked, rows, spec).astype(np.float64)
    breakdown["sh_mse"] = float(((a - b) ** 2).mean()) if rows.size else 0.0
    if "bits1d" in extracted:
        x = np.asarray(extracted["bits1d"], dtype=np.float64)
        y = np.asarray(truths["bits1d"], dtype=np.float64)
        breakdown["bits_bce"] = float((np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))).mean())
    else:
        breakdown["bits_bce"] = 0.0
    for key, name in (("feat2d", "feat_mse"), ("obj3d", "obj_mse")):
        if key in extracted:
            x = np.asarray(extracted[key], dtype=np.float64)
            y = np.asarray(truths[key], dtype=np.float64)
            breakdown[name] = float(((x - y) ** 2).mean())
        else:
            breakdown[name] = 0.0
    truth_m = mask_truth_matrix(masks, original.n)
    p = np.clip(np.asarray(detect_probs, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    breakdown["mask_bce"] = float(-(truth_m * np.log(p) + (1 - truth_m) * np.log(1 - p)).mean())
    total = (
        config.sh_weight * breakdown["sh_mse"]
        + config.bits_weight * breakdown["bits_bce"]
        + config.feat_weight * breakdown["feat_mse"]
        + config.obj_weight * breakdown["obj_mse"]
        + config.mask_weight * breakdown["mask_bce"]
    )
    breakdown["total"] = total
    return total, breakdown


# -- the step -----------------------------------------------------------------------


def train_step(model: WatermarkModel, opt_main: T.Adam, opt_detect: T.Adam, step: int) -> dict:
    """One optimization step over a batch of fresh clouds; returns metrics."""
    cfg = model.config
    opt_main.zero_grad()
    opt_detect.zero_grad()
    sh_terms: list = []
    bits_terms: list = []
    feat_terms: list = []
    obj_terms: list = []
    recon_terms: list = []
    pos_terms: list = []
    mask_terms: list = []
    bit_hits = 0
    bit_total = 0
    for item in range(cfg.batch_size):
        cloud = synth_cloud(cfg.cloud_points, stream_seed(cfg.seed, step, "cloud", item))
        cloud, _ = sort_canonical(cloud)
        patch_sets, patch_tensors, refs = sample_payloads(model, step, item, independent_bits=True)
        masks = select_all(model.select, cloud, patch_sets)
        records = inject_all(cloud, masks, patch_sets, model.heads, model.slot_spec, patch_tensors)

        sq = None
        count = 0
        for rec in records.values():
            diff = rec.injected - rec.slots
            s = T.sum_all(diff * diff)
            sq = s if sq is None else sq + s
            count += rec.slots.size
        sh_terms.append(sq * (1.0 / count))

        if "bits1d" in records:
            rec = records["bits1d"]
            logits = model.heads["bits1d"].extract(rec.injected)
            bits_terms.append(T.bce_with_logits(logits, T.Tensor(rec.patches.data.copy())))
            hits = ((logits.data >= 0) == (rec.patches.data >= 0.5)).sum()
            bit_hits += int(hits)
            bit_total += logits.size
        if "feat2d" in records:
            rec = records["feat2d"]
            ex = model.heads["feat2d"].extract(rec.injected)
            feat_terms.append(_mse(ex, T.Tensor(rec.patches.data.copy())))
            # codec redundancy training: random drops, teacher-forced slots
            rng = stream_rng(cfg.seed, step, "drop", item)
            rate = rng.uniform(0.0, cfg.codec_drop_max)
            length = model.codec.length
            keep = np.sort(rng.permutation(length)[int(rate * length) :])
            kept = T.gather_rows(patch_tensors["feat2d"], keep)
            restored = model.codec.restore_tokens(kept, keep)
            recon_terms.append(_mse(restored, T.Tensor(refs["tokens"].copy())))
            pos_pred = model.codec.pos_mlp(kept)
            pos_terms.append(_mse(pos_pred, T.Tensor(model.codec.posenc[keep].copy())))
        if "obj3d" in records:
            rec = records["obj3d"]
            ex = model.heads["obj3d"].extract(rec.injected)
            obj_terms.append(_mse(ex, T.Tensor(rec.patches.data.copy())))

        # offline detect branch: the watermarked cloud enters as plain data
        wm_cloud = write_injected(cloud, records, model.slot_spec)
        d_logits = model.detect.logits(T.Tensor(wm_cloud.params59().astype(cfg.dtype)))
        truth = mask_truth_matrix(masks, cloud.n).astype(cfg.dtype)
        mask_terms.append(T.bce_with_logits(d_logits, T.Tensor(truth)))

    metrics = {"step": step}
    main = _avg(sh_terms) * cfg.sh_weight
    metrics["sh_mse"] = _avg(sh_terms).item()
    if bits_terms:
        main = main + _avg(bits_terms) * cfg.bits_weight
        metrics["bits_bce"] = _avg(bits_terms).item()
        metrics["bit_acc"] = bit_hits / max(bit_total, 1)
    if feat_terms:
        main = main + _avg(feat_terms) * cfg.feat_weight
        main = main + _avg(recon_terms) * cfg.codec_recon_weight + _avg(pos_terms) * cfg.codec_pos_weight
        metrics["feat_mse"] = _avg(feat_terms).item()
        metrics["codec_recon"] = _avg(recon_terms).item()
        metrics["codec_pos"] = _avg(pos_terms).item()
    if obj_terms:
        main = main + _avg(obj_terms) * cfg.obj_weight
        metrics["obj_mse"] = _avg(obj_terms).item()
    mask_loss = _avg(mask_terms) * cfg.mask_weight
    metrics["mask_bce"] = _avg(mask_terms).item()
    metrics["main_total"] = main.item()
    metrics["total"] = main.item() + mask_loss.item()

    main.backward()
    mask_loss.backward()
    opt_main.step()
    opt_detect.step()
    return metrics


# -- checkpoint glue -----------------------------------------------------------------


def model_state(model: WatermarkModel) -> dict:
    return {name: t.data for name, t in model.named_params().items()}


def optimizer_state(opt_main: T.Adam, opt_detect: T.Adam) -> dict:
    out: dict = {}
    for tag, opt in (("main", opt_main), ("detect", opt_detect)):
        out[f"opt.{tag}.step"] = np.asarray(float(opt.state.step), dtype=np.float32)
        for kind, block in (("m", opt.state.m), ("v", opt.state.v)):
            for name, arr in block.items():
                out[f"opt.{tag}.{kind}.{name}"] = arr
    return out


def save_model(model: WatermarkModel, opt_main: T.Adam, opt_detect: T.Adam) -> bytes:
    return save_checkpoint(model.config.to_dict(), model_state(model), optimizer_state(opt_main, opt_detect))


def load_model(data: bytes) -> tuple[WatermarkModel, dict]:
    """Rebuild the model from checkpoint bytes; returns (model, optimizer arrays)."""
    cfg_dict, params, opt = load_checkpoint(data)
    config = TrainConfig.from_dict(cfg_dict)
    model = WatermarkModel(config)
    named = model.named_params()
    extras = set(params) - set(named)
    if extras:
        raise CheckpointError(f"checkpoint has unknown parameters: {sorted(extras)[:4]}")
    load_params(named, params)
    return model, opt


def make_optimizers(model: WatermarkModel, opt_arrays: dict | None = None) -> tuple[T.Adam, T.Adam]:
    cfg = model.config
    opt_main = T.Adam(model.main_params(), cfg.lr)
    opt_detect = T.Adam(model.detect_params(), cfg.detect_lr)
    if opt_arrays:
        for tag, opt in (("main", opt_main), ("detect", opt_detect)):
            key = f"opt.{tag}.step"
            if key not in opt_arrays:
                continue
            opt.state.step = int(opt_arrays[key])
            for kind, block in (("m", opt.state.m), ("v", opt.state.v)):
                prefix = f"opt.{tag}.{kind}."
                for name, arr in opt_arrays.items():
                    if name.startswith(prefix):
                        block[name[len(prefix) :]] = arr.astype(cfg.dtype)
    return opt_main, opt_detect


@dataclass
class TrainResult:
    model: WatermarkModel
    checkpoint: bytes
    metrics: list


def train(
    config: TrainConfig,
    resume: bytes | None = None,
    log_every: int = 0,
) -> TrainResult:
    """Run the training loop from scratch or from a resume checkpoint."""
    model = WatermarkModel(config)
    opt_arrays = None
    if resume is not None:
        _, params, opt_arrays = load_checkpoint(resume)
        named = model.named_params()
        extras = set(params) - set(named)
        if extras:
            raise CheckpointError(f"resume checkpoint has unknown parameters: {sorted(extras)[:4]}")
        load_params(named, params)
    opt_main, opt_detect = make_optimizers(model, opt_arrays)
    start = opt_main.state.step
    rows: list = []
    for step in range(start, config.steps):
        metrics = train_step(model, opt_main, opt_detect, step)
        rows.append(metrics)
        if log_every and (step % log_every == 0 or step == config.steps - 1):
            parts = ", ".join(f"{k}={v:.4g}" for k, v in metrics.items() if k != "step")
            print(f"step {step}: {parts}", flush=True)
    return TrainResult(model=model, checkpoint=save_model(model, opt_main, opt_detect), metrics=rows)
