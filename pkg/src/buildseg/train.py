"""Training loop, evaluation, prediction and uncertainty export.

Every random draw is derived from (config seed, purpose tag, step, item), so
runs are reproducible end to end, resumed runs continue bit-identically, and
no generator state needs to be serialized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import data as D
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig, apply_overrides
from .losses import LossWeights, seg_loss, uncertainty_loss
from .metrics import ConfusionCounts, MetricSummary, confusion_counts, metrics_from_counts
from .model import NetworkOutput, SegmentationNetwork
from .ops import bilinear_upsample
from .optim import AdamW, cosine_restart_lr
from .tensor import Tensor, no_grad

_TAG_INIT = 11
_TAG_SCENE = 12
_TAG_AUGMENT = 13
_TAG_FORWARD = 14
_TAG_LOSS = 15
_TAG_VAL = 16
_TAG_EVAL = 17


class TrainingDiverged(RuntimeError):
    pass


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def derive_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence([seed, *key]).generate_state(1)[0])


def loss_weights(config: ModelConfig) -> LossWeights:
    return LossWeights(
        boundary=config.boundary_weight,
        kl=config.kl_weight,
        global_branch=config.global_loss_weight,
        local_branch=config.local_loss_weight,
    )


def synthetic_batch(config: ModelConfig, step: int) -> list[D.Scene]:
    """Fresh scenes for one step: generate with margin, then crop/flip."""
    scenes = []
    for item in range(config.batch_size):
        scene_seed = derive_seed(config.seed, _TAG_SCENE, step, item)
        scene = D.generate_synthetic_scene(
            scene_seed, size=config.image_size + config.scene_margin, difficulty=config.difficulty
        )
        aug_rng = derive_rng(config.seed, _TAG_AUGMENT, step, item)
        scenes.append(D.augment(scene, aug_rng, config.image_size))
    return scenes


def validation_scenes(config: ModelConfig) -> list[D.Scene]:
    return [
        D.generate_synthetic_scene(
            derive_seed(config.seed, _TAG_VAL, idx), size=config.image_size, difficulty=config.difficulty
        )
        for idx in range(config.val_count)
    ]


@dataclass
class TrainResult:
    model: SegmentationNetwork
    optimizer: AdamW
    config: ModelConfig
    history: list[dict]
    checkpoint_path: Path | None


def _config_meta(config: ModelConfig) -> dict[str, str]:
    out = {}
    for f in fields(ModelConfig):
        value = getattr(config, f.name)
        out[f.name] = ",".join(str(v) for v in value) if isinstance(value, tuple) else str(value)
    return out


def config_from_meta(meta: dict[str, str]) -> ModelConfig:
    return apply_overrides(ModelConfig(), dict(meta)).validate()


def save_train_state(path, model: SegmentationNetwork, optimizer: AdamW, config: ModelConfig, step: int) -> None:
    arrays = dict(model.state_arrays("model."))
    arrays.update(optimizer.state_arrays())
    meta = {"step": step, "epoch": step // max(config.steps_per_epoch, 1), "config": _config_meta(config)}
    save_checkpoint(path, arrays, meta)


def load_model(path) -> tuple[SegmentationNetwork, ModelConfig, dict]:
    arrays, meta = load_checkpoint(path)
    config = config_from_meta(meta["config"])
    model = SegmentationNetwork(config)
    model.load_state({k[len("model.") :]: v for k, v in arrays.items() if k.startswith("model.")})
    return model, config, meta


def train(config: ModelConfig, out_dir: str | Path | None = None, resume: str | Path | None = None,
          batch_provider=None, log_stdout: bool = False) -> TrainResult:
    """Run the optimization loop; returns the final state and step history.

    ``batch_provider(config, step) -> list[Scene]`` replaces the synthetic
    stream (the estimator facade uses this to feed user arrays).
    """
    config.validate()
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    model = SegmentationNetwork(config, init_rng=derive_rng(config.seed, _TAG_INIT))
    optimizer = AdamW(list(model.named_parameters()), lr=config.learning_rate, weight_decay=config.weight_decay)
    start_step = 0
    if resume is not None:
        arrays, meta = load_checkpoint(resume)
        model.load_state({k[len("model.") :]: v for k, v in arrays.items() if k.startswith("model.")})
        optimizer.load_state_arrays(arrays, int(meta["step"]))
        start_step = int(meta["step"])

    provider = batch_provider or synthetic_batch
    weights = loss_weights(config)
    first_cycle = max(1, config.restart_epochs * config.steps_per_epoch)
    log_file = (out_path / "train.log").open("a") if out_path is not None else None
    history: list[dict] = []

    def emit(record: dict) -> None:
        history.append(record)
        line = " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in record.items())
        if log_file is not None:
            log_file.write(line + "\n")
            log_file.flush()
        if log_stdout:
            print(line)

    try:
        for step in range(start_step, config.total_steps):
            scenes = provider(config, step)
            lr = cosine_restart_lr(step, config.learning_rate, first_cycle)

            seg_total = None
            unc_g_total = None
            unc_l_total = None
            for item, scene in enumerate(scenes):
                fwd_rng = derive_rng(config.seed, _TAG_FORWARD, step, item)
                out: NetworkOutput = model(Tensor(scene.image), rng=fwd_rng, training=True)
                seg = seg_loss(out.logits, scene.mask, boundary_weight=config.boundary_weight,
                               smooth=config.dice_smooth)
                seg_total = seg if seg_total is None else seg_total + seg
                if out.field_global is not None:
                    loss_rng = derive_rng(config.seed, _TAG_LOSS, step, item)
                    unc_g = uncertainty_loss(out.field_global, scene.mask, config.kl_weight, loss_rng)
                    unc_l = uncertainty_loss(out.field_local, scene.mask, config.kl_weight, loss_rng)
                    unc_g_total = unc_g if unc_g_total is None else unc_g_total + unc_g
                    unc_l_total = unc_l if unc_l_total is None else unc_l_total + unc_l

            inv = 1.0 / len(scenes)
            loss = seg_total * inv
            record = {"step": step, "lr": lr, "seg": seg_total.item() * inv}
            if unc_g_total is not None:
                loss = loss + config.global_loss_weight * (unc_g_total * inv) \
                            + config.local_loss_weight * (unc_l_total * inv)
                record["unc_global"] = unc_g_total.item() * inv
                record["unc_local"] = unc_l_total.item() * inv
            record["loss"] = loss.item()

            if not math.isfinite(record["loss"]):
                seeds = [s.seed for s in scenes]
                raise TrainingDiverged(f"non-finite loss {record['loss']} at step {step}; batch scene seeds: {seeds}")

            loss.backward()
            optimizer.step(lr=lr)
            optimizer.zero_grad()

            if config.val_interval > 0 and (step + 1) % config.val_interval == 0:
                record["val_iou"] = evaluate_model(model, config, validation_scenes(config)).iou
            emit(record)
    finally:
        if log_file is not None:
            log_file.close()

    checkpoint_path = None
    if out_path is not None:
        checkpoint_path = out_path / "checkpoint.bseg"
        save_train_state(checkpoint_path, model, optimizer, config, config.total_steps)
    return TrainResult(model, optimizer, config, history, checkpoint_path)


# -- inference -------------------------------------------------------------------


def _forward_tiles(model: SegmentationNetwork, config: ModelConfig, image: np.ndarray,
                   want_uncertainty: bool = False):
    """Run the model over non-overlapping tiles of an arbitrary image.

    Yields (y, x, output) per tile. Sampling uses a fixed derived seed per
    tile, so repeated calls are deterministic.
    """
    scene = D.Scene(image.astype(np.float32), np.zeros((1, *image.shape[1:]), dtype=np.float32), 0)
    tile = min(config.tile_size, max(32, (min(image.shape[1:]) // 32) * 32))
    tileset = D.tile_image(scene, tile)
    outputs = []
    with no_grad():
        for idx, piece in enumerate(tileset.tiles):
            rng = derive_rng(config.seed, _TAG_EVAL, idx)
            out = model(Tensor(piece.image), rng=rng, training=False)
            outputs.append((piece.y, piece.x, out))
    return outputs, tileset


def predict_logits(model: SegmentationNetwork, config: ModelConfig, image: np.ndarray) -> np.ndarray:
    outputs, tileset = _forward_tiles(model, config, image)
    pieces = [(y, x, out.logits.numpy()) for y, x, out in outputs]
    return D.merge_tiles(pieces, tileset.padded_size, tileset.source_size)


def evaluate_model(model: SegmentationNetwork, config: ModelConfig, scenes: list[D.Scene]) -> MetricSummary:
    counts = ConfusionCounts()
    for scene in scenes:
        logits = predict_logits(model, config, scene.image)
        counts = counts + confusion_counts(logits, scene.mask, threshold=config.threshold)
    return metrics_from_counts(counts)


def predict_to_file(model: SegmentationNetwork, config: ModelConfig, image_path, out_mask_path) -> np.ndarray:
    image = D.load_image(image_path)
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    logits = predict_logits(model, config, image)
    mask = (1.0 / (1.0 + np.exp(-logits)) >= config.threshold).astype(np.float32)
    D.save_mask(out_mask_path, mask)
    return mask


def export_uncertainty_maps(model: SegmentationNetwork, config: ModelConfig, image_path,
                            out_prefix) -> tuple[Path, Path]:
    """Write the local/global uncertainty maps as full-resolution graymaps."""
    if model.decoder is None:
        raise ValueError("model was built without the uncertainty decoder")
    image = D.load_image(image_path)
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    outputs, tileset = _forward_tiles(model, config, image)
    paths = []
    with no_grad():
        for name, pick in (("local", lambda o: o.u_local), ("global", lambda o: o.u_global)):
            pieces = [(y, x, bilinear_upsample(pick(out), 4).numpy()) for y, x, out in outputs]
            full = D.merge_tiles(pieces, tileset.padded_size, tileset.source_size)
            path = Path(f"{out_prefix}_{name}.pgm")
            D.save_gray(path, np.clip(full, 0.0, 1.0))
            paths.append(path)
    return paths[0], paths[1]
