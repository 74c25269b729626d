"""Pair-batched SGD training, inference and checkpoint I/O."""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .backbone import image_features
from .cci import batch_contrastive_loss, cci_forward, total_loss, zero_gates
from .data import Dataset, PairBatch, batches_per_epoch, sample_batch
from .errors import CheckpointError, ConfigError, DivergenceError, NonFiniteError
from .model import ModelConfig, ModelParams
from .sci import sci_forward
from .tensor import GradTape, Tensor, backward

logger = logging.getLogger(__name__)

MAGIC = b"CINCKPT1"
CHECKPOINT_VERSION = 1

# ablation presets: backbone only, +SCI, +SCI with contrastive loss on SCI features, full model
VARIANTS = {
    "plain": dict(use_sci=False, sci_variant="negative", cci_enabled=False, gates_forced_zero=False),
    "sci": dict(use_sci=True, sci_variant="negative", cci_enabled=False, gates_forced_zero=False),
    "pos-sci": dict(use_sci=True, sci_variant="positive", cci_enabled=False, gates_forced_zero=False),
    "sci-cont": dict(use_sci=True, sci_variant="negative", cci_enabled=True, gates_forced_zero=True),
    "cin": dict(use_sci=True, sci_variant="negative", cci_enabled=True, gates_forced_zero=False),
}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    base_lr: float = 0.001
    lr_decay: float = 0.5
    lr_decay_every: int = 20
    weight_decay: float = 2e-4
    momentum: float = 0.0
    init_gain: float = 1.0
    clip_norm: Optional[float] = None
    alpha: float = 2.0
    beta: float = 0.5
    seed: int = 0
    cci_enabled: bool = True
    gates_forced_zero: bool = False
    flip: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative", "epochs")
        for name in ("base_lr", "lr_decay", "beta"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive", name)
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive (or None to disable)", "clip_norm")
        if not self.init_gain > 0:
            raise ConfigError("init_gain must be positive", "init_gain")
        if self.lr_decay_every < 1:
            raise ConfigError("lr_decay_every must be >= 1", "lr_decay_every")
        if self.weight_decay < 0 or self.alpha < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("weight_decay and alpha must be >= 0, momentum in [0, 1)", "momentum")


def lr_at(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return config.base_lr * config.lr_decay ** (epoch // config.lr_decay_every)


def _decays(name: str) -> bool:
    return name.endswith(".weight")


# ---------------------------------------------------------------- forward passes


def classify(features: Tensor, params) -> Tensor:
    return T.fully_connected(T.pool_spatial_mean(features), params["classifier.weight"], params["classifier.bias"])


@dataclass
class Losses:
    total: Tensor
    soft: Tensor
    cont: Tensor
    logits: Tensor


def compute_losses(images, labels, y_ab, params, model_config: ModelConfig, config: TrainConfig) -> Losses:
    """Joint objective for a batch laid out as [A_1..A_N, B_1..B_N].

    The classification loss uses every image's SCI features; the contrastive
    loss uses the cross-image features of the N pairs.
    """
    if config.cci_enabled and not model_config.use_sci:
        raise ConfigError("the contrastive branch needs SCI enabled", "cci_enabled")
    fm = image_features(images, params, model_config.backbone)
    sci = sci_forward(fm, params, model_config.sci_variant) if model_config.use_sci else None
    logits = classify(sci.z if sci is not None else fm.spatial, params)
    l_soft = T.cross_entropy(logits, labels)
    if config.cci_enabled:
        n = len(y_ab)
        a, b = np.arange(n), np.arange(n, 2 * n)
        gates = zero_gates(n) if config.gates_forced_zero else None
        out = cci_forward(fm.take(a), fm.take(b), sci.take(a), sci.take(b), params, gates)
        l_cont = batch_contrastive_loss(out.z_a_prime, out.z_b_prime, y_ab, params, config.beta)
    else:
        l_cont = Tensor(0.0)
    return Losses(total_loss(l_soft, l_cont, config.alpha), l_soft, l_cont, logits)


def predict_proba(images: np.ndarray, params, model_config: ModelConfig, chunk: int = 64) -> np.ndarray:
    """Class probabilities for a stack of images via the single-image inference path."""
    images = np.asarray(images, dtype=np.float64)
    out = []
    for start in range(0, len(images), chunk):
        fm = image_features(images[start:start + chunk], params, model_config.backbone)
        feats = sci_forward(fm, params, model_config.sci_variant).z if model_config.use_sci else fm.spatial
        out.append(T.row_softmax(classify(feats, params)).data)
    return np.concatenate(out) if out else np.zeros((0, model_config.num_classes))


def infer(image, params, model_config: ModelConfig) -> np.ndarray:
    """Probability vector for one (H, W, 3) image. Only backbone, SCI and classifier are used."""
    image = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    return predict_proba(image[None], params, model_config)[0]


def accuracy(dataset: Dataset, params, model_config: ModelConfig) -> float:
    if len(dataset) == 0:
        return float("nan")
    pred = predict_proba(dataset.images, params, model_config).argmax(axis=1)
    return float((pred == dataset.class_ids).mean())


# ---------------------------------------------------------------- optimisation


@dataclass
class StepResult:
    loss_total: float
    loss_soft: float
    loss_cont: float
    params: ModelParams
    velocity: Optional[Dict[str, np.ndarray]] = None
    correct: int = 0
    grads: Dict[str, Tensor] = field(default_factory=dict, repr=False)


def train_step(
    batch: PairBatch,
    params: ModelParams,
    model_config: ModelConfig,
    config: TrainConfig,
    lr: Optional[float] = None,
    velocity: Optional[Dict[str, np.ndarray]] = None,
) -> StepResult:
    """One SGD update: p <- p - lr * (grad + weight_decay * p), decay on weights only.

    With ``clip_norm`` set, the loss gradient is first rescaled so its global
    L2 norm is at most ``clip_norm``; weight decay is added after clipping.
    """
    lr = config.base_lr if lr is None else lr
    try:
        with GradTape() as tape:
            losses = compute_losses(batch.images, batch.labels, batch.y_ab, params, model_config, config)
        grads = backward(losses.total, tape, params)
    except NonFiniteError as exc:
        raise DivergenceError("forward/backward", str(exc)) from exc
    values = {"loss_total": losses.total.item(), "loss_soft": losses.soft.item(), "loss_cont": losses.cont.item()}
    for term, v in values.items():
        if not np.isfinite(v):
            raise DivergenceError(term, v)

    scale = 1.0
    if config.clip_norm is not None:
        norm = float(np.sqrt(sum(float(np.sum(grads[n].data ** 2)) for n in params)))
        scale = min(1.0, config.clip_norm / norm) if norm > 0 else 1.0
    new, new_velocity = {}, {} if config.momentum else None
    for name, p in params.items():
        g = grads[name].data * scale if scale != 1.0 else grads[name].data
        if _decays(name) and config.weight_decay:
            g = g + config.weight_decay * p.data
        if config.momentum:
            v = config.momentum * velocity[name] + g if velocity else g
            new_velocity[name] = v
            g = v
        new[name] = p.data - lr * g
    try:
        updated = params.replace(new)
    except NonFiniteError as exc:
        raise DivergenceError("parameters", str(exc)) from exc
    correct = int((losses.logits.data.argmax(axis=1) == batch.labels).sum())
    return StepResult(params=updated, velocity=new_velocity, correct=correct, grads=grads, **values)


# ---------------------------------------------------------------- checkpoints


@dataclass(frozen=True)
class Checkpoint:
    params: ModelParams
    model_config: ModelConfig
    seed: int
    config_hash: str


def save_checkpoint(params: ModelParams, path, model_config: ModelConfig, seed: int = 0) -> Path:
    """Magic bytes, u64 header length, JSON header, then little-endian float64 values in header order."""
    names = list(params)
    payload = b"".join(np.ascontiguousarray(params[n].data, dtype="<f8").tobytes() for n in names)
    header = {
        "version": CHECKPOINT_VERSION,
        "names": names,
        "shapes": [list(params[n].shape) for n in names],
        "config": model_config.to_dict(),
        "config_hash": model_config.config_hash(),
        "seed": int(seed),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(MAGIC + struct.pack("<Q", len(blob)) + blob + payload)
    tmp.replace(path)
    return path


def load_checkpoint(path, expected: Optional[ModelConfig] = None) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    try:
        (hlen,) = struct.unpack("<Q", raw[8:16])
        header = json.loads(raw[16:16 + hlen])
        config = ModelConfig.from_dict(header["config"])
    except (struct.error, ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    if config.config_hash() != header["config_hash"]:
        raise CheckpointError(f"{path}: config hash mismatch")
    if expected is not None and expected.config_hash() != header["config_hash"]:
        raise CheckpointError(f"{path}: checkpoint config differs from the expected model config")
    payload = raw[16 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    values = np.frombuffer(payload, dtype="<f8")
    arrays, offset = {}, 0
    for name, shape in zip(header["names"], header["shapes"]):
        n = int(np.prod(shape))
        arrays[name] = values[offset:offset + n].reshape(shape).astype(np.float64)
        offset += n
    if offset != values.size:
        raise CheckpointError(f"{path}: payload size does not match header shapes")
    return Checkpoint(ModelParams(arrays), config, header["seed"], header["config_hash"])


# ---------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    params: ModelParams
    best_params: ModelParams
    best_val_acc: float
    best_epoch: int
    history: List[dict]


def _finite_or_none(x: float):
    return None if x is None or not np.isfinite(x) else x


def fit(
    train: Dataset,
    val: Optional[Dataset],
    model_config: ModelConfig,
    config: TrainConfig,
    out_dir=None,
    params: Optional[ModelParams] = None,
) -> TrainResult:
    """Train for ``config.epochs`` epochs of ceil(len(train) / 20) pair batches each.

    With ``out_dir`` set, writes ``metrics.jsonl`` (one line per epoch),
    ``last.ckpt`` after every epoch and ``best.ckpt`` whenever validation
    accuracy improves.
    """
    if train.num_classes != model_config.num_classes:
        raise ConfigError("dataset and model disagree on the number of classes", "num_classes")
    params = params or ModelParams.initialize(model_config, seed=config.seed, gain=config.init_gain)
    rng = np.random.default_rng([config.seed, 7])
    out = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_file = open(out / "metrics.jsonl", "w")

    best_params, best_acc, best_epoch = params, -1.0, -1
    history, velocity = [], None
    last_good = None
    n_batches = batches_per_epoch(train)
    try:
        for epoch in range(config.epochs):
            lr = lr_at(epoch, config)
            tot = soft = cont = 0.0
            correct = seen = 0
            for _ in range(n_batches):
                batch = sample_batch(train, rng, flip=config.flip)
                try:
                    step = train_step(batch, params, model_config, config, lr, velocity)
                except DivergenceError as exc:
                    exc.last_good = last_good
                    raise
                params, velocity = step.params, step.velocity
                tot += step.loss_total
                soft += step.loss_soft
                cont += step.loss_cont
                correct += step.correct
                seen += len(batch.labels)
            val_acc = accuracy(val, params, model_config) if val is not None else float("nan")
            row = {
                "epoch": epoch,
                "lr": lr,
                "loss_total": tot / n_batches,
                "loss_soft": soft / n_batches,
                "loss_cont": cont / n_batches,
                "train_acc": correct / seen,
                "val_acc": _finite_or_none(val_acc),
            }
            history.append(row)
            logger.info("epoch %d lr %.2e loss %.4f val_acc %s", epoch, lr, row["loss_total"], row["val_acc"])
            if np.isfinite(val_acc) and val_acc > best_acc:
                best_params, best_acc, best_epoch = params, val_acc, epoch
                if out is not None:
                    save_checkpoint(params, out / "best.ckpt", model_config, config.seed)
            if out is not None:
                metrics_file.write(json.dumps(row, sort_keys=True) + "\n")
                metrics_file.flush()
                last_good = save_checkpoint(params, out / "last.ckpt", model_config, config.seed)
    finally:
        if metrics_file is not None:
            metrics_file.close()
    if best_epoch < 0:
        best_params = params
        if out is not None:
            save_checkpoint(params, out / "best.ckpt", model_config, config.seed)
    return TrainResult(params, best_params, best_acc, best_epoch, history)
