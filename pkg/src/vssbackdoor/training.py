"""Cross-entropy training over a (possibly poisoned) dataset, and checkpoints.

Clean and poisoned samples share one loss; the clean/backdoor split only lives
in the dataset composition. The optimizer is AdamW with a linear warmup from
``warmup_lr`` to ``base_lr`` followed by cosine decay to zero, gradient
clipping at global norm ``grad_clip``, and batches drawn from a seeded
permutation each epoch.
"""

import copy
import json
import math
import time
import zipfile
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .defenses import DefenseSpec, apply_defense
from .errors import ConfigError, DivergenceError, FormatError, NumericError
from .metrics import eval_acc, eval_asr
from .models import ModelConfig, VisionSsmClassifier, as_image_tensor, build_model
from .seeding import derive_seed

PLACEMENTS = ("none", "train", "eval", "both")
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    base_lr: float = 1e-3
    warmup_lr: float = 1e-5
    warmup_steps: int = 200
    weight_decay: float = 1e-8
    betas: tuple = (0.9, 0.999)
    grad_clip: float = 1.0
    seed: int = 0
    defense_placement: str = "none"

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("epochs and batch_size must be positive")
        if self.base_lr < 0 or self.warmup_lr < 0 or self.warmup_steps < 0:
            raise ConfigError("learning rates and warmup_steps must be non-negative")
        if self.defense_placement not in PLACEMENTS:
            raise ConfigError(f"defense_placement must be one of {PLACEMENTS}")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def loss(logits, labels):
    """Mean softmax cross-entropy."""
    if not torch.all(torch.isfinite(logits)):
        raise NumericError("non-finite logits")
    return F.cross_entropy(logits, torch.as_tensor(labels, dtype=torch.long))


def lr_at(step, total_steps, cfg: TrainConfig):
    if step < cfg.warmup_steps:
        return cfg.warmup_lr + (cfg.base_lr - cfg.warmup_lr) * step / cfg.warmup_steps
    decay = max(total_steps - cfg.warmup_steps, 1)
    progress = min((step - cfg.warmup_steps) / decay, 1.0)
    return 0.5 * cfg.base_lr * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainResult:
    model: VisionSsmClassifier
    history: List[dict] = field(default_factory=list)
    steps: int = 0


def _state_copy(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def train(model, images, labels, cfg: TrainConfig, *, defense: Optional[DefenseSpec] = None,
          eval_images=None, eval_labels=None, trigger=None, log_path=None, step_losses=None) -> TrainResult:
    """Train ``model`` in place; returns it with one record per epoch and split.

    ``step_losses``, if a list, receives the loss of every optimizer step.
    """
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    if n == 0:
        raise ConfigError("training set is empty")
    train_defense = defense if cfg.defense_placement in ("train", "both") else None
    eval_defense = defense if cfg.defense_placement in ("eval", "both") else None

    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.warmup_lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    order_rng = np.random.default_rng(derive_seed(cfg.seed, "batch-order"))
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    dtype = next(model.parameters()).dtype
    history = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    step = 0

    def emit(rec):
        history.append(rec)
        if log_fh:
            log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            log_fh.flush()

    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            last_good = _state_copy(model)
            model.train()
            perm = order_rng.permutation(n)
            total_loss, correct = 0.0, 0
            for start in range(0, n, cfg.batch_size):
                idx = perm[start:start + cfg.batch_size]
                x = images[idx]
                if train_defense is not None:
                    x = apply_defense(x, train_defense, ids=epoch * n + idx)
                y = torch.from_numpy(labels[idx])
                logits = model(as_image_tensor(x, dtype))
                batch_loss = F.cross_entropy(logits, y)
                if not torch.isfinite(batch_loss):
                    model.load_state_dict(last_good)
                    raise DivergenceError(f"non-finite loss at step {step}", state=last_good, step=step)
                lr = lr_at(step, total, cfg)
                for group in opt.param_groups:
                    group["lr"] = lr
                opt.zero_grad(set_to_none=True)
                batch_loss.backward()
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                opt.step()
                step += 1
                value = batch_loss.item()
                if step_losses is not None:
                    step_losses.append(value)
                total_loss += value * len(idx)
                correct += int((logits.argmax(-1) == y).sum())
            emit({"epoch": epoch, "split": "train", "loss": total_loss / n, "acc": 100.0 * correct / n,
                  "asr": None, "wall_time": time.perf_counter() - t0})
            if eval_images is not None:
                t1 = time.perf_counter()
                with torch.no_grad():
                    model.eval()
                    eval_loss = float(F.cross_entropy(
                        torch.cat([model(eval_images[s:s + 256]) for s in range(0, len(eval_labels), 256)]),
                        torch.as_tensor(np.asarray(eval_labels), dtype=torch.long)))
                acc = eval_acc(model, eval_images, eval_labels, eval_defense)
                asr = eval_asr(model, eval_images, eval_labels, trigger, eval_defense) if trigger else None
                emit({"epoch": epoch, "split": "test", "loss": eval_loss, "acc": acc, "asr": asr,
                      "wall_time": time.perf_counter() - t1})
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    return TrainResult(model, history, step)


def save_checkpoint(model: VisionSsmClassifier, path, *, seed=None, step=0):
    """Write config, seed, step and every named tensor to an ``.npz`` container."""
    meta = {
        "format": "vssbackdoor-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "seed": model.config.seed if seed is None else seed,
        "step": int(step),
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
    }
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, model: Optional[VisionSsmClassifier] = None):
    """Load a checkpoint; returns ``(model, meta)``.

    Everything is read and validated before any parameter is written, so a
    bad file leaves ``model`` untouched.
    """
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
        meta = json.loads(arrays.pop("__meta__").tobytes().decode("utf-8"))
    except (OSError, ValueError, KeyError, EOFError, zipfile.BadZipFile, UnicodeDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint {path}: {exc}") from exc
    if meta.get("format") != "vssbackdoor-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint format/version in {path}")
    try:
        cfg = ModelConfig(**meta["config"])
    except (TypeError, ConfigError) as exc:
        raise FormatError(f"bad model config in checkpoint: {exc}") from exc

    target = model if model is not None else build_model(cfg, dtype=getattr(torch, meta.get("dtype", "float32")))
    expected = target.state_dict()
    state = {}
    for name, ref in expected.items():
        key = f"param/{name}"
        if key not in arrays:
            raise FormatError(f"checkpoint is missing tensor {name}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(ref.shape):
            raise FormatError(f"tensor {name} has shape {arr.shape}, expected {tuple(ref.shape)}")
        state[name] = torch.from_numpy(arr.copy())
    extra = set(arrays) - {f"param/{k}" for k in expected}
    if extra:
        raise FormatError(f"checkpoint has unexpected tensors {sorted(extra)[:3]}")
    target.load_state_dict(state)
    target.eval()
    return target, meta


def clone_model(model):
    return copy.deepcopy(model)
