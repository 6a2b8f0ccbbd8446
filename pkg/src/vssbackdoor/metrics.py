"""Clean accuracy and attack success rate, both reported in percent."""

import numpy as np

from .attacks import TriggerSpec, apply_trigger
from .defenses import apply_defense
from .errors import DomainError
from .models import predict


def eval_acc(model, images, labels, defense=None, batch_size=256):
    """Top-1 accuracy on untriggered images, after the optional defense transform."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise DomainError("cannot evaluate accuracy on an empty set")
    x = apply_defense(images, defense, ids=np.arange(labels.size))
    preds = predict(model, x, batch_size)
    return 100.0 * float(np.mean(preds == labels))


def eval_asr(model, images, labels, spec: TriggerSpec, defense=None, batch_size=256):
    """Share of triggered non-target images classified as the target class."""
    labels = np.asarray(labels)
    keep = np.flatnonzero(labels != spec.target)
    if keep.size == 0:
        raise DomainError("no non-target samples to evaluate ASR on")
    x = apply_trigger(np.asarray(images)[keep], spec)
    x = apply_defense(x, defense, ids=keep)
    preds = predict(model, x, batch_size)
    return 100.0 * float(np.mean(preds == spec.target))
