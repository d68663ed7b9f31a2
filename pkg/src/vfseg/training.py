"""Lockstep training: the two party workers, the shared batch schedule,
and the single-process trainer used as the correctness oracle.

The split and monolithic paths run the exact same worker methods in the
exact same order; the only difference is whether the boundary tensors
cross a wire in between. Float64 survives serialization bit-for-bit, so
the two paths must produce bitwise-identical parameters.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .checkpoint import assign_tensors
from .errors import ConfigurationError, DataError, ValidationError
from .metrics import jaccard_iou, pixel_accuracy
from .model import BottomModel, TopModel
from .nn.functional import bce_with_logits
from .nn.optim import make_optimizer
from .nn.params import Tensor
from .presets import ModelConfig

# Entropy tag separating the schedule stream from layer-init streams.
_SCHEDULE_TAG = 0x5CED


def batch_schedule(seed: int, epoch: int, aligned_ids, batch_size: int) -> list[list[int]]:
    """Deterministic batch order for one epoch.

    A pure function of (seed, epoch, aligned ids): both parties call
    this independently and must get identical output. Ids within a
    batch are ascending (the payload invariant); the ragged tail is
    dropped so every step has a full batch.
    """
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    ids = sorted(int(i) for i in aligned_ids)
    if len(set(ids)) != len(ids):
        raise ValidationError("aligned ids contain duplicates")
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed, epoch, _SCHEDULE_TAG])))
    perm = rng.permutation(len(ids))
    batches = []
    for k in range(0, len(ids) - batch_size + 1, batch_size):
        batches.append(sorted(ids[j] for j in perm[k:k + batch_size]))
    return batches


def state_digest(tensors: dict[str, Tensor]) -> str:
    """SHA-256 over names, shapes, and raw little-endian float64 bytes."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        h.update(name.encode("utf-8"))
        h.update(repr(arr.shape).encode("ascii"))
        h.update(arr.tobytes())
    return h.hexdigest()


@dataclass
class StepOutcome:
    """What the top party learns from one training batch."""

    loss: float
    accuracy: float
    iou: float
    grad_feats: Tensor | None


class BottomWorker:
    """Image-party shard: encoder + compressor + its optimizer.

    Never touches labels, loss values, or mask tensors.
    """

    def __init__(self, cfg: ModelConfig, seed: int, images,
                 optimizer: str = "sgd", lr: float = 1e-2, momentum: float = 0.9):
        self.cfg = cfg
        self.model = BottomModel(cfg, seed)
        self.images = images
        self.opt = make_optimizer(optimizer, self.model.named_params(), lr, momentum)
        self.record_digests = False
        self.digests: list[str] = []

    def forward(self, ids, train: bool = True) -> Tensor:
        return self.model.forward(self.images.batch(ids), train=train)

    def backward_step(self, grad_feats: Tensor) -> None:
        self.model.zero_grad()
        self.model.backward(grad_feats)
        self.opt.step()
        if self.record_digests:
            self.digests.append(state_digest(self.param_tensors()))

    def param_tensors(self) -> dict[str, Tensor]:
        out = {name: data for name, data, _ in self.model.named_params()}
        out.update(dict(self.model.named_buffers()))
        return out

    def state_tensors(self, epoch: int, step: int) -> dict[str, Tensor]:
        out = dict(self.param_tensors())
        out.update(self.opt.state_tensors())
        out["meta.epoch"] = np.array([float(epoch)])
        out["meta.step"] = np.array([float(step)])
        return out

    def load_state(self, tensors: dict[str, Tensor]) -> tuple[int, int]:
        return _load_worker_state(self, tensors)


class TopWorker:
    """Label-party shard: expander + decoder, the loss, and the metrics."""

    def __init__(self, cfg: ModelConfig, seed: int, labels,
                 optimizer: str = "sgd", lr: float = 1e-2, momentum: float = 0.9):
        self.cfg = cfg
        self.model = TopModel(cfg, seed)
        self.labels = labels
        self.opt = make_optimizer(optimizer, self.model.named_params(), lr, momentum)
        self.record_digests = False
        self.digests: list[str] = []

    def process(self, ids, feats: Tensor, train: bool = True) -> StepOutcome:
        masks = self.labels.batch(ids)
        logits = self.model.forward(feats, train=train)
        loss, grad_logits = bce_with_logits(logits, masks)
        acc = pixel_accuracy(logits, masks)
        iou = jaccard_iou(logits, masks)
        grad_feats = None
        if train:
            self.model.zero_grad()
            grad_feats = self.model.backward(grad_logits)
            self.opt.step()
            if self.record_digests:
                self.digests.append(state_digest(self.param_tensors()))
        return StepOutcome(loss, acc, iou, grad_feats)

    def predict(self, feats: Tensor) -> Tensor:
        return self.model.forward(feats, train=False)

    def param_tensors(self) -> dict[str, Tensor]:
        out = {name: data for name, data, _ in self.model.named_params()}
        out.update(dict(self.model.named_buffers()))
        return out

    def state_tensors(self, epoch: int, step: int) -> dict[str, Tensor]:
        out = dict(self.param_tensors())
        out.update(self.opt.state_tensors())
        out["meta.epoch"] = np.array([float(epoch)])
        out["meta.step"] = np.array([float(step)])
        return out

    def load_state(self, tensors: dict[str, Tensor]) -> tuple[int, int]:
        return _load_worker_state(self, tensors)


def _load_worker_state(worker, tensors: dict[str, Tensor]) -> tuple[int, int]:
    params = worker.param_tensors()
    opt_state = worker.opt.state_tensors()
    expected = set(params) | set(opt_state) | {"meta.epoch", "meta.step"}
    missing = sorted(expected - set(tensors))
    extra = sorted(set(tensors) - expected)
    if missing or extra:
        raise DataError(
            f"checkpoint does not match worker state "
            f"(missing {missing[:5]}, unexpected {extra[:5]})")
    assign_tensors(params, {k: tensors[k] for k in params}, strict=True)
    worker.opt.load_state({k: tensors[k] for k in opt_state})
    epoch = int(tensors["meta.epoch"].reshape(-1)[0])
    step = int(tensors["meta.step"].reshape(-1)[0])
    return epoch, step


class MonolithicTrainer:
    """Both shards in one process, no wire: the equivalence oracle.

    Runs the identical worker methods in the identical order as the
    split path, so any divergence between the two is a bug, not noise.
    """

    def __init__(self, cfg: ModelConfig, seed: int, images, labels,
                 optimizer: str = "sgd", lr: float = 1e-2, momentum: float = 0.9):
        self.cfg = cfg
        self.seed = seed
        self.bottom = BottomWorker(cfg, seed, images, optimizer, lr, momentum)
        self.top = TopWorker(cfg, seed, labels, optimizer, lr, momentum)

    def train_step(self, ids) -> StepOutcome:
        feats = self.bottom.forward(ids, train=True)
        outcome = self.top.process(ids, feats, train=True)
        self.bottom.backward_step(outcome.grad_feats)
        return outcome

    def train(self, aligned_ids, batch_size: int, epochs: int,
              on_step=None) -> list[StepOutcome]:
        if not aligned_ids:
            raise ValidationError("no aligned sample ids; nothing to train on")
        outcomes = []
        step = 0
        for epoch in range(epochs):
            for ids in batch_schedule(self.seed, epoch, aligned_ids, batch_size):
                outcome = self.train_step(ids)
                step += 1
                outcomes.append(outcome)
                if on_step is not None:
                    on_step(epoch, step, ids, outcome)
        return outcomes

    def predict(self, ids) -> Tensor:
        feats = self.bottom.forward(ids, train=False)
        return self.top.predict(feats)


def evaluate_pairwise(bottom: BottomWorker, top: TopWorker, ids,
                      batch_size: int) -> dict[str, float]:
    """Whole-set metrics with exact micro-aggregation: integer confusion
    counts are summed across batches before any division."""
    if not ids:
        raise ValidationError("no ids to evaluate")
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    ordered = sorted(int(i) for i in ids)
    matches = total = inter = union = 0
    loss_sum = 0.0
    for k in range(0, len(ordered), batch_size):
        chunk = ordered[k:k + batch_size]
        feats = bottom.forward(chunk, train=False)
        masks = top.labels.batch(chunk)
        logits = top.predict(feats)
        loss, _ = bce_with_logits(logits, masks)
        loss_sum += loss * masks.size
        pred = logits > 0.0
        truth = masks > 0.5
        matches += int(np.count_nonzero(pred == truth))
        total += masks.size
        inter += int(np.count_nonzero(pred & truth))
        union += int(np.count_nonzero(pred | truth))
    return {
        "loss": loss_sum / total,
        "pixel_accuracy": matches / total,
        "iou": 1.0 if union == 0 else inter / union,
        "samples": float(len(ordered)),
    }
