"""Batching, the combined objective, the learning-rate schedule, and the
epoch loop.

The objective is prediction cross-entropy plus a weighted contrastive
term plus an L2 penalty over all trainable parameters (the embedding
padding row excluded). When the contrastive branch is disabled (flag off
or weight 0) the second forward pass, negative sampling, and bank
bookkeeping are skipped entirely, so such runs are random-stream
identical to a model without the module.
"""

from __future__ import annotations

import configparser
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import evaluate
from .autodiff import Tape, Tensor
from .contrastive import (
    RANDOM,
    SAME_LAST_ITEM,
    MemoryBank,
    build_negative_batch,
    contrastive_loss_batch,
    twin_forward,
)
from .data import Dataset
from .errors import ContractError, DivergenceError, EmptyDatasetError
from .graph import batch_graphs
from .model import ModelConfig, ParameterStore, SessionGraphModel
from .optim import Adam
from .rng import SeededRng

PROB_FLOOR = 1e-12


@dataclass
class TrainConfig:
    """All knobs of a training run; file sections mirror the module map."""

    # model
    dim: int = 100
    layers: int = 1
    scale: float = 12.0
    dropout: float = 0.1
    normalized_scoring: bool = True
    positional: bool = True
    # data
    max_session_len: int = 50
    val_fraction: float = 0.1
    # training
    batch_size: int = 100
    lr: float = 1e-3
    lr_decay: float = 0.1
    lr_decay_every: int = 3
    weight_decay: float = 1e-5
    epochs: int = 10
    seed: int = 0
    eval_k: int = 20
    # contrastive
    contrast: bool = True
    weak_negatives: bool = False
    beta: float = 0.1
    tau: float = 12.0
    n_negatives: int = 32
    literal_contrastive: bool = False

    SECTIONS = {
        "model": ("dim", "layers", "scale", "dropout", "normalized_scoring", "positional"),
        "data": ("max_session_len", "val_fraction"),
        "training": ("batch_size", "lr", "lr_decay", "lr_decay_every", "weight_decay",
                     "epochs", "seed", "eval_k"),
        "contrastive": ("contrast", "weak_negatives", "beta", "tau", "n_negatives",
                        "literal_contrastive"),
    }

    def __post_init__(self):
        for name in ("batch_size", "epochs", "lr_decay_every", "n_negatives", "dim",
                     "layers", "max_session_len", "eval_k"):
            if getattr(self, name) < 1:
                raise ContractError(f"TrainConfig: {name} must be >= 1")
        for name in ("lr", "tau"):
            if getattr(self, name) <= 0:
                raise ContractError(f"TrainConfig: {name} must be positive")
        for name in ("beta", "weight_decay"):
            if getattr(self, name) < 0:
                raise ContractError(f"TrainConfig: {name} must be >= 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ContractError("TrainConfig: val_fraction outside [0, 1)")
        if self.weak_negatives and not self.contrast:
            raise ContractError("TrainConfig: weak_negatives requires contrast=on")

    def model_config(self) -> ModelConfig:
        return ModelConfig(dim=self.dim, max_positions=self.max_session_len,
                           layers=self.layers, scale=self.scale, dropout=self.dropout,
                           normalized_scoring=self.normalized_scoring,
                           positional=self.positional)

    @property
    def contrastive_enabled(self) -> bool:
        return self.contrast and self.beta > 0

    def lr_for_epoch(self, epoch: int) -> float:
        """Epochs are 1-based; the rate drops by lr_decay every
        lr_decay_every epochs."""
        return self.lr * self.lr_decay ** ((epoch - 1) // self.lr_decay_every)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_sources(cls, config_file=None, overrides=()) -> "TrainConfig":
        """Build from defaults, then a key=value config file, then
        command-line overrides ("key=value" or "section.key=value")."""
        values = {}
        valid = {f.name: f.type for f in fields(cls)}
        if config_file is not None:
            parser = configparser.ConfigParser()
            read = parser.read(Path(config_file))
            if not read:
                raise ContractError(f"config file not found: {config_file}")
            for section, keys in cls.SECTIONS.items():
                if not parser.has_section(section):
                    continue
                for key in parser.options(section):
                    if key not in keys:
                        raise ContractError(f"config: unknown key {key!r} in [{section}]")
                    values[key] = parser.get(section, key)
        for item in overrides:
            key, sep, value = item.partition("=")
            if not sep:
                raise ContractError(f"override {item!r} is not key=value")
            key = key.split(".")[-1].strip()
            if key not in valid:
                raise ContractError(f"override: unknown config key {key!r}")
            values[key] = value.strip()
        parsed = {}
        defaults = cls()
        for key, raw in values.items():
            current = getattr(defaults, key)
            if isinstance(current, bool):
                lowered = str(raw).strip().lower()
                if lowered in ("1", "true", "on", "yes"):
                    parsed[key] = True
                elif lowered in ("0", "false", "off", "no"):
                    parsed[key] = False
                else:
                    raise ContractError(f"config: {key} expects on/off, got {raw!r}")
            elif isinstance(current, int):
                parsed[key] = int(raw)
            else:
                parsed[key] = float(raw)
        return cls(**parsed)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss_total_mean: float
    loss_total_median: float
    loss_pred_mean: float
    loss_contrast_mean: float
    val_recall: float | None
    val_mrr: float | None
    seconds: float
    fallback_samples: int
    clamped_predictions: int

    DETERMINISTIC = ("epoch", "lr", "loss_total_mean", "loss_total_median",
                     "loss_pred_mean", "loss_contrast_mean", "val_recall", "val_mrr",
                     "fallback_samples", "clamped_predictions")

    def deterministic_view(self):
        return tuple(getattr(self, name) for name in self.DETERMINISTIC)


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def trajectory(self):
        """Everything seed-determined: epoch records minus wall-clock."""
        summary = {k: v for k, v in self.summary.items() if k != "seconds_total"}
        return tuple(r.deterministic_view() for r in self.epochs), tuple(sorted(summary.items()))

    def write_jsonl(self, path):
        with open(Path(path), "w", encoding="utf-8") as fh:
            for record in self.epochs:
                fh.write(json.dumps({"record": "epoch", **asdict(record)}) + "\n")
            fh.write(json.dumps({"record": "summary", **self.summary}) + "\n")


def prediction_loss(probs: Tensor, labels) -> tuple[Tensor, int]:
    """Mean cross-entropy -log p[label]; probabilities floored at 1e-12.

    Returns (loss, number of floored entries). ``labels`` are 1-based
    item indices; column j of probs scores item j+1.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 1 or labels.max() > probs.shape[1]:
        raise ContractError("prediction_loss: label outside vocabulary")
    picked = ad.gather_cols(probs, labels - 1)
    clamped = int((picked.data <= PROB_FLOOR).sum())
    return ad.neg(ad.mean(ad.log(ad.clamp_min(picked, PROB_FLOOR)))), clamped


def regularization(params: ParameterStore) -> Tensor:
    """Sum of squares of every trainable entry except the padding row."""
    total = None
    for name, t in params.tensors.items():
        if name == "item_embeddings":
            t = ad.slice_axis(t, 0, 1, t.shape[0])
        term = ad.tensor_sum(ad.mul(t, t))
        total = term if total is None else ad.add(total, term)
    return total


def total_loss(pred: Tensor, contrast: Tensor | None, beta: float,
               weight_decay: float, params: ParameterStore) -> Tensor:
    out = pred
    if contrast is not None and beta > 0:
        out = ad.add(out, ad.scalar_mul(contrast, beta))
    if weight_decay > 0:
        out = ad.add(out, ad.scalar_mul(regularization(params), weight_decay))
    return out


def _validation_metrics(model, sessions, k):
    if not sessions:
        return None, None
    ranked = evaluate.rank_sessions(model, sessions, k)
    labels = [s.label for s in sessions]
    return (evaluate.recall_at_k(ranked, labels, k),
            evaluate.mrr_at_k(ranked, labels, k))


def train(dataset: Dataset, config: TrainConfig):
    """Run the epoch loop; returns (ParameterStore, TrainReport).

    A non-finite loss aborts before the pending update, so the raised
    DivergenceError carries the last finite parameters.
    """
    if not dataset.train:
        raise EmptyDatasetError("train: dataset has no training sessions")
    hub = SeededRng(config.seed)
    order = hub.stream("val-split").permutation(len(dataset.train))
    n_val = int(round(config.val_fraction * len(dataset.train)))
    val_sessions = [dataset.train[i] for i in order[:n_val]]
    used = [dataset.train[i] for i in np.sort(order[n_val:])]
    if not used:
        raise EmptyDatasetError("train: validation split consumed every session")

    store = ParameterStore(dataset.num_items, config.model_config(),
                           rng=hub.stream("init"))
    model = SessionGraphModel(store)
    adam = Adam(store.tensors, lr=config.lr)
    shuffle_rng = hub.stream("shuffle")
    dropout_rng = hub.stream("dropout")
    sample_rng = hub.stream("negatives")

    bank = MemoryBank([s.items[-1] for s in used], config.dim) \
        if config.contrastive_enabled else None
    strategy = RANDOM if config.weak_negatives else SAME_LAST_ITEM

    report = TrainReport()
    started = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        epoch_start = time.perf_counter()
        adam.lr = config.lr_for_epoch(epoch)
        perm = shuffle_rng.permutation(len(used))
        totals, preds, cons = [], [], []
        fallbacks = 0
        clamps = 0
        for lo in range(0, len(perm), config.batch_size):
            ids = perm[lo: lo + config.batch_size]
            sessions = [used[i] for i in ids]
            batch = batch_graphs(sessions, labels=[s.label for s in sessions],
                                 session_ids=ids)
            with Tape() as tape:
                if config.contrastive_enabled:
                    first, second = twin_forward(model, batch, dropout_rng)
                    negatives, neg_mask, fb = build_negative_batch(
                        bank, batch, config.n_negatives, strategy, sample_rng)
                    fallbacks += fb
                    contrast = ad.mean(contrastive_loss_batch(
                        first.hybrid, second.hybrid, negatives, neg_mask,
                        config.tau, literal_form=config.literal_contrastive))
                else:
                    first = model.forward(batch, rng=dropout_rng, training=True)
                    contrast = None
                probs = ad.softmax(first.logits)
                pred, n_clamped = prediction_loss(probs, batch.labels)
                clamps += n_clamped
                loss = total_loss(pred, contrast, config.beta,
                                  config.weight_decay, store)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(
                    f"train: non-finite loss at epoch {epoch}", params=store)
            tape.backward(loss, store.tensors.values())
            adam.step()
            if config.contrastive_enabled:
                bank.update(batch.session_ids, first.hybrid.data, second.hybrid.data)
            totals.append(value)
            preds.append(pred.item())
            cons.append(contrast.item() if contrast is not None else 0.0)
        val_recall, val_mrr = _validation_metrics(model, val_sessions, config.eval_k)
        report.epochs.append(EpochRecord(
            epoch=epoch,
            lr=adam.lr,
            loss_total_mean=float(np.mean(totals)),
            loss_total_median=float(np.median(totals)),
            loss_pred_mean=float(np.mean(preds)),
            loss_contrast_mean=float(np.mean(cons)),
            val_recall=val_recall,
            val_mrr=val_mrr,
            seconds=time.perf_counter() - epoch_start,
            fallback_samples=fallbacks,
            clamped_predictions=clamps,
        ))

    train_ranked = evaluate.rank_sessions(model, used, 1)
    report.summary = {
        "epochs": config.epochs,
        "train_sessions": len(used),
        "val_sessions": len(val_sessions),
        "final_loss_mean": report.epochs[-1].loss_total_mean,
        "train_recall_at_1": evaluate.recall_at_k(
            train_ranked, [s.label for s in used], 1),
        "optimizer_steps": adam.step_count,
        "seconds_total": time.perf_counter() - started,
    }
    return store, report
