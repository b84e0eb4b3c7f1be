"""Adapter training, evaluation and the ablation runner."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import adapter as A
from . import tensor as T
from .backbone import SegmentationModel, TrainingDiverged, batches, forward_batch
from .data import Datasets, DomainSample
from .optim import OptimizerState, adamw_step
from .tensor import GradTape, Tensor

log = logging.getLogger(__name__)

RESULT_COLUMNS = ("config", "target", "step", "miou", "loss", "seconds")


def cross_entropy(logits, labels) -> Tensor:
    """Mean over pixels of ``-log softmax(logits)[label]``.

    ``logits`` is ``[..., K, H, W]`` and ``labels`` the matching ``[..., H, W]``
    integer grid.
    """
    logits = T.as_tensor(logits)
    labels = np.asarray(labels)
    K = logits.shape[-3]
    if labels.shape != logits.shape[:-3] + logits.shape[-2:]:
        raise T.ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")
    onehot = np.moveaxis(np.eye(K)[labels.astype(np.int64)], -1, -3)
    picked = T.sum(T.mul(T.log_softmax(logits, axis=-3), Tensor(onehot)))
    return T.scale(picked, -1.0 / labels.size)


def confusion(pred: np.ndarray, gt: np.ndarray, K: int) -> np.ndarray:
    """``[K, K]`` counts indexed ``[gt, pred]``."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise T.ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    idx = gt.astype(np.int64).reshape(-1) * K + pred.astype(np.int64).reshape(-1)
    return np.bincount(idx, minlength=K * K).reshape(K, K)


def iou_from_confusion(conf: np.ndarray) -> tuple[list[float], float]:
    """Per-class IoU (nan where a class is absent from both) and their mean."""
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - np.diag(conf)
    per_class = [float(i / u) if u > 0 else math.nan for i, u in zip(inter, union)]
    present = [v for v in per_class if not math.isnan(v)]
    return per_class, (float(np.mean(present)) if present else math.nan)


def miou(pred, gt, K: int) -> tuple[list[float], float]:
    return iou_from_confusion(confusion(pred, gt, K))


@dataclass
class MetricsRecord:
    split: str
    per_class_iou: list[float]
    miou: float
    loss: float
    step: int
    seconds: float | None = None


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 4
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    eval_every: int = 200
    eval_batch: int = 16
    seed: int = 0
    record_timing: bool = False


def predict(logits: np.ndarray) -> np.ndarray:
    """Argmax over the class axis; ties resolve to the lowest class index."""
    return np.argmax(logits, axis=-3)


def evaluate(
    model: SegmentationModel,
    samples: Sequence[DomainSample],
    cfg: A.AdapterConfig | None = None,
    adapters: Mapping[str, Tensor] | None = None,
    split: str = "",
    step: int = 0,
    batch: int = 16,
) -> MetricsRecord:
    K = model.config.classes
    conf = np.zeros((K, K), dtype=np.int64)
    total = 0.0
    frozen_adapters = None if adapters is None else {k: v.detach() for k, v in adapters.items()}
    for i in range(0, len(samples), batch):
        chunk = samples[i : i + batch]
        images = np.stack([s.image for s in chunk])
        labels = np.stack([s.labels for s in chunk])
        logits = forward_batch(model, images, cfg, frozen_adapters)
        total += cross_entropy(logits, labels).item() * len(chunk)
        conf += confusion(predict(logits.data), labels, K)
    per_class, m = iou_from_confusion(conf)
    return MetricsRecord(split, per_class, m, total / len(samples), step)


def decay_names(names) -> frozenset:
    """Weight decay applies to MLP weight matrices only."""
    return frozenset(n for n in names if ".mlp_" in n and n.endswith((".w1", ".w2")))


@dataclass
class TrainResult:
    adapters: dict[str, Tensor]
    trace: list[MetricsRecord] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)


def train_adapters(
    model: SegmentationModel,
    adapters: Mapping[str, Tensor],
    source: Sequence[DomainSample],
    cfg: A.AdapterConfig,
    hp: TrainConfig,
    eval_samples: Sequence[DomainSample] | None = None,
) -> TrainResult:
    """Train only the adapter parameters that ``cfg`` uses; the model stays frozen.

    Raises :class:`TrainingDiverged` (carrying the last finite parameters) if
    the loss stops being finite.
    """
    model = model.frozen()
    names = A.active_parameter_names(cfg, model.config.layers)
    params = {k: (v.trainable() if k in names else v.detach()) for k, v in adapters.items()}
    result = TrainResult(dict(params))
    if not names or hp.steps <= 0:
        return result
    state = OptimizerState(
        lr=hp.lr,
        beta1=hp.beta1,
        beta2=hp.beta2,
        eps=hp.eps,
        weight_decay=hp.weight_decay,
        decay_names=decay_names(names),
    )
    images = np.stack([s.image for s in source])
    labels = np.stack([s.labels for s in source])
    rng = np.random.default_rng([hp.seed, 17])
    stream = batches(len(source), min(hp.batch_size, len(source)), rng)
    eval_samples = source if eval_samples is None else eval_samples
    t0 = time.perf_counter()
    for step in range(hp.steps):
        idx = next(stream)
        with GradTape() as tape:
            loss = cross_entropy(forward_batch(model, images[idx], cfg, params), labels[idx])
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"adapter loss became {value} at step {step}", result.adapters)
        result.losses.append(value)
        grads = tape.gradient(loss, [params[n] for n in names])
        params = adamw_step(params, dict(zip(names, grads)), state)
        result.adapters = params
        if hp.eval_every and (step + 1) % hp.eval_every == 0:
            rec = evaluate(model, eval_samples, cfg, params, "source", step + 1, hp.eval_batch)
            if hp.record_timing:
                rec.seconds = time.perf_counter() - t0
            log.info("step %d loss %.4f source mIoU %.4f", step + 1, rec.loss, rec.miou)
            result.trace.append(rec)
    return result


# --------------------------------------------------------------------------
# ablation


@dataclass
class AblationRow:
    config: str
    target: str
    seed: int
    step: int
    miou: float
    loss: float
    per_class_iou: list[float]
    seconds: float | None = None


def run_ablation(
    model: SegmentationModel,
    datasets: Datasets,
    configs: Mapping[str, A.AdapterConfig],
    seeds: Sequence[int],
    hp: TrainConfig,
    l: int | None = None,
) -> list[AblationRow]:
    """Train every config with every seed on the source split; evaluate on each target.

    The frozen config is evaluated once per seed without any training.
    """
    rows: list[AblationRow] = []
    n_layers, d = model.config.layers, model.config.d
    for name, cfg in configs.items():
        for seed in seeds:
            t0 = time.perf_counter()
            adapters = A.init_adapters(n_layers, l or cfg.l, d, seed)
            run_hp = TrainConfig(**{**hp.__dict__, "seed": seed, "eval_every": 0})
            trained = train_adapters(model, adapters, datasets.source, cfg, run_hp)
            steps = run_hp.steps if A.active_parameter_names(cfg, n_layers) else 0
            for i, target in enumerate(datasets.targets):
                rec = evaluate(model, target, cfg, trained.adapters, f"target{i + 1}", steps, hp.eval_batch)
                seconds = time.perf_counter() - t0 if hp.record_timing else None
                rows.append(
                    AblationRow(name, f"target{i + 1}", seed, steps, rec.miou, rec.loss, rec.per_class_iou, seconds)
                )
            log.info("ablation %s seed %d done", name, seed)
    return rows


def _fmt(v: float) -> str:
    return repr(float(v))


def results_csv(rows: Sequence[AblationRow]) -> str:
    """``config,target,step,miou,loss,seconds``; seconds is blank unless timing was recorded."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS + ("seed",))
    for r in rows:
        seconds = "" if r.seconds is None else f"{r.seconds:.3f}"
        w.writerow((r.config, r.target, r.step, _fmt(r.miou), _fmt(r.loss), seconds, r.seed))
    return buf.getvalue()


def summarize(rows: Sequence[AblationRow]) -> dict:
    """Per-config mean/spread of target-averaged mIoU, plus every row's per-class IoU."""
    by_cfg: dict[str, dict[int, list[float]]] = {}
    for r in rows:
        by_cfg.setdefault(r.config, {}).setdefault(r.seed, []).append(r.miou)
    configs = {}
    for name, per_seed in by_cfg.items():
        avgs = [float(np.mean(v)) for _, v in sorted(per_seed.items())]
        configs[name] = {
            "seed_avg_miou": avgs,
            "mean": float(np.mean(avgs)),
            "spread": float(np.max(avgs) - np.min(avgs)),
        }
    return {
        "configs": configs,
        "rows": [
            {
                "config": r.config,
                "target": r.target,
                "seed": r.seed,
                "miou": r.miou,
                "per_class_iou": [None if math.isnan(v) else v for v in r.per_class_iou],
            }
            for r in rows
        ],
    }


def summary_json(rows: Sequence[AblationRow]) -> str:
    return json.dumps(summarize(rows), indent=2, sort_keys=True) + "\n"
