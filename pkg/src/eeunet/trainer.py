"""Mini-batch training with Adam, per-fold evaluation and cross-validation."""
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .dataset import FoldPlan, augment, make_folds
from .diffops.optim import AdamState, adam_step
from .errors import DivergenceDetected, EmptyFold
from .metrics import EVAL_CLASSES, aggregate, class_weights, evaluate_masks, loss_from_logits
from .model import ArchSpec, backward, build_model, forward, predict_mask, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    fold_index: int = 0
    k_folds: int = 5
    repeats: int = 1
    augment: bool = False
    weights_mode: str = "invfreq"
    arch: ArchSpec = field(default_factory=ArchSpec)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.weights_mode not in ("invfreq", "inverse-frequency", "uniform"):
            raise ValueError(f"unknown weights mode {self.weights_mode!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    val_dsc: dict
    best: bool


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    best_epoch: int = -1
    best_dsc: float = -math.inf
    best_checkpoint: str = None
    best_params: object = None  # in-memory copy of the archived model


def _stack(samples):
    x = np.stack([s.image for s in samples])[:, None]
    m = np.stack([s.mask for s in samples])
    return x, m


def train_step(params, adam, x, masks, weights, batch_id=None):
    logits, _, cache = forward(params, x, "train", keep_cache=True)
    loss, dlogits, _ = loss_from_logits(logits, masks, weights)
    if not math.isfinite(loss):
        raise DivergenceDetected(f"non-finite loss at batch {batch_id}", batch_id)
    backward(params, cache, dlogits)
    adam_step(params.param_list(), adam)
    return loss


def train(train_samples, cfg, val_samples=None, ckpt_path=None, on_record=None):
    """Train a fresh model on ``train_samples``; return ``(params, TrainLog)``.

    Each epoch visits the samples in a seeded random order in batches of
    ``cfg.batch_size`` (the last partial batch is kept). After every epoch
    the model is scored on ``val_samples``; the best-scoring state is kept
    on the log and, if ``ckpt_path`` is given, written there.
    """
    if not train_samples:
        raise EmptyFold("training fold is empty")
    rng = np.random.default_rng(cfg.seed)
    params = build_model(cfg.arch, cfg.seed)
    adam = AdamState(lr=cfg.lr)
    weights = class_weights([s.mask for s in train_samples], cfg.weights_mode)
    tlog = TrainLog()
    n = len(train_samples)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        losses = []
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            batch = [train_samples[i] for i in idx]
            if cfg.augment:
                seeds = rng.integers(0, 2**31, len(batch))
                batch = [augment(s, int(sd), True) for s, sd in zip(batch, seeds)]
            x, masks = _stack(batch)
            loss = train_step(params, adam, x, masks, weights, batch_id=f"epoch{epoch}:batch{b}")
            losses.append(loss)
            tlog.step_losses.append(loss)
        val = {}
        is_best = False
        if val_samples:
            report = aggregate(evaluate(params, val_samples))
            val = {c: report.table2[("All", c)].dsc for c, _ in EVAL_CLASSES}
            score = float(np.mean(list(val.values())))
            if score > tlog.best_dsc:
                is_best = True
                tlog.best_dsc, tlog.best_epoch = score, epoch
                tlog.best_params = params.copy()
                if ckpt_path is not None:
                    save_checkpoint(ckpt_path, params, adam, {"epoch": epoch, "val_dsc": val})
                    tlog.best_checkpoint = str(ckpt_path)
        rec = EpochRecord(epoch, float(np.mean(losses)), val, is_best)
        tlog.epochs.append(rec)
        log.info("epoch %d loss %.4f val %s", epoch, rec.mean_loss, val)
        if on_record is not None:
            on_record(asdict(rec))
    if not val_samples and ckpt_path is not None:
        save_checkpoint(ckpt_path, params, adam, {"epoch": cfg.epochs})
        tlog.best_checkpoint = str(ckpt_path)
    return params, tlog


def overfit(samples, arch, steps=200, lr=1e-3, seed=0, weights_mode="invfreq"):
    """Repeatedly fit one frozen batch; returns the per-step losses."""
    params = build_model(arch, seed)
    adam = AdamState(lr=lr)
    x, masks = _stack(samples)
    weights = class_weights(masks, weights_mode)
    return [train_step(params, adam, x, masks, weights, batch_id=i) for i in range(steps)]


def evaluate(params, samples, batch_size=8):
    """Eval-mode predictions scored per sample and foreground class."""
    if not samples:
        raise EmptyFold("evaluation fold is empty")
    records = []
    for start in range(0, len(samples), batch_size):
        batch = samples[start : start + batch_size]
        x, masks = _stack(batch)
        logits, _ = forward(params, x, "eval")
        pred = predict_mask(logits)
        for s, p in zip(batch, pred):
            records.extend(evaluate_masks(p, s.mask, s.meta, s.spacing))
    return records


@dataclass
class CVResult:
    report: object
    fold_reports: list
    records: list
    logs: list
    plans: list


def cross_validate(samples, cfg, plan=None, ckpt_dir=None, on_record=None):
    """k-fold cross-validation by patient, optionally repeated with new seeds.

    Each fold trains on the other k-1 folds and is evaluated on its own
    held-out patients with the final model. Records from all folds and
    repeats are pooled into one report.
    """
    patients = {}
    for s in samples:
        patients.setdefault(s.meta.patient_id, s.meta.pathology)
    records, fold_reports, logs, plans = [], [], [], []
    for rep in range(cfg.repeats):
        seed = cfg.seed + rep
        fold_plan = plan if (plan is not None and rep == 0) else make_folds(sorted(patients.items()), cfg.k_folds, seed)
        plans.append(fold_plan)
        for k in range(fold_plan.k):
            train_set, test_set = fold_plan.split(samples, k)
            if not train_set or not test_set:
                raise EmptyFold(f"fold {k} is empty")
            held = fold_plan.folds[k]
            assert not any(s.meta.patient_id in held for s in train_set), "patient leakage"
            fold_cfg = replace(cfg, fold_index=k, seed=seed * 1000 + k)
            ckpt = None if ckpt_dir is None else f"{ckpt_dir}/fold{k}_rep{rep}.ckpt"

            def tag(rec, k=k, rep=rep):
                if on_record is not None:
                    on_record({"repeat": rep, "fold": k, **rec})

            params, tlog = train(train_set, fold_cfg, test_set, ckpt, tag)
            fold_records = evaluate(params, test_set)
            records.extend(fold_records)
            fold_reports.append(aggregate(fold_records))
            logs.append(tlog)
    return CVResult(aggregate(records), fold_reports, records, logs, plans)


def log_to_jsonl(tlog):
    return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in tlog.epochs)


__all__ = ["TrainConfig", "TrainLog", "train", "evaluate", "cross_validate", "overfit", "FoldPlan"]
