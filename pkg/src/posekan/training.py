"""Loss, optimizer, learning-rate schedule and the train / evaluate loops."""
from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    MissingGroundTruthError,
    NonFiniteGradientError,
    NonFiniteLossError,
    ShapeMismatchError,
)
from .metrics import mpjpe, pa_mpjpe, pck_auc

log = logging.getLogger(__name__)

METRICS_HEADER = "epoch,split,loss,mpjpe,pa_mpjpe,lr,seconds"


def elastic_loss(Y, Y_hat, alpha=0.03):
    """``(1-a) mean ||y - y_hat||_2^2 + a mean ||y - y_hat||_1`` over every
    joint in the batch, and its gradient with respect to ``Y_hat``."""
    Y = np.asarray(Y, dtype=np.float64)
    Y_hat = np.asarray(Y_hat, dtype=np.float64)
    if Y.shape != Y_hat.shape:
        raise ShapeMismatchError(f"targets {Y.shape} vs predictions {Y_hat.shape}")
    n_joints = Y.size // Y.shape[-1]
    diff = Y_hat - Y
    sq = (diff * diff).sum(axis=-1)
    l1 = np.abs(diff).sum(axis=-1)
    loss = (1.0 - alpha) * sq.sum() / n_joints + alpha * l1.sum() / n_joints
    grad = ((1.0 - alpha) * 2.0 * diff + alpha * np.sign(diff)) / n_joints
    return float(loss), grad


def lr_schedule(epoch, lr0=0.001, decay=0.99, every=4):
    return lr0 * decay ** (epoch // every)


@dataclass
class TrainState:
    lr0: float = 0.001
    decay: float = 0.99
    decay_every: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rng_seed: int = 0
    step: int = 0
    epoch: int = 0
    lr: float = 0.001
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    v_hat: dict = field(default_factory=dict)

    def init_moments(self, params):
        for name, p in params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.v_hat[name] = np.zeros_like(p)
        return self

    def set_epoch(self, epoch):
        self.epoch = epoch
        self.lr = lr_schedule(epoch, self.lr0, self.decay, self.decay_every)


def amsgrad_step(state, params, grads):
    """In-place AMSGrad update (no bias correction). Raises before touching
    any parameter if a gradient is non-finite."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    state.init_moments(params)
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads[name]
        m, v, v_hat = state.m[name], state.v[name], state.v_hat[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        np.maximum(v_hat, v, out=v_hat)
        p -= state.lr * m / (np.sqrt(v_hat) + state.eps)
    state.step += 1
    return params, state


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    alpha: float = 0.03
    lr: float = 0.001
    decay: float = 0.99
    decay_every: int = 4
    seed: int = 0
    out_dir: str | None = None
    checkpoint_every: int = 0
    log_seconds: bool = False
    config_echo: str | None = None


def epoch_permutation(n, seed, epoch):
    """Shuffle order for one epoch; depends only on ``(seed, epoch)``."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def train_epoch(model, dataset, state, config, epoch):
    """One pass over ``dataset``; returns the sample-weighted mean loss."""
    state.set_epoch(epoch)
    Y_all = dataset.targets / dataset.target_scale
    order = epoch_permutation(len(dataset), config.seed, epoch)
    params = model.params()
    grads = model.grads
    total = 0.0
    for b, start in enumerate(range(0, len(order), config.batch_size)):
        idx = order[start : start + config.batch_size]
        model.zero_grad()
        Y_hat, cache = model.forward(
            dataset.inputs[idx], train=True, dropout_key=(config.seed, state.step)
        )
        loss, dY = elastic_loss(Y_all[idx], Y_hat, config.alpha)
        if not np.isfinite(loss):
            raise NonFiniteLossError(epoch, b, loss)
        model.backward(cache, dY)
        amsgrad_step(state, params, grads)
        total += loss * len(idx)
    return total / len(order)


def _write_row(path, epoch, split, loss, mp, pa, lr, seconds):
    def f(x):
        return "" if x is None else repr(float(x))

    with open(path, "a") as fh:
        fh.write(f"{epoch},{split},{f(loss)},{f(mp)},{f(pa)},{f(lr)},{f(seconds)}\n")


def train(model, dataset, config=None, val_dataset=None, state=None):
    """Train ``model`` in place. Returns ``(model, state, history)`` where
    ``history`` holds one dict per logged row."""
    from .checkpoint import save_checkpoint

    config = config or TrainConfig()
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if dataset.targets is None:
        raise MissingGroundTruthError("training dataset has no 3D targets")
    if config.batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if state is None:
        state = TrainState(
            lr0=config.lr, decay=config.decay, decay_every=config.decay_every,
            rng_seed=config.seed, lr=config.lr,
        )
    state.init_moments(model.params())

    metrics_path = None
    if config.out_dir:
        os.makedirs(config.out_dir, exist_ok=True)
        metrics_path = os.path.join(config.out_dir, "metrics.csv")
        with open(metrics_path, "w") as fh:
            if config.config_echo:
                fh.write(config.config_echo + "\n")
            fh.write(METRICS_HEADER + "\n")

    history = []
    for epoch in range(state.epoch, config.epochs):
        t0 = time.perf_counter()
        loss = train_epoch(model, dataset, state, config, epoch)
        seconds = time.perf_counter() - t0 if config.log_seconds else None
        row = {"epoch": epoch + 1, "split": "train", "loss": loss, "lr": state.lr}
        history.append(row)
        log.info("epoch %d train loss %.6g lr %.6g", epoch + 1, loss, state.lr)
        if metrics_path:
            _write_row(metrics_path, epoch + 1, "train", loss, None, None, state.lr, seconds)
        if val_dataset is not None:
            rep = evaluate(model, val_dataset, alpha=config.alpha)
            history.append({"epoch": epoch + 1, "split": "val", **rep})
            if metrics_path:
                _write_row(metrics_path, epoch + 1, "val", rep["loss"], rep["mpjpe"],
                           rep["pa_mpjpe"], state.lr, None)
        state.epoch = epoch + 1
        last = state.epoch == config.epochs
        periodic = config.checkpoint_every and state.epoch % config.checkpoint_every == 0
        if config.out_dir and (last or periodic):
            save_checkpoint(
                model, state, os.path.join(config.out_dir, f"ckpt_epoch{state.epoch}.pkan")
            )
    return model, state, history


def predict_mm(model, dataset, batch_size=256):
    """Eval-mode predictions in millimetres."""
    return model.predict(dataset.inputs, batch_size) * dataset.target_scale


def metrics_report(pred_mm, dataset):
    """Global and per-action metrics of millimetre predictions."""
    if dataset.targets is None:
        raise MissingGroundTruthError("dataset carries no 3D ground truth")
    gt = dataset.targets
    pa, skipped = pa_mpjpe(pred_mm, gt, return_skipped=True)
    pck, auc = pck_auc(pred_mm, gt)
    report = {
        "mpjpe": mpjpe(pred_mm, gt),
        "pa_mpjpe": pa,
        "pa_skipped": skipped,
        "pck": pck,
        "auc": auc,
        "per_action": {},
    }
    if dataset.has_actions:
        labels = np.array([str(a) for a in dataset.actions])
        for action in sorted(set(labels)):
            sel = labels == action
            pck_a, auc_a = pck_auc(pred_mm[sel], gt[sel])
            report["per_action"][action] = {
                "count": int(sel.sum()),
                "mpjpe": mpjpe(pred_mm[sel], gt[sel]),
                "pa_mpjpe": pa_mpjpe(pred_mm[sel], gt[sel]),
                "pck": pck_a,
                "auc": auc_a,
            }
    return report


def action_average(report, key):
    """Unweighted mean over actions (the per-action table's average row)."""
    per = report["per_action"]
    if not per:
        return report[key]
    return float(np.mean([v[key] for v in per.values()]))


def evaluate(model, dataset, alpha=0.03, batch_size=256):
    """Eval-mode metrics over ``dataset``; also reports the training loss
    in model units."""
    if dataset.targets is None:
        raise MissingGroundTruthError("dataset carries no 3D ground truth")
    pred = predict_mm(model, dataset, batch_size)
    report = metrics_report(pred, dataset)
    scale = dataset.target_scale
    report["loss"] = elastic_loss(dataset.targets / scale, pred / scale, alpha)[0]
    return report
