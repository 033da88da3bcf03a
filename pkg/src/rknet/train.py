"""Gaussian NLL objective, Adam, and the early-stopped training loop."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .linalg import NumericalError, chol_solve, cholesky, mT
from .nn import ParamStore, Tape, backward
from .rkn import RknModel, rkn_init_hidden, rkn_step
from .ssm import Dataset, InitialLaw

__all__ = [
    "TrainConfig",
    "TrainHistory",
    "TrainingDiverged",
    "gaussian_nll",
    "nll_op",
    "sequence_loss",
    "loss_and_grad",
    "Adam",
    "train_rkn",
    "write_history_csv",
]

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 300
    patience: int = 20
    l2_lambda: float = 1e-4
    seed: int = 0
    clip_norm: float | None = None
    train_mix: list = field(default_factory=lambda: [["S1", 1000]])
    val_mix: list = field(default_factory=lambda: [["S1", 100]])

    def __post_init__(self) -> None:
        if not (self.learning_rate > 0 and self.batch_size > 0 and self.l2_lambda >= 0):
            raise ValueError("learning_rate and batch_size must be positive, l2_lambda >= 0")
        if self.max_epochs < 0 or self.patience < 1:
            raise ValueError("max_epochs must be >= 0 and patience >= 1")

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        data = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    stop_epoch: int | None = None
    events: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train_loss)


def gaussian_nll(e: np.ndarray, P: np.ndarray) -> np.ndarray:
    """``0.5 * (log det P + e^T P^{-1} e + m log 2 pi)``, batched over leading axes."""
    e = np.asarray(e, dtype=float)
    P = np.asarray(P, dtype=float)
    m = e.shape[-1]
    L = cholesky(P, "error covariance")
    logdet = 2.0 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(-1)
    maha = (e * chol_solve(L, e)).sum(-1)
    return 0.5 * (logdet + maha + m * LOG_2PI)


def nll_op(x_post: np.ndarray, P: np.ndarray, x_true: np.ndarray, weight: float,
           tape: Tape | None = None) -> np.ndarray:
    """``weight * sum_b nll(x_true_b - x_post_b, P_b)`` as a 0-d array."""
    e = x_true - x_post
    m = e.shape[-1]
    L = cholesky(P, "error covariance")
    Pinv_e = chol_solve(L, e)
    logdet = 2.0 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(-1)
    val = np.asarray(weight * 0.5 * (logdet + (e * Pinv_e).sum(-1) + m * LOG_2PI).sum())
    if tape is not None:

        def vjp(g):
            s = float(g[0]) * weight
            Pinv = chol_solve(L, np.broadcast_to(np.eye(m), P.shape))
            gP = 0.5 * s * (Pinv - Pinv_e[..., :, None] * Pinv_e[..., None, :])
            return (-s * Pinv_e, 0.5 * (gP + mT(gP)))

        tape.record((x_post, P), (val,), vjp)
    return val


def _l2_op(store: ParamStore, lam: float, tape: Tape | None) -> np.ndarray:
    arrays = list(store.params.values())
    val = np.asarray(lam * store.sq_norm())
    if tape is not None:
        tape.record(arrays, (val,), lambda g: [2.0 * lam * float(g[0]) * p for p in arrays])
    return val


def sequence_loss(model: RknModel, initial: InitialLaw, x: np.ndarray, z: np.ndarray,
                  l2_lambda: float = 0.0, tape: Tape | None = None) -> tuple[float, list]:
    """Mean NLL over the batch and time plus ``l2_lambda * ||theta||^2``.

    Returns the loss and the list of recorded scalar terms (the backward seeds).
    """
    B, T, _ = x.shape
    hidden = rkn_init_hidden(model, initial, B)
    w = 1.0 / (B * T)
    terms = []
    for t in range(T):
        rec, hidden = rkn_step(model, hidden, z[:, t], tape, t)
        terms.append(nll_op(rec.state.x_hat, rec.state.P, x[:, t], w, tape))
    if l2_lambda:
        terms.append(_l2_op(model.params, l2_lambda, tape))
    loss = math.fsum(float(s) for s in terms)
    return loss, terms


def loss_and_grad(model: RknModel, initial: InitialLaw, x: np.ndarray, z: np.ndarray,
                  l2_lambda: float = 0.0) -> tuple[float, np.ndarray]:
    """Loss and flat gradient (in the store's deterministic ordering)."""
    store = model.params
    store.zero_grad()
    tape = Tape(store)
    loss, terms = sequence_loss(model, initial, x, z, l2_lambda, tape)
    backward(tape, [(s, 1.0) for s in terms])
    return loss, store.grad_flat()


class Adam:
    def __init__(self, store: ParamStore, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.store = store
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in store.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in store.params.items()}
        self.t = 0

    def step(self, scale: float = 1.0) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = self.lr * math.sqrt(1 - b2**self.t) / (1 - b1**self.t)
        for k, p in self.store.params.items():
            g = self.store.grads[k] * scale
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p -= lr_t * self.m[k] / (np.sqrt(self.v[k]) + self.eps)


def _mean_nll(model: RknModel, initial: InitialLaw, x: np.ndarray, z: np.ndarray) -> float:
    loss, _ = sequence_loss(model, initial, x, z, 0.0, None)
    return loss


def train_rkn(config: TrainConfig, model_init_seed: int, train_set: Dataset, val_set: Dataset,
              model: RknModel | None = None) -> tuple[RknModel, TrainHistory]:
    """Adam over shuffled mini-batches with validation early stopping.

    The returned model carries the parameters of the best validation epoch.
    """
    if model is None:
        model = RknModel(train_set.model.F, train_set.model.H, seed=model_init_seed)
    initial = train_set.initial
    x_tr, z_tr, _ = train_set.stacked()
    x_va, z_va, _ = val_set.stacked()
    if z_tr.shape[-1] != model.n or x_tr.shape[-1] != model.m:
        raise ValueError("training data dimensions do not match the model")
    history = TrainHistory()
    if config.max_epochs == 0:
        return model, history

    opt = Adam(model.params, lr=config.learning_rate)
    best = model.params.copy()
    best_val = math.inf
    clip = config.clip_norm
    N = x_tr.shape[0]
    since_best = 0
    for epoch in range(config.max_epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(N)
        batch_losses = []
        for start in range(0, N, config.batch_size):
            idx = order[start:start + config.batch_size]
            snapshot = None if clip is not None else model.params.copy()
            try:
                loss, grad = loss_and_grad(model, initial, x_tr[idx], z_tr[idx], config.l2_lambda)
                ok = math.isfinite(loss) and np.all(np.isfinite(grad))
            except NumericalError:
                ok = False
            if not ok:
                if clip is not None:
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {start} "
                                           f"even with gradient clipping at {clip:g}")
                clip = 10.0
                model.params.set_flat(snapshot.flat())
                history.events.append(f"epoch {epoch}: divergence detected, clipping at 10")
                log.warning("divergence at epoch %d; enabling gradient clipping", epoch)
                continue
            scale = 1.0
            if clip is not None:
                gnorm = float(np.linalg.norm(grad))
                if gnorm > clip:
                    scale = clip / gnorm
            opt.step(scale)
            batch_losses.append(loss)
        try:
            val = _mean_nll(model, initial, x_va, z_va)
        except NumericalError:
            val = math.inf
        history.train_loss.append(float(np.mean(batch_losses)) if batch_losses else math.nan)
        history.val_loss.append(val)
        log.info("epoch %d train %.5f val %.5f", epoch, history.train_loss[-1], val)
        if val < best_val:
            best_val = val
            best = model.params.copy()
            history.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                history.stop_epoch = epoch
                history.events.append(f"early stop at epoch {epoch}")
                break
    if history.best_epoch is None:
        raise TrainingDiverged("no epoch produced a finite validation loss")
    model.params.set_flat(best.flat())
    return model, history


def write_history_csv(history: TrainHistory, path: str | Path,
                      provenance: dict | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for key, val in (provenance or {}).items():
            fh.write(f"# {key}: {val}\n")
        fh.write(f"# best_epoch: {history.best_epoch}\n")
        fh.write(f"# stop_epoch: {history.stop_epoch}\n")
        for ev in history.events:
            fh.write(f"# event: {ev}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for i, (tr, va) in enumerate(zip(history.train_loss, history.val_loss)):
            w.writerow([i, repr(tr), repr(va)])
