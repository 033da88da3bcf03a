"""Recursive KalmanNet: a Kalman-structured filter with a learned gain and covariance.

Two recurrent branches read the same squared features. The gain branch emits
the gain ``K`` (``m x n``); the covariance branch emits a lower-triangular factor
``C``. The corrected covariance is the propagated term
``(I - K H) F P_prev F^T (I - K H)^T`` plus ``C C^T``. The filter never sees
the noise covariances.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .kalman import FilterRun, FilterState, stack_episodes
from .linalg import NumericalError, cholesky, mT
from .nn import (ParamStore, Tape, dense_forward, dense_from_store, gru_from_store, gru_step,
                 init_params, sigmoid, softplus)
from .ssm import Dataset, Episode, InitialLaw

__all__ = [
    "DIAG_FLOOR",
    "RknModel",
    "RknHidden",
    "CholFactor",
    "StepRecord",
    "build_features",
    "chol_head_to_factor",
    "rkn_init_hidden",
    "rkn_step",
    "rkn_filter",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
    "file_hash",
]

DIAG_FLOOR = 1e-6
# small output layers: the untrained filter starts near zero gain, where the
# covariance recursion cannot blow up
HEAD_INIT_SCALE = 0.01
BRANCHES = ("gain", "chol")


class CheckpointError(ValueError):
    """Checkpoint file is malformed or does not match the expected architecture."""


def arch_spec(feat_dim: int, m: int, n: int, hidden: int = 32) -> dict:
    layers = []
    for branch, out in (("gain", m * n), ("chol", m * (m + 1) // 2)):
        layers += [(f"{branch}.in", "dense", feat_dim, hidden),
                   (f"{branch}.gru", "gru", hidden, hidden),
                   (f"{branch}.out", "dense", hidden, out, HEAD_INIT_SCALE)]
    return {"feat_dim": feat_dim, "m": m, "n": n, "hidden": hidden, "layers": layers}


class RknModel:
    """Learnable parameters of both branches plus the fixed system matrices ``F`` and ``H``."""

    def __init__(self, F: np.ndarray, H: np.ndarray, hidden: int = 32, seed: int = 0,
                 params: ParamStore | None = None) -> None:
        self.F = np.atleast_2d(np.asarray(F, dtype=float))
        self.H = np.atleast_2d(np.asarray(H, dtype=float))
        self.m = self.F.shape[0]
        self.n = self.H.shape[0]
        if self.H.shape[1] != self.m:
            raise ValueError(f"H must be n x {self.m}")
        self.feat_dim = self.n + self.m + self.n * self.m + self.n
        self.hidden = hidden
        self.seed = seed
        self.arch = arch_spec(self.feat_dim, self.m, self.n, hidden)
        self.params = params if params is not None else init_params(self.arch, seed)
        self._check_params()
        # layer views share the store's arrays, which are only ever updated in place
        self._layers = {b: self._build_layers(b) for b in BRANCHES}

    def _check_params(self) -> None:
        ref = init_params(self.arch, 0)
        if list(ref.params) != list(self.params.params):
            raise CheckpointError("parameter names do not match the architecture")
        for k, v in ref.params.items():
            if self.params[k].shape != v.shape:
                raise CheckpointError(f"parameter {k} has shape {self.params[k].shape}, "
                                      f"expected {v.shape}")

    @property
    def gain_out_dim(self) -> int:
        return self.m * self.n

    @property
    def chol_out_dim(self) -> int:
        return self.m * (self.m + 1) // 2

    def layers(self, branch: str):
        return self._layers[branch]

    def _build_layers(self, branch: str):
        p = self.params
        return (dense_from_store(p, f"{branch}.in", "relu"), gru_from_store(p, f"{branch}.gru"),
                dense_from_store(p, f"{branch}.out", "identity"))

    def copy(self) -> "RknModel":
        return RknModel(self.F, self.H, self.hidden, self.seed, self.params.copy())


@dataclass
class RknHidden:
    h_gain: np.ndarray  # (B, hidden)
    h_chol: np.ndarray  # (B, hidden)
    prev_correction: np.ndarray  # (B, m)
    prev_z: np.ndarray  # (B, n)
    x_prev: np.ndarray  # (B, m), corrected estimate at t-1
    P_prev: np.ndarray  # (B, m, m), corrected covariance at t-1


@dataclass
class CholFactor:
    C: np.ndarray  # (..., m, m) lower triangular


@dataclass
class StepRecord:
    state: FilterState
    x_pred: np.ndarray
    y: np.ndarray
    K: np.ndarray
    C: np.ndarray


def build_features(y: np.ndarray, prev_correction: np.ndarray, H: np.ndarray, dz: np.ndarray,
                   tape: Tape | None = None) -> np.ndarray:
    """Squared concatenation ``[y, prev_correction, vec(H), dz]**2`` (no batch normalization)."""
    y, prev_correction, dz = (np.asarray(a, dtype=float) for a in (y, prev_correction, dz))
    lead = y.shape[:-1]
    if prev_correction.shape[:-1] != lead or dz.shape != y.shape:
        raise ValueError("feature inputs must share their leading shape; dz must match y")
    m = prev_correction.shape[-1]
    if H.shape != (y.shape[-1], m):
        raise ValueError(f"H must be {y.shape[-1]} x {m}, got {H.shape}")
    vecH = np.broadcast_to(H.ravel(), lead + (H.size,))
    raw = np.concatenate([y, prev_correction, vecH, dz], axis=-1)
    feat = raw * raw
    if tape is not None:
        n = y.shape[-1]

        def vjp(g):
            (gf,) = g
            return (2.0 * y * gf[..., :n], 2.0 * prev_correction * gf[..., n:n + m])

        tape.record((y, prev_correction), (feat,), vjp)
    return feat


def _tril_indices(m: int) -> tuple[np.ndarray, np.ndarray]:
    # row-major fill of the lower triangle: (0,0), (1,0), (1,1), (2,0), ...
    return np.tril_indices(m)


def chol_head_to_factor(raw: np.ndarray, tape: Tape | None = None) -> CholFactor:
    """Lower-triangular factor with ``softplus(u) + 1e-6`` on the diagonal."""
    raw = np.asarray(raw, dtype=float)
    k = raw.shape[-1]
    m = int(round((np.sqrt(8 * k + 1) - 1) / 2))
    if m * (m + 1) // 2 != k:
        raise ValueError(f"raw length {k} is not a triangular number")
    rows, cols = _tril_indices(m)
    diag = rows == cols
    vals = raw.copy()
    vals[..., diag] = softplus(raw[..., diag]) + DIAG_FLOOR
    C = np.zeros(raw.shape[:-1] + (m, m))
    C[..., rows, cols] = vals
    if tape is not None:

        def vjp(g):
            (gC,) = g
            graw = gC[..., rows, cols]
            graw[..., diag] *= sigmoid(raw[..., diag])
            return (graw,)

        tape.record((raw,), (C,), vjp)
    return CholFactor(C)


def rkn_init_hidden(model: RknModel, initial: InitialLaw, batch: int) -> RknHidden:
    x0 = np.tile(initial.mean, (batch, 1))
    return RknHidden(
        h_gain=np.zeros((batch, model.hidden)),
        h_chol=np.zeros((batch, model.hidden)),
        prev_correction=np.zeros((batch, model.m)),
        prev_z=x0 @ model.H.T,
        x_prev=x0,
        P_prev=np.tile(initial.cov, (batch, 1, 1)),
    )


def _predict(x_prev: np.ndarray, z: np.ndarray, F: np.ndarray, H: np.ndarray,
             tape: Tape | None) -> tuple[np.ndarray, np.ndarray]:
    x_pred = x_prev @ F.T
    y = z - x_pred @ H.T
    if tape is not None:
        tape.record((x_prev,), (x_pred, y), lambda g: (((g[0] - g[1] @ H) @ F),))
    return x_pred, y


def _correct(x_pred: np.ndarray, y: np.ndarray, k_flat: np.ndarray, C: np.ndarray,
             P_prev: np.ndarray, F: np.ndarray, H: np.ndarray, tape: Tape | None):
    B, m = x_pred.shape
    n = y.shape[-1]
    K = k_flat.reshape(B, m, n)
    M = np.eye(m) - K @ H
    G = F @ P_prev @ F.T
    X = M @ G @ mT(M) + C @ mT(C)
    P = 0.5 * (X + mT(X))
    corr = (K @ y[..., None])[..., 0]
    x_post = x_pred + corr
    if tape is not None:

        def vjp(g):
            gx, gP, gcorr = g
            gX = 0.5 * (gP + mT(gP))
            gC = (gX + mT(gX)) @ C
            MG = M @ G
            gM = gX @ MG + mT(gX) @ MG
            gG = mT(M) @ gX @ M
            gPprev = F.T @ gG @ F
            gc = gcorr + gx
            gK = -gM @ H.T + gc[..., :, None] * y[..., None, :]
            gy = (mT(K) @ gc[..., None])[..., 0]
            return (gx, gy, gK.reshape(B, m * n), gC, gPprev)

        tape.record((x_pred, y, k_flat, C, P_prev), (x_post, P, corr), vjp)
    return x_post, P, corr, K


def _branch(model: RknModel, branch: str, feat: np.ndarray, h: np.ndarray, tape: Tape | None):
    d_in, cell, d_out = model.layers(branch)
    a = dense_forward(d_in, feat, tape)
    h_new = gru_step(cell, a, h, tape)
    return dense_forward(d_out, h_new, tape), h_new


def rkn_step(model: RknModel, hidden: RknHidden, z_t: np.ndarray, tape: Tape | None = None,
             t: int = 0) -> tuple[StepRecord, RknHidden]:
    """One predict/correct step on a batch; ``z_t`` has shape (B, n)."""
    F, H = model.F, model.H
    x_pred, y = _predict(hidden.x_prev, z_t, F, H, tape)
    feat = build_features(y, hidden.prev_correction, H, z_t - hidden.prev_z, tape)
    k_flat, h_gain = _branch(model, "gain", feat, hidden.h_gain, tape)
    c_raw, h_chol = _branch(model, "chol", feat, hidden.h_chol, tape)
    C = chol_head_to_factor(c_raw, tape).C
    x_post, P, corr, K = _correct(x_pred, y, k_flat, C, hidden.P_prev, F, H, tape)
    new_hidden = RknHidden(h_gain, h_chol, corr, z_t, x_post, P)
    rec = StepRecord(FilterState(x_post, P, t, "corrected"), x_pred, y, K, C)
    return rec, new_hidden


def rkn_filter(model: RknModel, initial: InitialLaw,
               episodes: Episode | Dataset | Sequence[Episode] | np.ndarray,
               tape: Tape | None = None, check_spd: bool = True,
               estimator_id: str = "rkn") -> FilterRun:
    """Run the learned filter over every episode; only the measurements are read.

    ``episodes`` may also be a raw ``(N, T, n)`` measurement array.
    """
    if isinstance(episodes, np.ndarray):
        z = episodes
        ids = list(range(z.shape[0]))
    else:
        _, z, _, ids = stack_episodes(episodes)
    N, T, n = z.shape
    if n != model.n:
        raise ValueError(f"episodes have n={n}, model expects {model.n}")
    hidden = rkn_init_hidden(model, initial, N)
    keys = ("x_pred", "x_post", "P_post", "K", "y")
    out = {k: [] for k in keys}
    for t in range(T):
        rec, hidden = rkn_step(model, hidden, z[:, t], tape, t)
        if not np.all(np.isfinite(rec.state.P)) or not np.all(np.isfinite(rec.state.x_hat)):
            raise NumericalError(f"step {t}: non-finite filter output")
        if check_spd:
            try:
                cholesky(rec.state.P, "corrected covariance")
            except NumericalError as exc:
                raise NumericalError(f"step {t}: {exc}") from None
        for key, val in zip(keys, (rec.x_pred, rec.state.x_hat, rec.state.P, rec.K, rec.y)):
            out[key].append(val)
    arr = {k: np.stack(v, axis=1) for k, v in out.items()}
    return FilterRun(arr["x_pred"], arr["x_post"], arr["P_post"], arr["K"], arr["y"],
                     estimator_id=estimator_id, episode_ids=ids)


# -- checkpoints -----------------------------------------------------------

def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_checkpoint(model: RknModel, path: str | Path, metadata: dict | None = None) -> str:
    """Write the model as JSON and return the file's sha256 digest."""
    arch = {k: v for k, v in model.arch.items() if k != "layers"}
    arch["layers"] = [list(layer) for layer in model.arch["layers"]]
    doc = {
        "kind": "rknet-checkpoint",
        "version": 1,
        "arch_spec": arch,
        "seed": model.seed,
        "F": model.F.tolist(),
        "H": model.H.tolist(),
        "order": list(model.params.params),
        "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                   for k, v in model.params.params.items()},
        "metadata": metadata or {},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=None) + "\n", encoding="utf-8")
    return file_hash(path)


def load_checkpoint(path: str | Path, feat_dim: int | None = None) -> RknModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: malformed JSON ({exc.msg})") from None
    if doc.get("kind") != "rknet-checkpoint":
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        arch = doc["arch_spec"]
        store = ParamStore()
        for name in doc["order"]:
            entry = doc["params"][name]
            store.add(name, np.array(entry["data"], dtype=float).reshape(entry["shape"]))
        model = RknModel(np.array(doc["F"]), np.array(doc["H"]), int(arch["hidden"]),
                         int(doc["seed"]), store)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: schema mismatch ({exc})") from None
    if (arch.get("feat_dim"), arch.get("m"), arch.get("n")) != (model.feat_dim, model.m, model.n):
        raise CheckpointError(f"{path}: recorded feat_dim/m/n do not match F and H")
    if feat_dim is not None and model.feat_dim != feat_dim:
        raise CheckpointError(f"{path}: feat_dim {model.feat_dim} != expected {feat_dim}")
    model.metadata = doc.get("metadata", {})
    return model
