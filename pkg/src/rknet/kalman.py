"""Classical Kalman filter, Joseph and split covariance forms, Riccati steady state.

All functions broadcast over leading batch axes, so the same code filters one
episode or a stack of episodes at once.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .linalg import NumericalError, chol_solve, cholesky, mT, symmetrize
from .ssm import Dataset, Episode, InitialLaw, StateSpaceModel

__all__ = [
    "FilterState",
    "Innovation",
    "MeasurementNoiseModel",
    "FilterRun",
    "kf_predict",
    "kf_innovate",
    "kalman_gain",
    "kf_update",
    "joseph_update",
    "covariance_split",
    "run_kf",
    "steady_state_gain",
    "stack_episodes",
    "write_filter_run_csv",
]


@dataclass
class FilterState:
    x_hat: np.ndarray
    P: np.ndarray
    t: int = 0
    phase: str = "corrected"


@dataclass
class Innovation:
    y: np.ndarray
    S: np.ndarray


@dataclass(frozen=True)
class MeasurementNoiseModel:
    """``oracle`` reads sigma_t^2 from the episode (o-KF); ``fixed`` uses a constant R (so-KF)."""

    mode: str = "fixed"
    fixed_value: float = 1.0

    def __post_init__(self) -> None:
        if self.mode not in ("oracle", "fixed"):
            raise ValueError(f"mode must be 'oracle' or 'fixed', got {self.mode!r}")
        if self.mode == "fixed" and not self.fixed_value > 0:
            raise ValueError("fixed_value must be positive")

    @property
    def estimator_id(self) -> str:
        return "kf:oracle" if self.mode == "oracle" else f"kf:fixed={self.fixed_value:g}"


@dataclass
class FilterRun:
    """Per-step filter outputs for a stack of N episodes of length T.

    Optional fields are ``None`` for estimators that do not produce them
    (the learned filter has no predicted covariance nor innovation covariance).
    """

    x_pred: np.ndarray  # (N, T, m)
    x_post: np.ndarray  # (N, T, m)
    P_post: np.ndarray  # (N, T, m, m)
    K: np.ndarray  # (N, T, m, n)
    y: np.ndarray  # (N, T, n)
    P_pred: np.ndarray | None = None
    S: np.ndarray | None = None
    estimator_id: str = ""
    episode_ids: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return self.x_post.shape[0]

    @property
    def T(self) -> int:
        return self.x_post.shape[1]


def _check_phase(state: FilterState, phase: str) -> None:
    if state.phase != phase:
        raise ValueError(f"expected a {phase} state, got {state.phase}")


def kf_predict(state: FilterState, F: np.ndarray, Q: np.ndarray) -> FilterState:
    _check_phase(state, "corrected")
    x = state.x_hat @ mT(F)
    P = symmetrize(F @ state.P @ mT(F) + Q)
    return FilterState(x, P, state.t + 1, "predicted")


def kf_innovate(state: FilterState, z: np.ndarray, H: np.ndarray, R: np.ndarray) -> Innovation:
    _check_phase(state, "predicted")
    y = z - state.x_hat @ mT(H)
    S = symmetrize(H @ state.P @ mT(H) + R)
    cholesky(S, "innovation covariance S")
    return Innovation(y, S)


def kalman_gain(P_pred: np.ndarray, H: np.ndarray, S: np.ndarray) -> np.ndarray:
    """``K = P H^T S^{-1}`` via a Cholesky solve (``K^T = S^{-1} H P``)."""
    L = cholesky(S, "innovation covariance S")
    return mT(chol_solve(L, H @ P_pred))


def kf_update(state: FilterState, K: np.ndarray, y: np.ndarray, H: np.ndarray) -> FilterState:
    _check_phase(state, "predicted")
    x = state.x_hat + (K @ y[..., None])[..., 0]
    m = state.P.shape[-1]
    P = symmetrize((np.eye(m) - K @ H) @ state.P)
    return FilterState(x, P, state.t, "corrected")


def joseph_update(P_pred: np.ndarray, K: np.ndarray, H: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Covariance after correction with an arbitrary gain ``K``."""
    M = np.eye(P_pred.shape[-1]) - K @ H
    return symmetrize(M @ P_pred @ mT(M) + K @ R @ mT(K))


def covariance_split(P_prev: np.ndarray, K: np.ndarray, F: np.ndarray, H: np.ndarray,
                     Q: np.ndarray, R: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split the corrected covariance into a propagated term and a noise term.

    ``A = M F P_prev F^T M^T`` and ``B = M Q M^T + K R K^T`` with ``M = I - K H``;
    ``A + B`` equals the Joseph update of ``F P_prev F^T + Q``.
    """
    M = np.eye(P_prev.shape[-1]) - K @ H
    MF = M @ F
    A = symmetrize(MF @ P_prev @ mT(MF))
    B = symmetrize(M @ Q @ mT(M) + K @ R @ mT(K))
    return A, B


def stack_episodes(episodes: Episode | Dataset | Sequence[Episode]):
    """Return ``(x, z, sigma, episode_ids)`` stacked along a leading episode axis."""
    if isinstance(episodes, Episode):
        episodes = [episodes]
    elif isinstance(episodes, Dataset):
        episodes = episodes.episodes
    if not episodes:
        raise ValueError("no episodes given")
    x = np.stack([ep.x for ep in episodes])
    z = np.stack([ep.z for ep in episodes])
    sigma = np.stack([ep.schedule.sigma for ep in episodes])
    return x, z, sigma, [ep.episode_id for ep in episodes]


def run_kf(model: StateSpaceModel, noise_model: MeasurementNoiseModel, initial: InitialLaw,
           episodes: Episode | Dataset | Sequence[Episode]) -> FilterRun:
    """Filter every episode (vectorized across episodes) from ``initial``."""
    _, z, sigma, ids = stack_episodes(episodes)
    N, T, n = z.shape
    if n != model.meas_dim:
        raise ValueError(f"episodes have n={n}, model has meas_dim={model.meas_dim}")
    F, H, Q = model.F, model.H, model.Q

    out = {k: [] for k in ("x_pred", "P_pred", "y", "S", "K", "x_post", "P_post")}
    state = FilterState(np.tile(initial.mean, (N, 1)), np.tile(initial.cov, (N, 1, 1)))
    eye_n = np.eye(n)
    for t in range(T):
        if noise_model.mode == "oracle":
            R = sigma[:, t, None, None] ** 2 * eye_n
        else:
            R = noise_model.fixed_value * np.broadcast_to(eye_n, (N, n, n))
        try:
            pred = kf_predict(state, F, Q)
            inn = kf_innovate(pred, z[:, t], H, R)
            K = kalman_gain(pred.P, H, inn.S)
            state = kf_update(pred, K, inn.y, H)
        except NumericalError as exc:
            raise NumericalError(f"step {t}: {exc}") from None
        for key, val in (("x_pred", pred.x_hat), ("P_pred", pred.P), ("y", inn.y), ("S", inn.S),
                         ("K", K), ("x_post", state.x_hat), ("P_post", state.P)):
            out[key].append(val)
    arr = {k: np.stack(v, axis=1) for k, v in out.items()}
    return FilterRun(arr["x_pred"], arr["x_post"], arr["P_post"], arr["K"], arr["y"],
                     P_pred=arr["P_pred"], S=arr["S"],
                     estimator_id=noise_model.estimator_id, episode_ids=ids)


def steady_state_gain(F: np.ndarray, H: np.ndarray, Q: np.ndarray, R: np.ndarray,
                      tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
    """Gain at the fixed point of the predicted-covariance Riccati recursion.

    Uses the doubling form of the recursion: iterate ``k`` holds the predicted
    covariance after ``2**k`` plain steps from zero, so marginal cases such as
    ``F = I, Q = 0`` converge in a few dozen iterations.
    """
    F, H, Q = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (F, H, Q))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    m = F.shape[0]
    L_R = cholesky(R, "measurement covariance R")
    A = F.T.copy()
    G = H.T @ chol_solve(L_R, H)
    X = Q.copy()
    eye = np.eye(m)
    for _ in range(max_iter):
        W = np.linalg.solve(eye + G @ X, A)  # (I + G X)^{-1} A
        V = np.linalg.solve(eye + G @ X, G)  # (I + G X)^{-1} G
        X_new = symmetrize(X + A.T @ X @ W)
        G = symmetrize(G + A @ V @ A.T)
        A = A @ W
        if not np.all(np.isfinite(X_new)):
            break
        if np.max(np.abs(X_new - X)) < tol:
            S = symmetrize(H @ X_new @ H.T + R)
            return kalman_gain(X_new, H, S)
        X = X_new
    raise NumericalError(f"Riccati iteration did not converge in {max_iter} iterations")


def write_filter_run_csv(run: FilterRun, path: str | Path,
                         provenance: dict | None = None) -> None:
    """One row per (episode, t, phase); unavailable quantities are left empty."""
    N, T, m = run.x_post.shape
    n = run.y.shape[-1]
    iu = np.triu_indices(m)
    header = (["episode_id", "t", "phase"] + [f"x_hat{i}" for i in range(m)]
              + [f"P{i}{j}" for i, j in zip(*iu)]
              + [f"K{i}{j}" for i in range(m) for j in range(n)]
              + [f"y{j}" for j in range(n)] + [f"S{i}{j}" for i, j in zip(*np.triu_indices(n))])
    ids = run.episode_ids or list(range(N))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for key, val in (provenance or {}).items():
            fh.write(f"# {key}: {val}\n")
        fh.write(f"# estimator_id: {run.estimator_id}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        n_p, n_s = len(iu[0]), n * (n + 1) // 2
        for k in range(N):
            for t in range(T):
                y = [repr(float(v)) for v in run.y[k, t]]
                S = ([repr(float(v)) for v in run.S[k, t][np.triu_indices(n)]]
                     if run.S is not None else [""] * n_s)
                Pp = ([repr(float(v)) for v in run.P_pred[k, t][iu]]
                      if run.P_pred is not None else [""] * n_p)
                w.writerow([ids[k], t, "predicted"] + [repr(float(v)) for v in run.x_pred[k, t]]
                           + Pp + [""] * (m * n) + y + S)
                w.writerow([ids[k], t, "corrected"] + [repr(float(v)) for v in run.x_post[k, t]]
                           + [repr(float(v)) for v in run.P_post[k, t][iu]]
                           + [repr(float(v)) for v in run.K[k, t].ravel()]
                           + [""] * n + [""] * n_s)
