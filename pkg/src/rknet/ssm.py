"""Linear-Gaussian state-space models and the constant-velocity benchmark data.

Stored arrays are indexed ``0..T-1`` and cover physical times ``t = 1..T``;
``x_0`` is the initial draw and is not stored. Noise schedules use the same
array index as the stored episode arrays.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "SCENARIOS",
    "SPLITS",
    "RNG_ALGORITHM",
    "DatasetFormatError",
    "StateSpaceModel",
    "NoiseSchedule",
    "InitialLaw",
    "Episode",
    "Dataset",
    "make_cv_model",
    "make_schedule",
    "default_initial_law",
    "episode_seed",
    "simulate_episode",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
]

SCENARIOS = ("S1", "S2a", "S2b", "S3a", "S3b", "custom")
SPLITS = ("train", "val", "test")
RNG_ALGORITHM = "numpy-PCG64/SeedSequence(master_seed,split_index,k)"

S1_LOW, S1_HIGH, S1_SWITCH = 0.35, 1.75, 75
_CONSTANT_SIGMA = {"S2a": 1.5, "S2b": 0.6, "S3a": 1.907, "S3b": 0.1907}


class DatasetFormatError(ValueError):
    """Raised when a dataset file cannot be parsed or violates its invariants."""


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    # eigh-based factor: works for singular covariances such as the CV model Q
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    return v * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True)
class StateSpaceModel:
    F: np.ndarray
    H: np.ndarray
    Q: np.ndarray

    def __post_init__(self) -> None:
        F = np.atleast_2d(np.asarray(self.F, dtype=float))
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        m = F.shape[0]
        if F.shape != (m, m):
            raise ValueError(f"F must be square, got {F.shape}")
        if H.ndim != 2 or H.shape[1] != m:
            raise ValueError(f"H must be n x {m}, got {H.shape}")
        if Q.shape != (m, m):
            raise ValueError(f"Q must be {m} x {m}, got {Q.shape}")
        Qs = 0.5 * (Q + Q.T)
        if not np.allclose(Q, Qs, rtol=1e-10, atol=1e-14):
            raise ValueError("Q must be symmetric")
        if np.linalg.eigvalsh(Qs).min() < -1e-12:
            raise ValueError("Q must be positive semi-definite")
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "Q", Q)

    @property
    def state_dim(self) -> int:
        return self.F.shape[0]

    @property
    def meas_dim(self) -> int:
        return self.H.shape[0]

    def to_dict(self) -> dict:
        return {"F": self.F.tolist(), "H": self.H.tolist(), "Q": self.Q.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "StateSpaceModel":
        return cls(np.array(d["F"], dtype=float), np.array(d["H"], dtype=float),
                   np.array(d["Q"], dtype=float))


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step measurement-noise standard deviation ``sigma[t]``."""

    sigma: np.ndarray
    scenario_id: str = "custom"

    def __post_init__(self) -> None:
        sigma = np.asarray(self.sigma, dtype=float).reshape(-1)
        if sigma.size == 0:
            raise ValueError("noise schedule must not be empty")
        # zero is tolerated so that noiseless episodes can be simulated
        if not np.all(np.isfinite(sigma)) or np.any(sigma < 0):
            raise ValueError("noise schedule entries must be finite and non-negative")
        if self.scenario_id not in SCENARIOS:
            raise ValueError(f"unknown scenario id {self.scenario_id!r}")
        object.__setattr__(self, "sigma", sigma)

    def __len__(self) -> int:
        return self.sigma.size

    @property
    def R(self) -> np.ndarray:
        return self.sigma**2


@dataclass(frozen=True)
class InitialLaw:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"cov must be {mean.size} x {mean.size}, got {cov.shape}")
        if not np.allclose(cov, cov.T):
            raise ValueError("initial covariance must be symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "cov": self.cov.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "InitialLaw":
        return cls(np.array(d["mean"], dtype=float), np.array(d["cov"], dtype=float))


@dataclass
class Episode:
    x: np.ndarray  # (T, m) true states
    z: np.ndarray  # (T, n) measurements
    schedule: NoiseSchedule
    seed: int
    episode_id: int = 0

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=float)
        self.z = np.asarray(self.z, dtype=float)
        if self.x.ndim != 2 or self.z.ndim != 2:
            raise ValueError("x and z must be 2-D (T x m, T x n)")
        if self.x.shape[0] != self.z.shape[0]:
            raise ValueError("x and z must share length T")
        if len(self.schedule) != self.x.shape[0]:
            raise ValueError("schedule length must equal episode length")

    @property
    def T(self) -> int:
        return self.x.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Episode):
            return NotImplemented
        return (self.seed == other.seed and self.episode_id == other.episode_id
                and self.schedule.scenario_id == other.schedule.scenario_id
                and np.array_equal(self.schedule.sigma, other.schedule.sigma)
                and np.array_equal(self.x, other.x) and np.array_equal(self.z, other.z))


@dataclass
class Dataset:
    episodes: list[Episode]
    model: StateSpaceModel
    initial: InitialLaw
    master_seed: int
    split: str
    scenario_mix: list[tuple[str, int]] = field(default_factory=list)
    rng_algorithm: str = RNG_ALGORITHM
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.episodes:
            T, m, n = self.episodes[0].T, self.episodes[0].x.shape[1], self.episodes[0].z.shape[1]
            for ep in self.episodes:
                if ep.T != T or ep.x.shape[1] != m or ep.z.shape[1] != n:
                    raise DatasetFormatError(
                        f"episode {ep.episode_id} has shape T={ep.T}, m={ep.x.shape[1]}, "
                        f"n={ep.z.shape[1]}; expected T={T}, m={m}, n={n}")

    def __len__(self) -> int:
        return len(self.episodes)

    @property
    def T(self) -> int:
        return self.episodes[0].T

    def stacked(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(x, z, sigma)`` arrays of shape (N, T, m), (N, T, n), (N, T)."""
        x = np.stack([ep.x for ep in self.episodes])
        z = np.stack([ep.z for ep in self.episodes])
        sigma = np.stack([ep.schedule.sigma for ep in self.episodes])
        return x, z, sigma

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.master_seed == other.master_seed and self.split == other.split
                and self.model.to_dict() == other.model.to_dict()
                and self.initial.to_dict() == other.initial.to_dict()
                and [tuple(s) for s in self.scenario_mix] == [tuple(s) for s in other.scenario_mix]
                and self.episodes == other.episodes)


def make_cv_model(dt: float = 1.0, sigma_v: float = 0.01) -> StateSpaceModel:
    """Constant-velocity model: position/velocity state, position measured."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if not sigma_v > 0:
        raise ValueError(f"sigma_v must be positive, got {sigma_v}")
    F = np.array([[1.0, dt], [0.0, 1.0]])
    H = np.array([[1.0, 0.0]])
    Q = np.array([[0.0, 0.0], [0.0, sigma_v**2]])
    return StateSpaceModel(F, H, Q)


def make_schedule(scenario_id: str, T: int) -> NoiseSchedule:
    """Measurement-noise schedule of a named scenario.

    ``S1`` switches from 0.35 to 1.75 at index 75; the other ids are constant.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if scenario_id == "S1":
        sigma = np.where(np.arange(T) < S1_SWITCH, S1_LOW, S1_HIGH)
    elif scenario_id in _CONSTANT_SIGMA:
        sigma = np.full(T, _CONSTANT_SIGMA[scenario_id])
    else:
        valid = ", ".join(s for s in SCENARIOS if s != "custom")
        raise ValueError(f"unknown scenario id {scenario_id!r}; valid ids: {valid}")
    return NoiseSchedule(sigma, scenario_id)


def default_initial_law() -> InitialLaw:
    return InitialLaw(np.array([0.0, 1.0]), np.diag([1.0, 0.01]))


def episode_seed(master_seed: int, split: str, k: int) -> int:
    """64-bit per-episode seed derived from ``(master_seed, split, k)``."""
    ss = np.random.SeedSequence([int(master_seed), SPLITS.index(split), int(k)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def simulate_episode(model: StateSpaceModel, schedule: NoiseSchedule, initial: InitialLaw,
                     T: int, seed: int, episode_id: int = 0) -> Episode:
    if len(schedule) != T:
        raise ValueError(f"schedule length {len(schedule)} != T={T}")
    m, n = model.state_dim, model.meas_dim
    if initial.mean.size != m:
        raise ValueError(f"initial mean has size {initial.mean.size}, model state_dim is {m}")
    rng = np.random.Generator(np.random.PCG64(seed))
    x0_noise = rng.standard_normal(m)
    v = rng.standard_normal((T, m))
    w = rng.standard_normal((T, n))

    x_prev = initial.mean + _psd_sqrt(initial.cov) @ x0_noise
    v = v @ _psd_sqrt(model.Q).T
    w = w * schedule.sigma[:, None]
    x = np.empty((T, m))
    for t in range(T):
        x_prev = model.F @ x_prev + v[t]
        x[t] = x_prev
    z = x @ model.H.T + w
    return Episode(x, z, schedule, int(seed), episode_id)


def _interleave(mix: Sequence[tuple[str, int]]) -> list[str]:
    # round-robin over scenarios so mixed datasets alternate deterministically
    remaining = [[sid, int(c)] for sid, c in mix]
    order: list[str] = []
    while any(c > 0 for _, c in remaining):
        for item in remaining:
            if item[1] > 0:
                order.append(item[0])
                item[1] -= 1
    return order


def generate_dataset(model: StateSpaceModel, scenario_mix: Iterable[tuple[str, int]],
                     initial: InitialLaw, T: int, master_seed: int, split: str) -> Dataset:
    mix = [(str(sid), int(c)) for sid, c in scenario_mix]
    if any(c < 0 for _, c in mix):
        raise ValueError("scenario counts must be non-negative")
    if sum(c for _, c in mix) == 0:
        raise ValueError("scenario mix is empty")
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    schedules = {sid: make_schedule(sid, T) for sid, _ in mix}
    episodes = []
    for k, sid in enumerate(_interleave(mix)):
        seed = episode_seed(master_seed, split, k)
        episodes.append(simulate_episode(model, schedules[sid], initial, T, seed, episode_id=k))
    return Dataset(episodes, model, initial, int(master_seed), split, mix)


# -- serialization ---------------------------------------------------------

def _header(ds: Dataset) -> dict:
    first = ds.episodes[0]
    return {
        "kind": "rknet-dataset",
        "version": 1,
        "model": ds.model.to_dict(),
        "initial": ds.initial.to_dict(),
        "master_seed": ds.master_seed,
        "split": ds.split,
        "T": first.T,
        "m": first.x.shape[1],
        "n": first.z.shape[1],
        "scenario_mix": [list(s) for s in ds.scenario_mix],
        "rng_algorithm": ds.rng_algorithm,
        "n_episodes": len(ds.episodes),
        "provenance": ds.provenance,
    }


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """Write newline-delimited JSON: a header record then one record per episode."""
    if not ds.episodes:
        raise ValueError("cannot save an empty dataset")
    lines = [json.dumps(_header(ds), sort_keys=True)]
    for ep in ds.episodes:
        rec = {
            "episode_id": ep.episode_id,
            "seed": ep.seed,
            "scenario_id": ep.schedule.scenario_id,
            "sigma": ep.schedule.sigma.tolist(),
            "x": ep.x.tolist(),
            "z": ep.z.tolist(),
        }
        lines.append(json.dumps(rec, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _field(rec: dict, name: str, lineno: int):
    if name not in rec:
        raise DatasetFormatError(f"line {lineno}: missing field {name!r}")
    return rec[name]


def _float_array(value, name: str, lineno: int, shape: tuple[int, ...]) -> np.ndarray:
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise DatasetFormatError(f"line {lineno}: field {name!r} is not numeric ({exc})") from None
    if arr.shape != shape:
        raise DatasetFormatError(
            f"line {lineno}: field {name!r} has shape {arr.shape}, expected {shape}")
    return arr


def load_dataset(path: str | Path) -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise DatasetFormatError("line 1: empty file")
    records = []
    for i, line in enumerate(lines, start=1):
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"line {i}: malformed JSON ({exc.msg})") from None
    head = records[0]
    if head.get("kind") != "rknet-dataset":
        raise DatasetFormatError("line 1: field 'kind' is not 'rknet-dataset'")
    try:
        model = StateSpaceModel.from_dict(_field(head, "model", 1))
        initial = InitialLaw.from_dict(_field(head, "initial", 1))
    except (KeyError, ValueError) as exc:
        raise DatasetFormatError(f"line 1: invalid model/initial ({exc})") from None
    T, m, n = (int(_field(head, k, 1)) for k in ("T", "m", "n"))
    n_expected = int(_field(head, "n_episodes", 1))
    if len(records) - 1 != n_expected:
        raise DatasetFormatError(
            f"line {len(records)}: expected {n_expected} episode records, found {len(records) - 1}")
    episodes = []
    for lineno, rec in enumerate(records[1:], start=2):
        sigma = np.array(_field(rec, "sigma", lineno), dtype=float)
        x_raw = _field(rec, "x", lineno)
        if len(sigma) != T or len(x_raw) != T:
            raise DatasetFormatError(
                f"line {lineno}: field 'x' has length {len(x_raw)}, expected T={T}")
        x = _float_array(x_raw, "x", lineno, (T, m))
        z = _float_array(_field(rec, "z", lineno), "z", lineno, (T, n))
        sched = NoiseSchedule(sigma, _field(rec, "scenario_id", lineno))
        episodes.append(Episode(x, z, sched, int(_field(rec, "seed", lineno)),
                                int(_field(rec, "episode_id", lineno))))
    return Dataset(episodes, model, initial, int(head["master_seed"]), head["split"],
                   [(str(s), int(c)) for s, c in head.get("scenario_mix", [])],
                   head.get("rng_algorithm", RNG_ALGORITHM), head.get("provenance", {}))
