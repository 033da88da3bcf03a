"""Minimal neural-network kernel: parameters, a reverse-mode tape, dense and GRU layers.

Every layer works on a leading batch axis: inputs are ``(B, d)`` arrays and the
parameters are shared across the batch. Each forward call optionally records a
vector-Jacobian product on a :class:`Tape`; :func:`backward` replays the tape
in reverse and accumulates parameter gradients into the :class:`ParamStore`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ParamStore",
    "Tape",
    "DenseLayer",
    "GruCell",
    "backward",
    "dense_forward",
    "gru_step",
    "square",
    "sigmoid",
    "softplus",
    "xavier_uniform",
    "orthogonal",
    "init_params",
    "GradCheckReport",
    "grad_check",
]

ACTIVATIONS = ("identity", "relu", "tanh")


def sigmoid(a: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 + 0.5 * np.tanh(0.5 * a)


def softplus(a: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, a)


class ParamStore:
    """Named parameter arrays with same-shaped gradient buffers.

    Insertion order is the flat ordering used by :meth:`flat` and checkpoints.
    """

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=float)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    @property
    def size(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params.values()])

    def grad_flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grads.values()])

    def set_flat(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.size:
            raise ValueError(f"expected {self.size} values, got {theta.size}")
        i = 0
        for p in self.params.values():
            # in place, so layers holding references see the new values
            p[...] = theta[i:i + p.size].reshape(p.shape)
            i += p.size

    def sq_norm(self) -> float:
        return float(sum(np.vdot(p, p) for p in self.params.values()))

    def copy(self) -> "ParamStore":
        new = ParamStore()
        for k, v in self.params.items():
            new.add(k, v.copy())
        return new

    def equals(self, other: "ParamStore") -> bool:
        return (list(self.params) == list(other.params)
                and all(np.array_equal(self.params[k], other.params[k]) for k in self.params))


VJP = Callable[[Sequence[np.ndarray]], Sequence[np.ndarray | None]]


@dataclass
class _Op:
    inputs: tuple[np.ndarray, ...]
    outputs: tuple[np.ndarray, ...]
    vjp: VJP


class Tape:
    """Linear record of forward operations for one reverse sweep.

    Arrays are identified by object identity; the tape keeps references to every
    recorded array so identities stay unique while the tape is alive.
    """

    def __init__(self, store: ParamStore | None = None) -> None:
        self.ops: list[_Op] = []
        self.store = store
        self.grads: dict[int, np.ndarray] = {}
        self._done = False

    def record(self, inputs: Sequence[np.ndarray], outputs: Sequence[np.ndarray], vjp: VJP) -> None:
        if self._done:
            raise RuntimeError("tape was already replayed")
        self.ops.append(_Op(tuple(inputs), tuple(outputs), vjp))

    def __len__(self) -> int:
        return len(self.ops)

    def grad(self, array: np.ndarray) -> np.ndarray | None:
        """Gradient with respect to a recorded input array after :func:`backward`."""
        return self.grads.get(id(array))


def backward(tape: Tape, output_grads: Iterable[tuple[np.ndarray, np.ndarray | float]],
             store: ParamStore | None = None) -> dict[int, np.ndarray]:
    """Reverse sweep; parameter gradients are added to ``store.grads``."""
    store = store if store is not None else tape.store
    grads: dict[int, np.ndarray] = {}
    for arr, g in output_grads:
        g = np.broadcast_to(np.asarray(g, dtype=float), np.shape(arr))
        grads[id(arr)] = grads.get(id(arr), 0.0) + g
    for op in reversed(tape.ops):
        gouts = [grads.get(id(o)) for o in op.outputs]
        if all(g is None for g in gouts):
            continue
        gouts = [np.zeros(np.shape(o)) if g is None else g for o, g in zip(op.outputs, gouts)]
        gins = op.vjp(gouts)
        if len(gins) != len(op.inputs):
            raise RuntimeError("vjp returned the wrong number of input gradients")
        for x, g in zip(op.inputs, gins):
            if g is None:
                continue
            if np.shape(g) != np.shape(x):
                raise RuntimeError(
                    f"gradient shape {np.shape(g)} does not match input {np.shape(x)}"
                )
            key = id(x)
            grads[key] = grads[key] + g if key in grads else g
    if store is not None:
        for name, p in store.params.items():
            g = grads.get(id(p))
            if g is not None:
                store.grads[name] += g
    tape.grads = grads
    tape._done = True
    return grads


def square(x: np.ndarray, tape: Tape | None = None) -> np.ndarray:
    out = np.asarray(x * x)
    if tape is not None:
        tape.record((x,), (out,), lambda g: (2.0 * x * g[0],))
    return out


# -- layers ----------------------------------------------------------------

@dataclass
class DenseLayer:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ValueError("dense layer expects W (out, in) and b (out,)")

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]


def dense_forward(layer: DenseLayer, x: np.ndarray, tape: Tape | None = None) -> np.ndarray:
    W, b = layer.W, layer.b
    if x.shape[-1] != W.shape[1]:
        raise ValueError(f"dense layer expects input width {W.shape[1]}, got {x.shape[-1]}")
    a = x @ W.T + b
    if layer.activation == "relu":
        out = np.maximum(a, 0.0)
    elif layer.activation == "tanh":
        out = np.tanh(a)
    else:
        out = a.copy()
    if tape is not None:
        act = layer.activation

        def vjp(g):
            (gy,) = g
            if act == "relu":
                da = gy * (a > 0)
            elif act == "tanh":
                da = gy * (1.0 - out * out)
            else:
                da = gy
            da2 = da.reshape(-1, W.shape[0])
            return (da @ W, da2.T @ x.reshape(-1, W.shape[1]), da2.sum(axis=0))

        tape.record((x, W, b), (out,), vjp)
    return out


@dataclass
class GruCell:
    """Gated recurrent unit; the reset gate acts inside the candidate's recurrent term."""

    W_z: np.ndarray
    W_r: np.ndarray
    W_h: np.ndarray
    U_z: np.ndarray
    U_r: np.ndarray
    U_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray

    def __post_init__(self) -> None:
        h, d = self.W_z.shape
        for name in ("W_r", "W_h"):
            if getattr(self, name).shape != (h, d):
                raise ValueError(f"{name} must be ({h}, {d})")
        for name in ("U_z", "U_r", "U_h"):
            if getattr(self, name).shape != (h, h):
                raise ValueError(f"{name} must be ({h}, {h})")
        for name in ("b_z", "b_r", "b_h"):
            if getattr(self, name).shape != (h,):
                raise ValueError(f"{name} must be ({h},)")

    @property
    def input_dim(self) -> int:
        return self.W_z.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W_z.shape[0]


def gru_step(cell: GruCell, x: np.ndarray, h: np.ndarray, tape: Tape | None = None) -> np.ndarray:
    if x.shape[-1] != cell.input_dim or h.shape[-1] != cell.hidden_dim:
        raise ValueError(f"GRU expects x width {cell.input_dim} and h width {cell.hidden_dim}, "
                         f"got {x.shape[-1]} and {h.shape[-1]}")
    c = cell
    z = sigmoid(x @ c.W_z.T + h @ c.U_z.T + c.b_z)
    r = sigmoid(x @ c.W_r.T + h @ c.U_r.T + c.b_r)
    rh = r * h
    hc = np.tanh(x @ c.W_h.T + rh @ c.U_h.T + c.b_h)
    h_new = h + z * (hc - h)
    if tape is not None:

        def vjp(g):
            (gh,) = g
            dz = gh * (hc - h)
            dh = gh * (1.0 - z)
            dac = gh * z * (1.0 - hc * hc)
            drh = dac @ c.U_h
            dar = drh * h * r * (1.0 - r)
            daz = dz * z * (1.0 - z)
            dh = dh + drh * r + dar @ c.U_r + daz @ c.U_z
            dx = dac @ c.W_h + dar @ c.W_r + daz @ c.W_z
            return (dx, dh,
                    daz.T @ x, dar.T @ x, dac.T @ x,
                    daz.T @ h, dar.T @ h, dac.T @ rh,
                    daz.sum(0), dar.sum(0), dac.sum(0))

        tape.record((x, h, c.W_z, c.W_r, c.W_h, c.U_z, c.U_r, c.U_h, c.b_z, c.b_r, c.b_h),
                    (h_new,), vjp)
    return h_new


# -- initialization --------------------------------------------------------

def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in))


def orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def init_params(arch_spec: dict, seed: int) -> ParamStore:
    """Initialize a store from ``{"layers": [(name, kind, dims...), ...]}``.

    Supported kinds: ``("dense", in_dim, out_dim[, scale])`` and
    ``("gru", in_dim, hidden_dim)``. The optional ``scale`` multiplies the
    Xavier draw of a dense layer.
    """
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for entry in arch_spec["layers"]:
        name, kind, d_in, d_out = entry[0], entry[1], int(entry[2]), int(entry[3])
        if kind == "dense":
            scale = float(entry[4]) if len(entry) > 4 else 1.0
            store.add(f"{name}.W", scale * xavier_uniform(rng, d_out, d_in))
            store.add(f"{name}.b", np.zeros(d_out))
        elif kind == "gru":
            for gate in ("z", "r", "h"):
                store.add(f"{name}.W_{gate}", xavier_uniform(rng, d_out, d_in))
            for gate in ("z", "r", "h"):
                store.add(f"{name}.U_{gate}", orthogonal(rng, d_out))
            for gate in ("z", "r", "h"):
                store.add(f"{name}.b_{gate}", np.zeros(d_out))
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return store


def dense_from_store(store: ParamStore, name: str, activation: str) -> DenseLayer:
    return DenseLayer(store[f"{name}.W"], store[f"{name}.b"], activation)


def gru_from_store(store: ParamStore, name: str) -> GruCell:
    return GruCell(**{k: store[f"{name}.{k}"] for k in
                      ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")})


# -- gradient verification -------------------------------------------------

@dataclass
class GradCheckReport:
    coords: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    rel_errors: np.ndarray
    tol: float
    max_rel_error: float = field(init=False)
    passed: bool = field(init=False)

    def __post_init__(self) -> None:
        self.max_rel_error = float(self.rel_errors.max()) if self.rel_errors.size else 0.0
        self.passed = self.max_rel_error <= self.tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"grad_check {status}: {self.coords.size} probes, "
                f"max relative error {self.max_rel_error:.3e} (tol {self.tol:g})")


def grad_check(model_fn: Callable[[np.ndarray], tuple[float, np.ndarray]], params: np.ndarray,
               n_probes: int = 64, step: float = 1e-6, tol: float = 1e-4,
               seed: int = 0, abs_floor: float = 1e-7) -> GradCheckReport:
    """Compare the analytic gradient with central differences on random coordinates.

    ``model_fn(theta)`` returns ``(loss, grad)``. The relative error of a probe is
    ``|a - d| / (max(|a|, |d|) + abs_floor)``; the floor keeps coordinates whose
    gradient is at round-off level from dominating the report.
    """
    theta = np.array(params, dtype=float)
    _, grad = model_fn(theta.copy())
    grad = np.asarray(grad, dtype=float)
    rng = np.random.default_rng(seed)
    coords = np.sort(rng.choice(theta.size, size=min(n_probes, theta.size), replace=False))
    numeric = np.empty(coords.size)
    for j, i in enumerate(coords):
        tp = theta.copy()
        tp[i] += step
        tm = theta.copy()
        tm[i] -= step
        numeric[j] = (model_fn(tp)[0] - model_fn(tm)[0]) / (2.0 * step)
    analytic = grad[coords]
    rel = np.abs(analytic - numeric) / (np.maximum(np.abs(analytic), np.abs(numeric)) + abs_floor)
    return GradCheckReport(coords, analytic, numeric, rel, tol)
