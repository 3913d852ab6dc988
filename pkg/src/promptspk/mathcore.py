"""Dense numerics substrate: a small MLP with hand-written backprop, Adam, and
a Jacobi-based symmetric matrix square root.

Everything is float64. Matrices are plain ``numpy.ndarray`` objects; weights
are stored ``(out_dim, in_dim)`` so a layer computes ``x @ W.T + b`` on a
batch of row vectors.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("identity", "relu")

_tape_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when array dimensions do not chain."""


class TapeError(RuntimeError):
    """Raised when a backward pass is given a tape from another forward call."""


class DivergenceError(ArithmeticError):
    """Raised when training produces non-finite values."""


@dataclass
class MlpParams:
    """Weights, biases and activation tags of a feed-forward network.

    ``version`` is bumped by every optimizer step so that tapes recorded
    against older parameters are rejected by :func:`mlp_backward`.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ShapeError("weights, biases and activations must have equal length")
        if not self.weights:
            raise ShapeError("network needs at least one layer")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(
                    f"layer {i}: input dim {w.shape[1]} != previous output dim "
                    f"{self.weights[i - 1].shape[0]}"
                )
            if act not in ACTIVATIONS:
                raise ValueError(f"layer {i}: unknown activation {act!r}")
        if self.activations[-1] != "identity":
            raise ValueError("final layer activation must be identity")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def dims(self) -> list[int]:
        return [self.in_dim] + [w.shape[0] for w in self.weights]

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in layer order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def zeros_like(self) -> "MlpParams":
        return MlpParams(
            [np.zeros_like(w) for w in self.weights],
            [np.zeros_like(b) for b in self.biases],
            list(self.activations),
        )

    def copy(self) -> "MlpParams":
        return MlpParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
        )


def init_mlp(dims, rng: np.random.Generator, hidden_activation: str = "relu") -> MlpParams:
    """He-initialised MLP with ``len(dims) - 1`` affine layers."""
    dims = list(dims)
    if len(dims) < 2:
        raise ShapeError("need at least input and output dims")
    weights, biases, acts = [], [], []
    for i, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
        acts.append("identity" if i == len(dims) - 2 else hidden_activation)
    return MlpParams(weights, biases, acts)


@dataclass
class Tape:
    """Activation cache of one forward call."""

    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    params_id: int
    params_version: int
    squeeze: bool
    token: int = field(default_factory=lambda: next(_tape_ids))


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, Tape]:
    """Run the network on a vector ``(in,)`` or a batch ``(n, in)``."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.ndim != 2:
        raise ShapeError(f"input must be 1-D or 2-D, got shape {x.shape}")
    inputs, preacts = [], []
    for i, (w, b, act) in enumerate(zip(params.weights, params.biases, params.activations)):
        if h.shape[1] != w.shape[1]:
            raise ShapeError(f"layer {i}: expected input dim {w.shape[1]}, got {h.shape[1]}")
        inputs.append(h)
        z = h @ w.T + b
        preacts.append(z)
        h = np.maximum(z, 0.0) if act == "relu" else z
    tape = Tape(inputs, preacts, id(params), params.version, squeeze)
    return (h[0] if squeeze else h), tape


def mlp_backward(
    params: MlpParams, tape: Tape, output_gradient: np.ndarray, return_input_grad: bool = False
):
    """Reverse-mode gradient of ``sum(output * output_gradient)``.

    For batched tapes the parameter gradient is summed over the batch. With
    ``return_input_grad`` the gradient w.r.t. the network input is returned
    as a second value, shaped like the forward input.
    """
    if tape.params_id != id(params) or tape.params_version != params.version:
        raise TapeError("tape was recorded against different or since-updated parameters")
    g = np.asarray(output_gradient, dtype=np.float64)
    if tape.squeeze:
        g = g[None, :]
    if g.shape != tape.preacts[-1].shape:
        raise ShapeError(f"output gradient shape {g.shape} != output {tape.preacts[-1].shape}")
    grads = params.zeros_like()
    for i in reversed(range(len(params.weights))):
        if params.activations[i] == "relu":
            g = g * (tape.preacts[i] > 0.0)
        grads.weights[i] = g.T @ tape.inputs[i]
        grads.biases[i] = g.sum(axis=0)
        g = g @ params.weights[i]
    if return_input_grad:
        return grads, (g[0] if tape.squeeze else g)
    return grads


@dataclass
class AdamState:
    """Adam moment buffers for any parameter container exposing ``arrays()``."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0

    @classmethod
    def for_params(cls, params, lr: float = 1e-3, **kwargs) -> "AdamState":
        arrays = params.arrays()
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], lr, **kwargs)


def adam_step(state: AdamState, params, grads) -> None:
    """Apply one bias-corrected Adam update to ``params`` in place.

    A non-zero ``state.weight_decay`` adds decoupled (AdamW-style) decay.
    """
    p_arrays, g_arrays = params.arrays(), grads.arrays()
    if len(p_arrays) != len(g_arrays) or len(p_arrays) != len(state.m):
        raise ShapeError("parameter, gradient and optimizer buffers do not line up")
    for p, g, m in zip(p_arrays, g_arrays, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch: param {p.shape}, grad {g.shape}, buffer {m.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient entry")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(p_arrays, g_arrays, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.weight_decay:
            p -= state.lr * state.weight_decay * p
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    if hasattr(params, "version"):
        params.version += 1


def jacobi_eigh(a: np.ndarray, tol: float = 1e-13, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvectors in columns,
    eigenvalues in ascending order.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    n = a.shape[0]
    v = np.eye(n)
    scale = max(np.linalg.norm(a), np.finfo(float).tiny)
    for _ in range(max_sweeps):
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                elif theta != 0.0:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                else:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    w = np.diag(a).copy()
    order = np.argsort(w)
    return w[order], v[:, order]


def sym_matrix_sqrt(a: np.ndarray, sym_tol: float = 1e-8, neg_tol: float = 1e-10) -> np.ndarray:
    """Principal square root of a symmetric positive semi-definite matrix.

    Eigenvalues in ``[-neg_tol, 0)`` are clamped to zero; anything more
    negative, or an asymmetry above ``sym_tol`` (relative to the matrix
    scale), raises ``ValueError``.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(a))) if a.size else 1.0)
    if np.max(np.abs(a - a.T), initial=0.0) > sym_tol * scale:
        raise ValueError("matrix is not symmetric")
    w, v = jacobi_eigh(0.5 * (a + a.T))
    if w.size and w[0] < -neg_tol * scale:
        raise ValueError(f"matrix is not positive semi-definite (min eigenvalue {w[0]:.3e})")
    w = np.clip(w, 0.0, None)
    s = (v * np.sqrt(w)) @ v.T
    return 0.5 * (s + s.T)
