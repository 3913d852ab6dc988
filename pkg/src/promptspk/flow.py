"""Conditional flow matching on the optimal-transport Gaussian path.

The path is ``N(t * x1, s_t^2 I)`` with ``s_t = 1 - (1 - sigma_min) * t``;
its conditional field ``(x1 - (1 - sigma_min) x) / s_t`` is what the vector
field network regresses. Sampling integrates the learned field from noise at
``t = 0`` to ``t = 1`` with explicit Euler steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .discriminative import DiscriminativeModel, SpeakerEmbedding
from .mathcore import (
    AdamState,
    DivergenceError,
    MlpParams,
    ShapeError,
    adam_step,
    init_mlp,
    mlp_backward,
    mlp_forward,
)
from .prompt import FrozenEncoder, LoraAdapter, init_lora, lora_apply, lora_backward

MODES = ("prompt_conditioned", "two_stage")


@dataclass
class FlowConfig:
    sigma_min: float = 1e-4
    ode_steps: int = 32
    n_freqs: int = 8
    hidden: int = 256
    n_layers: int = 4
    batch_size: int = 64
    lr: float = 1e-3
    epochs: int = 600
    seed: int = 0
    # Early stopping, used only when a validation split is supplied.
    val_every: int = 5
    patience: int = 6
    lora_rank: int = 8
    lora_alpha: float | None = None
    train_adapter: bool = True
    freeze_stage1: bool = True
    # two_stage only: feed concat(e_tilde, o_cls) instead of e_tilde alone.
    concat_condition: bool = False

    def __post_init__(self):
        if not 0.0 < self.sigma_min < 1.0:
            raise ValueError("sigma_min must lie in (0, 1)")
        if self.ode_steps < 1:
            raise ValueError("ode_steps must be >= 1")


def time_features(t, n_freqs: int = 8) -> np.ndarray:
    """Sinusoidal embedding ``[sin(w t), cos(w t)]`` over geometric frequencies."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    omega = np.geomspace(1.0, 50.0, n_freqs) if n_freqs > 1 else np.ones(1)
    arg = t[:, None] * omega[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


@dataclass(frozen=True)
class PathSample:
    t: float
    x: np.ndarray
    target_field: np.ndarray
    condition: np.ndarray | None = None


def path_std(t, sigma_min: float):
    return 1.0 - (1.0 - sigma_min) * np.asarray(t, dtype=np.float64)


def ot_path_point(x1, t, x0, sigma_min: float):
    """Batched path point and target field; ``t`` has one entry per row."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t >= 1.0):
        raise ValueError("t must lie in [0, 1)")
    tt = t[..., None] if np.ndim(x1) > np.ndim(t) else t
    s = path_std(tt, sigma_min)
    x = tt * x1 + s * x0
    u = (x1 - (1.0 - sigma_min) * x) / s
    return x, u


def sample_ot_path(x1, t: float, x0, sigma_min: float = 1e-4, condition=None) -> PathSample:
    x1 = np.asarray(x1, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    if x1.shape != x0.shape:
        raise ShapeError(f"x1 {x1.shape} and x0 {x0.shape} differ")
    x, u = ot_path_point(x1, t, x0, sigma_min)
    return PathSample(float(t), x, u, None if condition is None else np.asarray(condition))


@dataclass
class VectorFieldNet:
    """MLP on ``concat(x, condition, time features)`` returning a field in R^d."""

    params: MlpParams
    d: int
    cond_dim: int
    n_freqs: int = 8

    def inputs(self, x, condition, t) -> np.ndarray:
        x = np.atleast_2d(x)
        n = len(x)
        c = np.broadcast_to(np.atleast_2d(condition), (n, self.cond_dim)) if self.cond_dim else np.zeros((n, 0))
        tf = time_features(np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)), self.n_freqs)
        return np.concatenate([x, c, tf], axis=1)

    def forward(self, x, condition, t):
        return mlp_forward(self.params, self.inputs(x, condition, t))

    def __call__(self, x, condition, t) -> np.ndarray:
        out, _ = self.forward(x, condition, t)
        return out[0] if np.ndim(x) == 1 else out


def init_vector_field(d: int, cond_dim: int, config: FlowConfig, rng: np.random.Generator) -> VectorFieldNet:
    in_dim = d + cond_dim + 2 * config.n_freqs
    dims = [in_dim] + [config.hidden] * (config.n_layers - 1) + [d]
    return VectorFieldNet(init_mlp(dims, rng), d, cond_dim, config.n_freqs)


def cfm_loss(net, x1, conditions, rng: np.random.Generator, sigma_min: float = 1e-4, with_grad: bool = True):
    """Batch-mean CFM regression loss.

    Draws ``t ~ U[0, 1)`` and ``x0 ~ N(0, I)`` per item. ``net`` is either a
    :class:`VectorFieldNet` or, for testing, any callable ``(x, cond, t) ->
    field`` (no gradients then). Returns ``(loss, param_grads,
    condition_grads)``.
    """
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    n = len(x1)
    if n == 0:
        raise ValueError("empty batch")
    conditions = np.asarray(conditions, dtype=np.float64).reshape(n, -1)
    t = rng.random(n)
    x0 = rng.standard_normal(x1.shape)
    x, u = ot_path_point(x1, t, x0, sigma_min)
    if not isinstance(net, VectorFieldNet):
        v = np.atleast_2d(net(x, conditions, t))
        per_item = np.sum((v - u) ** 2, axis=1)
        _check_finite(per_item)
        return float(per_item.mean()), None, None
    v, tape = net.forward(x, conditions, t)
    resid = v - u
    per_item = np.sum(resid * resid, axis=1)
    _check_finite(per_item)
    loss = float(per_item.mean())
    if not with_grad:
        return loss, None, None
    grads, in_grad = mlp_backward(net.params, tape, 2.0 * resid / n, return_input_grad=True)
    cond_grad = in_grad[:, net.d:net.d + net.cond_dim]
    return loss, grads, cond_grad


def _check_finite(per_item: np.ndarray) -> None:
    bad = np.flatnonzero(~np.isfinite(per_item))
    if bad.size:
        raise DivergenceError(f"non-finite CFM loss at sample index {int(bad[0])}")


def integrate(net, condition, x0, config: FlowConfig | None = None, ode_steps: int | None = None) -> np.ndarray:
    """Explicit Euler from ``t = 0`` to ``t = 1`` on the grid ``k / N``.

    ``x0`` may be a single vector or a batch; ``condition`` broadcasts
    against it.
    """
    steps = ode_steps if ode_steps is not None else (config or FlowConfig()).ode_steps
    if steps < 1:
        raise ValueError("ode_steps must be >= 1")
    x = np.array(x0, dtype=np.float64, copy=True)
    h = 1.0 / steps
    for k in range(steps):
        x = x + h * np.asarray(net(x, condition, k * h))
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite state at Euler step {k}")
    return x


def train_vector_field(x1, conditions, config: FlowConfig, net: VectorFieldNet | None = None, validation=None):
    """Adam on the CFM loss with fixed per-item conditions. Returns ``(net, trace)``.

    ``validation=(x1, conditions)`` enables early stopping as in :func:`train_flow`.
    """
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    conditions = np.asarray(conditions, dtype=np.float64).reshape(len(x1), -1)
    if net is None:
        net = init_vector_field(x1.shape[1], conditions.shape[1], config, np.random.default_rng([config.seed, 11]))
    val = None
    if validation is not None:
        vx, vc = validation
        vx = np.atleast_2d(np.asarray(vx, dtype=np.float64))
        vc = np.asarray(vc, dtype=np.float64).reshape(len(vx), -1)
        val = (vx, lambda: vc)
    result = _train(net, x1, config, lambda idx: conditions[idx], None, val)
    return net, result.trace


@dataclass
class _TrainResult:
    trace: list
    val_trace: list
    best_epoch: int | None


def validation_loss(net, x1, conditions, config: FlowConfig, repeats: int = 4) -> float:
    """CFM loss on a fixed noise stream, averaged over ``repeats`` draws per item."""
    rng = np.random.default_rng([config.seed, 13])
    x1 = np.repeat(x1, repeats, axis=0)
    conditions = np.repeat(conditions, repeats, axis=0)
    loss, _, _ = cfm_loss(net, x1, conditions, rng, config.sigma_min, with_grad=False)
    return loss


def _train(net, x1, config: FlowConfig, cond_fn, cond_update, validation=None,
           snapshot=None, restore=None) -> _TrainResult:
    """Shared CFM loop.

    ``validation=(x1_val, val_cond_fn)`` turns on early stopping: the loss is
    checked every ``config.val_every`` epochs, training stops after
    ``config.patience`` checks without improvement, and the best state
    (``snapshot()`` / ``restore(state)`` cover anything beyond the net) is
    put back.
    """
    opt = AdamState.for_params(net.params, lr=config.lr)
    rng = np.random.default_rng([config.seed, 12])
    n = len(x1)
    trace, val_trace = [], []
    best_loss, best_state, best_epoch, stale = np.inf, None, None, 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            cond = cond_fn(idx)
            try:
                loss, grads, cond_grad = cfm_loss(net, x1[idx], cond, rng, config.sigma_min)
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch}, batch at {start}: {exc}") from exc
            total += loss * len(idx)
            if cond_update is not None:
                cond_update(idx, cond_grad)
            adam_step(opt, net.params, grads)
        trace.append(total / n)
        if validation is None or (epoch + 1) % config.val_every:
            continue
        vx, vcond = validation
        val_trace.append(validation_loss(net, vx, vcond(), config))
        if val_trace[-1] < best_loss:
            best_loss, best_epoch, stale = val_trace[-1], epoch, 0
            best_state = (net.params.copy(), snapshot() if snapshot else None)
        else:
            stale += 1
            if stale >= config.patience:
                break
    if best_state is not None:
        net.params = best_state[0]
        if restore is not None:
            restore(best_state[1])
    return _TrainResult(trace, val_trace, best_epoch)


@dataclass
class FlowModel:
    """Vector field plus the conditioning route that feeds it."""

    net: VectorFieldNet
    mode: str
    encoder: FrozenEncoder
    adapter: LoraAdapter | None = None
    disc: DiscriminativeModel | None = None
    config: FlowConfig = field(default_factory=FlowConfig)
    trace: list = field(default_factory=list)
    val_trace: list = field(default_factory=list)
    best_epoch: int | None = None

    def condition(self, features: np.ndarray) -> np.ndarray:
        if self.mode == "prompt_conditioned":
            return lora_apply(self.encoder, self.adapter, features)
        cond = self.disc.predict_features(features)
        if self.config.concat_condition:
            cond = np.concatenate([cond, self.disc.condition(features)], axis=-1)
        return cond

    def sample(self, features: np.ndarray, x0: np.ndarray) -> np.ndarray:
        """One generated embedding per row of ``x0`` for a single prompt."""
        return integrate(self.net, self.condition(features), x0, self.config)


def train_flow(features, x1, encoder: FrozenEncoder, config: FlowConfig, mode: str = "prompt_conditioned",
               disc: DiscriminativeModel | None = None, validation=None):
    """Train a prompt-conditioned or two-stage flow model.

    ``prompt_conditioned`` conditions on the LoRA-adapted encoder output and
    trains the adapter jointly (unless ``config.train_adapter`` is off).
    ``two_stage`` conditions on the discriminative prediction of a trained
    ``disc``; that model stays frozen unless ``config.freeze_stage1`` is off.
    ``validation=(features, x1)`` enables early stopping.
    """
    if mode not in MODES:
        raise ValueError(f"unknown flow mode {mode!r}")
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    if len(features) != len(x1):
        raise ShapeError("features and targets differ in length")
    d = x1.shape[1]
    net_rng = np.random.default_rng([config.seed, 11])
    snapshot = restore = cond_update = None
    if mode == "prompt_conditioned":
        adapter = init_lora(encoder, np.random.default_rng([config.seed, 2]), config.lora_rank, config.lora_alpha)
        model = FlowModel(init_vector_field(d, encoder.out_dim, config, net_rng), mode, encoder, adapter, None, config)
        lora_opt = AdamState.for_params(adapter, lr=config.lr)

        def cond_fn(idx):
            return model.condition(features[idx])

        if config.train_adapter:
            def cond_update(idx, cond_grad):
                adam_step(lora_opt, model.adapter, lora_backward(model.adapter, features[idx], cond_grad))

            def snapshot():
                return model.adapter.copy()

            def restore(state):
                model.adapter = state
    else:
        if disc is None:
            raise ValueError("two_stage mode needs a trained discriminative model")
        cond_dim = d + (encoder.out_dim if config.concat_condition else 0)
        model = FlowModel(init_vector_field(d, cond_dim, config, net_rng), mode, encoder, None, disc, config)
        if config.freeze_stage1:
            fixed = model.condition(features)

            def cond_fn(idx):
                return fixed[idx]
        else:
            proj_opt = AdamState.for_params(disc.projection, lr=config.lr)
            lora_opt = AdamState.for_params(disc.adapter, lr=config.lr)
            cache = {}

            def cond_fn(idx):
                u = features[idx]
                o = disc.condition(u)
                e, tape = mlp_forward(disc.projection, o)
                cache["u"], cache["tape"] = u, tape
                return np.concatenate([e, o], axis=1) if config.concat_condition else e

            def cond_update(idx, cond_grad):
                p_grads, o_grad = mlp_backward(disc.projection, cache["tape"], cond_grad[:, :d], return_input_grad=True)
                if config.concat_condition:
                    o_grad = o_grad + cond_grad[:, d:]
                adam_step(lora_opt, disc.adapter, lora_backward(disc.adapter, cache["u"], o_grad))
                adam_step(proj_opt, disc.projection, p_grads)

            def snapshot():
                return disc.projection.copy(), disc.adapter.copy()

            def restore(state):
                disc.projection, disc.adapter = state

    val = None
    if validation is not None:
        vf = np.atleast_2d(np.asarray(validation[0], dtype=np.float64))
        vx = np.atleast_2d(np.asarray(validation[1], dtype=np.float64))
        val = (vx, lambda: model.condition(vf))
    result = _train(model.net, x1, config, cond_fn, cond_update, val, snapshot, restore)
    model.trace, model.val_trace, model.best_epoch = result.trace, result.val_trace, result.best_epoch
    return model, model.trace


def as_embedding(values: np.ndarray) -> SpeakerEmbedding:
    return SpeakerEmbedding(np.asarray(values), "flow_generated")
