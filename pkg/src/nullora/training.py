"""Desk-scale training: MSE loss, SGD/AdamW, finite-difference oracle and a
planted null-space regression task."""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from nullora import numerics
from nullora.adapter import AdapterLayer, GradientSet, backward, delta_weight, effective_rank, forward, null_residual
from nullora.numerics import DEFAULT_TAU

log = logging.getLogger(__name__)


class Optimizer(str, enum.Enum):
    SGD = "sgd"
    ADAMW = "adamw"


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float, grad_norms: dict[str, float]):
        norms = ", ".join(f"{k}={v:.3e}" for k, v in grad_norms.items())
        super().__init__(f"non-finite loss {loss} at step {step} (grad norms: {norms})")
        self.step = step
        self.loss = loss
        self.grad_norms = grad_norms


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 64
    learning_rate: float = 1e-4
    optimizer: Optimizer = Optimizer.ADAMW
    weight_decay: float = 0.05
    seed: int = 0
    decay_exempt_s: bool = True
    log_every: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.optimizer = Optimizer(self.optimizer)
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class PlantedTask:
    W0: np.ndarray
    delta_star: np.ndarray
    inputs: np.ndarray
    targets: np.ndarray


@dataclass
class StepRecord:
    step: int
    loss: float
    grad_norm: float
    null_residual: float
    effective_rank: int


@dataclass
class TrainHistory:
    records: list[StepRecord] = field(default_factory=list)
    initial_loss: float = math.nan
    final_loss: float = math.nan

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "grad_norm", "null_residual", "effective_rank"])
            for rec in self.records:
                writer.writerow([rec.step, repr(rec.loss), repr(rec.grad_norm), repr(rec.null_residual), rec.effective_rank])


def mse_loss(Y, T) -> tuple[float, np.ndarray]:
    """Return ``||Y - T||_F^2 / (2 batch)`` and its gradient with respect to Y."""
    Y = np.asarray(Y, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    if Y.shape != T.shape:
        raise ValueError(f"prediction shape {Y.shape} != target shape {T.shape}")
    n = Y.shape[1]
    R = Y - T
    return float(np.sum(R * R) / (2 * n)), R / n


def optimizer_step(layer: AdapterLayer, grads: GradientSet, state: OptimizerState, cfg: TrainConfig) -> None:
    """Update the layer's trainables in place."""
    state.step += 1
    lr, wd = cfg.learning_rate, cfg.weight_decay
    for name, g in grads.as_dict().items():
        p = getattr(layer, name)
        if p.size == 0:
            continue
        decay = 0.0 if (name == "s" and cfg.decay_exempt_s) else wd
        if cfg.optimizer is Optimizer.SGD:
            p -= lr * (g + decay * p)
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * g * g
        m_hat = m / (1 - cfg.beta1**state.step)
        v_hat = v / (1 - cfg.beta2**state.step)
        if decay:
            p -= lr * decay * p
        p -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


def fd_gradient(layer: AdapterLayer, X, T, h: float = 1e-6) -> GradientSet:
    """Central finite differences of mse_loss(forward(layer, X), T).

    Perturbs one trainable scalar at a time and restores it afterwards.
    """

    def loss() -> float:
        return mse_loss(forward(layer, X), T)[0]

    out = {}
    for name, p in layer.trainables().items():
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss()
            flat[i] = orig - h
            down = loss()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        out[name] = g
    return GradientSet(dB=out["B"], dA=out["A"], ds=out["s"])


def plant_task(W0, n_samples: int, seed: int, tau: float = DEFAULT_TAU) -> PlantedTask:
    """Targets for an existing weight: delta_star = U_hat C V_hat in its null spaces."""
    W0 = numerics.as_matrix(W0, "W0")
    U_hat = numerics.null_space_left(W0, tau)
    V_hat = numerics.null_space_right(W0, tau)
    h = min(U_hat.shape[1], V_hat.shape[0])
    if h == 0:
        raise ValueError("weight is full rank; nothing to plant")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    C = rng.standard_normal((h, h))
    delta_star = U_hat[:, -h:] @ C @ V_hat[-h:, :]
    inputs = rng.standard_normal((W0.shape[1], n_samples))
    return PlantedTask(W0=W0, delta_star=delta_star, inputs=inputs, targets=(W0 + delta_star) @ inputs)


def planted_weight(d_out: int, d_in: int, nullity: int, seed: int) -> np.ndarray:
    """Rank ``min(d_out, d_in) - nullity`` weight with singular values in [1, 10]."""
    k = min(d_out, d_in)
    if not 0 <= nullity <= k:
        raise ValueError(f"nullity must be in [0, {k}], got {nullity}")
    rank = k - nullity
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    U1 = numerics.orthonormalize(rng.standard_normal((d_out, rank)))
    V1 = numerics.orthonormalize(rng.standard_normal((d_in, rank)))
    sigma = rng.uniform(1.0, 10.0, rank)
    return (U1 * sigma) @ V1.T


def gen_planted_task(d_out: int, d_in: int, nullity: int, n_samples: int, seed: int) -> PlantedTask:
    """Synthetic regression task whose ideal update lies in W0's null spaces."""
    if nullity < 1:
        raise ValueError("nullity must be >= 1")
    return plant_task(planted_weight(d_out, d_in, nullity, seed), n_samples, seed)


def closed_form_solution(layer: AdapterLayer, delta_star: np.ndarray) -> np.ndarray:
    """B reproducing ``delta_star`` exactly with A = 0 and s = 1.

    Valid when delta_star's columns lie in span(U_hat) and rows in span(A_f):
    then B = U_hat C with C = U_hat^T delta_star A_f^T.
    """
    C = layer.U_hat.T @ delta_star @ layer.A_f.T
    return layer.U_hat @ C


def dataset_loss(layer: AdapterLayer, inputs, targets) -> float:
    return mse_loss(forward(layer, inputs), targets)[0]


def train(layer: AdapterLayer, task: PlantedTask, cfg: TrainConfig) -> TrainHistory:
    """Minibatch training of the layer's trainables; mutates ``layer`` in place."""
    X_all, T_all = task.inputs, task.targets
    if X_all.shape[0] != layer.d_in or T_all.shape[0] != layer.d_out:
        raise ValueError(
            f"task dims {T_all.shape[0]}x{X_all.shape[0]} do not match layer "
            f"{layer.name!r} {layer.d_out}x{layer.d_in}"
        )
    n = X_all.shape[1]
    bs = min(cfg.batch_size, n)
    rng = np.random.default_rng(cfg.seed)
    state = OptimizerState()
    history = TrainHistory(initial_loss=dataset_loss(layer, X_all, T_all))
    order = rng.permutation(n)
    cursor = 0
    for step in range(cfg.steps):
        if cursor + bs > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor : cursor + bs]
        cursor += bs
        X, T = X_all[:, idx], T_all[:, idx]
        # overflow is reported below as TrainingDiverged
        with np.errstate(over="ignore", invalid="ignore"):
            loss, G = mse_loss(forward(layer, X), T)
            grads = backward(layer, X, G)
        if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.as_dict().values()):
            norms = {k: float(np.linalg.norm(v)) for k, v in grads.as_dict().items()}
            raise TrainingDiverged(step, loss, norms)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            history.records.append(
                StepRecord(
                    step=step,
                    loss=loss,
                    grad_norm=grads.norm(),
                    null_residual=null_residual(layer, delta_weight(layer)),
                    effective_rank=effective_rank(layer).rank_stacked_B,
                )
            )
            log.debug("step %d loss %.3e", step, loss)
        optimizer_step(layer, grads, state, cfg)
    history.final_loss = dataset_loss(layer, X_all, T_all)
    if not math.isfinite(history.final_loss):
        raise TrainingDiverged(cfg.steps, history.final_loss, {})
    return history
