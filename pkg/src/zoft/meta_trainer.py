"""Learning-to-learn training of the scale network.

The model walks a plain first-order SGD trajectory; at every checkpoint a
one-step zeroth-order update using the current scale network is evaluated, and
the post-update loss is backpropagated to the network's weights through the
reparameterized perturbation u = s(omega) * z.  The finite-difference
coefficient c is treated as a constant during that backward pass (gradient
cut-off), tasks are shuffled every outer step, and the model is periodically
reset to its initial state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import pertnn as pertnn_mod
from .errors import ConfigError, DivergenceError
from .paramspace import ParamVector, PerturbScales
from .zo_optimizer import DIVERGENCE_FACTOR, LossPair, step_features

_Z_TAG = 0x2E7A2
_SHUFFLE_TAG = 0x5F0FF1E
_MBATCH_TAG = 0x3BA7C


@dataclass
class MetaConfig:
    eta1: float  # model learning rate (also the ZO step size in the meta-objective)
    eta2: float  # scale-network learning rate
    steps: int
    epsilon: float = 1e-3
    reset_period: int = 50
    batch_size: int = 16
    seed: int = 0
    normalize: bool = True
    loss_ratio_reset: float | None = None  # optional: also reset once loss < ratio * initial

    def __post_init__(self):
        if self.epsilon <= 0 or self.eta1 <= 0 or self.eta2 < 0:
            raise ConfigError("epsilon and eta1 must be positive, eta2 nonnegative")
        if self.reset_period < 1:
            raise ConfigError("reset_period must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be nonnegative")


@dataclass
class TaskState:
    """Per-task carry-over: previous normalized scales and perturbed losses."""

    scales: np.ndarray
    loss_pair: LossPair | None = None

    @classmethod
    def fresh(cls, n_blocks: int) -> "TaskState":
        return cls(scales=np.ones(n_blocks))


@dataclass
class MetaEval:
    """Intermediates of one meta-objective evaluation."""

    l_zo: float
    coeff: float
    loss_pair: LossPair
    raw_stds: np.ndarray
    used_stds: np.ndarray
    u: np.ndarray
    theta1: np.ndarray
    caches: list
    z: np.ndarray


def _scales_and_caches(theta, pertnn, task_state, prev_pair, normalize):
    features = step_features(theta, prev_pair, task_state.scales)
    raws, caches = pertnn_mod.forward_all(pertnn, features)
    if normalize:
        d = theta.partition.total
        budget = float(theta.partition.sizes @ raws**2)
        used = raws * np.sqrt(d / budget)
    else:
        used = raws.copy()
    return raws, used, caches


def meta_loss(theta: ParamVector, pertnn, task, task_state: TaskState, batch,
              epsilon: float, eta1: float, z: np.ndarray,
              normalize: bool = True) -> MetaEval:
    """Post-update loss L(theta - eta1 * c * u) with u = s(omega) * z, z frozen."""
    prev_pair = task_state.loss_pair
    if prev_pair is None:
        l0 = float(task.loss(theta.values, batch))
        prev_pair = LossPair(l0, l0)
    raws, used, caches = _scales_and_caches(theta, pertnn, task_state, prev_pair, normalize)
    u = np.repeat(used, theta.partition.sizes) * z
    loss_plus = float(task.loss(theta.values + epsilon * u, batch))
    loss_minus = float(task.loss(theta.values - epsilon * u, batch))
    coeff = (loss_plus - loss_minus) / (2.0 * epsilon)
    theta1 = theta.values - eta1 * coeff * u
    l_zo = float(task.loss(theta1, batch))
    return MetaEval(
        l_zo=l_zo, coeff=coeff, loss_pair=LossPair(loss_plus, loss_minus),
        raw_stds=raws, used_stds=used, u=u, theta1=theta1, caches=caches, z=z,
    )


def meta_grad(theta: ParamVector, pertnn, task, task_state: TaskState, batch,
              config: MetaConfig, z: np.ndarray):
    """Gradient of the cut-off meta-objective w.r.t. the network weights.

    The coefficient c is frozen, so the only omega-dependence is through
    u = s'(omega) * z:  dL/ds'_i = -eta1 * c * <grad L(theta1)|_i, z_i>, then
    the normalization Jacobian (which couples blocks) and each block's
    analytic backward pass.
    """
    ev = meta_loss(theta, pertnn, task, task_state, batch,
                   config.epsilon, config.eta1, z, config.normalize)
    partition = theta.partition
    g1 = task.grad(ev.theta1, batch)
    d_used = np.array(
        [-config.eta1 * ev.coeff * float(g1[partition.block_slice(i)] @ z[partition.block_slice(i)])
         for i in range(partition.n_blocks)]
    )
    if config.normalize:
        raws = ev.raw_stds
        sizes = partition.sizes.astype(np.float64)
        budget = float(sizes @ raws**2)
        factor = np.sqrt(partition.total / budget)
        # d s'_i / d s_k = factor * (delta_ik - s'_i d_k s_k / (factor * budget))
        inner = float(d_used @ ev.used_stds)
        d_raw = factor * d_used - (sizes * raws / budget) * inner
    else:
        d_raw = d_used
    grads = pertnn.zeros_like()
    for i in range(partition.n_blocks):
        block_grad, _ = pertnn_mod.backward(pertnn, ev.caches[i], float(d_raw[i]))
        grads.add_scaled(block_grad, 1.0)
    return grads, ev


@dataclass
class MetaStepRecord:
    t: int
    task: str
    l_zo: float
    loss: float  # unperturbed loss before the model's SGD move
    reset: bool = False


def meta_step(theta: ParamVector, pertnn, task, task_state: TaskState, batch,
              config: MetaConfig, z: np.ndarray) -> MetaStepRecord:
    """One inner meta-training step: update the network, then move the model."""
    grads, ev = meta_grad(theta, pertnn, task, task_state, batch, config, z)
    pertnn.add_scaled(grads, -config.eta2)
    loss_t = float(task.loss(theta.values, batch))
    theta.values -= config.eta1 * task.grad(theta.values, batch)
    task_state.loss_pair = ev.loss_pair
    task_state.scales = ev.used_stds.copy()
    return MetaStepRecord(t=0, task=task.name, l_zo=ev.l_zo, loss=loss_t)


@dataclass
class MetaLog:
    records: list = field(default_factory=list)
    reset_steps: list = field(default_factory=list)


def train(config: MetaConfig, tasks, pertnn, theta0: np.ndarray | None = None):
    """Run the full learning-to-learn loop; returns (pertnn, MetaLog).

    All tasks must share one partition; the model parameters are shared across
    tasks and follow the first-order trajectory, reset to theta0 every
    reset_period outer steps.
    """
    if not tasks:
        raise ConfigError("task list must not be empty")
    partition = tasks[0].partition
    for task in tasks[1:]:
        if task.partition != partition:
            raise ConfigError("all meta-training tasks must share one partition")
    pertnn = pertnn.copy()
    if theta0 is None:
        theta0 = tasks[0].init_theta(config.seed)
    theta0 = np.asarray(theta0, dtype=np.float64).copy()
    theta = ParamVector(theta0.copy(), partition)
    states = [TaskState.fresh(partition.n_blocks) for _ in tasks]
    shuffle_rng = np.random.default_rng([_SHUFFLE_TAG, config.seed])
    log = MetaLog()
    initial_loss = None
    for t in range(1, config.steps + 1):
        order = shuffle_rng.permutation(len(tasks))
        for idx in order:
            task = tasks[idx]
            batch = task.sample_batch(
                config.batch_size, config.seed * 1000003 + t * 131 + int(idx)
            )
            z = np.random.default_rng([_Z_TAG, config.seed, t, int(idx)]).standard_normal(
                partition.total
            )
            record = meta_step(theta, pertnn, task, states[idx], batch, config, z)
            record.t = t
            log.records.append(record)
            if initial_loss is None:
                initial_loss = abs(record.loss) + 1e-300
            if abs(record.loss) > DIVERGENCE_FACTOR * initial_loss:
                raise DivergenceError(
                    f"meta-training loss {record.loss:.3e} diverged at step {t}"
                )
        do_reset = t % config.reset_period == 0
        if not do_reset and config.loss_ratio_reset is not None:
            do_reset = abs(log.records[-1].loss) < config.loss_ratio_reset * initial_loss
        if do_reset:
            theta.values[:] = theta0
            log.reset_steps.append(t)
            log.records[-1].reset = True
    return pertnn, log
