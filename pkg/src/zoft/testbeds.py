"""Desk-scale optimization targets with exact gradients.

Two families:

* block-diagonal quadratics with prescribed per-block effective ranks
  (the setting the convergence bounds are stated for), and
* a small hand-backpropagated softmax classifier whose natural weight
  tensors define the block partition.

Both expose the same informal interface: ``partition``, ``init_theta``,
``sample_batch``, ``loss`` and ``grad``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .paramspace import BlockPartition

_QNOISE_TAG = 0x0BA7C4
_QINIT_TAG = 0x71E7A0
_BATCH_TAG = 0xBA7C41D
_DATA_TAG = 0xDA7A5E7
_MINIT_TAG = 0x3317A17


# ---------------------------------------------------------------------------
# Block-diagonal quadratics


@dataclass
class QuadraticTask:
    """L(theta) = 0.5 (theta - theta*)' H (theta - theta*) with diagonal H.

    The Hessian is stored as its eigenvalue vector ``eigs`` (one value per
    coordinate), so it is exactly block-diagonal for any partition: cross-block
    coupling is identically zero.  Optional minibatch noise adds a linear term
    xi' (theta - theta*) with E xi = 0 and tr Cov(xi) = tau, drawn
    deterministically from the batch key.
    """

    partition: BlockPartition
    eigs: np.ndarray
    theta_star: np.ndarray
    noise_tau: float = 0.0
    init_scale: float | tuple = 1.0  # scalar, or one entry per block
    seed: int = 0
    name: str = "quadratic"

    def __post_init__(self):
        self.eigs = np.asarray(self.eigs, dtype=np.float64)
        self.theta_star = np.asarray(self.theta_star, dtype=np.float64)
        d = self.partition.total
        if self.eigs.shape != (d,) or self.theta_star.shape != (d,):
            raise ConfigError("eigenvalues / optimum must have length d")
        if np.any(self.eigs < 0):
            raise ConfigError("quadratic eigenvalues must be nonnegative")
        scale = np.asarray(self.init_scale, dtype=np.float64)
        if scale.ndim == 0:
            self._init_sigma = np.full(d, float(scale))
        else:
            if scale.shape != (self.partition.n_blocks,):
                raise ConfigError("init_scale must be scalar or one value per block")
            self._init_sigma = np.repeat(scale, self.partition.sizes)

    @property
    def dim(self) -> int:
        return self.partition.total

    @property
    def smoothness(self) -> float:
        return float(self.eigs.max())

    def effective_ranks(self) -> np.ndarray:
        """Per-block tr(H_i) / ||H_i||_op."""
        ranks = np.empty(self.partition.n_blocks)
        for i in range(self.partition.n_blocks):
            lam = self.eigs[self.partition.block_slice(i)]
            top = lam.max()
            ranks[i] = lam.sum() / top if top > 0 else 1.0
        return ranks

    def _batch_noise(self, batch) -> np.ndarray | None:
        if self.noise_tau == 0.0:
            return None
        rng = np.random.default_rng([_QNOISE_TAG, self.seed, int(batch)])
        return rng.normal(0.0, np.sqrt(self.noise_tau / self.dim), size=self.dim)

    def loss(self, values: np.ndarray, batch=0) -> float:
        delta = values - self.theta_star
        out = 0.5 * float(delta @ (self.eigs * delta))
        xi = self._batch_noise(batch)
        if xi is not None:
            out += float(xi @ delta)
        return out

    def grad(self, values: np.ndarray, batch=0) -> np.ndarray:
        g = self.eigs * (values - self.theta_star)
        xi = self._batch_noise(batch)
        if xi is not None:
            g = g + xi
        return g

    def block_grad_sqnorms(self, values: np.ndarray, batch=0) -> np.ndarray:
        g = self.grad(values, batch)
        return np.array(
            [float(np.sum(g[self.partition.block_slice(i)] ** 2))
             for i in range(self.partition.n_blocks)]
        )

    def sample_batch(self, batch_size: int, seed: int):
        # A quadratic "batch" is just the noise key; the key is the seed itself
        # so identical seeds give identical batches.
        return int(seed)

    def init_theta(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng([_QINIT_TAG, self.seed, int(seed)])
        return self.theta_star + self._init_sigma * rng.standard_normal(self.dim)


def make_rank_family(block_sizes, ranks, opnorms, **kwargs) -> QuadraticTask:
    """Build a quadratic whose block spectra hit the requested effective ranks.

    Block i gets one eigenvalue equal to opnorms[i] and an equal tail chosen so
    tr / op == ranks[i] exactly: the d_i - 1 remaining eigenvalues are all
    opnorms[i] * (r_i - 1) / (d_i - 1).
    """
    block_sizes = [int(s) for s in block_sizes]
    ranks = [float(r) for r in ranks]
    opnorms = [float(L) for L in opnorms]
    if not (len(block_sizes) == len(ranks) == len(opnorms)):
        raise ConfigError("block_sizes, ranks and opnorms must have equal length")
    partition = BlockPartition([(f"block{i}", s) for i, s in enumerate(block_sizes)])
    eigs = np.empty(partition.total)
    for i, (d_i, r_i, L) in enumerate(zip(block_sizes, ranks, opnorms)):
        if not (1.0 <= r_i <= d_i):
            raise ConfigError(f"block {i}: rank {r_i} infeasible for size {d_i}")
        if L <= 0:
            raise ConfigError(f"block {i}: operator norm must be positive")
        sl = partition.block_slice(i)
        spectrum = np.empty(d_i)
        spectrum[0] = L
        if d_i > 1:
            spectrum[1:] = L * (r_i - 1.0) / (d_i - 1.0)
        eigs[sl] = spectrum
    theta_star = kwargs.pop("theta_star", np.zeros(partition.total))
    return QuadraticTask(partition, eigs, theta_star, **kwargs)


@dataclass
class QuadraticFamily:
    """Generator of related quadratic tasks sharing a partition and rank profile.

    Each task index gives a fresh optimum shift and (mildly) rescaled spectra,
    so a scale policy learned on some members transfers to held-out ones.
    """

    block_sizes: tuple = (4, 28)
    ranks: tuple = (1.0, 28.0)
    opnorms: tuple = (1.0, 1.0)
    opnorm_jitter: float = 0.0  # multiplicative log-uniform jitter per task
    shift_scale: float = 1.0
    init_scale: float | tuple = 1.0  # scalar, or one entry per block
    noise_tau: float = 0.0
    seed: int = 0

    def partition(self) -> BlockPartition:
        return BlockPartition(
            [(f"block{i}", int(s)) for i, s in enumerate(self.block_sizes)]
        )

    def make_task(self, index: int) -> QuadraticTask:
        rng = np.random.default_rng([self.seed, int(index)])
        opnorms = np.asarray(self.opnorms, dtype=np.float64)
        if self.opnorm_jitter > 0:
            opnorms = opnorms * np.exp(
                rng.uniform(-self.opnorm_jitter, self.opnorm_jitter, size=len(opnorms))
            )
        d = int(np.sum(self.block_sizes))
        shift = self.shift_scale * rng.standard_normal(d)
        return make_rank_family(
            self.block_sizes,
            self.ranks,
            opnorms,
            theta_star=shift,
            noise_tau=self.noise_tau,
            init_scale=self.init_scale,
            seed=self.seed * 1000003 + index,
            name=f"quad{index}",
        )

    def make_tasks(self, n: int, start: int = 0):
        return [self.make_task(start + k) for k in range(n)]


# ---------------------------------------------------------------------------
# Small MLP classifier


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class MLPTask:
    """Two-layer tanh classifier on synthetic Gaussian blobs, softmax CE loss.

    The flat parameter layout is always W1 | b1 | W2 | b2; the partition either
    names each tensor ("block" granularity, 4 blocks) or groups each layer's
    weight and bias ("layer" granularity, 2 blocks).
    """

    n_in: int = 4
    n_hidden: int = 8
    n_out: int = 3
    n_samples: int = 120
    data_seed: int = 0
    granularity: str = "block"
    name: str = "mlp"
    partition: BlockPartition = field(init=False)
    X: np.ndarray = field(init=False, repr=False)
    y: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        sizes = {
            "W1": self.n_in * self.n_hidden,
            "b1": self.n_hidden,
            "W2": self.n_hidden * self.n_out,
            "b2": self.n_out,
        }
        if self.granularity == "block":
            self.partition = BlockPartition(list(sizes.items()))
        elif self.granularity == "layer":
            self.partition = BlockPartition(
                [
                    ("layer1", sizes["W1"] + sizes["b1"]),
                    ("layer2", sizes["W2"] + sizes["b2"]),
                ]
            )
        else:
            raise ConfigError(f"unknown granularity {self.granularity!r}")
        rng = np.random.default_rng([_DATA_TAG, self.data_seed])
        means = rng.normal(0.0, 2.0, size=(self.n_out, self.n_in))
        self.y = np.arange(self.n_samples) % self.n_out
        self.X = means[self.y] + rng.standard_normal((self.n_samples, self.n_in))

    @property
    def dim(self) -> int:
        return self.partition.total

    def _unpack(self, values: np.ndarray):
        i, h, o = self.n_in, self.n_hidden, self.n_out
        w1 = values[: i * h].reshape(i, h)
        b1 = values[i * h : i * h + h]
        w2 = values[i * h + h : i * h + h + h * o].reshape(h, o)
        b2 = values[i * h + h + h * o :]
        return w1, b1, w2, b2

    def init_theta(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng([_MINIT_TAG, self.data_seed, int(seed)])
        i, h, o = self.n_in, self.n_hidden, self.n_out
        w1 = rng.standard_normal((i, h)) / np.sqrt(i)
        w2 = rng.standard_normal((h, o)) / np.sqrt(h)
        return np.concatenate([w1.ravel(), np.zeros(h), w2.ravel(), np.zeros(o)])

    def sample_batch(self, batch_size: int, seed: int) -> np.ndarray:
        rng = np.random.default_rng([_BATCH_TAG, self.data_seed, int(seed)])
        replace = batch_size > self.n_samples
        return rng.choice(self.n_samples, size=batch_size, replace=replace)

    def loss(self, values: np.ndarray, batch) -> float:
        w1, b1, w2, b2 = self._unpack(values)
        xb, yb = self.X[batch], self.y[batch]
        hidden = np.tanh(xb @ w1 + b1)
        probs = _softmax_rows(hidden @ w2 + b2)
        return float(-np.mean(np.log(probs[np.arange(len(yb)), yb])))

    def grad(self, values: np.ndarray, batch) -> np.ndarray:
        w1, b1, w2, b2 = self._unpack(values)
        xb, yb = self.X[batch], self.y[batch]
        n = len(yb)
        pre = xb @ w1 + b1
        hidden = np.tanh(pre)
        probs = _softmax_rows(hidden @ w2 + b2)
        dlogits = probs.copy()
        dlogits[np.arange(n), yb] -= 1.0
        dlogits /= n
        gw2 = hidden.T @ dlogits
        gb2 = dlogits.sum(axis=0)
        dhidden = (dlogits @ w2.T) * (1.0 - hidden**2)
        gw1 = xb.T @ dhidden
        gb1 = dhidden.sum(axis=0)
        return np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2])
