"""Per-block scale generator: a two-layer tanh MLP with a softplus output head.

One independent network per parameter block maps five step statistics
(last two perturbed losses, last scale, current block mean and variance)
to one positive raw standard deviation.  Forward and backward passes are
closed-form; checkpoints are a line-oriented text format.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    ContractViolationError,
    DimensionMismatchError,
    MagicMismatchError,
    NumericOverflowError,
    TruncatedCheckpointError,
)
from .paramspace import BlockPartition, NoiseSeed, PartitionMismatchError

N_FEATURES = 5
CHECKPOINT_MAGIC = "ZOFT-PERTNN v1"

_INIT_TAG = 0x1417BEE

# softplus(b2) == 1 at zero input, so a fresh network starts near unit scales.
_B2_INIT = math.log(math.e - 1.0)


@dataclass
class PertNNInput:
    """Features for one block at one step."""

    loss_plus: float
    loss_minus: float
    prev_scale: float
    mean: float
    var: float

    def as_array(self) -> np.ndarray:
        x = np.array(
            [self.loss_plus, self.loss_minus, self.prev_scale, self.mean, self.var],
            dtype=np.float64,
        )
        if not np.all(np.isfinite(x)):
            raise NumericOverflowError(f"non-finite feature vector {x}")
        if self.prev_scale <= 0:
            raise ValueError(f"prev_scale must be positive, got {self.prev_scale}")
        return x


class PertNNParams:
    """Weights of every block's network.

    Per block i: w1[i] (hidden x 5), b1[i] (hidden,), w2[i] (hidden,), b2[i] scalar.
    """

    def __init__(self, block_names, hidden, w1, b1, w2, b2):
        if hidden < 1:
            raise ValueError(f"hidden width must be >= 1, got {hidden}")
        self.block_names = tuple(block_names)
        self.hidden = int(hidden)
        self.w1 = [np.asarray(m, dtype=np.float64) for m in w1]
        self.b1 = [np.asarray(v, dtype=np.float64) for v in b1]
        self.w2 = [np.asarray(v, dtype=np.float64) for v in w2]
        self.b2 = [float(s) for s in b2]
        for i, name in enumerate(self.block_names):
            if self.w1[i].shape != (self.hidden, N_FEATURES):
                raise ValueError(f"block {name}: W1 shape {self.w1[i].shape}")
            if self.b1[i].shape != (self.hidden,):
                raise ValueError(f"block {name}: b1 shape {self.b1[i].shape}")
            if self.w2[i].shape != (self.hidden,):
                raise ValueError(f"block {name}: W2 shape {self.w2[i].shape}")
            for arr in (self.w1[i], self.b1[i], self.w2[i]):
                if not np.all(np.isfinite(arr)):
                    raise NumericOverflowError(f"block {name}: non-finite weights")
            if not math.isfinite(self.b2[i]):
                raise NumericOverflowError(f"block {name}: non-finite bias")

    @property
    def n_blocks(self) -> int:
        return len(self.block_names)

    def copy(self) -> "PertNNParams":
        return PertNNParams(
            self.block_names,
            self.hidden,
            [m.copy() for m in self.w1],
            [v.copy() for v in self.b1],
            [v.copy() for v in self.w2],
            list(self.b2),
        )

    def zeros_like(self) -> "PertNNParams":
        return PertNNParams(
            self.block_names,
            self.hidden,
            [np.zeros_like(m) for m in self.w1],
            [np.zeros_like(v) for v in self.b1],
            [np.zeros_like(v) for v in self.w2],
            [0.0] * self.n_blocks,
        )

    def add_scaled(self, other: "PertNNParams", factor: float) -> None:
        """In-place self += factor * other (used for SGD updates)."""
        if other.block_names != self.block_names or other.hidden != self.hidden:
            raise PartitionMismatchError("parameter shapes do not match")
        for i in range(self.n_blocks):
            self.w1[i] += factor * other.w1[i]
            self.b1[i] += factor * other.b1[i]
            self.w2[i] += factor * other.w2[i]
            self.b2[i] += factor * other.b2[i]

    def equals(self, other: "PertNNParams") -> bool:
        return (
            self.block_names == other.block_names
            and self.hidden == other.hidden
            and all(np.array_equal(a, b) for a, b in zip(self.w1, other.w1))
            and all(np.array_equal(a, b) for a, b in zip(self.b1, other.b1))
            and all(np.array_equal(a, b) for a, b in zip(self.w2, other.w2))
            and self.b2 == other.b2
        )


@dataclass
class ForwardCache:
    block: int
    x: np.ndarray
    h: np.ndarray  # tanh activations
    y: float  # pre-softplus output


def _softplus(y: float) -> float:
    return float(np.logaddexp(0.0, y))


def _sigmoid(y: float) -> float:
    # stable in both tails
    if y >= 0:
        return 1.0 / (1.0 + math.exp(-y))
    e = math.exp(y)
    return e / (1.0 + e)


def forward(params: PertNNParams, inp, block: int):
    """Run block `block`'s network; returns (raw_std, cache).

    raw_std = softplus(W2 . tanh(W1 x + b1) + b2) > 0.
    """
    x = inp.as_array() if isinstance(inp, PertNNInput) else np.asarray(inp, dtype=np.float64)
    pre = params.w1[block] @ x + params.b1[block]
    h = np.tanh(pre)
    y = float(params.w2[block] @ h + params.b2[block])
    raw = _softplus(y)
    if not math.isfinite(raw):
        raise NumericOverflowError(
            f"non-finite activation in block {params.block_names[block]}"
        )
    return raw, ForwardCache(block=block, x=x, h=h, y=y)


def backward(params: PertNNParams, cache: ForwardCache, upstream: float):
    """Exact gradients of upstream * raw_std for one block.

    Returns (grad_params, grad_input) where grad_params is zero outside
    cache.block.
    """
    i = cache.block
    if not (0 <= i < params.n_blocks):
        raise ContractViolationError(f"cache block {i} out of range")
    if cache.h.shape != (params.hidden,) or cache.x.shape != (N_FEATURES,):
        raise ContractViolationError("cache does not match these parameters")
    grads = params.zeros_like()
    dy = upstream * _sigmoid(cache.y)
    grads.w2[i][:] = dy * cache.h
    grads.b2[i] = dy
    dpre = (dy * params.w2[i]) * (1.0 - cache.h**2)
    grads.w1[i][:] = np.outer(dpre, cache.x)
    grads.b1[i][:] = dpre
    grad_input = params.w1[i].T @ dpre
    return grads, grad_input


def forward_all(params: PertNNParams, features: np.ndarray):
    """Forward every block; features is (n_blocks, 5).  Returns (raw_stds, caches)."""
    if features.shape != (params.n_blocks, N_FEATURES):
        raise PartitionMismatchError(
            f"expected features of shape ({params.n_blocks}, {N_FEATURES}), "
            f"got {features.shape}"
        )
    raws = np.empty(params.n_blocks)
    caches = []
    for i in range(params.n_blocks):
        raws[i], cache = forward(params, features[i], i)
        caches.append(cache)
    return raws, caches


def init(partition: BlockPartition, hidden: int = 64, seed: NoiseSeed = NoiseSeed(0)) -> PertNNParams:
    """Small uniform init (+-1/sqrt(fan_in)); b2 set so output at zero input ~ 1."""
    if hidden < 1:
        raise ValueError(f"hidden width must be >= 1, got {hidden}")
    w1, b1, w2, b2 = [], [], [], []
    for i in range(partition.n_blocks):
        rng = np.random.default_rng([_INIT_TAG, seed.seed, seed.stream, i])
        lim1 = 1.0 / math.sqrt(N_FEATURES)
        lim2 = 1.0 / math.sqrt(hidden)
        w1.append(rng.uniform(-lim1, lim1, size=(hidden, N_FEATURES)))
        b1.append(rng.uniform(-lim1, lim1, size=hidden))
        w2.append(rng.uniform(-lim2, lim2, size=hidden))
        b2.append(_B2_INIT)
    return PertNNParams(partition.names, hidden, w1, b1, w2, b2)


def constant_params(partition: BlockPartition, hidden: int = 64) -> PertNNParams:
    """All-zero weights with b2 = ln(e-1): every block outputs exactly 1."""
    n = partition.n_blocks
    return PertNNParams(
        partition.names,
        hidden,
        [np.zeros((hidden, N_FEATURES)) for _ in range(n)],
        [np.zeros(hidden) for _ in range(n)],
        [np.zeros(hidden) for _ in range(n)],
        [_B2_INIT] * n,
    )


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _fmt_row(row) -> str:
    return " ".join(_fmt(v) for v in np.atleast_1d(row))


def save(params: PertNNParams, path) -> None:
    lines = [
        CHECKPOINT_MAGIC,
        f"blocks={params.n_blocks} hidden={params.hidden} features={N_FEATURES}",
    ]
    for i, name in enumerate(params.block_names):
        lines.append(name)
        for row in params.w1[i]:
            lines.append(_fmt_row(row))
        lines.append(_fmt_row(params.b1[i]))
        lines.append(_fmt_row(params.w2[i]))
        lines.append(_fmt(params.b2[i]))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def _parse_floats(line: str, expected: int, what: str) -> np.ndarray:
    fields = line.split()
    if len(fields) != expected:
        raise DimensionMismatchError(
            f"{what}: expected {expected} fields, got {len(fields)}"
        )
    try:
        return np.array([float(v) for v in fields])
    except ValueError as exc:
        raise DimensionMismatchError(f"{what}: {exc}") from exc


def load(path) -> PertNNParams:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        got = lines[0] if lines else "<empty file>"
        raise MagicMismatchError(f"expected magic {CHECKPOINT_MAGIC!r}, got {got!r}")
    if len(lines) < 2:
        raise TruncatedCheckpointError("missing header line")
    header = dict(kv.split("=", 1) for kv in lines[1].split())
    try:
        n_blocks = int(header["blocks"])
        hidden = int(header["hidden"])
        features = int(header["features"])
    except (KeyError, ValueError) as exc:
        raise DimensionMismatchError(f"malformed header {lines[1]!r}") from exc
    if features != N_FEATURES:
        raise DimensionMismatchError(f"unsupported feature count {features}")

    names, w1, b1, w2, b2 = [], [], [], [], []
    pos = 2
    lines_per_block = 1 + hidden + 3
    for b in range(n_blocks):
        if pos + lines_per_block > len(lines):
            raise TruncatedCheckpointError(
                f"file declares {n_blocks} blocks but ends inside block {b}"
            )
        names.append(lines[pos])
        pos += 1
        rows = [
            _parse_floats(lines[pos + r], N_FEATURES, f"block {b} W1 row {r}")
            for r in range(hidden)
        ]
        pos += hidden
        w1.append(np.vstack(rows))
        b1.append(_parse_floats(lines[pos], hidden, f"block {b} b1"))
        w2.append(_parse_floats(lines[pos + 1], hidden, f"block {b} W2"))
        b2.append(float(_parse_floats(lines[pos + 2], 1, f"block {b} b2")[0]))
        pos += 3
    return PertNNParams(names, hidden, w1, b1, w2, b2)
