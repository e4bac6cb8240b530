"""Flat parameter vectors split into named blocks, with seeded Gaussian perturbations.

Perturbation noise is never stored: every draw is regenerated bit-exactly from a
(seed, stream) pair, consumed block by block, so a perturbation can be applied,
reversed, and re-applied without keeping a second parameter-sized buffer alive.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import InvalidScaleError, NumericOverflowError, PartitionMismatchError

# Domain-separation tag so block-noise streams never collide with other
# rng streams derived from the same user seed.
_NOISE_TAG = 0x5A0F7B10C

# Test hook: counts full-length (d-sized) scratch buffers handed out by this
# module.  The in-place walk must not bump it.
_full_buffer_allocs = 0


def full_buffer_alloc_count() -> int:
    return _full_buffer_allocs


def reset_full_buffer_alloc_count() -> None:
    global _full_buffer_allocs
    _full_buffer_allocs = 0


def _new_full_buffer(d: int) -> np.ndarray:
    global _full_buffer_allocs
    _full_buffer_allocs += 1
    return np.empty(d, dtype=np.float64)


class BlockPartition:
    """Ordered, contiguous, non-overlapping named blocks over [0, d)."""

    def __init__(self, blocks):
        names = [name for name, _ in blocks]
        sizes = [int(size) for _, size in blocks]
        if not blocks:
            raise ValueError("partition needs at least one block")
        if any(s < 1 for s in sizes):
            raise ValueError(f"block sizes must be >= 1, got {sizes}")
        if len(set(names)) != len(names):
            raise ValueError(f"block names must be unique, got {names}")
        self.names = tuple(names)
        self.sizes = np.asarray(sizes, dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)[:-1]])
        self.total = int(self.sizes.sum())
        # hot loops index these tuples instead of rebuilding slices per call
        self.py_sizes = tuple(sizes)
        offs = [int(o) for o in self.offsets]
        self.slices = tuple(
            slice(o, o + s) for o, s in zip(offs, sizes)
        )

    @property
    def n_blocks(self) -> int:
        return len(self.names)

    def block_slice(self, i: int) -> slice:
        return self.slices[i]

    def index(self, name: str) -> int:
        return self.names.index(name)

    def __eq__(self, other):
        return (
            isinstance(other, BlockPartition)
            and self.names == other.names
            and np.array_equal(self.sizes, other.sizes)
        )

    def __repr__(self):
        parts = ", ".join(f"{n}:{s}" for n, s in zip(self.names, self.sizes))
        return f"BlockPartition({parts})"


@dataclass
class ParamVector:
    """A length-d float64 vector tied to a partition."""

    values: np.ndarray
    partition: BlockPartition

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.partition.total,):
            raise PartitionMismatchError(
                f"vector length {self.values.shape} does not match partition "
                f"total {self.partition.total}"
            )
        if not np.all(np.isfinite(self.values)):
            raise NumericOverflowError("parameter vector contains non-finite entries")

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.partition)


@dataclass
class PerturbScales:
    """One standard deviation per block; the sampling law is u|block i = stds[i] * z."""

    stds: np.ndarray
    partition: BlockPartition
    allow_zero: bool = field(default=False, compare=False)

    def __post_init__(self):
        self.stds = np.asarray(self.stds, dtype=np.float64)
        if self.stds.shape != (self.partition.n_blocks,):
            raise PartitionMismatchError(
                f"expected {self.partition.n_blocks} scales, got {self.stds.shape}"
            )
        if not np.all(np.isfinite(self.stds)):
            raise InvalidScaleError("scales must be finite")
        lo = 0.0 if self.allow_zero else None
        if lo is None and np.any(self.stds <= 0):
            raise InvalidScaleError(f"scales must be strictly positive, got {self.stds}")
        if self.allow_zero and np.any(self.stds < 0):
            raise InvalidScaleError(f"scales must be nonnegative, got {self.stds}")

    def per_coordinate(self) -> np.ndarray:
        """Expand to a length-d vector of per-coordinate standard deviations."""
        return np.repeat(self.stds, self.partition.sizes)

    def budget(self) -> float:
        """Total perturbation energy sum_i d_i * s_i**2."""
        return float(np.dot(self.partition.sizes, self.stds**2))

    @classmethod
    def unit(cls, partition: BlockPartition) -> "PerturbScales":
        return cls(np.ones(partition.n_blocks), partition)


@dataclass(frozen=True)
class NoiseSeed:
    """Key for a regenerable noise stream.  Same (seed, stream) -> same bits."""

    seed: int
    stream: int = 0


_rng_local = threading.local()

# Stream stride: odd constant near 2**128 / golden ratio, the same spacing
# numpy's PCG64.jumped uses.  Power-of-two strides are unsafe here: A**(2**k)
# is congruent to 1 modulo a large power of two, which leaves the low state
# bits of different streams related by a constant offset.
_STREAM_STRIDE = 0x9E3779B97F4A7C15F39CC0605CEDC835
_STATE_MASK = (1 << 128) - 1


@lru_cache(maxsize=None)
def _base_rng_state(seed: int):
    return np.random.PCG64(np.random.SeedSequence([_NOISE_TAG, seed])).state


@lru_cache(maxsize=8192)
def _stream_rng_state(seed: int, stream: int):
    bg = getattr(_rng_local, "scratch", None)
    if bg is None:
        bg = _rng_local.scratch = np.random.PCG64(0)
    bg.state = _base_rng_state(seed)
    if stream:
        bg.advance((stream * _STREAM_STRIDE) & _STATE_MASK)
    return bg.state


def _stream_rng(seed: NoiseSeed) -> np.random.Generator:
    """Generator rewound to the start of the (seed, stream) noise stream.

    Stream k of a given seed is PCG64 seeded from (tag, seed) and advanced by
    k * stride states; blocks are drawn from it sequentially in partition
    order.  Stream states are cached and a thread-local generator is rewound
    to the cached state, since the same stream is replayed several times per
    optimizer step.
    """
    gen = getattr(_rng_local, "gen", None)
    if gen is None:
        _rng_local.bg = np.random.PCG64(0)
        gen = _rng_local.gen = np.random.Generator(_rng_local.bg)
    _rng_local.bg.state = _stream_rng_state(seed.seed, seed.stream)
    return gen


def _check_scales(partition: BlockPartition, scales: PerturbScales) -> None:
    if scales.partition is partition:  # the common case, skip the field compare
        return
    if scales.partition != partition:
        raise PartitionMismatchError("scales were built for a different partition")


def sample_block_noise(
    partition: BlockPartition, scales: PerturbScales, seed: NoiseSeed
) -> np.ndarray:
    """Draw u of length d with u|block i = stds[i] * z, z iid standard normal.

    The draw is a pure function of (seed, scales): the z values come from one
    deterministic stream consumed block by block in partition order, so
    regeneration is bit-exact and scales enter only as per-block multipliers.
    """
    _check_scales(partition, scales)
    u = _new_full_buffer(partition.total)
    gen = _stream_rng(seed)
    for i, (sl, n) in enumerate(zip(partition.slices, partition.py_sizes)):
        u[sl] = scales.stds[i] * gen.standard_normal(n)
    return u


def perturb_in_place(
    theta: ParamVector, scales: PerturbScales, seed: NoiseSeed, step: float
) -> None:
    """theta <- theta + step * u(seed, scales), regenerating u block by block.

    Only block-sized scratch is allocated, never a second d-sized buffer, which
    is the whole point of the store-a-seed design.
    """
    partition = theta.partition
    _check_scales(partition, scales)
    values = theta.values
    stds = scales.stds
    gen = _stream_rng(seed)
    for i, (sl, n) in enumerate(zip(partition.slices, partition.py_sizes)):
        values[sl] += (step * stds[i]) * gen.standard_normal(n)
    # one cheap reduction: any inf/nan entry makes the sum non-finite
    if not np.isfinite(values.sum()):
        raise NumericOverflowError("perturbation produced non-finite parameters")


def save_values(theta: ParamVector) -> np.ndarray:
    """Buffered mode: snapshot theta for bit-exact restoration (counts as a full buffer)."""
    global _full_buffer_allocs
    _full_buffer_allocs += 1
    return theta.values.copy()


def restore_values(theta: ParamVector, snapshot: np.ndarray) -> None:
    theta.values[:] = snapshot


def block_stats(theta: ParamVector, block: int) -> tuple[float, float]:
    """Arithmetic mean and population variance (divide by d_i) of one block."""
    sl = theta.partition.block_slice(block)
    vals = theta.values[sl]
    mean = float(vals.mean())
    var = float(vals.var())  # numpy default ddof=0 is the population variance
    return mean, var
