"""LoRA adapters, the shared/specific adapter bank, and KD gradient redistribution."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from conec.errors import InvalidInputError, InvalidShapeError
from conec.numkit import Rng, random_orthogonal_rows

TARGETS = ("q", "k", "v")


@dataclass
class LoraAdapter:
    """Low-rank update ``delta_w = a @ b`` added to one attention projection.

    ``a`` is the d x r up-projection (zero at creation), ``b`` the r x k
    down-projection. When ``train_b`` is false ``b`` stays at its random
    row-orthonormal initial value.
    """

    a: np.ndarray
    b: np.ndarray
    target: str = "q"
    train_b: bool = False

    @property
    def rank(self) -> int:
        return self.b.shape[0]

    def delta_w(self) -> np.ndarray:
        return self.a @ self.b

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.a.copy(), self.b.copy(), self.target, self.train_b)


def _new_adapter(r: int, k: int, d: int, rng: Rng, target: str, train_b: bool) -> LoraAdapter:
    if target not in TARGETS:
        raise InvalidInputError(f"unknown projection {target!r}; expected one of {TARGETS}")
    if r < 1 or r > min(d, k):
        raise InvalidShapeError(f"rank {r} must lie in [1, min(d, k)] = [1, {min(d, k)}]")
    b = random_orthogonal_rows(r, k, rng)
    return LoraAdapter(np.zeros((d, r)), b, target, train_b)


def new_shared(r: int, k: int, d: int, rng: Rng, target: str = "q") -> LoraAdapter:
    """Shared adapter: frozen orthonormal-row ``b``, zero ``a``."""
    return _new_adapter(r, k, d, rng, target, train_b=False)


def new_specific(r: int, k: int, d: int, rng: Rng, target: str = "q", train_b: bool = False) -> LoraAdapter:
    return _new_adapter(r, k, d, rng, target, train_b=train_b)


def delta(adapter: LoraAdapter, z: np.ndarray) -> np.ndarray:
    """Low-rank contribution ``z @ (a @ b).T`` for every token row of ``z``."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != adapter.b.shape[1]:
        raise InvalidShapeError(
            f"token width {z.shape[-1]} does not match adapter input width {adapter.b.shape[1]}"
        )
    return (z @ adapter.b.T) @ adapter.a.T


def row_norms(a: np.ndarray) -> np.ndarray:
    return np.linalg.norm(a, axis=1)


def redistribution_mask(prev_norms) -> np.ndarray:
    """Dimension-preserving normalisation ``d * w / sum(w)``.

    All-zero norms (the previous domain never moved ``a``) give the uniform mask.
    """
    w = np.asarray(prev_norms, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise InvalidShapeError("previous norms must be a non-empty vector")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InvalidInputError("norms must be finite and non-negative")
    total = w.sum()
    if total == 0:
        return np.ones_like(w)
    return w.size * w / total


def apply_redistribution(grad_a: np.ndarray, mask: np.ndarray) -> np.ndarray:
    grad_a = np.asarray(grad_a, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if grad_a.ndim != 2 or mask.shape != (grad_a.shape[0],):
        raise InvalidShapeError(f"mask of shape {mask.shape} cannot scale rows of {grad_a.shape}")
    return grad_a * mask[:, None]


BlockAdapters = dict  # target name -> LoraAdapter


@dataclass
class SharedSnapshot:
    """Frozen copy of the shared adapters taken at the end of a domain."""

    adapters: list[BlockAdapters]
    norms: list[dict[str, np.ndarray]]

    @classmethod
    def take(cls, shared: list[BlockAdapters]) -> "SharedSnapshot":
        adapters = [{t: ad.copy() for t, ad in blk.items()} for blk in shared]
        for blk in adapters:
            for ad in blk.values():
                ad.a.setflags(write=False)
                ad.b.setflags(write=False)
        norms = [{t: row_norms(ad.a) for t, ad in blk.items()} for blk in adapters]
        return cls(adapters, norms)

    def masks(self) -> list[dict[str, np.ndarray]]:
        return [{t: redistribution_mask(n) for t, n in blk.items()} for blk in self.norms]


@dataclass
class AdapterBank:
    """Shared adapters on blocks 1..split, one specific set per domain after that.

    ``split == num_layers`` leaves no specific blocks (single adapter set);
    ``split == 0`` leaves no shared blocks.
    """

    num_layers: int
    split: int
    rank: int
    dim: int
    targets: tuple[str, ...] = ("q", "v")
    train_specific_b: bool = False
    shared: list[BlockAdapters] = field(default_factory=list)
    specific: dict[int, list[BlockAdapters]] = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.split <= self.num_layers:
            raise InvalidShapeError(f"split {self.split} outside [0, {self.num_layers}]")
        for t in self.targets:
            if t not in TARGETS:
                raise InvalidInputError(f"unknown projection {t!r}")

    @classmethod
    def create(cls, num_layers, split, rank, dim, rng, targets=("q", "v"), train_specific_b=False):
        bank = cls(num_layers, split, rank, dim, tuple(targets), train_specific_b)
        bank.shared = [
            {t: new_shared(rank, dim, dim, rng, t) for t in bank.targets} for _ in range(split)
        ]
        return bank

    def add_domain(self, domain: int, rng: Rng) -> list[BlockAdapters]:
        if domain in self.specific:
            raise InvalidInputError(f"domain {domain} already has task-specific adapters")
        blocks = [
            {t: new_specific(self.rank, self.dim, self.dim, rng, t, self.train_specific_b) for t in self.targets}
            for _ in range(self.num_layers - self.split)
        ]
        self.specific[domain] = blocks
        return blocks

    def blocks_for(self, domain: int | None) -> list[BlockAdapters | None]:
        """Per-block adapter dicts for a forward pass routed to ``domain``."""
        tail: list = [None] * (self.num_layers - self.split)
        if domain is not None and self.num_layers > self.split:
            tail = list(self.specific[domain])
        return list(self.shared) + tail

    def snapshot(self) -> SharedSnapshot:
        return SharedSnapshot.take(self.shared)

    def copy(self) -> "AdapterBank":
        return copy.deepcopy(self)
