"""Synthetic domain-incremental benchmark with controlled per-domain shift.

Classes share one label space. Class means sit on a regular polygon in the
plane of raw dimensions (0, 1); each domain rotates that plane, rescales,
drifts the mean along a seeded direction in the remaining dimensions and
adds isotropic noise.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from conec.errors import ConfigError, InvalidInputError
from conec.numkit import child_rngs, make_rng

DEFAULT_ROTATIONS = (0.0, 30.0, -30.0, 60.0, -60.0)


@dataclass
class StreamConfig:
    num_domains: int = 5
    num_classes: int = 4
    input_dim: int = 16
    train_per_class: int = 200
    test_per_class: int = 100
    class_radius: float = 3.0
    class_std: float = 0.5
    rotations: tuple[float, ...] = DEFAULT_ROTATIONS  # degrees, per domain
    scales: tuple[float, ...] = ()  # empty -> 1.0 for every domain
    drift: float = 4.0  # length of the per-domain mean offset
    noise: tuple[float, ...] = ()  # extra isotropic noise std per domain
    unseen_test: bool = False  # test sets drawn from held-out transforms
    seed: int = 0

    def __post_init__(self):
        self.rotations = tuple(float(r) for r in self.rotations)
        self.scales = tuple(float(s) for s in self.scales)
        self.noise = tuple(float(s) for s in self.noise)
        if self.num_domains < 1 or self.num_classes < 2:
            raise ConfigError("need at least one domain and two classes")
        if self.input_dim < 2:
            raise ConfigError("input_dim must be >= 2 (the class plane)")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ConfigError("per-class sample counts must be positive")
        for name in ("rotations", "scales", "noise"):
            vals = getattr(self, name)
            if vals and len(vals) != self.num_domains:
                raise ConfigError(f"{name} has {len(vals)} entries for {self.num_domains} domains")
        if any(s <= 0 for s in self.scales) or any(s < 0 for s in self.noise):
            raise ConfigError("scales must be positive and noise non-negative")
        if self.class_std < 0 or self.drift < 0:
            raise ConfigError("class_std and drift must be non-negative")

    def rotation(self, b: int) -> float:
        return self.rotations[b] if self.rotations else 0.0

    def scale(self, b: int) -> float:
        return self.scales[b] if self.scales else 1.0

    def noise_std(self, b: int) -> float:
        return self.noise[b] if self.noise else 0.0


@dataclass
class DomainData:
    domain: int  # 1-based
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    transform: dict = field(default_factory=dict)


def class_means(config: StreamConfig) -> np.ndarray:
    m = config.num_classes
    means = np.zeros((m, config.input_dim))
    ang = 2 * np.pi * np.arange(m) / m
    means[:, 0] = config.class_radius * np.cos(ang)
    means[:, 1] = config.class_radius * np.sin(ang)
    return means


def rotation_matrix(dim: int, degrees: float) -> np.ndarray:
    rot = np.eye(dim)
    t = math.radians(degrees)
    rot[0, 0] = rot[1, 1] = math.cos(t)
    rot[0, 1] = -math.sin(t)
    rot[1, 0] = math.sin(t)
    return rot


def _drift_directions(config: StreamConfig) -> np.ndarray:
    rng = make_rng(config.seed + 7919)
    dirs = np.zeros((config.num_domains, config.input_dim))
    if config.input_dim > 2:
        raw = rng.standard_normal((config.num_domains, config.input_dim - 2))
        dirs[:, 2:] = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    return dirs


def _draw(config, means, rng, per_class, rot, scale, offset, noise):
    m = config.num_classes
    y = np.repeat(np.arange(m), per_class)
    base = means[y] + config.class_std * rng.standard_normal((y.size, config.input_dim))
    x = scale * base @ rotation_matrix(config.input_dim, rot).T + offset
    if noise > 0:
        x = x + noise * rng.standard_normal(x.shape)
    perm = rng.permutation(y.size)
    return x[perm], y[perm]


def generate(config: StreamConfig) -> list[DomainData]:
    """Deterministic list of domains, in canonical order 1..B."""
    means = class_means(config)
    dirs = _drift_directions(config)
    rngs = child_rngs(config.seed, 2 * config.num_domains)
    out = []
    for b in range(config.num_domains):
        rot, scale, noise = config.rotation(b), config.scale(b), config.noise_std(b)
        offset = config.drift * dirs[b]
        x_tr, y_tr = _draw(config, means, rngs[2 * b], config.train_per_class, rot, scale, offset, noise)
        if config.unseen_test:
            rot_te = rot + 15.0
            offset_te = offset + 0.5 * config.drift * np.roll(dirs[b], 1)
        else:
            rot_te, offset_te = rot, offset
        x_te, y_te = _draw(config, means, rngs[2 * b + 1], config.test_per_class, rot_te, scale, offset_te, noise)
        transform = {"rotation": rot, "scale": scale, "offset": offset, "noise": noise}
        out.append(DomainData(b + 1, x_tr, y_tr, x_te, y_te, transform))
    return out


def domain_orders(num_domains: int, num_orders: int, seed: int = 0) -> list[tuple[int, ...]]:
    """Distinct 1-based permutations; the first is always the identity."""
    if num_orders < 1:
        raise InvalidInputError("num_orders must be >= 1")
    if num_orders > math.factorial(num_domains):
        raise InvalidInputError(f"only {math.factorial(num_domains)} orders of {num_domains} domains exist")
    identity = tuple(range(1, num_domains + 1))
    orders = [identity]
    seen = {identity}
    if math.factorial(num_domains) <= 5040:
        rest = [p for p in itertools.permutations(identity) if p != identity]
        rng = make_rng(seed)
        idx = rng.permutation(len(rest))[: num_orders - 1]
        return orders + [rest[i] for i in idx]
    rng = make_rng(seed)
    while len(orders) < num_orders:
        p = tuple(int(v) + 1 for v in rng.permutation(num_domains))
        if p not in seen:
            seen.add(p)
            orders.append(p)
    return orders


def export_csv(domains: list[DomainData], path, split: str = "train") -> None:
    """Header ``x_0..x_{n-1}, label, domain``; floats written round-trip exact."""
    n = domains[0].x_train.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x_{i}" for i in range(n)] + ["label", "domain"])
        for dom in domains:
            x, y = (dom.x_train, dom.y_train) if split == "train" else (dom.x_test, dom.y_test)
            for row, label in zip(x, y):
                w.writerow([repr(float(v)) for v in row] + [int(label), dom.domain])


def import_csv(path) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Inverse of ``export_csv``: domain id -> (x, y) in file order."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    n = len(header) - 2
    by_domain: dict[int, tuple[list, list]] = {}
    for r in body:
        xs, ys = by_domain.setdefault(int(r[-1]), ([], []))
        xs.append([float(v) for v in r[:n]])
        ys.append(int(r[n]))
    return {d: (np.array(xs), np.array(ys, dtype=np.int64)) for d, (xs, ys) in by_domain.items()}
