"""Interaction instruments: subset enumeration, centered products, and the
partialling designs used to orthogonalize outcome and exposure."""

from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import combinations
from math import comb

import numpy as np

from .errors import DomainError


@dataclass(frozen=True, order=True)
class InteractionIndex:
    """A sorted subset of instrument positions (1-based)."""

    subset: tuple[int, ...]

    def __post_init__(self):
        s = tuple(int(j) for j in self.subset)
        object.__setattr__(self, "subset", s)
        if not s or any(b <= a for a, b in zip(s, s[1:])) or s[0] < 1:
            raise DomainError(f"indices must be strictly increasing and >= 1, got {s}")

    @property
    def order(self) -> int:
        return len(self.subset)


def enumerate_subsets(p: int, k: int) -> list[InteractionIndex]:
    """All C(p, k) size-k subsets of {1..p} in lexicographic order."""
    if not 1 <= k <= p:
        raise DomainError(f"order k={k} outside 1..p={p}")
    return [InteractionIndex(s) for s in combinations(range(1, p + 1), k)]


def interaction_count(p: int, q: int) -> int:
    """Number of interaction terms of orders 2..q among p instruments."""
    if not 2 <= q <= p:
        raise DomainError(f"need 2 <= q <= p, got q={q}, p={p}")
    return sum(comb(p, k) for k in range(2, q + 1))


@dataclass(frozen=True)
class MomentSpec:
    """An ordered collection of interaction index sets defining the moment
    vector. Canonical order: orders ascending, lexicographic within order."""

    p: int
    q: int
    indices: tuple[InteractionIndex, ...]

    def __post_init__(self):
        idx = tuple(self.indices)
        object.__setattr__(self, "indices", idx)
        if not idx:
            raise DomainError("MomentSpec needs at least one index set")
        if not 2 <= self.q <= self.p:
            raise DomainError(f"need 2 <= q <= p, got q={self.q}, p={self.p}")
        prev = None
        for ix in idx:
            if ix.subset[-1] > self.p or ix.order > self.q:
                raise DomainError(f"index {ix.subset} outside p={self.p}, q={self.q}")
            if prev is not None and (ix.order, ix.subset) <= (prev.order, prev.subset):
                raise DomainError("indices must be in canonical order without repeats")
            prev = ix

    @property
    def m(self) -> int:
        return len(self.indices)

    @property
    def orders(self) -> tuple[int, ...]:
        return tuple(sorted({ix.order for ix in self.indices}))

    @classmethod
    def full(cls, p: int, q: int) -> "MomentSpec":
        """Unscreened spec with all orders 2..q; m = r(p, q)."""
        if not 2 <= q <= p:
            raise DomainError(f"need 2 <= q <= p, got q={q}, p={p}")
        idx = []
        for k in range(2, q + 1):
            idx.extend(enumerate_subsets(p, k))
        return cls(p=p, q=q, indices=tuple(idx))

    @classmethod
    def from_subsets(cls, p: int, q: int, subsets) -> "MomentSpec":
        """Build a (possibly screened) spec; subsets are re-sorted into
        canonical order."""
        idx = sorted((InteractionIndex(tuple(s)) for s in subsets),
                     key=lambda ix: (ix.order, ix.subset))
        return cls(p=p, q=q, indices=tuple(idx))

    def to_json(self) -> str:
        return json.dumps([list(ix.subset) for ix in self.indices])

    @classmethod
    def from_json(cls, p: int, q: int, text: str) -> "MomentSpec":
        return cls.from_subsets(p, q, json.loads(text))


def eval_centered(z, zeta, spec: MomentSpec) -> np.ndarray:
    """Centered interaction vector: component t is prod_{j in subset_t} (z_j - zeta_j)."""
    z = np.asarray(z, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    if z.shape != zeta.shape or z.shape != (spec.p,):
        raise DomainError(f"z and zeta must both have length p={spec.p}")
    zc = z - zeta
    out = np.empty(spec.m)
    for t, ix in enumerate(spec.indices):
        v = 1.0
        for j in ix.subset:
            v *= zc[j - 1]
        out[t] = v
    return out


def eval_centered_matrix(Z, zeta, spec: MomentSpec) -> np.ndarray:
    """Row-wise eval_centered for an (n, p) instrument matrix; returns (n, m)."""
    Z = np.asarray(Z, dtype=float)
    zc = Z - np.asarray(zeta, dtype=float)[None, :]
    out = np.empty((Z.shape[0], spec.m))
    for t, ix in enumerate(spec.indices):
        cols = [j - 1 for j in ix.subset]
        out[:, t] = np.prod(zc[:, cols], axis=1)
    return out


def vk_width(p: int, k: int) -> int:
    """Column count of the order-k partialling design."""
    return 1 + sum(comb(p, j) for j in range(1, k))


def build_Vk(Z, k: int) -> np.ndarray:
    """Partialling design: intercept plus all uncentered interactions of
    orders 1..k-1, columns in canonical enumerate_subsets order."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    n, p = Z.shape
    if not 2 <= k <= p:
        raise DomainError(f"order k={k} outside 2..p={p}")
    cols = [np.ones(n)]
    for order in range(1, k):
        for ix in enumerate_subsets(p, order):
            sel = [j - 1 for j in ix.subset]
            cols.append(np.prod(Z[:, sel], axis=1))
    return np.column_stack(cols)
