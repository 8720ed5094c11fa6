"""
Sum-of-Cliques Representations

Implicit edge-weight vectors over the complete graph on [n]:
- Partition: canonical membership labels (0 = absent)
- SocRep: sum_j w_j sum_{S in P_j} 1_{S x S}
- AsocRep: the mask of pairs inside S that cross pieces of a partition of S
- SparseLaplacian: explicit coalesced edge list

plus their fast Laplacian matvecs, and sampling-based sparsifiers for complete
bipartite graphs and clique x ASOC products.
"""

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse
from scipy.sparse.linalg import LinearOperator

from forster.config import Settings, get_settings
from forster.core.errors import DenseCapExceeded, PrerequisiteViolated
from forster.core.random import spawn


# ==========================================
# PARTITIONS
# ==========================================

def _canonical(labels: np.ndarray) -> np.ndarray:
    """Renumber nonzero labels 1..k in order of each piece's smallest vertex."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    out = np.zeros_like(labels)
    present = labels != 0
    if not present.any():
        return out
    values, first, inverse = np.unique(labels[present], return_index=True, return_inverse=True)
    rank = np.empty(values.shape[0], dtype=np.int64)
    rank[np.argsort(first)] = np.arange(1, values.shape[0] + 1)
    out[present] = rank[inverse.reshape(-1)]
    return out


@dataclass(frozen=True, eq=False)
class Partition:
    """Pieces of a vertex subset S of [n], stored as labels with 0 meaning "not in S"."""

    labels: np.ndarray

    def __post_init__(self):
        self.labels.setflags(write=False)

    @classmethod
    def from_labels(cls, labels: Sequence[int]) -> "Partition":
        return cls(labels=_canonical(np.asarray(labels)))

    @classmethod
    def from_pieces(cls, n: int, pieces: Sequence[Sequence[int]]) -> "Partition":
        labels = np.zeros(n, dtype=np.int64)
        for index, piece in enumerate(pieces, start=1):
            piece = np.asarray(piece, dtype=np.int64)
            if piece.size == 0:
                continue
            if np.any(labels[piece] != 0):
                raise PrerequisiteViolated("pieces overlap")
            labels[piece] = index
        return cls.from_labels(labels)

    @classmethod
    def whole(cls, support: np.ndarray) -> "Partition":
        """Single piece equal to the support (a boolean mask)."""
        return cls(labels=np.asarray(support, dtype=bool).astype(np.int64))

    @classmethod
    def singletons(cls, n: int) -> "Partition":
        return cls(labels=np.arange(1, n + 1, dtype=np.int64))

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def num_pieces(self) -> int:
        return int(self.labels.max()) if self.labels.size else 0

    @property
    def support(self) -> np.ndarray:
        return self.labels != 0

    @property
    def sizes(self) -> np.ndarray:
        """Piece sizes indexed by label; entry 0 counts absent vertices."""
        return np.bincount(self.labels, minlength=self.num_pieces + 1)

    @property
    def pieces(self) -> List[np.ndarray]:
        order = np.argsort(self.labels, kind="stable")
        bounds = np.cumsum(self.sizes)
        return [order[bounds[k - 1]:bounds[k]] for k in range(1, self.num_pieces + 1)]

    @property
    def key(self) -> bytes:
        return self.labels.tobytes()

    def same_piece(self) -> np.ndarray:
        """n x n indicator of distinct pairs sharing a piece."""
        L = self.labels
        M = (L[:, None] == L[None, :]) & (L[:, None] != 0)
        np.fill_diagonal(M, False)
        return M

    def __eq__(self, other) -> bool:
        return isinstance(other, Partition) and np.array_equal(self.labels, other.labels)

    def __hash__(self) -> int:
        return hash(self.key)


def mutual_refinement(P: Partition, A: Partition) -> Partition:
    """Nonempty intersections of pieces of P with pieces of A, by sorting label pairs."""
    if P.n != A.n:
        raise PrerequisiteViolated(f"partitions over {P.n} and {A.n} vertices")
    both = P.support & A.support
    labels = np.zeros(P.n, dtype=np.int64)
    if both.any():
        pairs = np.stack([P.labels[both], A.labels[both]], axis=1)
        _, inverse = np.unique(pairs, axis=0, return_inverse=True)
        labels[both] = inverse.reshape(-1) + 1
    return Partition.from_labels(labels)


def clique_matvec(partition: Partition, u: np.ndarray) -> np.ndarray:
    """sum_{S in P} L_S u with L_S u = |S| u|_S - 1_S <1_S, u>."""
    u = np.asarray(u, dtype=np.float64)
    labels = partition.labels
    k = partition.num_pieces
    sizes = partition.sizes.astype(np.float64)
    sums = np.zeros((k + 1,) + u.shape[1:])
    np.add.at(sums, labels, u)
    scale = sizes[labels]
    if u.ndim > 1:
        scale = scale[:, None]
    out = scale * u - sums[labels]
    out[labels == 0] = 0.0
    return out


# ==========================================
# SPARSE LAPLACIANS
# ==========================================

@dataclass(frozen=True, eq=False)
class SparseLaplacian:
    """Coalesced edges u < v with positive weights."""

    n: int
    u: np.ndarray
    v: np.ndarray
    weights: np.ndarray

    @classmethod
    def empty(cls, n: int) -> "SparseLaplacian":
        z = np.zeros(0, dtype=np.int64)
        return cls(n=n, u=z, v=z.copy(), weights=np.zeros(0))

    @classmethod
    def from_edges(cls, n: int, u, v, weights) -> "SparseLaplacian":
        """Normalize to u < v, drop self-loops and nonpositive weights, merge duplicates."""
        u = np.asarray(u, dtype=np.int64).reshape(-1)
        v = np.asarray(v, dtype=np.int64).reshape(-1)
        w = np.broadcast_to(np.asarray(weights, dtype=np.float64), u.shape).copy()
        lo, hi = np.minimum(u, v), np.maximum(u, v)
        keep = lo != hi
        lo, hi, w = lo[keep], hi[keep], w[keep]
        if lo.size == 0:
            return cls.empty(n)
        if lo.min() < 0 or hi.max() >= n:
            raise PrerequisiteViolated(f"edge endpoint outside [0, {n})")
        codes, inverse = np.unique(lo * n + hi, return_inverse=True)
        merged = np.bincount(inverse.reshape(-1), weights=w, minlength=codes.shape[0])
        positive = merged > 0.0
        codes, merged = codes[positive], merged[positive]
        return cls(n=n, u=codes // n, v=codes % n, weights=merged)

    @classmethod
    def from_dense(cls, L: np.ndarray, tol: float = 0.0) -> "SparseLaplacian":
        """Edges from the negated off-diagonal of a dense Laplacian."""
        n = L.shape[0]
        iu, iv = np.triu_indices(n, k=1)
        w = -np.asarray(L)[iu, iv]
        keep = w > tol
        return cls.from_edges(n, iu[keep], iv[keep], w[keep])

    @classmethod
    def concat(cls, n: int, parts: Sequence["SparseLaplacian"]) -> "SparseLaplacian":
        parts = [p for p in parts if p.nnz]
        if not parts:
            return cls.empty(n)
        return cls.from_edges(
            n,
            np.concatenate([p.u for p in parts]),
            np.concatenate([p.v for p in parts]),
            np.concatenate([p.weights for p in parts]),
        )

    @property
    def nnz(self) -> int:
        return int(self.weights.shape[0])

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.n, self.n)

    def degrees(self) -> np.ndarray:
        return (np.bincount(self.u, weights=self.weights, minlength=self.n)
                + np.bincount(self.v, weights=self.weights, minlength=self.n))

    def to_csr(self) -> scipy.sparse.csr_matrix:
        adjacency = scipy.sparse.coo_matrix((self.weights, (self.u, self.v)), shape=self.shape)
        adjacency = adjacency + adjacency.T
        return (scipy.sparse.diags(self.degrees()) - adjacency).tocsr()

    def dense(self) -> np.ndarray:
        return self.to_csr().toarray()

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.to_csr() @ np.asarray(x, dtype=np.float64)

    def add(self, other: "SparseLaplacian") -> "SparseLaplacian":
        return SparseLaplacian.concat(self.n, [self, other])

    def scale(self, factor: float) -> "SparseLaplacian":
        if factor <= 0.0:
            return SparseLaplacian.empty(self.n)
        return SparseLaplacian(n=self.n, u=self.u, v=self.v, weights=self.weights * factor)

    def edges(self) -> List[Tuple[int, int, float]]:
        return list(zip(self.u.tolist(), self.v.tolist(), self.weights.tolist()))


def laplacian_from_weights(W: np.ndarray) -> np.ndarray:
    """Dense Laplacian diag(W 1) - W of a symmetric zero-diagonal weight matrix."""
    return np.diag(W.sum(axis=1)) - W


# ==========================================
# SOC / ASOC
# ==========================================

@dataclass(frozen=True)
class SocRep:
    """sum_j w_j sum_{S in P_j} L_S."""

    n: int
    terms: Tuple[Tuple[float, Partition], ...] = ()

    def __post_init__(self):
        for weight, partition in self.terms:
            if weight < 0.0 or not math.isfinite(weight):
                raise PrerequisiteViolated(f"SOC weight {weight} is not a finite nonnegative number")
            if partition.n != self.n:
                raise PrerequisiteViolated("SOC partition over the wrong vertex count")

    @property
    def K(self) -> int:
        return len(self.terms)

    def matvec(self, u: np.ndarray) -> np.ndarray:
        out = np.zeros(np.shape(u))
        for weight, partition in self.terms:
            out += weight * clique_matvec(partition, u)
        return out

    def dense_weights(self) -> np.ndarray:
        W = np.zeros((self.n, self.n))
        for weight, partition in self.terms:
            W += weight * partition.same_piece()
        return W


@dataclass(frozen=True)
class AsocRep:
    """Mask of pairs inside S lying in different pieces of a partition of S."""

    partition: Partition

    @classmethod
    def full(cls, n: int) -> "AsocRep":
        """Every pair of [n] active."""
        return cls(partition=Partition.singletons(n))

    @property
    def n(self) -> int:
        return self.partition.n

    @property
    def support(self) -> np.ndarray:
        return self.partition.support

    def is_empty(self) -> bool:
        return self.partition.num_pieces < 2

    def dense_mask(self) -> np.ndarray:
        S = self.support
        inside = S[:, None] & S[None, :]
        M = inside & ~self.partition.same_piece()
        np.fill_diagonal(M, False)
        return M

    def matvec(self, u: np.ndarray) -> np.ndarray:
        """(L_S - sum_{A} L_A) u."""
        return clique_matvec(Partition.whole(self.support), u) - clique_matvec(self.partition, u)


def soc_masked_matvec(v: SocRep, a: Optional[AsocRep], u: np.ndarray) -> np.ndarray:
    """
    L(v o a) u as sum_j w_j [L_{P_j ^ {S}} - L_{P_j ^ A}] u.

    a=None means the full mask, giving L(v) u.
    """
    if a is None:
        return v.matvec(u)
    whole = Partition.whole(a.support)
    out = np.zeros(np.shape(u))
    for weight, partition in v.terms:
        out += weight * (
            clique_matvec(mutual_refinement(partition, whole), u)
            - clique_matvec(mutual_refinement(partition, a.partition), u)
        )
    return out


def materialize_dense(
    v: SocRep, a: Optional[AsocRep] = None, settings: Optional[Settings] = None
) -> np.ndarray:
    """Explicit Laplacian of v o a (test oracle)."""
    settings = settings or get_settings()
    if v.n > settings.DENSE_MATERIALIZE_CAP:
        raise DenseCapExceeded(f"n = {v.n} exceeds materialization cap {settings.DENSE_MATERIALIZE_CAP}")
    W = v.dense_weights()
    if a is not None:
        W = W * a.dense_mask()
    return laplacian_from_weights(W)


# ==========================================
# SPARSIFICATION
# ==========================================

def balanced_split(sizes: Sequence[int]) -> np.ndarray:
    """Greedy prefix of indices whose sizes sum into [Z/3, 2Z/3]."""
    sizes = np.asarray(sizes, dtype=np.int64)
    total = int(sizes.sum())
    if np.any(3 * sizes > total):
        index = int(np.argmax(sizes))
        raise PrerequisiteViolated(f"element {index} of size {sizes[index]} exceeds a third of {total}")
    chosen = []
    running = 0
    for index, size in enumerate(sizes.tolist()):
        if 3 * (running + size) > 2 * total:
            break
        chosen.append(index)
        running += size
    return np.asarray(chosen, dtype=np.int64)


def sample_count(vertices: int, delta: float, settings: Optional[Settings] = None) -> int:
    settings = settings or get_settings()
    return int(math.ceil(settings.BIPARTITE_SAMPLE_CONSTANT * vertices * math.log(vertices / delta)))


def sparsify_bipartite(
    left: Sequence[int],
    right: Sequence[int],
    delta: float,
    rng: np.random.Generator,
    n: Optional[int] = None,
    settings: Optional[Settings] = None,
) -> SparseLaplacian:
    """Uniform edge samples of the complete bipartite graph, weight |L||R|/m each."""
    left = np.asarray(left, dtype=np.int64)
    right = np.asarray(right, dtype=np.int64)
    if left.size == 0 or right.size == 0:
        raise PrerequisiteViolated("bipartite sides must be nonempty")
    if np.intersect1d(left, right).size:
        raise PrerequisiteViolated("bipartite sides overlap")
    if n is None:
        n = int(max(left.max(), right.max())) + 1
    m = sample_count(left.size + right.size, delta, settings)
    u = left[rng.integers(0, left.size, size=m)]
    v = right[rng.integers(0, right.size, size=m)]
    return SparseLaplacian.from_edges(n, u, v, left.size * right.size / m)


def _clique_asoc_edges(
    pieces: List[np.ndarray],
    delta: float,
    rng: np.random.Generator,
    n: int,
    settings: Settings,
    out: List[SparseLaplacian],
) -> None:
    if len(pieces) < 2:
        return
    pieces = sorted(pieces, key=len, reverse=True)
    sizes = np.array([p.size for p in pieces])
    total = int(sizes.sum())
    cross_rng, left_rng, right_rng = spawn(rng, 3)
    if 3 * sizes[0] > total:
        rest = pieces[1:]
        out.append(sparsify_bipartite(pieces[0], np.concatenate(rest), delta, cross_rng, n, settings))
        _clique_asoc_edges(rest, delta, left_rng, n, settings, out)
        return
    chosen = set(balanced_split(sizes).tolist())
    left = [p for i, p in enumerate(pieces) if i in chosen]
    right = [p for i, p in enumerate(pieces) if i not in chosen]
    out.append(sparsify_bipartite(np.concatenate(left), np.concatenate(right), delta, cross_rng, n, settings))
    _clique_asoc_edges(left, delta, left_rng, n, settings, out)
    _clique_asoc_edges(right, delta, right_rng, n, settings, out)


def sparsify_clique_asoc(
    S: Sequence[int],
    pieces: Sequence[Sequence[int]],
    delta: float,
    rng: np.random.Generator,
    n: Optional[int] = None,
    settings: Optional[Settings] = None,
) -> SparseLaplacian:
    """
    Sparsifier of sum_{i<j} L_{S_i, S_j}, the clique on S minus the cliques on its pieces.

    A piece holding more than a third of S is split off against the rest;
    otherwise a balanced split of the pieces is cut. Each bipartite sample
    gets failure budget delta / |S|.
    """
    settings = settings or get_settings()
    S = np.asarray(S, dtype=np.int64)
    pieces = [np.asarray(p, dtype=np.int64) for p in pieces if len(p)]
    covered = np.sort(np.concatenate(pieces)) if pieces else np.zeros(0, dtype=np.int64)
    if not np.array_equal(covered, np.sort(S)):
        raise PrerequisiteViolated("pieces do not partition S")
    if n is None:
        n = int(S.max()) + 1 if S.size else 0
    out: List[SparseLaplacian] = []
    _clique_asoc_edges(pieces, delta / max(S.size, 1), rng, n, settings, out)
    return SparseLaplacian.concat(n, out)


# ==========================================
# EDGE VECTORS
# ==========================================

class EdgeVector(ABC):
    """Implicit nonnegative weights on the pairs of [n] with Laplacian access."""

    n: int

    @abstractmethod
    def matvec(self, u: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def dense_weights(self) -> np.ndarray:
        ...

    @abstractmethod
    def sparsify(self, delta: float, rng: np.random.Generator,
                 settings: Optional[Settings] = None) -> SparseLaplacian:
        ...

    def operator(self) -> LinearOperator:
        return LinearOperator((self.n, self.n), matvec=self.matvec, matmat=self.matvec,
                              dtype=np.float64)


@dataclass(frozen=True)
class MaskedSoc(EdgeVector):
    """v o a for an SOC v and an optional ASOC mask a."""

    soc: SocRep
    mask: Optional[AsocRep] = None

    @property
    def n(self) -> int:
        return self.soc.n

    def matvec(self, u: np.ndarray) -> np.ndarray:
        return soc_masked_matvec(self.soc, self.mask, u)

    def dense_weights(self) -> np.ndarray:
        W = self.soc.dense_weights()
        return W * self.mask.dense_mask() if self.mask is not None else W

    def cross_groups(self) -> List[Tuple[float, List[np.ndarray]]]:
        """(w_j, inner pieces) per outer piece of P_j ^ {S} that the mask cuts."""
        mask = self.mask if self.mask is not None else AsocRep.full(self.n)
        whole = Partition.whole(mask.support)
        groups = []
        for weight, partition in self.soc.terms:
            if weight == 0.0:
                continue
            outer = mutual_refinement(partition, whole)
            inner = mutual_refinement(partition, mask.partition)
            for group in inner_pieces_by_outer(outer, inner):
                if len(group) > 1:
                    groups.append((weight, group))
        return groups

    def sparsify(self, delta: float, rng: np.random.Generator,
                 settings: Optional[Settings] = None) -> SparseLaplacian:
        groups = self.cross_groups()
        if not groups:
            return SparseLaplacian.empty(self.n)
        parts = []
        for (weight, pieces), child in zip(groups, spawn(rng, len(groups))):
            S = np.concatenate(pieces)
            parts.append(
                sparsify_clique_asoc(S, pieces, delta / len(groups), child, self.n, settings).scale(weight)
            )
        return SparseLaplacian.concat(self.n, parts)


def inner_pieces_by_outer(outer: Partition, inner: Partition) -> List[List[np.ndarray]]:
    """Group the pieces of a refinement by the coarser piece containing them."""
    grouped: List[List[np.ndarray]] = [[] for _ in range(outer.num_pieces)]
    for piece in inner.pieces:
        grouped[outer.labels[piece[0]] - 1].append(piece)
    return grouped


@dataclass(frozen=True, eq=False)
class DenseEdgeWeights(EdgeVector):
    """Explicit symmetric weight matrix."""

    W: np.ndarray

    @property
    def n(self) -> int:
        return self.W.shape[0]

    def matvec(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        degree = self.W.sum(axis=1)
        return (degree[:, None] * u if u.ndim > 1 else degree * u) - self.W @ u

    def dense_weights(self) -> np.ndarray:
        return self.W

    def sparsify(self, delta: float, rng: np.random.Generator,
                 settings: Optional[Settings] = None) -> SparseLaplacian:
        return SparseLaplacian.from_dense(laplacian_from_weights(self.W))


@dataclass(frozen=True)
class EdgeCombination(EdgeVector):
    """Nonnegative combination sum_i c_i x_i of edge vectors."""

    n: int
    terms: Tuple[Tuple[float, EdgeVector], ...] = field(default_factory=tuple)

    def matvec(self, u: np.ndarray) -> np.ndarray:
        out = np.zeros(np.shape(u))
        for coef, vector in self.terms:
            out += coef * vector.matvec(u)
        return out

    def dense_weights(self) -> np.ndarray:
        W = np.zeros((self.n, self.n))
        for coef, vector in self.terms:
            W += coef * vector.dense_weights()
        return W

    def sparsify(self, delta: float, rng: np.random.Generator,
                 settings: Optional[Settings] = None) -> SparseLaplacian:
        if not self.terms:
            return SparseLaplacian.empty(self.n)
        parts = [
            vector.sparsify(delta / len(self.terms), child, settings).scale(coef)
            for (coef, vector), child in zip(self.terms, spawn(rng, len(self.terms)))
        ]
        return SparseLaplacian.concat(self.n, parts)

    def scaled(self, factor: float) -> "EdgeCombination":
        return EdgeCombination(self.n, tuple((coef * factor, vector) for coef, vector in self.terms))

    def plus(self, other: "EdgeCombination") -> "EdgeCombination":
        return EdgeCombination(self.n, self.terms + other.terms)

    def compact(self, max_terms: int) -> EdgeVector:
        """Flatten to explicit weights once the term list grows past max_terms."""
        if len(self.terms) <= max_terms:
            return self
        return DenseEdgeWeights(self.dense_weights())
