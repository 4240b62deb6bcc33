"""BoW histograms and VLAD vectors computed from descriptor sets.

The reconstruction path consumes VLAD in raw residual space (plain per-center
residual sums); normalization is applied only where vectors are compared for
ranking, because the linear model tying a VLAD sub-vector to its BoW counts
holds at raw scale.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .vocab import VocabularyTree, leaf_assignments, vlad_assignments

DESC_MAGIC = b"DHDESC01"

NORMALIZATIONS = ("none", "global-l2", "intra-then-global-l2")


@dataclass
class BowHistogram:
    """Sparse non-negative histogram over the leaf vocabulary."""

    counts: dict[int, float]
    vocab_size: int

    def __post_init__(self) -> None:
        for key, value in self.counts.items():
            if not 0 <= key < self.vocab_size:
                raise ValueError(f"word id {key} outside vocabulary of size {self.vocab_size}")
            if not value > 0:
                raise ValueError(f"histogram entries must be positive, got {value} at {key}")

    @property
    def num_words(self) -> int:
        return len(self.counts)

    def total(self) -> float:
        return float(sum(self.counts.values()))

    def l1_normalized(self) -> "BowHistogram":
        mass = self.total()
        if mass == 0:
            return BowHistogram({}, self.vocab_size)
        return BowHistogram({k: v / mass for k, v in self.counts.items()}, self.vocab_size)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(self.vocab_size, dtype=np.float64)
        if self.counts:
            keys = np.fromiter(self.counts.keys(), dtype=np.int64, count=len(self.counts))
            vals = np.fromiter(self.counts.values(), dtype=np.float64, count=len(self.counts))
            dense[keys] = vals
        return dense

    @classmethod
    def from_dense(cls, dense: np.ndarray, drop_below: float = 0.0) -> "BowHistogram":
        dense = np.asarray(dense, dtype=np.float64)
        keys = np.flatnonzero(dense > drop_below)
        return cls({int(k): float(dense[k]) for k in keys}, dense.shape[0])


@dataclass
class VladVector:
    """Per-center residual sums, one (dim,) sub-vector per coarse center."""

    subvectors: np.ndarray  # (N, D) float64
    normalization: str = "none"

    def __post_init__(self) -> None:
        self.subvectors = np.asarray(self.subvectors, dtype=np.float64)
        if self.subvectors.ndim != 2:
            raise ValueError("subvectors must be a (N, D) array")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {self.normalization!r}")

    @property
    def num_centers(self) -> int:
        return self.subvectors.shape[0]

    @property
    def dim(self) -> int:
        return self.subvectors.shape[1]

    def flattened(self) -> np.ndarray:
        return self.subvectors.reshape(-1)

    @classmethod
    def from_flat(cls, flat: np.ndarray, num_centers: int, normalization: str = "none") -> "VladVector":
        flat = np.asarray(flat, dtype=np.float64)
        return cls(flat.reshape(num_centers, -1), normalization)


def compute_bow(
    tree: VocabularyTree,
    descriptors: np.ndarray,
    mode: str = "exhaustive-subtree",
) -> BowHistogram:
    """Count descriptors per leaf visual word."""
    X = np.atleast_2d(np.asarray(descriptors, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("descriptor set must be nonempty")
    leaves = leaf_assignments(tree, X, mode)
    counts = np.bincount(leaves, minlength=tree.num_leaves)
    nz = np.nonzero(counts)[0]
    return BowHistogram({int(t): float(counts[t]) for t in nz}, tree.num_leaves)


def compute_vlad(
    tree: VocabularyTree,
    descriptors: np.ndarray,
    normalization: str = "none",
) -> VladVector:
    """Sum descriptor residuals against their coarse centers.

    Centers receiving no descriptor keep a zero sub-vector.  ``normalization``
    follows :func:`normalize_vlad`.
    """
    X = np.atleast_2d(np.asarray(descriptors, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("descriptor set must be nonempty")
    assign = vlad_assignments(tree, X)
    centers = np.asarray(tree.vlad_centers, dtype=np.float64)
    residuals = X - centers[assign]
    sums = np.zeros_like(centers)
    np.add.at(sums, assign, residuals)
    return normalize_vlad(VladVector(sums, "none"), normalization)


def normalize_vlad(v: VladVector, mode: str) -> VladVector:
    """Apply the requested normalization; zero (sub-)vectors are left as is.

    ``intra-then-global-l2`` scales every nonzero sub-vector to unit norm
    first, then divides the whole vector by its norm.
    """
    if mode == "none":
        return VladVector(v.subvectors.copy(), "none")
    if mode not in NORMALIZATIONS:
        raise ValueError(f"unknown normalization {mode!r}")
    sub = v.subvectors.copy()
    if mode == "intra-then-global-l2":
        norms = np.sqrt(np.sum(sub * sub, axis=1))
        nonzero = norms > 0
        sub[nonzero] /= norms[nonzero, None]
    whole = float(np.sqrt(np.sum(sub * sub)))
    if whole > 0:
        sub /= whole
    return VladVector(sub, mode)


def save_descriptors(path, descriptors: np.ndarray) -> None:
    """Write one image's descriptors (little-endian binary)."""
    X = np.atleast_2d(np.asarray(descriptors, dtype="<f4"))
    with open(path, "wb") as f:
        f.write(DESC_MAGIC)
        f.write(struct.pack("<2I", X.shape[1], X.shape[0]))
        f.write(np.ascontiguousarray(X).tobytes())


def load_descriptors(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != DESC_MAGIC:
        raise ValueError(f"{path}: bad magic at byte 0, not a descriptor file")
    if len(data) < 16:
        raise ValueError(f"{path}: truncated header at byte {len(data)}")
    dim, count = struct.unpack_from("<2I", data, 8)
    need = 16 + dim * count * 4
    if len(data) != need:
        raise ValueError(f"{path}: payload ends at byte {len(data)}, expected {need}")
    return np.frombuffer(data, dtype="<f4", count=dim * count, offset=16).reshape(count, dim).copy()
