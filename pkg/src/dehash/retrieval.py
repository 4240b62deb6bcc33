"""Database indexing, ranking modes, and retrieval-quality metrics.

Every ranking mode is a deterministic brute-force scan: ascending distance,
ties broken by ascending image id.  Histograms compare under L1 after L1
normalization, VLADs under L2 after the index's ranking normalization, codes
under Hamming distance, and product-quantized entries under asymmetric
distance (exact query against quantized database).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .aggregate import BowHistogram, VladVector, compute_bow, compute_vlad, normalize_vlad
from .hashing import BinaryCode, HashingModel, encode
from .vocab import VocabularyTree, kmeans_pp_init, lloyd

EARTH_RADIUS_M = 6_371_000.0

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint32)


@dataclass
class Ranking:
    """Result list, best first: (image_id, score) with the mode's score convention."""

    entries: tuple[tuple[str, float], ...]
    degenerate: bool = False  # set when the query was empty and order is by id only

    def ids(self) -> list[str]:
        return [image_id for image_id, _ in self.entries]

    def position(self, image_id: str) -> int:
        """1-based rank of an image; raises if absent."""
        for rank, (candidate, _) in enumerate(self.entries, start=1):
            if candidate == image_id:
                return rank
        raise ValueError(f"{image_id!r} not present in ranking")

    def drop(self, image_id: str) -> "Ranking":
        return Ranking(
            tuple(e for e in self.entries if e[0] != image_id), degenerate=self.degenerate
        )


def _sorted_ranking(scores: Mapping[str, float]) -> Ranking:
    entries = tuple(sorted(scores.items(), key=lambda kv: (kv[1], kv[0])))
    return Ranking(entries)


def ranking_dump_lines(query_id: str, ranking: Ranking) -> list[str]:
    """Text dump: one ``query_id image_id rank score`` line per result."""
    return [
        f"{query_id} {image_id} {rank} {score:.17g}"
        for rank, (image_id, score) in enumerate(ranking.entries, start=1)
    ]


@dataclass
class PQCodebooks:
    """Per-sub-vector quantizer tables: (m, 2**b, total_dim / m)."""

    codebooks: np.ndarray
    bits: int

    @property
    def num_subvectors(self) -> int:
        return self.codebooks.shape[0]

    @property
    def sub_dim(self) -> int:
        return self.codebooks.shape[2]


@dataclass
class DatabaseIndex:
    """All stored per-image representations, derived from one descriptor set each."""

    tree: VocabularyTree
    ids: list[str]
    bows: dict[str, BowHistogram]
    vlads: dict[str, VladVector]  # raw residual space
    codes: dict[str, BinaryCode]
    gps: dict[str, tuple[float, float]] = field(default_factory=dict)
    categories: dict[str, int] = field(default_factory=dict)
    rank_normalization: str = "intra-then-global-l2"
    pq: PQCodebooks | None = None
    pq_codes: dict[str, np.ndarray] = field(default_factory=dict)
    _rank_matrix: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("image ids must be unique")

    def ranking_vlad_matrix(self) -> np.ndarray:
        if self._rank_matrix is None:
            rows = [
                normalize_vlad(self.vlads[i], self.rank_normalization).flattened()
                for i in self.ids
            ]
            self._rank_matrix = np.stack(rows)
        return self._rank_matrix


def build_index(
    tree: VocabularyTree,
    model: HashingModel,
    descriptors_by_id: Mapping[str, np.ndarray],
    gps: Mapping[str, tuple[float, float]] | None = None,
    categories: Mapping[str, int] | None = None,
    rank_normalization: str = "intra-then-global-l2",
    quantize_mode: str = "exhaustive-subtree",
) -> DatabaseIndex:
    """Index a database: store BoW, raw VLAD, and binary code per image."""
    ids = list(descriptors_by_id)
    bows = {}
    vlads = {}
    codes = {}
    for image_id in ids:
        X = descriptors_by_id[image_id]
        bows[image_id] = compute_bow(tree, X, quantize_mode)
        vlad = compute_vlad(tree, X, "none")
        vlads[image_id] = vlad
        codes[image_id] = encode(model, vlad)
    return DatabaseIndex(
        tree=tree,
        ids=ids,
        bows=bows,
        vlads=vlads,
        codes=codes,
        gps=dict(gps or {}),
        categories=dict(categories or {}),
        rank_normalization=rank_normalization,
    )


def l1_histogram_distance(a: BowHistogram, b: BowHistogram) -> float:
    """L1 distance between L1-normalized sparse histograms (range [0, 2])."""
    an = a.l1_normalized().counts
    bn = b.l1_normalized().counts
    dist = 0.0
    for key, value in an.items():
        dist += abs(value - bn.get(key, 0.0))
    for key, value in bn.items():
        if key not in an:
            dist += value
    return dist


def rank_bow(index: DatabaseIndex, query: BowHistogram) -> Ranking:
    if not index.ids:
        raise ValueError("index is empty")
    if not query.counts:
        # No words to compare against: fall back to a flagged id-order ranking.
        entries = tuple((i, 2.0) for i in sorted(index.ids))
        return Ranking(entries, degenerate=True)
    return _sorted_ranking(
        {i: l1_histogram_distance(query, index.bows[i]) for i in index.ids}
    )


def rank_vlad(index: DatabaseIndex, query: VladVector) -> Ranking:
    if not index.ids:
        raise ValueError("index is empty")
    q = normalize_vlad(query, index.rank_normalization).flattened()
    matrix = index.ranking_vlad_matrix()
    dists = np.sqrt(np.sum((matrix - q) ** 2, axis=1))
    return _sorted_ranking({i: float(d) for i, d in zip(index.ids, dists)})


def hamming_distance(a: BinaryCode, b: BinaryCode) -> int:
    if a.nbits != b.nbits:
        raise ValueError("codes differ in length")
    return int(_POPCOUNT[np.bitwise_xor(a.packed, b.packed)].sum())


def rank_hamming(index: DatabaseIndex, query: BinaryCode) -> Ranking:
    if not index.ids:
        raise ValueError("index is empty")
    return _sorted_ranking(
        {i: float(hamming_distance(query, index.codes[i])) for i in index.ids}
    )


def train_pq(
    vectors: np.ndarray | Sequence[VladVector],
    num_subvectors: int,
    bits: int,
    seed: int = 0,
) -> PQCodebooks:
    """Fit product-quantizer codebooks (k-means per sub-vector slice)."""
    if not isinstance(vectors, np.ndarray):
        vectors = np.stack([v.flattened() for v in vectors])
    vectors = np.asarray(vectors, dtype=np.float64)
    n, total = vectors.shape
    if total % num_subvectors != 0:
        raise ValueError(f"{num_subvectors} sub-vectors do not divide dim {total}")
    k = 2**bits
    sub_dim = total // num_subvectors
    books = np.empty((num_subvectors, k, sub_dim), dtype=np.float64)
    for j in range(num_subvectors):
        sub = vectors[:, j * sub_dim : (j + 1) * sub_dim]
        rng = np.random.default_rng([seed, j])
        if n >= k:
            init = kmeans_pp_init(sub, k, rng)
            centers, _ = lloyd(sub, init)
        else:
            # Fewer samples than centers: every sample is a center, rest repeat.
            centers = sub[rng.integers(0, n, size=k)]
            centers[:n] = sub
        books[j] = centers
    return PQCodebooks(codebooks=books, bits=bits)


def encode_pq(codebooks: PQCodebooks, vector: np.ndarray) -> np.ndarray:
    """Nearest-center index per sub-vector slice."""
    vector = np.asarray(vector, dtype=np.float64)
    m, _, sub_dim = codebooks.codebooks.shape
    codes = np.empty(m, dtype=np.uint16)
    for j in range(m):
        sub = vector[j * sub_dim : (j + 1) * sub_dim]
        d2 = np.sum((codebooks.codebooks[j] - sub) ** 2, axis=1)
        codes[j] = np.argmin(d2)
    return codes


def attach_pq(index: DatabaseIndex, codebooks: PQCodebooks) -> None:
    """Quantize every database image's ranking-normalized VLAD."""
    index.pq = codebooks
    matrix = index.ranking_vlad_matrix()
    for row, image_id in enumerate(index.ids):
        index.pq_codes[image_id] = encode_pq(codebooks, matrix[row])


def adc_distance(codebooks: PQCodebooks, query: np.ndarray, codes: np.ndarray) -> float:
    """Sum of squared sub-distances from the exact query to the quantized entry."""
    query = np.asarray(query, dtype=np.float64)
    m, _, sub_dim = codebooks.codebooks.shape
    total = 0.0
    for j in range(m):
        sub = query[j * sub_dim : (j + 1) * sub_dim]
        center = codebooks.codebooks[j][codes[j]]
        total += float(np.sum((sub - center) ** 2))
    return total


def rank_adc(index: DatabaseIndex, query: VladVector, codebooks: PQCodebooks | None = None) -> Ranking:
    """Asymmetric ranking: exact (normalized) query vs quantized database."""
    books = codebooks or index.pq
    if books is None or not index.pq_codes:
        raise ValueError("index has no trained product quantizer")
    q = normalize_vlad(query, index.rank_normalization).flattened()
    m, k, sub_dim = books.codebooks.shape
    # Lookup-table evaluation: table[j, c] = ||q_j - center_{j,c}||^2.
    table = np.empty((m, k), dtype=np.float64)
    for j in range(m):
        sub = q[j * sub_dim : (j + 1) * sub_dim]
        table[j] = np.sum((books.codebooks[j] - sub) ** 2, axis=1)
    cols = np.arange(m)
    return _sorted_ranking(
        {i: float(table[cols, index.pq_codes[i]].sum()) for i in index.ids}
    )


def haversine_m(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Great-circle distance in meters between (lat, lon) points in degrees."""
    lat1, lon1, lat2, lon2 = map(math.radians, (*a, *b))
    s = (
        math.sin((lat2 - lat1) / 2) ** 2
        + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    )
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(s)))


def simulate_gps(
    true_location: tuple[float, float],
    sigma_meters: float,
    seed: int | np.random.Generator = 0,
) -> tuple[float, float]:
    """Perturb a location with independent Gaussian noise per tangent-plane axis."""
    lat, lon = true_location
    if not -90.0 <= lat <= 90.0:
        raise ValueError(f"latitude {lat} out of range")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dy, dx = rng.normal(0.0, sigma_meters, size=2) if sigma_meters > 0 else (0.0, 0.0)
    dlat = math.degrees(dy / EARTH_RADIUS_M)
    dlon = math.degrees(dx / (EARTH_RADIUS_M * math.cos(math.radians(lat))))
    return (lat + dlat, lon + dlon)


def rank_gps(index: DatabaseIndex, query_gps: tuple[float, float]) -> Ranking:
    if not index.gps:
        raise ValueError("index carries no GPS data")
    missing = [i for i in index.ids if i not in index.gps]
    if missing:
        raise ValueError(f"images without GPS: {missing[:3]}")
    return _sorted_ranking({i: haversine_m(query_gps, index.gps[i]) for i in index.ids})


def average_precision(ranking: Ranking, relevant: set[str]) -> float:
    if not relevant:
        raise ValueError("query has no relevant images")
    hits = 0
    cum = 0.0
    for rank, (image_id, _) in enumerate(ranking.entries, start=1):
        if image_id in relevant:
            hits += 1
            cum += hits / rank
    return cum / len(relevant)


def mean_average_precision(
    rankings: Mapping[str, Ranking], relevance: Mapping[str, set[str]]
) -> float:
    if not rankings:
        raise ValueError("no queries")
    return float(
        np.mean([average_precision(r, set(relevance[q])) for q, r in rankings.items()])
    )


def recall_at(rankings: Mapping[str, Ranking], reference: Mapping[str, str], n: int) -> float:
    """Fraction of queries whose single reference image appears in the top n."""
    if not rankings:
        raise ValueError("no queries")
    hits = sum(
        1 for q, r in rankings.items() if reference[q] in [i for i, _ in r.entries[:n]]
    )
    return hits / len(rankings)


def ndcg(rank_of_reference: int) -> float:
    """Single-reference NDCG: 1 / log2(rank + 1)."""
    if rank_of_reference < 1:
        raise ValueError("ranks are 1-based")
    return 1.0 / math.log2(rank_of_reference + 1)


def mean_ndcg(rankings: Mapping[str, Ranking], reference: Mapping[str, str]) -> float:
    if not rankings:
        raise ValueError("no queries")
    return float(
        np.mean([ndcg(r.position(reference[q])) for q, r in rankings.items()])
    )
