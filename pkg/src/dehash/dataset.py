"""Dataset ingestion and the synthetic retrieval benchmark generator.

The generator builds a controllable retrieval problem on top of a trained
vocabulary: disjoint per-category word pools, relevance groups that share a
word multiset, descriptors placed at leaf centers plus optional Gaussian
noise, and GPS clustered per category.  With zero noise the generated BoW of
an image equals its sampled multiset exactly, which anchors the end-to-end
reconstruction checks.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .aggregate import load_descriptors, save_descriptors
from .retrieval import simulate_gps
from .vocab import VocabularyTree


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    descriptor_path: str
    gps: tuple[float, float] | None
    category: int | None
    relevant_ids: tuple[str, ...]


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    """Tab-separated manifest, one image per line, "-" for absent fields."""
    lines = []
    for e in entries:
        lat = f"{e.gps[0]:.12g}" if e.gps else "-"
        lon = f"{e.gps[1]:.12g}" if e.gps else "-"
        cat = str(e.category) if e.category is not None else "-"
        rel = ",".join(e.relevant_ids) if e.relevant_ids else "-"
        lines.append("\t".join([e.image_id, e.descriptor_path, lat, lon, cat, rel]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 6:
            raise ValueError(f"{path}:{lineno}: expected 6 tab-separated fields, got {len(parts)}")
        image_id, desc_path, lat, lon, cat, rel = parts
        gps = None if lat == "-" or lon == "-" else (float(lat), float(lon))
        category = None if cat == "-" else int(cat)
        relevant = tuple(r for r in rel.split(",") if r) if rel != "-" else ()
        entries.append(ManifestEntry(image_id, desc_path, gps, category, relevant))
    if not entries:
        raise ValueError(f"{path}: manifest is empty")
    return entries


@dataclass
class Dataset:
    """Loaded manifest plus per-image descriptors."""

    entries: list[ManifestEntry]
    descriptors: dict[str, np.ndarray]
    dim: int

    @property
    def ids(self) -> list[str]:
        return [e.image_id for e in self.entries]

    def gps_by_id(self) -> dict[str, tuple[float, float]]:
        return {e.image_id: e.gps for e in self.entries if e.gps is not None}

    def categories_by_id(self) -> dict[str, int]:
        return {e.image_id: e.category for e in self.entries if e.category is not None}

    def relevance_by_id(self) -> dict[str, set[str]]:
        return {e.image_id: set(e.relevant_ids) for e in self.entries if e.relevant_ids}


def ingest_dataset(manifest_path) -> Dataset:
    """Load every descriptor file referenced by a manifest."""
    manifest_path = Path(manifest_path)
    entries = read_manifest(manifest_path)
    descriptors: dict[str, np.ndarray] = {}
    dim = None
    for e in entries:
        path = Path(e.descriptor_path)
        if not path.is_absolute():
            path = manifest_path.parent / path
        X = load_descriptors(path)
        if dim is None:
            dim = X.shape[1]
        elif X.shape[1] != dim:
            raise ValueError(
                f"{path}: descriptor dim {X.shape[1]} differs from {dim} used elsewhere"
            )
        descriptors[e.image_id] = X
    return Dataset(entries=entries, descriptors=descriptors, dim=int(dim))


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs of the synthetic benchmark; every draw is governed by ``seed``."""

    num_images: int = 1000
    descriptors_per_image: tuple[int, int] = (120, 240)
    noise_std: float = 0.03
    query_noise_std: float = 0.05  # extra noise on each group's first member
    num_categories: int = 4
    group_size: int = 5
    words_per_group: tuple[int, int] = (12, 22)
    support_fraction: tuple[float, float] = (0.7, 0.95)
    distractor_fraction: float = 0.1
    gps_base: tuple[float, float] = (45.0, 7.0)
    gps_cluster_km: float = 5.0
    gps_noise_m: float = 50.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not 0.0 <= self.distractor_fraction < 1.0:
            raise ValueError("distractor_fraction must lie in [0, 1)")


@dataclass
class SyntheticDataset:
    manifest_path: Path
    entries: list[ManifestEntry]
    truth: dict[str, Counter]  # image id -> sampled word multiset
    category_pools: list[np.ndarray]  # disjoint leaf-id pools per category
    groups: list[list[str]]  # relevance groups (distractors excluded)


def training_blob(
    dim: int,
    num_points: int,
    num_blobs: int,
    seed: int = 0,
    levels: int = 3,
    scales: tuple[float, ...] = (0.2, 0.1, 0.05),
    noise: float = 0.0075,
) -> np.ndarray:
    """Nested Gaussian-mixture descriptors for vocabulary training.

    Blob centers are laid out hierarchically (``num_blobs`` children per
    level, ``levels`` deep) so the trained tree gets well-separated leaf
    centers; descriptor spaces with flat cluster structure produce leaf
    dictionaries too coherent for sparse recovery.  The default scale keeps
    residual sums of order one, so sparsity weights in the conventional
    0.001-to-0.1 range behave the way they do on L2-normalized signatures.
    """
    rng = np.random.default_rng([seed, 0x54424C])
    centers = rng.uniform(-scales[0], scales[0], size=(num_blobs, dim))
    for level in range(1, levels):
        spread = scales[level] if level < len(scales) else scales[-1] / 2**level
        offsets = rng.normal(0.0, spread, size=(centers.shape[0], num_blobs, dim))
        centers = (centers[:, None, :] + offsets).reshape(-1, dim)
    picks = rng.integers(0, centers.shape[0], size=num_points)
    return centers[picks] + rng.normal(0.0, noise, size=(num_points, dim))


def _category_locations(spec: SyntheticSpec) -> list[tuple[float, float]]:
    """Category cluster centers on a ring around the base location."""
    lat0, lon0 = spec.gps_base
    radius_deg = spec.gps_cluster_km * 1000.0 / 111_320.0
    locations = []
    for c in range(spec.num_categories):
        angle = 2.0 * np.pi * c / spec.num_categories
        locations.append(
            (lat0 + radius_deg * float(np.sin(angle)), lon0 + radius_deg * float(np.cos(angle)))
        )
    return locations


def synthesize_dataset(spec: SyntheticSpec, tree: VocabularyTree, out_dir) -> SyntheticDataset:
    """Generate descriptor files, a manifest, and ground truth under ``out_dir``.

    Non-distractor images come in groups of ``group_size`` sharing one word
    pool; each member draws its own subset of that pool (``support_fraction``
    of it) with its own multiplicities, the way photos of one object share
    most but not all of their words.  Group members are each other's relevant
    images.  Distractors draw an individual support and are relevant to
    nothing.  Each group's first member doubles as its designated query and
    receives ``query_noise_std`` extra descriptor noise, mirroring a
    mobile-captured query against a curated database.
    """
    if spec.num_categories > tree.num_leaves:
        raise ValueError("more categories than vocabulary words")
    out_dir = Path(out_dir)
    desc_dir = out_dir / "descriptors"
    desc_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([spec.seed, 0x53594E])

    pool_perm = rng.permutation(tree.num_leaves)
    splits = np.array_split(pool_perm, spec.num_categories)
    category_pools = [np.sort(s) for s in splits]

    num_distractors = int(round(spec.num_images * spec.distractor_fraction))
    num_grouped = spec.num_images - num_distractors
    num_groups = max(1, num_grouped // spec.group_size)
    cat_locations = _category_locations(spec)

    lo_w, hi_w = spec.words_per_group
    group_specs = []
    for g in range(num_groups):
        category = g % spec.num_categories
        pool = category_pools[category]
        k = int(rng.integers(lo_w, hi_w + 1))
        k = min(k, pool.size)
        support = rng.choice(pool, size=k, replace=False)
        group_specs.append((category, np.sort(support)))

    width = len(str(spec.num_images - 1))
    entries: list[ManifestEntry] = []
    truth: dict[str, Counter] = {}
    groups: list[list[str]] = [[] for _ in range(num_groups)]
    leaf_centers = np.asarray(tree.leaf_centers, dtype=np.float64)
    lo_d, hi_d = spec.descriptors_per_image

    lo_f, hi_f = spec.support_fraction

    def emit(
        image_id: str, support: np.ndarray, category: int, noise_std: float
    ) -> tuple[Counter, tuple[float, float]]:
        count = int(rng.integers(lo_d, hi_d + 1))
        picks = rng.choice(support, size=count, replace=True)
        multiset = Counter(int(p) for p in picks)
        X = leaf_centers[picks]
        if noise_std > 0:
            X = X + rng.normal(0.0, noise_std, size=X.shape)
        save_descriptors(desc_dir / f"{image_id}.desc", X.astype(np.float32))
        gps = simulate_gps(cat_locations[category], spec.gps_noise_m, rng)
        return multiset, gps

    def member_support(pool: np.ndarray) -> np.ndarray:
        frac = float(rng.uniform(lo_f, hi_f))
        k = max(1, int(round(frac * pool.size)))
        return rng.choice(pool, size=k, replace=False)

    group_of: dict[str, int] = {}
    for i in range(spec.num_images):
        image_id = f"img_{i:0{width}d}"
        noise_std = spec.noise_std
        if i < num_grouped:
            group = i % num_groups
            category, pool = group_specs[group]
            support = member_support(pool)
            if not groups[group]:  # first member doubles as the group's query
                noise_std += spec.query_noise_std
            groups[group].append(image_id)
            group_of[image_id] = group
        else:
            category = int(rng.integers(0, spec.num_categories))
            pool = category_pools[category]
            k = min(int(rng.integers(lo_w, hi_w + 1)), pool.size)
            support = rng.choice(pool, size=k, replace=False)
        multiset, gps = emit(image_id, support, category, noise_std)
        truth[image_id] = multiset
        entries.append(
            ManifestEntry(
                image_id=image_id,
                descriptor_path=f"descriptors/{image_id}.desc",
                gps=gps,
                category=category,
                relevant_ids=(),  # filled below once groups are complete
            )
        )

    final_entries = []
    for e in entries:
        relevant: tuple[str, ...] = ()
        group = group_of.get(e.image_id)
        if group is not None and len(groups[group]) > 1:
            relevant = tuple(m for m in groups[group] if m != e.image_id)
        final_entries.append(
            ManifestEntry(e.image_id, e.descriptor_path, e.gps, e.category, relevant)
        )

    manifest_path = out_dir / "manifest.tsv"
    write_manifest(manifest_path, final_entries)
    return SyntheticDataset(
        manifest_path=manifest_path,
        entries=final_entries,
        truth=truth,
        category_pools=category_pools,
        groups=[g for g in groups if len(g) > 1],
    )
