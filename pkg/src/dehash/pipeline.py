"""Configuration-driven end-to-end runs: train, index, query, evaluate, report.

A run resolves its dataset (loaded from a manifest or synthesized), trains the
vocabulary and hashing model, indexes the database, ranks every query under
the requested modes, and emits a deterministic report: metric rows per mode,
the device memory / transmission accounting, and an optional regularization
sweep.  Wall-clock timings are kept out of the report payload so identical
configs produce byte-identical reports; they are written to a sidecar file.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from . import hashing
from .aggregate import compute_bow, compute_vlad
from .dataset import Dataset, SyntheticSpec, ingest_dataset, synthesize_dataset, training_blob
from .hashing import HashingModel, approximate_vlad, encode, train_hashing
from .reconstruct import (
    CandidateVWs,
    combine_candidates,
    candidates_from_binary,
    candidates_from_category,
    candidates_from_gps,
    pseudo_bow,
    reconstruct_bow,
    reconstruct_bow_with_prior,
)
from .retrieval import (
    DatabaseIndex,
    Ranking,
    attach_pq,
    build_index,
    mean_average_precision,
    mean_ndcg,
    rank_adc,
    rank_bow,
    rank_gps,
    rank_hamming,
    rank_vlad,
    recall_at,
    train_pq,
)
from .vocab import VocabularyTree, train_vocabulary

ALL_MODES = (
    "bow",
    "vlad",
    "gps",
    "hamming",
    "approx-vlad",
    "adc",
    "vlad-to-bow",
    "recon",
    "recon-cads",
    "recon-brpk",
)

DEFAULT_LAMBDA_SWEEP = (0.001, 0.005, 0.01, 0.02, 0.05, 0.1)


@dataclass(frozen=True)
class TreeParams:
    branch: int = 8
    levels: int = 3
    vlad_level: int = 1
    seed: int = 0
    training_points: int = 4000
    training_blobs: int = 8


@dataclass(frozen=True)
class HashParams:
    variant: str = "joint"
    nbits: int = 32
    seed: int = 0
    rotate: bool = False


@dataclass(frozen=True)
class ReconParams:
    lam: float = 0.02
    alpha: float = 0.8
    top_r_binary: int = 10
    top_r_gps: int = 10
    top_r_pseudo: int = 5
    cues: tuple[str, ...] = ("gps", "binary")
    combine: str = "intersection-fallback-union"
    prior_source: str = "recon"  # initial ranking feeding the pseudo prior: recon | binary
    tol: float = 1e-6
    max_iter: int = 500


@dataclass(frozen=True)
class PQParams:
    subvectors: int = 16
    bits: int = 8
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    dim: int = 16
    tree: TreeParams = field(default_factory=TreeParams)
    hash: HashParams = field(default_factory=HashParams)
    recon: ReconParams = field(default_factory=ReconParams)
    pq: PQParams = field(default_factory=PQParams)
    modes: tuple[str, ...] = ALL_MODES
    num_queries: int = 50
    recall_ns: tuple[int, ...] = (1, 5, 10)
    manifest: str | None = None  # load this dataset ...
    synthetic: SyntheticSpec | None = None  # ... or generate one (default when both unset)
    lambda_sweep: tuple[float, ...] = ()
    sweep_queries: int = 20

    def __post_init__(self) -> None:
        unknown = set(self.modes) - set(ALL_MODES)
        if unknown:
            raise ValueError(f"unknown modes: {sorted(unknown)}")


def config_to_dict(config: ExperimentConfig) -> dict:
    return dataclasses.asdict(config)


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)

    def load(cls, key, tuple_fields=()):
        if key in data and data[key] is not None and not isinstance(data[key], cls):
            section = dict(data[key])
            for tf in tuple_fields:
                if tf in section and isinstance(section[tf], list):
                    section[tf] = tuple(section[tf])
            data[key] = cls(**section)

    load(TreeParams, "tree")
    load(HashParams, "hash")
    load(ReconParams, "recon", tuple_fields=("cues",))
    load(PQParams, "pq")
    load(SyntheticSpec, "synthetic", tuple_fields=("descriptors_per_image", "words_per_group", "gps_base"))
    for tf in ("modes", "recall_ns", "lambda_sweep"):
        if tf in data and isinstance(data[tf], list):
            data[tf] = tuple(data[tf])
    return ExperimentConfig(**data)


def config_hash(config: ExperimentConfig) -> str:
    canonical = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


class StageError(RuntimeError):
    """Pipeline failure attributed to one stage."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage


class _Stopwatch:
    def __init__(self) -> None:
        self.laps: dict[str, float] = {}

    def run(self, stage: str, fn: Callable):
        start = time.monotonic()
        try:
            result = fn()
        except StageError:
            raise
        except Exception as exc:
            raise StageError(stage, exc) from exc
        self.laps[stage] = self.laps.get(stage, 0.0) + (time.monotonic() - start)
        return result


@dataclass
class PipelineResult:
    report: dict
    timings: dict[str, float]
    report_path: Path | None
    index: DatabaseIndex
    tree: VocabularyTree
    model: HashingModel
    rankings: dict[str, dict[str, Ranking]]
    relevance: dict[str, set[str]]


def _resolve_dataset(
    config: ExperimentConfig, tree: VocabularyTree, workdir: Path | None
) -> Dataset:
    if config.manifest is not None:
        return ingest_dataset(config.manifest)
    if workdir is None:
        raise ValueError("synthesizing a dataset requires an out_dir")
    spec = config.synthetic or SyntheticSpec()
    synthesize_dataset(spec, tree, workdir / "data")
    return ingest_dataset(workdir / "data" / "manifest.tsv")


def _pick_queries(dataset: Dataset, num_queries: int) -> list[str]:
    """Queries spread over distinct relevance groups, in manifest order."""
    chosen: list[str] = []
    seen_groups: set[frozenset[str]] = set()
    for entry in dataset.entries:
        if not entry.relevant_ids:
            continue
        group = frozenset((entry.image_id, *entry.relevant_ids))
        if group in seen_groups:
            continue
        seen_groups.add(group)
        chosen.append(entry.image_id)
        if len(chosen) == num_queries:
            break
    if len(chosen) < num_queries:
        raise ValueError(f"dataset supports only {len(chosen)} group queries, need {num_queries}")
    return chosen


def _query_candidates(
    config: ExperimentConfig,
    index: DatabaseIndex,
    binary_ranking: Ranking,
    gps: tuple[float, float] | None,
    category: int | None,
) -> CandidateVWs:
    cues = []
    for cue in config.recon.cues:
        if cue == "binary":
            cues.append(candidates_from_binary(index, binary_ranking, config.recon.top_r_binary))
        elif cue == "gps":
            if gps is None:
                raise ValueError("gps cue requested but query has no GPS")
            cues.append(candidates_from_gps(index, gps, config.recon.top_r_gps))
        elif cue == "category":
            if category is None:
                raise ValueError("category cue requested but query has no category")
            cues.append(candidates_from_category(index, category))
        else:
            raise ValueError(f"unknown cue {cue!r}")
    return combine_candidates(cues, config.recon.combine)


def memory_table(config: ExperimentConfig) -> list[dict]:
    """Closed-form device memory and transmission accounting per variant."""
    d, n = config.dim, config.tree.branch**config.tree.vlad_level
    k = config.hash.nbits
    rows = []
    for variant in ("joint", "independent", "shared", "sign"):
        bits = d * n if variant == "sign" else k
        rows.append(
            {
                "variant": variant,
                "bits": bits,
                "projection_bytes": hashing.projection_bytes(variant, d, n, bits),
                "quantizer_bytes": hashing.quantizer_bytes(d, config.tree.branch, config.tree.vlad_level),
                "mobile_memory_bytes": hashing.mobile_memory_bytes(
                    variant, d, n, bits, config.tree.branch, config.tree.vlad_level
                ),
                "transmission_bytes": (bits + 7) // 8,
                "transmission_with_gps_bytes": (bits + 7) // 8 + hashing.GPS_PAYLOAD_BYTES,
            }
        )
    return rows


def lambda_sweep_counts(
    tree: VocabularyTree,
    dataset: Dataset,
    query_ids: list[str],
    lambdas: tuple[float, ...],
    tol: float = 1e-6,
    max_iter: int = 500,
) -> list[dict]:
    """Total reconstructed-word count per regularization weight (true-VLAD input)."""
    vlads = {q: compute_vlad(tree, dataset.descriptors[q]) for q in query_ids}
    rows = []
    for lam in lambdas:
        total = 0
        for q in query_ids:
            result = reconstruct_bow(vlads[q], tree, lam, tol=tol, max_iter=max_iter)
            total += result.histogram.num_words
        rows.append({"lam": lam, "reconstructed_vws": total})
    return rows


def run_pipeline(config: ExperimentConfig, out_dir: str | Path | None = None) -> PipelineResult:
    """Execute the full pipeline described by ``config``.

    Returns the in-memory result; when ``out_dir`` is given, also writes
    ``report_<confighash>.json`` (deterministic) plus a timing sidecar.
    """
    watch = _Stopwatch()
    workdir = Path(out_dir) if out_dir is not None else None

    tree = watch.run(
        "train-tree",
        lambda: train_vocabulary(
            training_blob(
                config.dim,
                config.tree.training_points,
                config.tree.training_blobs,
                config.tree.seed,
            ),
            config.tree.branch,
            config.tree.levels,
            config.tree.vlad_level,
            config.tree.seed,
        ),
    )
    dataset = watch.run("dataset", lambda: _resolve_dataset(config, tree, workdir))

    def _train_hash() -> HashingModel:
        vlads = [compute_vlad(tree, dataset.descriptors[i]) for i in dataset.ids]
        return train_hashing(
            vlads, config.hash.variant, config.hash.nbits, config.hash.seed, config.hash.rotate
        )

    model = watch.run("train-hash", _train_hash)
    index = watch.run(
        "index",
        lambda: build_index(
            tree,
            model,
            dataset.descriptors,
            gps=dataset.gps_by_id(),
            categories=dataset.categories_by_id(),
        ),
    )
    if "adc" in config.modes:
        watch.run(
            "train-pq",
            lambda: attach_pq(
                index,
                train_pq(
                    index.ranking_vlad_matrix(), config.pq.subvectors, config.pq.bits, config.pq.seed
                ),
            ),
        )

    query_ids = _pick_queries(dataset, config.num_queries)
    relevance = {q: dataset.relevance_by_id()[q] for q in query_ids}
    entry_by_id = {e.image_id: e for e in dataset.entries}
    rankings: dict[str, dict[str, Ranking]] = {mode: {} for mode in config.modes}

    def _rank_queries() -> None:
        for qid in query_ids:
            descs = dataset.descriptors[qid]
            entry = entry_by_id[qid]
            vlad_raw = compute_vlad(tree, descs)
            code = encode(model, vlad_raw)
            approx = approximate_vlad(model, code)
            # Context derives from the self-excluded binary ranking: the query
            # photo itself is treated as unseen by the database.
            binary = rank_hamming(index, code).drop(qid)
            candidates = None
            if "recon-cads" in config.modes or "recon-brpk" in config.modes:
                candidates = _query_candidates(config, index, binary, entry.gps, entry.category)
            cads_result = None
            for mode in config.modes:
                if mode == "bow":
                    ranking = rank_bow(index, compute_bow(tree, descs))
                elif mode == "vlad":
                    ranking = rank_vlad(index, vlad_raw)
                elif mode == "gps":
                    if entry.gps is None:
                        raise ValueError(f"query {qid} has no GPS")
                    ranking = rank_gps(index, entry.gps)
                elif mode == "hamming":
                    ranking = binary
                elif mode == "approx-vlad":
                    ranking = rank_vlad(index, approx)
                elif mode == "adc":
                    ranking = rank_adc(index, approx)
                elif mode == "vlad-to-bow":
                    result = reconstruct_bow(
                        vlad_raw, tree, config.recon.lam,
                        tol=config.recon.tol, max_iter=config.recon.max_iter,
                    )
                    ranking = rank_bow(index, result.histogram)
                elif mode == "recon":
                    result = reconstruct_bow(
                        approx, tree, config.recon.lam,
                        tol=config.recon.tol, max_iter=config.recon.max_iter,
                    )
                    ranking = rank_bow(index, result.histogram)
                elif mode == "recon-cads":
                    cads_result = reconstruct_bow(
                        approx, tree, config.recon.lam, candidates,
                        tol=config.recon.tol, max_iter=config.recon.max_iter,
                    )
                    ranking = rank_bow(index, cads_result.histogram)
                elif mode == "recon-brpk":
                    if cads_result is None:
                        cads_result = reconstruct_bow(
                            approx, tree, config.recon.lam, candidates,
                            tol=config.recon.tol, max_iter=config.recon.max_iter,
                        )
                    if config.recon.prior_source == "recon":
                        initial = rank_bow(index, cads_result.histogram).drop(qid)
                    elif config.recon.prior_source == "binary":
                        initial = binary
                    else:
                        raise ValueError(f"unknown prior source {config.recon.prior_source!r}")
                    prior = pseudo_bow(index, initial, config.recon.top_r_pseudo)
                    mass = cads_result.histogram.total() or prior.total()
                    result = reconstruct_bow_with_prior(
                        approx, tree, prior, config.recon.alpha, candidates, mass
                    )
                    ranking = rank_bow(index, result.histogram)
                else:  # pragma: no cover - guarded by config validation
                    raise ValueError(mode)
                rankings[mode][qid] = ranking.drop(qid)

    watch.run("query", _rank_queries)

    def _metrics() -> dict:
        reference = {q: sorted(relevance[q])[0] for q in query_ids}
        table = {}
        for mode in config.modes:
            row = {"map": mean_average_precision(rankings[mode], relevance)}
            for n in config.recall_ns:
                row[f"recall@{n}"] = recall_at(rankings[mode], reference, n)
            row["ndcg"] = mean_ndcg(rankings[mode], reference)
            table[mode] = row
        return table

    metric_table = watch.run("metrics", _metrics)

    sweep_rows = []
    if config.lambda_sweep:
        sweep_rows = watch.run(
            "sweep-lambda",
            lambda: lambda_sweep_counts(
                tree,
                dataset,
                query_ids[: config.sweep_queries],
                config.lambda_sweep,
                tol=config.recon.tol,
                max_iter=config.recon.max_iter,
            ),
        )

    report = {
        "config": config_to_dict(config),
        "config_hash": config_hash(config),
        "num_images": len(dataset.ids),
        "num_queries": len(query_ids),
        "metrics": metric_table,
        "memory_table": memory_table(config),
        "lambda_sweep": sweep_rows,
    }

    report_path = None
    if out_dir is not None:
        workdir.mkdir(parents=True, exist_ok=True)
        report_path = workdir / f"report_{report['config_hash']}.json"
        report_path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
        timing_path = workdir / f"report_{report['config_hash']}.timings.txt"
        timing_path.write_text(
            "".join(f"{stage}\t{seconds:.3f}s\n" for stage, seconds in watch.laps.items())
        )

    return PipelineResult(
        report=report,
        timings=dict(watch.laps),
        report_path=report_path,
        index=index,
        tree=tree,
        model=model,
        rankings=rankings,
        relevance=relevance,
    )


def summarize_report(report: dict) -> str:
    """Human-readable digest of a report dict."""
    lines = [f"images={report['num_images']} queries={report['num_queries']}"]
    lines.append(f"config={report['config_hash']}")
    lines.append("")
    header = None
    for mode, row in report["metrics"].items():
        if header is None:
            header = ["mode"] + list(row)
            lines.append("  ".join(f"{h:>12}" for h in header))
        lines.append(
            "  ".join([f"{mode:>12}"] + [f"{row[k]:>12.4f}" for k in row])
        )
    lines.append("")
    lines.append("variant  bits  mobile_bytes  transmit_bytes")
    for row in report["memory_table"]:
        lines.append(
            f"{row['variant']:>7}  {row['bits']:>4}  {row['mobile_memory_bytes']:>12}  "
            f"{row['transmission_bytes']:>14}"
        )
    if report["lambda_sweep"]:
        lines.append("")
        lines.append("lambda  reconstructed_vws")
        for row in report["lambda_sweep"]:
            lines.append(f"{row['lam']:<7g} {row['reconstructed_vws']}")
    return "\n".join(lines)
