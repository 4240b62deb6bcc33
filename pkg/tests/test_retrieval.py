import math

import numpy as np
import pytest
from scipy.stats import spearmanr

from dehash.aggregate import BowHistogram, VladVector, compute_vlad
from dehash.hashing import BinaryCode, train_hashing
from dehash.retrieval import (
    DatabaseIndex,
    Ranking,
    adc_distance,
    attach_pq,
    average_precision,
    build_index,
    encode_pq,
    hamming_distance,
    haversine_m,
    l1_histogram_distance,
    mean_average_precision,
    mean_ndcg,
    ndcg,
    rank_adc,
    rank_bow,
    rank_gps,
    rank_hamming,
    rank_vlad,
    ranking_dump_lines,
    recall_at,
    simulate_gps,
    train_pq,
)
from dehash.vocab import train_vocabulary

from test_vocab import gaussian_mixture


@pytest.fixture(scope="module")
def small_index():
    tree = train_vocabulary(gaussian_mixture(1200, 5, 6, seed=211), 3, 2, 1, seed=211)
    rng = np.random.default_rng(213)
    leafs = np.asarray(tree.leaf_centers, dtype=np.float64)
    descriptors = {}
    gps = {}
    for i in range(12):
        support = rng.choice(tree.num_leaves, size=3, replace=False)
        picks = rng.choice(support, size=25, replace=True)
        descriptors[f"im{i:02d}"] = leafs[picks]
        gps[f"im{i:02d}"] = (40.0 + 0.01 * i, -74.0 + 0.005 * i)
    vlads = [compute_vlad(tree, X) for X in descriptors.values()]
    model = train_hashing(vlads, "shared", nbits=tree.num_vlad_centers * 4, seed=3)
    return build_index(tree, model, descriptors, gps=gps)


class TestRankBow:
    def test_self_match_first_with_zero_distance(self, small_index):
        qid = small_index.ids[4]
        ranking = rank_bow(small_index, small_index.bows[qid])
        assert ranking.entries[0] == (qid, 0.0)

    def test_disjoint_supports_distance_two(self, small_index):
        m = small_index.tree.num_leaves
        a = BowHistogram({0: 3.0}, m)
        b = BowHistogram({1: 5.0, 2: 1.0}, m)
        assert l1_histogram_distance(a, b) == pytest.approx(2.0)

    def test_matches_dense_l1_oracle(self, small_index):
        rng = np.random.default_rng(217)
        m = small_index.tree.num_leaves
        for _ in range(50):
            keys = rng.choice(m, size=4, replace=False)
            query = BowHistogram({int(k): float(rng.integers(1, 6)) for k in keys}, m)
            ranking = rank_bow(small_index, query)
            qd = query.to_dense()
            qd = qd / qd.sum()
            for image_id, score in ranking.entries:
                dd = small_index.bows[image_id].to_dense()
                dd = dd / dd.sum()
                assert score == pytest.approx(float(np.abs(qd - dd).sum()), abs=1e-12)
            scores = [s for _, s in ranking.entries]
            assert scores == sorted(scores)

    def test_empty_query_flagged(self, small_index):
        ranking = rank_bow(small_index, BowHistogram({}, small_index.tree.num_leaves))
        assert ranking.degenerate
        assert ranking.ids() == sorted(small_index.ids)


class TestRankVlad:
    def test_self_match(self, small_index):
        qid = small_index.ids[2]
        ranking = rank_vlad(small_index, small_index.vlads[qid])
        assert ranking.entries[0][0] == qid
        assert ranking.entries[0][1] == pytest.approx(0.0, abs=1e-12)

    def test_orthonormal_pair_distance(self):
        # Two unit vectors on different axes sit sqrt(2) apart.
        tree = train_vocabulary(gaussian_mixture(400, 3, 4, seed=219), 2, 2, 1, seed=219)
        a = VladVector(np.array([[1.0, 0, 0], [0, 0, 0]]))
        b = VladVector(np.array([[0, 1.0, 0], [0, 0, 0]]))
        idx = DatabaseIndex(
            tree=tree, ids=["a"], bows={}, vlads={"a": a}, codes={},
            rank_normalization="global-l2",
        )
        ranking = rank_vlad(idx, b)
        assert ranking.entries[0][1] == pytest.approx(math.sqrt(2.0))

    def test_matches_brute_force(self, small_index):
        rng = np.random.default_rng(223)
        tree = small_index.tree
        q = VladVector(rng.normal(size=(tree.num_vlad_centers, tree.dim)))
        ranking = rank_vlad(small_index, q)
        from dehash.aggregate import normalize_vlad

        qn = normalize_vlad(q, small_index.rank_normalization).flattened()
        for image_id, score in ranking.entries:
            dn = normalize_vlad(small_index.vlads[image_id], small_index.rank_normalization)
            want = float(np.linalg.norm(qn - dn.flattened()))
            assert score == pytest.approx(want, abs=1e-12)


class TestRankHamming:
    def test_identical_and_complementary(self):
        bits = np.array([1, 0, 1, 1, 0, 0, 1, 0], dtype=np.uint8)
        a = BinaryCode.from_bits(bits)
        b = BinaryCode.from_bits(1 - bits)
        assert hamming_distance(a, a) == 0
        assert hamming_distance(a, b) == 8
        with pytest.raises(ValueError):
            hamming_distance(a, BinaryCode.from_bits(bits[:4]))

    def test_matches_bit_oracle(self, small_index):
        rng = np.random.default_rng(227)
        nbits = next(iter(small_index.codes.values())).nbits
        query = BinaryCode.from_bits(rng.integers(0, 2, size=nbits))
        ranking = rank_hamming(small_index, query)
        for image_id, score in ranking.entries:
            want = int(np.sum(query.bits() != small_index.codes[image_id].bits()))
            assert score == want


class TestAdc:
    def test_exact_when_codebook_covers_values(self):
        # 2**b centers >= distinct sub-vector values: zero quantization error.
        rng = np.random.default_rng(229)
        base = rng.normal(size=(4, 8))
        vectors = base[rng.integers(0, 4, size=30)]
        books = train_pq(vectors, num_subvectors=2, bits=2, seed=1)
        for row in vectors[:10]:
            codes = encode_pq(books, row)
            assert adc_distance(books, row, codes) == pytest.approx(0.0, abs=1e-12)
        # ADC distance equals exact squared L2 for arbitrary queries.
        q = rng.normal(size=8)
        for row in vectors[:10]:
            codes = encode_pq(books, row)
            assert adc_distance(books, q, codes) == pytest.approx(
                float(np.sum((q - row) ** 2)), abs=1e-9
            )

    def test_table_free_recomputation(self, small_index):
        rng = np.random.default_rng(233)
        attach_pq(small_index, train_pq(small_index.ranking_vlad_matrix(), 5, 3, seed=2))
        q = VladVector(
            rng.normal(size=(small_index.tree.num_vlad_centers, small_index.tree.dim))
        )
        ranking = rank_adc(small_index, q)
        from dehash.aggregate import normalize_vlad

        qn = normalize_vlad(q, small_index.rank_normalization).flattened()
        for image_id, score in ranking.entries:
            want = adc_distance(small_index.pq, qn, small_index.pq_codes[image_id])
            assert score == pytest.approx(want, abs=1e-6)
            assert score >= 0.0

    def test_ranking_correlates_with_exact(self, small_index):
        rng = np.random.default_rng(239)
        attach_pq(small_index, train_pq(small_index.ranking_vlad_matrix(), 5, 6, seed=4))
        tree = small_index.tree
        rhos = []
        for _ in range(5):
            q = VladVector(rng.normal(size=(tree.num_vlad_centers, tree.dim)))
            exact = {i: r for r, (i, _) in enumerate(rank_vlad(small_index, q).entries)}
            approx = {i: r for r, (i, _) in enumerate(rank_adc(small_index, q).entries)}
            ids = small_index.ids
            rhos.append(spearmanr([exact[i] for i in ids], [approx[i] for i in ids]).statistic)
        assert np.mean(rhos) > 0.8

    def test_untrained_errors(self, small_index):
        fresh = DatabaseIndex(
            tree=small_index.tree, ids=["x"], bows={}, vlads={"x": small_index.vlads[small_index.ids[0]]}, codes={}
        )
        with pytest.raises(ValueError, match="quantizer"):
            rank_adc(fresh, small_index.vlads[small_index.ids[0]])


class TestGps:
    def test_sigma_zero_identity(self):
        assert simulate_gps((12.0, 34.0), 0.0, seed=5) == (12.0, 34.0)

    def test_rayleigh_mean_displacement(self):
        rng = np.random.default_rng(241)
        sigma = 50.0
        origin = (45.0, 7.0)
        dists = [
            haversine_m(origin, simulate_gps(origin, sigma, rng)) for _ in range(10000)
        ]
        want = sigma * math.sqrt(math.pi / 2.0)
        assert np.mean(dists) == pytest.approx(want, rel=0.03)

    def test_haversine_against_independent_formula(self):
        # Oracle: law-of-cosines great-circle formula.
        rng = np.random.default_rng(251)
        for _ in range(200):
            a = (float(rng.uniform(-80, 80)), float(rng.uniform(-180, 180)))
            b = (float(rng.uniform(-80, 80)), float(rng.uniform(-180, 180)))
            lat1, lon1, lat2, lon2 = map(math.radians, (*a, *b))
            cos_c = math.sin(lat1) * math.sin(lat2) + math.cos(lat1) * math.cos(lat2) * math.cos(
                lon2 - lon1
            )
            want = 6_371_000.0 * math.acos(max(-1.0, min(1.0, cos_c)))
            assert haversine_m(a, b) == pytest.approx(want, abs=1e-6, rel=1e-9)

    def test_rank_gps_nearest_first(self, small_index):
        q = small_index.gps[small_index.ids[3]]
        ranking = rank_gps(small_index, q)
        assert ranking.entries[0][0] == small_index.ids[3]
        dists = [haversine_m(q, small_index.gps[i]) for i in ranking.ids()]
        assert dists == sorted(dists)

    def test_latitude_bounds(self):
        with pytest.raises(ValueError):
            simulate_gps((91.0, 0.0), 10.0)


def random_rankings(rng, num_queries, num_db):
    ids = [f"d{i}" for i in range(num_db)]
    rankings = {}
    relevance = {}
    for q in range(num_queries):
        scores = rng.normal(size=num_db)
        order = np.argsort(scores, kind="stable")
        rankings[f"q{q}"] = Ranking(tuple((ids[i], float(scores[i])) for i in order))
        k = int(rng.integers(1, 6))
        relevance[f"q{q}"] = set(rng.choice(ids, size=k, replace=False))
    return rankings, relevance


def oracle_average_precision(order, relevant):
    hits = 0
    total = 0.0
    for rank, image_id in enumerate(order, start=1):
        if image_id in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


class TestMetrics:
    def test_all_relevant_first_is_one(self):
        r = Ranking((("a", 0.0), ("b", 1.0), ("c", 2.0)))
        assert average_precision(r, {"a", "b"}) == 1.0

    def test_single_relevant_at_rank_two(self):
        r = Ranking((("a", 0.0), ("b", 1.0)))
        assert average_precision(r, {"b"}) == 0.5

    def test_map_matches_independent_implementation(self):
        rng = np.random.default_rng(257)
        rankings, relevance = random_rankings(rng, 100, 30)
        got = mean_average_precision(rankings, relevance)
        want = np.mean(
            [oracle_average_precision(rankings[q].ids(), relevance[q]) for q in rankings]
        )
        assert got == pytest.approx(want, abs=1e-9)

    def test_recall_at_matches_bruteforce(self):
        rng = np.random.default_rng(263)
        rankings, _ = random_rankings(rng, 100, 30)
        reference = {q: rankings[q].ids()[int(rng.integers(0, 30))] for q in rankings}
        for n in (1, 5, 10):
            got = recall_at(rankings, reference, n)
            want = np.mean([reference[q] in rankings[q].ids()[:n] for q in rankings])
            assert got == pytest.approx(want, abs=1e-9)

    def test_ndcg_closed_form(self):
        assert ndcg(1) == 1.0
        assert ndcg(3) == 0.5
        assert ndcg(7) == pytest.approx(1.0 / 3.0)
        with pytest.raises(ValueError):
            ndcg(0)

    def test_mean_ndcg(self):
        rankings = {
            "q0": Ranking((("a", 0.0), ("b", 1.0))),
            "q1": Ranking((("a", 0.0), ("b", 1.0))),
        }
        got = mean_ndcg(rankings, {"q0": "a", "q1": "b"})
        assert got == pytest.approx((1.0 + 1.0 / math.log2(3)) / 2)

    def test_metrics_invariant_to_monotone_score_transform(self):
        rng = np.random.default_rng(269)
        rankings, relevance = random_rankings(rng, 20, 15)
        warped = {
            q: Ranking(tuple((i, math.exp(s)) for i, s in r.entries))
            for q, r in rankings.items()
        }
        assert mean_average_precision(rankings, relevance) == mean_average_precision(
            warped, relevance
        )

    def test_zero_relevant_rejected(self):
        with pytest.raises(ValueError):
            average_precision(Ranking((("a", 0.0),)), set())

    def test_missing_reference_rejected(self):
        with pytest.raises(ValueError):
            Ranking((("a", 0.0),)).position("zz")


class TestRankingDump:
    def test_line_format(self):
        r = Ranking((("im3", 0.25), ("im1", 1.5)))
        lines = ranking_dump_lines("q7", r)
        assert lines == ["q7 im3 1 0.25", "q7 im1 2 1.5"]
