import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmret.corpus import generate_corpus, merge_pools
from mmret.encoder import EncoderConfig, Retriever, init_params
from mmret.errors import ConfigError, ContractError
from mmret.miner import (
    ABSOLUTE,
    RELATIVE,
    MiningConfig,
    MiningResult,
    build_reranker_training_set,
    mine,
    mine_corpus,
    read_mining,
    select_hard_negatives,
    write_mining,
)


def oracle(ids, scores, positives, mode, threshold, k):
    """Sort everything, drop positives, split on the bound, take the first k kept."""
    pos = set(positives)
    bound_ok = (lambda s: s <= threshold) if mode == ABSOLUTE else \
        (lambda s, top=max(s for c, s in zip(ids, scores) if c in pos): s < top - threshold)
    ranked = sorted(zip(ids, scores), key=lambda cs: (-cs[1], cs[0]))
    kept = [(c, s) for c, s in ranked if c not in pos and bound_ok(s)]
    dropped = [(c, s) for c, s in ranked if c not in pos and not bound_ok(s)]
    return kept[:k], dropped


def fixture(rng):
    n = int(rng.integers(1, 100))
    ids = [int(v) for v in rng.choice(10_000, size=n, replace=False)]
    # a coarse score grid makes ties common
    scores = [float(v) for v in np.round(rng.choice(np.linspace(-1, 1, 41), size=n), 6)]
    positives = [int(v) for v in rng.choice(ids, size=int(rng.integers(1, min(n, 3) + 1)), replace=False)]
    if rng.random() < 0.5:
        mode, threshold = ABSOLUTE, float(np.round(rng.uniform(-0.9, 1.0), 2))
    else:
        mode, threshold = RELATIVE, float(np.round(rng.uniform(0, 0.5), 2))
    return ids, scores, positives, mode, threshold


class TestSelectHardNegatives:
    def test_worked_example(self):
        r = select_hard_negatives(0, [1, 2, 3, 4, 5], [0.95, 0.90, 0.70, 0.50, 0.99], [5],
                                  MiningConfig(k=2, filter_mode=ABSOLUTE, threshold=0.85))
        assert [s for _, s in r.hard_negatives] == [0.70, 0.50]
        assert [s for _, s in r.filtered_out] == [0.95, 0.90]

    def test_vacuous_threshold_is_plain_top_k(self):
        rng = np.random.default_rng(0)
        scores = rng.uniform(-1, 1, size=30).round(6)
        r = select_hard_negatives(0, range(30), scores, [0], MiningConfig(k=5, filter_mode=ABSOLUTE, threshold=1.0))
        neg = [i for i in np.argsort(-scores, kind="stable") if i != 0][:5]
        assert [c for c, _ in r.hard_negatives] == neg
        assert r.filtered_out == []

    def test_relative_margin_zero_drops_ties_with_positive(self):
        r = select_hard_negatives(0, [1, 2, 3], [0.5, 0.5, 0.4], [1], MiningConfig(k=4))
        assert r.hard_negatives == [(3, 0.4)] and r.filtered_out == [(2, 0.5)]

    def test_short_pool_returns_fewer(self):
        r = select_hard_negatives(0, [1, 2], [0.1, 0.2], [1], MiningConfig(k=8, filter_mode=ABSOLUTE, threshold=0.9))
        assert r.hard_negatives == [(2, 0.2)]

    def test_relative_needs_a_positive(self):
        with pytest.raises(ContractError):
            select_hard_negatives(0, [1, 2], [0.1, 0.2], [9], MiningConfig())

    def test_thousand_fixtures_match_oracle(self):
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            ids, scores, positives, mode, threshold = fixture(rng)
            by_k = {}
            for k in (1, 4, 8, 16):
                r = select_hard_negatives(7, ids, scores, positives, MiningConfig(k=k, filter_mode=mode,
                                                                                  threshold=threshold))
                kept, dropped = oracle(ids, scores, positives, mode, threshold, k)
                assert r.hard_negatives == kept and r.filtered_out == dropped
                chosen = {c for c, _ in r.hard_negatives} | {c for c, _ in r.filtered_out}
                assert not chosen & set(positives)
                if r.hard_negatives:
                    top = max(s for c, s in zip(ids, scores) if c in positives)
                    bound = threshold if mode == ABSOLUTE else top - threshold
                    assert max(s for _, s in r.hard_negatives) <= bound
                by_k[k] = r.hard_negatives
            for a, b in [(1, 4), (4, 8), (8, 16)]:
                assert by_k[b][: len(by_k[a])] == by_k[a]


class TestMiningConfig:
    @pytest.mark.parametrize("kw", [dict(k=0), dict(filter_mode=ABSOLUTE, threshold=-1.0),
                                    dict(filter_mode=ABSOLUTE, threshold=1.5), dict(threshold=-0.1),
                                    dict(filter_mode="nearest"), dict(exclude_positives=False)])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            MiningConfig(**kw)


class TestMine:
    CFG = EncoderConfig(d_model=16, n_layers=1, n_heads=2, max_len=40)

    def _setup(self):
        c = generate_corpus(0, 12, 4, 0.2, pool_size=20)
        return c, Retriever(self.CFG, init_params(self.CFG, 0))

    def test_matches_select_on_embeddings(self):
        c, model = self._setup()
        pool = c.pools[0]
        tasks = [t for t in c.tasks if t.pool_id == pool.pool_id]
        res = mine(model, tasks, pool, MiningConfig(k=4))
        E = model.embed(pool.sequences).astype(np.float64)
        for t, r in zip(sorted(tasks, key=lambda t: t.query_id), res):
            s = np.clip(E @ model.embed([t.query])[0].astype(np.float64), -1, 1)
            assert r == select_hard_negatives(t.query_id, pool.ids, s, t.positive_ids, MiningConfig(k=4))

    def test_threads_and_order_independent(self):
        c, model = self._setup()
        a = mine_corpus(model, c.tasks, c.pools, MiningConfig(k=4))
        b = mine_corpus(model, list(reversed(c.tasks)), c.pools, MiningConfig(k=4), threads=4)
        assert a == b
        assert [r.query_id for r in a] == sorted(t.query_id for t in c.tasks)

    def test_global_pool_accepts_any_query(self):
        c, model = self._setup()
        res = mine(model, c.tasks[:5], merge_pools(c.pools), MiningConfig(k=3))
        assert len(res) == 5

    def test_foreign_query_rejected(self):
        c, model = self._setup()
        stray = next(t for t in c.tasks if t.pool_id != c.pools[0].pool_id)
        with pytest.raises(ContractError):
            mine(model, [stray], c.pools[0], MiningConfig())


class TestRerankerTrainingSet:
    def _tasks(self):
        return generate_corpus(1, 8, 3, 0.1, pool_size=10).tasks

    def _mined(self, tasks, n):
        return [MiningResult(t.query_id, [(1000 + j, 0.5 - 0.01 * j) for j in range(n)]) for t in tasks]

    def test_zero_negatives_gives_positives_only(self):
        tasks = self._tasks()
        out = build_reranker_training_set(self._mined(tasks, 5), tasks, n_negatives=0)
        assert len(out) == len(tasks) and {e.label for e in out} == {"yes"}

    def test_truncation(self):
        tasks = self._tasks()[:1]
        out = build_reranker_training_set(self._mined(tasks, 3), tasks, n_negatives=50)
        assert [e.label for e in out] == ["yes", "no", "no", "no"]
        assert [e.candidate_id for e in out[1:]] == [1000, 1001, 1002]

    def test_label_counts_match_oracle(self):
        tasks = self._tasks()
        rng = np.random.default_rng(3)
        mined = [MiningResult(t.query_id, [(j, 0.0) for j in range(int(rng.integers(0, 12)))]) for t in tasks]
        for n in (0, 1, 4, 50):
            out = build_reranker_training_set(mined, tasks, n_negatives=n)
            assert sum(e.label == "yes" for e in out) == len(tasks)
            assert sum(e.label == "no" for e in out) == sum(min(n, len(m.hard_negatives)) for m in mined)

    def test_negative_count_rejected(self):
        with pytest.raises(ContractError):
            build_reranker_training_set([], [], n_negatives=-1)


class TestSerialization:
    def test_roundtrip_and_stable_bytes(self, tmp_path):
        res = [MiningResult(3, [(5, 0.25)], [(9, 0.875)]), MiningResult(1, [], [])]
        a = write_mining(res, tmp_path / "a.jsonl")
        b = write_mining(list(reversed(res)), tmp_path / "b.jsonl")
        assert a.read_bytes() == b.read_bytes()
        assert read_mining(a) == sorted(res, key=lambda r: r.query_id)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-100, 100), min_size=2, max_size=40), st.integers(1, 10), st.data())
def test_hard_negatives_sorted_and_bounded(raw, k, data):
    scores = [v / 100 for v in raw]
    pos = data.draw(st.integers(0, len(scores) - 1))
    r = select_hard_negatives(0, range(len(scores)), scores, [pos], MiningConfig(k=k))
    keys = [(-s, c) for c, s in r.hard_negatives]
    assert keys == sorted(keys) and len(r.hard_negatives) <= k
    assert all(s < scores[pos] for _, s in r.hard_negatives)
