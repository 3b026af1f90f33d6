import numpy as np
import pytest

from mmret.corpus import SEP_TOKEN, TEXT, TokenSequence, generate_corpus
from mmret.encoder import EncoderConfig, Retriever, init_params
from mmret.errors import LengthError
from mmret.miner import ranking_order
from mmret.objectives import fuse_scores
from mmret.reranker import (
    CostCounter,
    RecallThenRerank,
    RerankerModel,
    RerankRequest,
    init_reranker_params,
    join,
    recall_then_rerank,
    reranker_config,
    rerank,
    write_ranked_report,
)

CFG = EncoderConfig(d_model=16, n_layers=1, n_heads=2, max_len=64)


def _seq(tokens, span=None):
    return TokenSequence(tuple(tokens), (TEXT,) * len(tokens), span)


def _models(seed=0, head_scale=1.0):
    rcfg = reranker_config(CFG)
    params = init_reranker_params(rcfg, seed)
    rng = np.random.default_rng(seed)
    params["head.w"].data[:] = rng.normal(0, head_scale, size=params["head.w"].shape)
    return Retriever(CFG, init_params(CFG, seed)), RerankerModel(rcfg, params)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(0, 10, 2, 0.2, pool_size=20)


class TestJoin:
    def test_length(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            q = _seq(rng.integers(0, 8000, size=int(rng.integers(0, 10))))
            c = _seq(rng.integers(0, 8000, size=int(rng.integers(0, 10))))
            assert len(join(q, c)) == len(q) + 1 + len(c)

    def test_empty_candidate(self):
        q = _seq((4, 5), span=(0, 1))
        j = join(q, _seq(()))
        assert j.tokens == (4, 5, SEP_TOKEN) and j.instruction_span == (0, 1)

    def test_injective(self):
        pairs = [((1,), (2, 3)), ((1, 2), (3,)), ((), (1, 2, 3)), ((1, 2, 3), ())]
        joined = {join(_seq(q), _seq(c)).tokens for q, c in pairs}
        assert len(joined) == len(pairs)

    def test_overlong(self):
        with pytest.raises(LengthError):
            join(_seq(tuple(range(5))), _seq(tuple(range(5))), max_len=10)


class TestRerank:
    def test_zero_head_ties_break_by_id(self, corpus):
        rcfg = reranker_config(CFG)
        model = RerankerModel(rcfg, init_reranker_params(rcfg, 0))
        pool = corpus.pools[0]
        cands = list(reversed(pool.candidates))
        out = rerank(model, RerankRequest(corpus.tasks[0].query, cands, len(cands)))
        assert [s for _, s in out] == [0.5] * len(cands)
        assert [c for c, _ in out] == sorted(pool.ids)

    def test_single_candidate(self, corpus):
        _, model = _models()
        cid, seq = corpus.pools[0].candidates[3]
        out = rerank(model, RerankRequest(corpus.tasks[0].query, [(cid, seq)], 1))
        assert len(out) == 1 and out[0][0] == cid and 0 < out[0][1] < 1

    def test_scores_independent_of_input_order(self, corpus):
        _, model = _models(head_scale=3.0)
        q = corpus.tasks[1].query
        cands = corpus.pools[0].candidates
        base = dict(rerank(model, RerankRequest(q, cands, len(cands))))
        rng = np.random.default_rng(1)
        for _ in range(5):
            perm = [cands[i] for i in rng.permutation(len(cands))]
            assert dict(rerank(model, RerankRequest(q, perm, len(perm)))) == base

    def test_top_m_truncates_in_retriever_order(self, corpus):
        _, model = _models()
        cands = corpus.pools[0].candidates
        out = rerank(model, RerankRequest(corpus.tasks[0].query, cands, 4))
        assert {c for c, _ in out} == {c for c, _ in cands[:4]}


class TestPipeline:
    def _recall(self, retriever, q, pool):
        E = retriever.embed(pool.sequences).astype(np.float64)
        return np.clip(E @ retriever.embed([q])[0].astype(np.float64), -1, 1)

    def test_alpha_one_is_retriever_order(self, corpus):
        retriever, reranker = _models(head_scale=3.0)
        t, pool = corpus.tasks[0], corpus.pools_by_id[corpus.tasks[0].pool_id]
        res = recall_then_rerank(retriever, reranker, 1.0, t.query, pool, top_m=8)
        s = self._recall(retriever, t.query, pool)
        assert res.ranked_ids == [pool.ids[i] for i in ranking_order(pool.ids, s)]

    def test_alpha_zero_full_pool_is_reranker_order(self, corpus):
        retriever, reranker = _models(head_scale=3.0)
        t, pool = corpus.tasks[2], corpus.pools_by_id[corpus.tasks[2].pool_id]
        res = recall_then_rerank(retriever, reranker, 0.0, t.query, pool, top_m=len(pool))
        probs = reranker.score(t.query, pool.sequences)
        assert res.ranked_ids == [pool.ids[i] for i in ranking_order(pool.ids, probs)]

    def test_pool_of_twenty_matches_recomputation(self, corpus):
        retriever, reranker = _models(seed=3, head_scale=3.0)
        for t in corpus.tasks[:4]:
            pool = corpus.pools_by_id[t.pool_id]
            assert len(pool) == 20
            res = recall_then_rerank(retriever, reranker, 0.3, t.query, pool, top_m=10)
            s = self._recall(retriever, t.query, pool)
            order = sorted(range(20), key=lambda i: (-s[i], pool.ids[i]))
            head, tail = order[:10], order[10:]
            probs = reranker.score(t.query, [pool.sequences[i] for i in head])
            fused = {pool.ids[i]: 0.3 * s[i] + 0.7 * p for i, p in zip(head, probs)}
            expect = sorted(fused, key=lambda c: (-fused[c], c)) + [pool.ids[i] for i in tail]
            assert res.ranked_ids == expect

    def test_cost_counter(self, corpus):
        retriever, reranker = _models()
        counter = CostCounter()
        pipe = RecallThenRerank(retriever, reranker, 0.5, 7, counter=counter)
        for t in corpus.tasks[:3]:
            pipe.run(t.query, corpus.pools_by_id[t.pool_id])
        assert counter.similarity_computations == 3 * 20
        assert counter.reranker_forwards == 3 * 7

    def test_top_m_clamped_to_pool(self, corpus):
        retriever, reranker = _models()
        counter = CostCounter()
        t = corpus.tasks[0]
        res = recall_then_rerank(retriever, reranker, 0.5, t.query, corpus.pools_by_id[t.pool_id], 500,
                                 counter=counter)
        assert counter.reranker_forwards == 20 and len(res.ranked_ids) == 20

    def test_normalized_recall_in_unit_range(self, corpus):
        retriever, reranker = _models()
        t = corpus.tasks[0]
        res = recall_then_rerank(retriever, reranker, 1.0, t.query, corpus.pools_by_id[t.pool_id], 20,
                                 normalize_recall=True)
        assert min(res.fused.s_multi) == 0.0 and max(res.fused.s_multi) == 1.0

    def test_report_stable(self, corpus, tmp_path):
        retriever, reranker = _models()
        res = [recall_then_rerank(retriever, reranker, 0.5, t.query, corpus.pools_by_id[t.pool_id], 5,
                                  query_id=t.query_id) for t in corpus.tasks[:3]]
        a = write_ranked_report(res, tmp_path / "a.jsonl").read_bytes()
        b = write_ranked_report(res[::-1], tmp_path / "b.jsonl").read_bytes()
        assert a == b and a.count(b"\n") == 3


class TestFusionProperties:
    def test_endpoints_on_thousand_sets(self):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            n = int(rng.integers(1, 30))
            ids = [int(v) for v in rng.choice(1000, size=n, replace=False)]
            # a coarse grid produces ties that exercise the id tie-break
            r = rng.choice(np.linspace(-1, 1, 21), size=n)
            k = rng.choice(np.linspace(0, 1, 11), size=n)
            brute = lambda v: sorted(range(n), key=lambda i: (-v[i], ids[i]))
            assert list(ranking_order(ids, fuse_scores(r, k, 1.0, 0, ids).s_multi)) == brute(r)
            assert list(ranking_order(ids, fuse_scores(r, k, 0.0, 0, ids).s_multi)) == brute(k)

    def test_dominance_on_thousand_sets(self):
        rng = np.random.default_rng(6)
        for _ in range(1000):
            n = int(rng.integers(2, 15))
            ids = list(range(n))
            r, k = rng.uniform(-1, 1, size=n), rng.uniform(0, 1, size=n)
            alpha = float(rng.uniform(0, 1))
            pos = {c: p for p, c in enumerate(ranking_order(ids, fuse_scores(r, k, alpha, 0, ids).s_multi))}
            for a in range(n):
                for b in range(n):
                    if r[a] > r[b] and k[a] > k[b]:
                        assert pos[a] < pos[b]
