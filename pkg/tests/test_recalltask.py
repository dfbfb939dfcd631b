"""Key-value recall task tests.

The scan oracle re-derives every answer directly from the raw context, so
dataset correctness never depends on the model stack.
"""

import json

import numpy as np
import pytest

from ctxcompress.compress import (CompressionConfig, Method, compress_context,
                                  predict_with_cache, two_phase_logits)
from ctxcompress.recalltask import (BOS_ID, CHANCE_EXACT, KEY_BASE, N_KEYS,
                                    N_VALUES, QSEP_ID, VALUE_BASE, VOCAB_SIZE,
                                    RecallResult, RecallSpec,
                                    eval_answer_loss, eval_exact_match,
                                    gen_recall, make_recall_bundle,
                                    _train_qa_arrays, results_to_jsonl,
                                    summarize_results, summary_to_csv,
                                    train_recall, validate_recall)
from ctxcompress.binio import read_csv_rows
from ctxcompress.rng import substream


def scan_answer(ctx_row, query_id):
    """Oracle: walk (key, value) pairs and return the queried value token."""
    for i in range(0, len(ctx_row), 2):
        if ctx_row[i] == query_id:
            return ctx_row[i + 1]
    raise AssertionError("query key not present in context")


def test_answers_recoverable_by_scan_oracle():
    data = gen_recall(200, 16, substream(3, "t-oracle"))
    for ctx, q, a in zip(data["ctx"], data["query"], data["answer"]):
        assert scan_answer(ctx, q) == a


def test_token_ranges_and_unique_keys():
    data = gen_recall(100, 16, substream(4, "t-ranges"))
    keys = data["ctx"][:, 0::2]
    vals = data["ctx"][:, 1::2]
    assert keys.min() >= KEY_BASE and keys.max() < KEY_BASE + N_KEYS
    assert vals.min() >= VALUE_BASE and vals.max() < VALUE_BASE + N_VALUES
    assert VALUE_BASE + N_VALUES <= VOCAB_SIZE
    for row in keys:
        assert len(set(row.tolist())) == 16
    for ctx, q in zip(data["ctx"], data["query"]):
        assert q in ctx[0::2]


def test_vocab_too_small_rejected():
    with pytest.raises(ValueError, match="too small"):
        gen_recall(2, N_KEYS + 1, substream(0, "t"))
    with pytest.raises(ValueError, match="n_pairs"):
        RecallSpec(n_pairs=N_KEYS + 1)


def test_duplicate_key_mutation_detected():
    data = gen_recall(5, 8, substream(5, "t-dup"))
    validate_recall(data["ctx"])
    mutated = data["ctx"].copy()
    mutated[2, 4] = mutated[2, 0]  # clone a key into another slot
    with pytest.raises(ValueError, match="duplicate key"):
        validate_recall(mutated)


def test_generation_deterministic():
    a = gen_recall(20, 8, substream(7, "t-det"))
    b = gen_recall(20, 8, substream(7, "t-det"))
    c = gen_recall(20, 8, substream(8, "t-det"))
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
    assert not np.array_equal(a["ctx"], c["ctx"])


def test_train_and_eval_streams_differ():
    train = gen_recall(50, 16, substream(0, "recall-data", 16))
    ev = gen_recall(50, 16, substream(0, "recall-eval", 16))
    assert not np.array_equal(train["ctx"], ev["ctx"])


def test_methods_share_base_initialization():
    specs = [RecallSpec(method=m, xi=1) for m in
             (Method.FULL, Method.GIST_POOL, Method.SEP_GIST)]
    bundles = [make_recall_bundle(s, 11) for s in specs]
    ref = bundles[0]
    for b in bundles[1:]:
        for (name, t0), (name1, t1) in zip(ref.params.named(), b.params.named()):
            assert name == name1
            np.testing.assert_array_equal(t0.data, t1.data)
    assert bundles[0].gist_embed is None
    assert bundles[1].gist_embed is not None
    assert bundles[2].blocks_c is not None


SMALL = dict(n_layers=2, d_model=32, n_heads=2, n_kv_heads=1, mlp_hidden=64,
             n_pairs=4, batch=8, eval_size=32)


def test_no_context_predictions_ignore_context():
    spec = RecallSpec(method=Method.NO_CONTEXT, **SMALL)
    bundle = make_recall_bundle(spec, 0)
    ccfg = spec.compression_config()
    rng = substream(0, "t-blind")
    d1 = gen_recall(6, 4, rng)
    d2 = gen_recall(6, 4, rng)
    qa = np.stack([np.full(6, QSEP_ID, dtype=np.int64), d1["query"]], axis=1)
    l1 = two_phase_logits(bundle, ccfg, d1["ctx"], qa)
    l2 = two_phase_logits(bundle, ccfg, d2["ctx"], qa)
    np.testing.assert_array_equal(l1.data, l2.data)
    cache = compress_context(bundle, ccfg, d1["ctx"])
    assert cache.n_slots == 0


def test_avgpool_xi1_matches_full_on_recall_inputs():
    spec = RecallSpec(method=Method.FULL, **SMALL)
    bundle = make_recall_bundle(spec, 2)
    data = gen_recall(10, 4, substream(2, "t-lossless"))
    qa = np.stack([np.full(10, QSEP_ID, dtype=np.int64), data["query"]], axis=1)
    lf = two_phase_logits(bundle, CompressionConfig(Method.FULL), data["ctx"], qa)
    lp = two_phase_logits(bundle, CompressionConfig(Method.AVG_POOL, xi=1),
                          data["ctx"], qa)
    assert np.max(np.abs(lf.data - lp.data)) < 1e-6


def test_exact_match_agrees_with_manual_argmax():
    spec = RecallSpec(method=Method.FULL, **SMALL)
    bundle = make_recall_bundle(spec, 3)
    ccfg = spec.compression_config()
    data = gen_recall(12, 4, substream(3, "t-exact"))
    acc = eval_exact_match(bundle, ccfg, data, chunk=5)
    hits = 0
    for i in range(12):
        cache = compress_context(bundle, ccfg, data["ctx"][i:i + 1])
        qa = np.array([[QSEP_ID, data["query"][i]]], dtype=np.int64)
        logits = predict_with_cache(bundle, cache, qa)
        hits += int(np.argmax(logits.data[0, -1]) == data["answer"][i])
    assert acc == pytest.approx(hits / 12)


def test_eval_loss_independent_of_chunking():
    spec = RecallSpec(method=Method.GIST, xi=2, **SMALL)
    bundle = make_recall_bundle(spec, 4)
    ccfg = spec.compression_config()
    data = gen_recall(13, 4, substream(4, "t-chunk"))
    a = eval_answer_loss(bundle, ccfg, data, chunk=13)
    b = eval_answer_loss(bundle, ccfg, data, chunk=5)
    assert a == pytest.approx(b, rel=1e-12)


def test_training_reduces_loss():
    spec = RecallSpec(method=Method.FULL, steps=80, lr=3e-3, **SMALL)
    res = train_recall(spec, 0)
    assert res.status == "done"
    assert res.steps_run == 80
    assert np.mean(res.losses[:10]) > np.mean(res.losses[-10:])
    assert 0.0 <= res.exact_match <= 1.0


def test_divergence_recorded():
    spec = RecallSpec(method=Method.FULL, steps=40, lr=1e6, **SMALL)
    res = train_recall(spec, 0)
    assert res.status == "diverged"
    assert res.steps_run < 40


def test_results_jsonl_and_summary_csv(tmp_path):
    specs = [RecallSpec(method=Method.FULL),
             RecallSpec(method=Method.GIST_POOL, xi=2)]
    results = []
    for spec in specs:
        for seed, acc in ((0, 0.9), (1, 0.8)):
            results.append(RecallResult(spec, seed, exact_match=acc,
                                        eval_loss=1.0 + seed))
    jl = tmp_path / "runs.jsonl"
    results_to_jsonl(jl, results)
    lines = [json.loads(s) for s in jl.read_text().splitlines()]
    assert len(lines) == 4
    assert lines[0]["method"] == "full" and lines[0]["exact_match"] == 0.9

    rows = summarize_results(results)
    assert [(r["method"], r["xi"]) for r in rows] == [("full", 1), ("gist_pool", 2)]
    assert rows[0]["mean_exact"] == pytest.approx(0.85)
    assert rows[0]["best_exact"] == pytest.approx(0.9)
    assert rows[0]["mean_loss"] == pytest.approx(1.5)

    cp = tmp_path / "summary.csv"
    summary_to_csv(cp, results)
    back = read_csv_rows(cp)
    assert back[1]["method"] == "gist_pool"
    assert float(back[0]["mean_exact"]) == pytest.approx(0.85)


def test_multi_query_training_arrays():
    rng = substream(5, "mq")
    batch = gen_recall(40, 8, rng)
    qa_ids, targets, weights = _train_qa_arrays(batch, 5, rng)
    assert qa_ids.shape == targets.shape == weights.shape == (40, 10)
    assert (qa_ids[:, 0] == QSEP_ID).all()
    # loss sits on key positions only, and each key's target is the value
    # the scan oracle pairs with it
    assert (weights[:, 1::2] == 1.0).all() and (weights[:, 0::2] == 0.0).all()
    for i in range(40):
        probed = qa_ids[i, 1::2]
        assert len(set(probed.tolist())) == 5
        for r in range(1, 10, 2):
            assert targets[i, r] == scan_answer(batch["ctx"][i], qa_ids[i, r])
        for r in range(2, 10, 2):
            assert targets[i, r - 1] == qa_ids[i, r]

    # clamped to n_pairs, and m=1 degenerates to the single-query layout
    qa_ids, _, _ = _train_qa_arrays(batch, 99, rng)
    assert qa_ids.shape[1] == 16
    qa_ids, targets, weights = _train_qa_arrays(batch, 1, rng)
    assert qa_ids.shape == (40, 2)
    assert (weights == [0.0, 1.0]).all()
    for i in range(40):
        assert targets[i, 1] == scan_answer(batch["ctx"][i], qa_ids[i, 1])


def test_chance_level_constant():
    assert CHANCE_EXACT == 1.0 / N_VALUES
    assert BOS_ID == 0 and QSEP_ID == 1
