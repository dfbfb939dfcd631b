"""Key-value recall: the end-to-end benchmark for compression methods.

A sample is a flat token stream of (key, value) pairs from disjoint
sub-vocabularies, a query separator, and one queried key; the model must
emit that key's value. The context is compressed by the configured method
before the query is revealed, so any method that destroys the pair
structure shows up as lost recall. FULL gives the ceiling, NO_CONTEXT the
chance floor.

Every method trains from the same base initialization and sees the same
sample stream, so metric gaps are attributable to the method alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .binio import atomic_write_text, rows_to_csv
from .compress import (
    CompressionConfig,
    Method,
    answer_loss,
    compress_context,
    greedy_decode,
    make_bundle,
    parameter_groups,
    predict_with_cache,
    train_step,
)
from .engine import Adam
from .layers import LayerConfig
from .masks import GistPoolKnobs
from .rng import substream

BOS_ID = 0
QSEP_ID = 1
KEY_BASE = 2
N_KEYS = 64
VALUE_BASE = KEY_BASE + N_KEYS
N_VALUES = 32
VOCAB_SIZE = 128

CHANCE_EXACT = 1.0 / N_VALUES

# Cross-entropy an order of magnitude past log(VOCAB_SIZE) means the run blew up.
DIVERGENCE_LIMIT = 50.0


@dataclass(frozen=True)
class RecallSpec:
    method: Method = Method.FULL
    xi: int = 1
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    n_kv_heads: int = 2
    mlp_hidden: int = 128
    n_pairs: int = 16
    steps: int = 1500
    batch: int = 32
    lr: float = 3e-3
    eval_size: int = 512
    # pairs probed per training sample (capped at n_pairs); evaluation
    # always asks a single query
    train_queries: int = 8
    knobs: GistPoolKnobs | None = None

    def __post_init__(self):
        if self.n_pairs < 1 or self.n_pairs > N_KEYS:
            raise ValueError(f"n_pairs must be in [1, {N_KEYS}] for unique keys")
        if self.train_queries < 1:
            raise ValueError("train_queries must be >= 1")

    def layer_config(self) -> LayerConfig:
        return LayerConfig(d_model=self.d_model, n_heads=self.n_heads,
                           n_kv_heads=self.n_kv_heads,
                           head_dim=self.d_model // self.n_heads,
                           mlp_hidden=self.mlp_hidden)

    def compression_config(self) -> CompressionConfig:
        if self.knobs is None:
            return CompressionConfig(method=self.method, xi=self.xi)
        return CompressionConfig(method=self.method, xi=self.xi,
                                 knobs=self.knobs)


def validate_recall(ctx_ids: np.ndarray) -> None:
    """Reject contexts with duplicate keys (the answer would be ambiguous)."""
    keys = ctx_ids[..., 0::2]
    for row in keys.reshape(-1, keys.shape[-1]):
        if len(set(row.tolist())) != row.shape[0]:
            raise ValueError("duplicate key in recall context")


def gen_recall(n_samples: int, n_pairs: int, rng) -> dict:
    """Sampled recall instances: interleaved pair stream, query, answer."""
    if n_pairs > N_KEYS:
        raise ValueError("key vocabulary too small for unique keys")
    scores = rng.random((n_samples, N_KEYS))
    keys = np.argsort(scores, axis=1)[:, :n_pairs]
    values = rng.integers(0, N_VALUES, size=(n_samples, n_pairs))
    qi = rng.integers(0, n_pairs, size=n_samples)
    rows = np.arange(n_samples)
    ctx = np.empty((n_samples, 2 * n_pairs), dtype=np.int64)
    ctx[:, 0::2] = KEY_BASE + keys
    ctx[:, 1::2] = VALUE_BASE + values
    validate_recall(ctx)
    return {
        "ctx": ctx,
        "query": KEY_BASE + keys[rows, qi],
        "answer": VALUE_BASE + values[rows, qi],
    }


def _qa_arrays(batch: dict):
    query, answer = batch["query"], batch["answer"]
    qa_ids = np.stack([np.full_like(query, QSEP_ID), query], axis=1)
    targets = np.stack([query, answer], axis=1)
    weights = np.broadcast_to(np.array([0.0, 1.0]), targets.shape)
    return qa_ids, targets, np.ascontiguousarray(weights)


def _train_qa_arrays(batch: dict, n_queries: int, rng):
    """Probe several pairs per sample: [QSEP, k, v, k, v, ..., k] with the
    loss on each key position (predict its value). One query per sample is
    too sparse a signal for the retrieval circuit to form in a reasonable
    step budget; denser supervision trains the same mechanism because every
    probed key is resolvable only through the compressed context (in-stream
    pairs never repeat a key).
    """
    ctx = batch["ctx"]
    n_samples, n_pairs = ctx.shape[0], ctx.shape[1] // 2
    m = min(n_queries, n_pairs)
    order = np.argsort(rng.random((n_samples, n_pairs)), axis=1)[:, :m]
    sel_k = np.take_along_axis(ctx[:, 0::2], order, axis=1)
    sel_v = np.take_along_axis(ctx[:, 1::2], order, axis=1)
    qa_ids = np.empty((n_samples, 2 * m), dtype=ctx.dtype)
    qa_ids[:, 0] = QSEP_ID
    qa_ids[:, 1::2] = sel_k
    qa_ids[:, 2::2] = sel_v[:, :-1]
    targets = np.empty_like(qa_ids)
    targets[:, :-1] = qa_ids[:, 1:]
    targets[:, -1] = sel_v[:, -1]
    weights = np.zeros(targets.shape, dtype=np.float64)
    weights[:, 1::2] = 1.0
    return qa_ids, targets, weights


@dataclass
class RecallResult:
    spec: RecallSpec
    seed: int
    exact_match: float = 0.0
    eval_loss: float = float("inf")
    losses: list = field(default_factory=list)
    status: str = "done"
    steps_run: int = 0
    bundle: object = None


def make_recall_bundle(spec: RecallSpec, seed: int):
    """Base weights depend only on (seed, shape), never on the method, so
    method comparisons start from identical initializations."""
    rng = substream(seed, "recall-init", spec.n_layers, spec.d_model)
    return make_bundle(spec.layer_config(), spec.n_layers, VOCAB_SIZE,
                       spec.compression_config(), rng)


def eval_exact_match(bundle, ccfg, data: dict, chunk: int = 64) -> float:
    hits, total = 0, 0
    n = data["ctx"].shape[0]
    for lo in range(0, n, chunk):
        sl = slice(lo, min(lo + chunk, n))
        cache = compress_context(bundle, ccfg, data["ctx"][sl]).detached()
        prompt = np.stack([np.full_like(data["query"][sl], QSEP_ID),
                           data["query"][sl]], axis=1)
        decoded = greedy_decode(bundle, cache, prompt, n_new=1)
        hits += int((decoded[:, 0] == data["answer"][sl]).sum())
        total += sl.stop - lo
    return hits / total


def eval_answer_loss(bundle, ccfg, data: dict, chunk: int = 64) -> float:
    losses = []
    n = data["ctx"].shape[0]
    for lo in range(0, n, chunk):
        sl = slice(lo, min(lo + chunk, n))
        cache = compress_context(bundle, ccfg, data["ctx"][sl])
        qa_ids, targets, weights = _qa_arrays(
            {k: v[sl] for k, v in data.items()})
        logits = predict_with_cache(bundle, cache.detached(), qa_ids)
        loss = answer_loss(logits, targets, weights)
        losses.append(float(loss.data) * (sl.stop - lo))
    return sum(losses) / n


def train_recall(spec: RecallSpec, seed: int, progress=None) -> RecallResult:
    bundle = make_recall_bundle(spec, seed)
    ccfg = spec.compression_config()
    opt = Adam(parameter_groups(bundle, ccfg), lr=spec.lr)
    data_rng = substream(seed, "recall-data", spec.n_pairs)
    result = RecallResult(spec, seed)
    for step in range(spec.steps):
        batch = gen_recall(spec.batch, spec.n_pairs, data_rng)
        qa_ids, targets, weights = _train_qa_arrays(batch, spec.train_queries,
                                                    data_rng)
        loss = train_step(bundle, ccfg, opt, batch["ctx"], qa_ids,
                          targets, weights)
        result.losses.append(loss)
        if not np.isfinite(loss) or loss > DIVERGENCE_LIMIT:
            result.status = "diverged"
            result.steps_run = step
            return result
        result.steps_run = step + 1
        if progress is not None:
            progress(step, loss)
    eval_data = gen_recall(spec.eval_size, spec.n_pairs,
                           substream(seed, "recall-eval", spec.n_pairs))
    result.exact_match = eval_exact_match(bundle, ccfg, eval_data)
    result.eval_loss = eval_answer_loss(bundle, ccfg, eval_data)
    result.bundle = bundle
    return result


def train_compare(specs, seeds=(0, 1, 2), progress=None) -> list:
    """Train every (spec, seed); specs differ only in method/xi, so shared
    seeds give matched datasets and initializations."""
    results = []
    for spec in specs:
        for seed in seeds:
            res = train_recall(spec, seed, progress=None)
            results.append(res)
            if progress is not None:
                progress(spec, seed, res)
    return results


def results_to_jsonl(path, results) -> None:
    lines = []
    for r in results:
        lines.append(json.dumps({
            "method": r.spec.method.value, "xi": r.spec.xi, "seed": r.seed,
            "n_layers": r.spec.n_layers, "d_model": r.spec.d_model,
            "steps": r.spec.steps, "eval_size": r.spec.eval_size,
            "train_queries": r.spec.train_queries, "status": r.status,
            "exact_match": r.exact_match, "eval_loss": r.eval_loss,
        }, sort_keys=True))
    atomic_write_text(path, "\n".join(lines) + "\n")


def summarize_results(results) -> list:
    """Per method x xi: mean and best exact match, mean loss."""
    groups = {}
    for r in results:
        groups.setdefault((r.spec.method.value, r.spec.xi), []).append(r)
    rows = []
    for (method, xi), rs in sorted(groups.items()):
        rows.append({
            "method": method, "xi": xi, "n_runs": len(rs),
            "mean_exact": float(np.mean([r.exact_match for r in rs])),
            "best_exact": float(max(r.exact_match for r in rs)),
            "mean_loss": float(np.mean([r.eval_loss for r in rs])),
            "diverged": sum(r.status == "diverged" for r in rs),
        })
    return rows


def summary_to_csv(path, results) -> None:
    rows_to_csv(path, summarize_results(results))
