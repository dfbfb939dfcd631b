"""Two-phase KV-cache compression over the decoder stack.

A compression pass runs the model over the context and distills it into a
`CompressedCache`: per-layer hidden states for a BOS slot plus a bounded
number of summary slots. A prediction pass then answers queries attending
only to those cached states and to its own rows. Both passes live in one
differentiable graph, so training shapes the compressor and the reader
jointly.

Methods
  FULL             cache every context row (upper bound, no compression)
  NO_CONTEXT       cache only the BOS row (lower bound)
  GIST             appended gist tokens; cache their per-layer block inputs
  OFFSET_GIST      appended gists; cache per-layer block outputs instead
  SEP_GIST         GIST with a separate block-parameter bank for gist rows
  SEP_OFFSET_GIST  both modifications
  AVG_POOL         parameter-free: mean every `xi` context states per layer
  GIST_POOL        interspersed gists, pooling mask, offset convention and
                   a separate bank trained at a higher learning rate

Slot states are always consumed the same way during prediction: normalize
with the reader's pre-attention gain, project to keys/values, attend. The
cache of AVG_POOL at xi = 1 is the FULL cache, entry for entry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import engine
from .binio import read_blob, write_blob
from .engine import Tensor
from .layers import (LayerConfig, ModelParams, attend_rows, block_forward,
                     clone_params, init_model, mlp_forward, multihead_attend,
                     project_heads, rmsnorm, rope_apply)
from .masks import CONTEXT as CONTEXT_ROLE
from .masks import GIST as GIST_ROLE
from .masks import (DEFAULT_KNOBS, GistPoolKnobs, appended_layout, build_causal,
                    build_gistpool_mask, interspersed_layout)

CACHE_VERSION = 1


class Method(str, Enum):
    FULL = "full"
    NO_CONTEXT = "no_context"
    GIST = "gist"
    OFFSET_GIST = "offset_gist"
    SEP_GIST = "sep_gist"
    SEP_OFFSET_GIST = "sep_offset_gist"
    AVG_POOL = "avg_pool"
    GIST_POOL = "gist_pool"


OFFSET_METHODS = (Method.OFFSET_GIST, Method.SEP_OFFSET_GIST, Method.GIST_POOL)
SEP_METHODS = (Method.SEP_GIST, Method.SEP_OFFSET_GIST, Method.GIST_POOL)
GISTED_METHODS = (Method.GIST, Method.OFFSET_GIST, Method.SEP_GIST,
                  Method.SEP_OFFSET_GIST, Method.GIST_POOL)


@dataclass(frozen=True)
class CompressionConfig:
    method: Method
    xi: int = 1
    knobs: GistPoolKnobs = DEFAULT_KNOBS
    n_gist_max: int = 64
    bos_id: int = 0
    compressor_lr_mult: float | None = None  # None: 10x for GIST_POOL, else 1x

    def __post_init__(self):
        if self.xi < 1:
            raise ValueError("xi must be a positive integer")

    @property
    def lr_mult(self) -> float:
        if self.compressor_lr_mult is not None:
            return self.compressor_lr_mult
        return 10.0 if self.method == Method.GIST_POOL else 1.0

    def n_slots(self, n_ctx: int) -> int:
        """Summary slots the cache will hold for a context of n_ctx tokens."""
        if self.method == Method.NO_CONTEXT:
            return 0
        if self.method == Method.FULL:
            return n_ctx
        return math.ceil(n_ctx / self.xi)


@dataclass
class ModelBundle:
    """Reader parameters plus the optional compressor-side extras."""

    cfg: LayerConfig
    n_layers: int
    vocab_size: int
    params: ModelParams
    blocks_c: list | None = None     # gist-row parameter bank, SEP methods only
    gist_embed: Tensor | None = None

    def named(self):
        yield from self.params.named()
        if self.gist_embed is not None:
            yield "gist_embed", self.gist_embed
        if self.blocks_c is not None:
            for i, b in enumerate(self.blocks_c):
                yield from b.named(f"blocks_c.{i}.")


def make_bundle(cfg: LayerConfig, n_layers: int, vocab_size: int,
                ccfg: CompressionConfig, rng: np.random.Generator,
                dtype=np.float64) -> ModelBundle:
    params = init_model(cfg, n_layers, vocab_size, rng, dtype)
    gist_embed = None
    blocks_c = None
    if ccfg.method in GISTED_METHODS:
        scale = 1.0 / np.sqrt(cfg.d_model)
        gist_embed = Tensor(
            rng.normal(0.0, scale, size=(ccfg.n_gist_max, cfg.d_model)).astype(dtype),
            requires_grad=True)
    if ccfg.method in SEP_METHODS:
        blocks_c = [clone_params(b) for b in params.blocks]
    return ModelBundle(cfg, n_layers, vocab_size, params, blocks_c, gist_embed)


def parameter_groups(bundle: ModelBundle, ccfg: CompressionConfig) -> list:
    """(tensor, lr multiplier) pairs; compressor-side tensors get `lr_mult`."""
    groups = [(t, 1.0) for _, t in bundle.params.named()]
    mult = ccfg.lr_mult
    if bundle.gist_embed is not None:
        groups.append((bundle.gist_embed, mult))
    if bundle.blocks_c is not None:
        for b in bundle.blocks_c:
            groups.extend((t, mult) for _, t in b.named())
    return groups


@dataclass
class CompressedCache:
    """Per-layer cached states: BOS first, then the summary slots."""

    states: list                 # n_layers tensors of shape (batch, 1 + m, d)
    positions: np.ndarray        # (1 + m,) rotary positions of the cached rows
    query_start: int             # first rotary position for prediction rows
    method: Method
    xi: int
    n_ctx: int

    @property
    def n_slots(self) -> int:
        return int(self.states[0].shape[1]) - 1

    def detached(self) -> "CompressedCache":
        return CompressedCache([s.detach() for s in self.states],
                               self.positions.copy(), self.query_start,
                               self.method, self.xi, self.n_ctx)


def _rows_where(sel_rows: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select per-row between two (batch, rows, d) tensors."""
    return engine.where(sel_rows[None, :, None], a, b)


def _dual_block_forward(x, p_p, p_c, sel: np.ndarray | None, cfg: LayerConfig,
                        mask: np.ndarray, positions: np.ndarray) -> Tensor:
    """One block where rows with sel=True use the `p_c` parameter bank.

    Keys and values are mixed per source row before attention, so context
    columns are always encoded by the reader bank even when a gist row is
    the query.
    """
    if p_c is None or sel is None or not sel.any():
        return block_forward(x, p_p, cfg, mask, positions)

    def heads_where(a, b):
        return engine.where(sel[None, None, :, None], a, b)

    def branch(p):
        a_in = rmsnorm(x, p.g_pre_attn, cfg.rms_eps)
        q = project_heads(a_in, p.wq, cfg.n_heads, cfg.head_dim)
        k = project_heads(a_in, p.wk, cfg.n_kv_heads, cfg.head_dim)
        v = project_heads(a_in, p.wv, cfg.n_kv_heads, cfg.head_dim)
        return q, k, v

    (qp, kp, vp), (qc, kc, vc) = branch(p_p), branch(p_c)
    q = rope_apply(heads_where(qc, qp), positions, cfg.rope_base)
    k = rope_apply(heads_where(kc, kp), positions, cfg.rope_base)
    v = heads_where(vc, vp)
    ctx = multihead_attend(q, k, v, mask, cfg.n_rep, cfg.logit_scale)
    b, s, _ = ctx.shape
    flat = ctx.reshape(b * s, ctx.shape[-1])
    attn = _rows_where(sel,
                       engine.matmul(flat, p_c.wo).reshape(b, s, cfg.d_model),
                       engine.matmul(flat, p_p.wo).reshape(b, s, cfg.d_model))
    h = x + _rows_where(sel, rmsnorm(attn, p_c.g_post_attn, cfg.rms_eps),
                        rmsnorm(attn, p_p.g_post_attn, cfg.rms_eps))
    m_p = rmsnorm(h, p_p.g_pre_mlp, cfg.rms_eps)
    m_c = rmsnorm(h, p_c.g_pre_mlp, cfg.rms_eps)
    y = _rows_where(sel, rmsnorm(mlp_forward(m_c, p_c, cfg), p_c.g_post_mlp, cfg.rms_eps),
                    rmsnorm(mlp_forward(m_p, p_p, cfg), p_p.g_post_mlp, cfg.rms_eps))
    return h + y


def _embed_rows(bundle: ModelBundle, ids: np.ndarray) -> Tensor:
    flat = engine.getitem(bundle.params.embed, ids.reshape(-1))
    return flat.reshape(*ids.shape, bundle.cfg.d_model)


def _gist_rows(bundle: ModelBundle, m: int, batch: int) -> Tensor:
    if bundle.gist_embed is None:
        raise ValueError("bundle has no gist embeddings")
    if m > bundle.gist_embed.shape[0]:
        raise ValueError(f"gist bank holds {bundle.gist_embed.shape[0]} rows, "
                         f"need {m}")
    g = engine.getitem(bundle.gist_embed, np.arange(m))
    ones = np.ones((batch, 1, 1), dtype=bundle.gist_embed.dtype)
    return g.reshape(1, m, bundle.cfg.d_model) * ones


def _run_recording(bundle: ModelBundle, x: Tensor, mask: np.ndarray,
                   positions: np.ndarray, sel: np.ndarray | None) -> tuple:
    """Forward through all blocks; collect per-layer (inputs, outputs)."""
    inputs, outputs = [], []
    for j in range(bundle.n_layers):
        inputs.append(x)
        p_c = bundle.blocks_c[j] if bundle.blocks_c is not None else None
        x = _dual_block_forward(x, bundle.params.blocks[j], p_c, sel,
                                bundle.cfg, mask, positions)
        outputs.append(x)
    return inputs, outputs


def _pool_matrix(n_ctx: int, xi: int, dtype) -> np.ndarray:
    m = math.ceil(n_ctx / xi)
    P = np.zeros((m, n_ctx), dtype=dtype)
    for k in range(m):
        lo, hi = k * xi, min((k + 1) * xi, n_ctx)
        P[k, lo:hi] = 1.0 / (hi - lo)
    return P


def avgpool_states(states: np.ndarray, xi: int) -> np.ndarray:
    """Window means over the row axis; the last window may be shorter.

    Accepts (n, d) or (batch, n, d).
    """
    states = np.asarray(states)
    P = _pool_matrix(states.shape[-2], xi, states.dtype)
    return P @ states


def compress_context(bundle: ModelBundle, ccfg: CompressionConfig,
                     ctx_ids: np.ndarray) -> CompressedCache:
    """Run the compression pass over (batch, n_ctx) token ids."""
    ctx_ids = np.asarray(ctx_ids)
    if ctx_ids.ndim != 2:
        raise ValueError("ctx_ids must be (batch, n_ctx)")
    batch, n = ctx_ids.shape
    cfg, method = bundle.cfg, ccfg.method
    dtype = bundle.params.embed.dtype
    bos = np.full((batch, 1), ccfg.bos_id, dtype=ctx_ids.dtype)

    if method == Method.NO_CONTEXT:
        x = _embed_rows(bundle, bos)
        inputs, _ = _run_recording(bundle, x, np.ones((1, 1), bool),
                                   np.zeros(1, int), None)
        return CompressedCache(inputs, np.zeros(1, dtype=np.int64), 1,
                               method, ccfg.xi, n)

    if method in (Method.FULL, Method.AVG_POOL):
        ids = np.concatenate([bos, ctx_ids], axis=1)
        x = _embed_rows(bundle, ids)
        mask = np.tril(np.ones((n + 1, n + 1), dtype=bool))
        inputs, _ = _run_recording(bundle, x, mask, np.arange(n + 1), None)
        if method == Method.FULL:
            positions = np.arange(n + 1, dtype=np.int64)
            states = inputs
        else:
            P = _pool_matrix(n, ccfg.xi, dtype)
            states = [engine.concat([h[:, :1], engine.matmul(Tensor(P), h[:, 1:])],
                                    axis=1) for h in inputs]
            ends = [min((k + 1) * ccfg.xi, n) for k in range(P.shape[0])]
            positions = np.array([0] + ends, dtype=np.int64)
        return CompressedCache(states, positions, n + 1, method, ccfg.xi, n)

    m = math.ceil(n / ccfg.xi)
    if method in (Method.GIST, Method.OFFSET_GIST, Method.SEP_GIST,
                  Method.SEP_OFFSET_GIST):
        layout = appended_layout(n, ccfg.xi, bos=True)
        ids = np.concatenate([bos, ctx_ids], axis=1)
        x = engine.concat([_embed_rows(bundle, ids),
                           _gist_rows(bundle, m, batch)], axis=1)
        mask = build_causal(layout)
        positions = np.arange(len(layout), dtype=np.int64)
        sel = layout.roles == GIST_ROLE
        inputs, outputs = _run_recording(bundle, x, mask, positions, sel)
        slot_src = outputs if method in OFFSET_METHODS else inputs
        slot_rows = np.flatnonzero(sel)
        states = [engine.concat(
            [inp[:, :1], engine.getitem(src, (slice(None), slot_rows))], axis=1)
            for inp, src in zip(inputs, slot_src)]
        cache_pos = np.concatenate([[0], positions[slot_rows]]).astype(np.int64)
        return CompressedCache(states, cache_pos, n + 1, method, ccfg.xi, n)

    # GIST_POOL: interspersed gists, pooling mask, offset states, dual bank
    layout = interspersed_layout(n, ccfg.xi, bos=True)
    s_len = len(layout)
    is_gist = layout.roles == GIST_ROLE
    ids_full = np.full((batch, s_len), ccfg.bos_id, dtype=ctx_ids.dtype)
    ids_full[:, layout.roles == CONTEXT_ROLE] = ctx_ids
    emb = _embed_rows(bundle, ids_full)
    scatter = np.zeros((s_len, m), dtype=dtype)
    scatter[np.flatnonzero(is_gist), np.arange(m)] = 1.0
    gists = engine.matmul(Tensor(scatter), _gist_rows(bundle, m, batch))
    x = engine.where(is_gist[None, :, None], gists, emb)
    mask = build_gistpool_mask(layout, ccfg.knobs)
    positions = np.arange(s_len, dtype=np.int64)
    inputs, outputs = _run_recording(bundle, x, mask, positions, is_gist)
    slot_rows = np.flatnonzero(is_gist)
    states = [engine.concat(
        [inp[:, :1], engine.getitem(out, (slice(None), slot_rows))], axis=1)
        for inp, out in zip(inputs, outputs)]
    cache_pos = np.concatenate([[0], positions[slot_rows]]).astype(np.int64)
    return CompressedCache(states, cache_pos, s_len, method, ccfg.xi, n)


def predict_with_cache(bundle: ModelBundle, cache: CompressedCache,
                       qa_ids: np.ndarray) -> Tensor:
    """Next-token logits at each of the (batch, n_qa) prediction rows.

    Prediction rows attend every cached slot plus earlier prediction rows;
    cached states are read with the reader bank regardless of method.
    """
    qa_ids = np.asarray(qa_ids)
    batch, t = qa_ids.shape
    cfg = bundle.cfg
    n_cached = cache.n_slots + 1
    live = _embed_rows(bundle, qa_ids)
    live_pos = cache.query_start + np.arange(t, dtype=np.int64)
    kv_pos = np.concatenate([cache.positions, live_pos])
    mask = np.concatenate([np.ones((t, n_cached), dtype=bool),
                           np.tril(np.ones((t, t), dtype=bool))], axis=1)

    for j in range(bundle.n_layers):
        p = bundle.params.blocks[j]
        a_live = rmsnorm(live, p.g_pre_attn, cfg.rms_eps)
        a_cached = rmsnorm(cache.states[j], p.g_pre_attn, cfg.rms_eps)
        kv = engine.concat([a_cached, a_live], axis=1)
        attn = attend_rows(a_live, kv, p, cfg, mask, live_pos, kv_pos)
        h = live + rmsnorm(attn, p.g_post_attn, cfg.rms_eps)
        m_in = rmsnorm(h, p.g_pre_mlp, cfg.rms_eps)
        live = h + rmsnorm(mlp_forward(m_in, p, cfg), p.g_post_mlp, cfg.rms_eps)

    final = rmsnorm(live, bundle.params.g_final, cfg.rms_eps)
    flat = engine.matmul(final.reshape(batch * t, cfg.d_model),
                         bundle.params.unembed)
    return flat.reshape(batch, t, bundle.vocab_size)


def two_phase_logits(bundle: ModelBundle, ccfg: CompressionConfig,
                     ctx_ids: np.ndarray, qa_ids: np.ndarray) -> Tensor:
    return predict_with_cache(bundle, compress_context(bundle, ccfg, ctx_ids), qa_ids)


def answer_loss(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted cross-entropy; weights select the supervised positions."""
    return engine.cross_entropy_logits(logits, targets, weights)


def train_step(bundle: ModelBundle, ccfg: CompressionConfig, opt,
               ctx_ids: np.ndarray, qa_ids: np.ndarray,
               targets: np.ndarray, weights: np.ndarray) -> float:
    opt.zero_grad()
    logits = two_phase_logits(bundle, ccfg, ctx_ids, qa_ids)
    loss = answer_loss(logits, targets, weights)
    loss.backward()
    opt.step()
    return loss.item()


def greedy_decode(bundle: ModelBundle, cache: CompressedCache,
                  prompt_ids: np.ndarray, n_new: int) -> np.ndarray:
    """Argmax continuation of (batch, t) prompts against a fixed cache."""
    ids = np.asarray(prompt_ids).copy()
    for _ in range(n_new):
        logits = predict_with_cache(bundle, cache, ids)
        nxt = np.argmax(logits.data[:, -1, :], axis=-1)
        ids = np.concatenate([ids, nxt[:, None].astype(ids.dtype)], axis=1)
    return ids[:, prompt_ids.shape[1]:]


def save_cache(path, cache: CompressedCache) -> None:
    arrays = {f"layer{j}": s.data for j, s in enumerate(cache.states)}
    arrays["positions"] = cache.positions
    write_blob(path, "cache", CACHE_VERSION,
               {"method": cache.method.value, "xi": cache.xi,
                "n_ctx": cache.n_ctx, "query_start": cache.query_start,
                "n_layers": len(cache.states)}, arrays)


def load_cache(path) -> CompressedCache:
    meta, arrays, _ = read_blob(path, expect_kind="cache")
    states = [Tensor(arrays[f"layer{j}"]) for j in range(meta["n_layers"])]
    return CompressedCache(states, arrays["positions"], meta["query_start"],
                           Method(meta["method"]), meta["xi"], meta["n_ctx"])
