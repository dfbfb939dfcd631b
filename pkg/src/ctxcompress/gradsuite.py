"""Finite-difference checks over every trainable architecture.

Each entry rebuilds a small but structurally faithful training graph (same
forward code, same parameter sets as the real runs) and compares tape
gradients against central differences. The tolerance is for 64-bit floats.
"""

from __future__ import annotations

import numpy as np

from .compress import (CompressionConfig, Method, answer_loss, make_bundle,
                       two_phase_logits)
from .engine import Tensor, grad_check
from .layers import init_block
from .recalltask import VOCAB_SIZE, RecallSpec, gen_recall, _qa_arrays
from .rng import substream
from .synthpool import SynthConfig, _forward_gists, _masks_for, pooled_targets

GRAD_TOL = 1e-4


def _synthpool_case(name: str, heads: str, d_model: int, mlp_hidden: int):
    cfg = SynthConfig(N=8, xi=2, heads=heads, d_model=d_model,
                      mlp_hidden=mlp_hidden, batch=1, steps=1, lr=1e-3,
                      eval_samples=16)
    lcfg = cfg.layer_config()
    rng = substream(0, "grad-suite", name)
    block = init_block(lcfg, rng)
    bank = Tensor(rng.normal(size=(cfg.N // cfg.xi, cfg.d_model)), requires_grad=True)
    ctx = rng.normal(size=(1, cfg.N, cfg.d_model))
    ctx /= np.linalg.norm(ctx, axis=-1, keepdims=True)
    target = Tensor(pooled_targets(ctx, cfg.xi))
    mask, positions = _masks_for(cfg, cfg.N)

    def loss_fn():
        pred = _forward_gists(cfg, lcfg, block, bank, ctx, mask, positions)
        diff = pred - target
        return (diff * diff).mean()

    params = dict(block.named("block."))
    params["bank"] = bank
    return name, loss_fn, params


def _recall_case(method: Method, xi: int):
    name = f"recall-{method.value}-xi{xi}"
    spec = RecallSpec(method=method, xi=xi, n_layers=2, d_model=64,
                      n_heads=4, n_kv_heads=2, mlp_hidden=128, n_pairs=4)
    ccfg = spec.compression_config()
    rng = substream(0, "grad-suite", name)
    bundle = make_bundle(spec.layer_config(), spec.n_layers, VOCAB_SIZE,
                         ccfg, rng)
    batch = gen_recall(2, spec.n_pairs, rng)
    qa_ids, targets, weights = _qa_arrays(batch)

    def loss_fn():
        logits = two_phase_logits(bundle, ccfg, batch["ctx"], qa_ids)
        return answer_loss(logits, targets, weights)

    params = dict(bundle.named())
    if method == Method.SEP_GIST:
        # Input-state caching never reads gist-row outputs of the final
        # layer, so the last separated block is dead there by construction.
        dead = f"blocks_c.{spec.n_layers - 1}."
        params = {k: v for k, v in params.items() if not k.startswith(dead)}
    return name, loss_fn, params


def suite_cases():
    """The architectures exercised by the pooling grid and the recall runs."""
    cases = [
        _synthpool_case("synthpool-1/1-d16", "1/1", 16, 64),
        _synthpool_case("synthpool-1/1-d128", "1/1", 128, 512),
        _synthpool_case("synthpool-8/8-d128", "8/8", 128, 512),
        _synthpool_case("synthpool-8/4-d128", "8/4", 128, 512),
    ]
    for method in Method:
        cases.append(_recall_case(method, xi=2 if method != Method.FULL else 1))
    return cases


def run_grad_suite(n_samples: int = 4) -> list:
    """One row per architecture: parameter tensor count and worst FD error."""
    rows = []
    for name, loss_fn, params in suite_cases():
        err = grad_check(loss_fn, params, n_samples=n_samples)
        rows.append({"arch": name, "n_tensors": len(params),
                     "max_rel_err": err, "pass": err < GRAD_TOL})
    return rows
