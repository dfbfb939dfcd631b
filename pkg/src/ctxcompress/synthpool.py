"""Single-layer mean-pooling experiments.

A lone transformer block is trained to write window means of its context
rows into trailing gist slots. The context is either unit-sphere noise
(HYPERSPHERE) or rows of a fixed low-rank table standing in for learned
vocabulary embeddings (VOCAB_PROXY). Context length is fixed at N or
resampled per batch from {N/2, N/2+xi, ..., N} (VARIABLE). The mask is
either plain causal (STANDARD) or the pooling bottleneck where each gist
row sees exactly its own window (POOL). Success is measured by nearest-
neighbor accuracy: a predicted gist row must be closest to its own target
among all targets of the sample.

The interesting contrast: with the POOL mask the task is learnable in all
regimes, while the STANDARD mask degrades sharply when lengths vary,
because the gist rows can no longer rely on absolute positions. Freezing
gist position indices at 0 (FROZEN_ZERO) partially restores it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import engine
from .compress import avgpool_states
from .engine import Adam, Tensor
from .layers import BlockParams, LayerConfig, block_forward, init_block
from .masks import appended_layout, build_causal, build_pool_mask
from .rng import substream

HEAD_CONFIGS = {"1/1": (1, 1), "8/8": (8, 8), "8/4": (8, 4)}
SOURCES = ("HYPERSPHERE", "VOCAB_PROXY")
REGIMES = ("FIXED", "VARIABLE")
MASKS = ("STANDARD", "POOL")
GIST_POSITIONS = ("SEQUENTIAL", "FROZEN_ZERO")

VOCAB_PROXY_ROWS = 4096
DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True)
class SynthConfig:
    N: int = 128
    xi: int = 1
    source: str = "HYPERSPHERE"
    regime: str = "FIXED"
    mask: str = "POOL"
    heads: str = "1/1"
    gist_positions: str = "SEQUENTIAL"
    lr: float = 1e-4
    steps: int = 10000
    batch: int = 64
    d_model: int = 128
    mlp_hidden: int = 512
    seed: int = 0
    eval_samples: int = 64
    # early stop: evaluate every `eval_every` steps and stop once accuracy
    # reaches `stop_accuracy` (None disables; meant for cells expected to
    # saturate, stopping can only under-report their accuracy)
    eval_every: int = 0
    stop_accuracy: float | None = None

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.mask not in MASKS:
            raise ValueError(f"unknown mask {self.mask!r}")
        if self.heads not in HEAD_CONFIGS:
            raise ValueError(f"unknown head config {self.heads!r}")
        if self.gist_positions not in GIST_POSITIONS:
            raise ValueError(f"unknown gist position scheme {self.gist_positions!r}")
        if self.N % self.xi != 0 or (self.N // 2) % self.xi != 0:
            raise ValueError("N and N/2 must be multiples of xi")

    def layer_config(self) -> LayerConfig:
        n_heads, n_kv = HEAD_CONFIGS[self.heads]
        return LayerConfig(d_model=self.d_model, n_heads=n_heads,
                           n_kv_heads=n_kv, head_dim=self.d_model // n_heads,
                           mlp_hidden=self.mlp_hidden)

    def length_grid(self) -> np.ndarray:
        if self.regime == "FIXED":
            return np.array([self.N])
        return np.arange(self.N // 2, self.N + 1, self.xi)


@dataclass
class SynthSample:
    """One sequence: context rows then zero placeholder rows for gists.

    The gist rows are filled with the learnable bank at train time; the
    targets hold zeros at context rows and window means at gist rows.
    """

    inputs: np.ndarray      # (n_ctx + n_gist, d)
    targets: np.ndarray     # same shape
    n_ctx: int
    xi: int

    @property
    def n_gist(self) -> int:
        return self.inputs.shape[0] - self.n_ctx


def pooled_targets(context_rows: np.ndarray, xi: int) -> np.ndarray:
    return avgpool_states(context_rows, xi)


def _vocab_proxy_table(cfg: SynthConfig) -> np.ndarray:
    """Fixed low-rank table: rank d/4 Gaussian plus small isotropic noise."""
    rng = substream(0, "vocab-proxy", cfg.d_model)
    rank = cfg.d_model // 4
    Z = rng.normal(size=(VOCAB_PROXY_ROWS, rank))
    A = rng.normal(size=(rank, cfg.d_model)) / np.sqrt(rank)
    noise = 0.05 * rng.normal(size=(VOCAB_PROXY_ROWS, cfg.d_model))
    return Z @ A + noise


def _context_rows(cfg: SynthConfig, rng, batch: int, n: int,
                  vocab: np.ndarray | None) -> np.ndarray:
    if cfg.source == "HYPERSPHERE":
        x = rng.normal(size=(batch, n, cfg.d_model))
        return x / np.linalg.norm(x, axis=-1, keepdims=True)
    idx = rng.integers(0, vocab.shape[0], size=(batch, n))
    return vocab[idx]


def gen_sample(cfg: SynthConfig, seed: int) -> SynthSample:
    rng = substream(seed, "synth-sample")
    n = int(rng.choice(cfg.length_grid()))
    vocab = _vocab_proxy_table(cfg) if cfg.source == "VOCAB_PROXY" else None
    ctx = _context_rows(cfg, rng, 1, n, vocab)[0]
    m = n // cfg.xi
    inputs = np.concatenate([ctx, np.zeros((m, cfg.d_model))], axis=0)
    targets = np.concatenate([np.zeros((n, cfg.d_model)),
                              pooled_targets(ctx, cfg.xi)], axis=0)
    return SynthSample(inputs, targets, n, cfg.xi)


def nn_accuracy(predicted: np.ndarray, targets: np.ndarray) -> float:
    """Fraction of rows whose nearest target row is the one at their index.

    Accepts (m, d) or (batch, m, d); batched inputs are scored per sample.
    """
    predicted = np.asarray(predicted)
    targets = np.asarray(targets)
    if predicted.shape != targets.shape:
        raise ValueError("prediction/target shape mismatch")
    if predicted.ndim == 2:
        predicted, targets = predicted[None], targets[None]
    hits, total = 0, 0
    for p, t in zip(predicted, targets):
        d2 = ((p[:, None, :] - t[None, :, :]) ** 2).sum(axis=-1)
        hits += int((np.argmin(d2, axis=1) == np.arange(p.shape[0])).sum())
        total += p.shape[0]
    return hits / total


@dataclass
class TrainResult:
    block: BlockParams
    gist_bank: Tensor
    accuracy: float
    losses: list = field(default_factory=list)
    status: str = "done"        # done | early_stop | diverged
    steps_run: int = 0


def _masks_for(cfg: SynthConfig, n: int):
    layout = appended_layout(n, cfg.xi, bos=False)
    if cfg.mask == "POOL":
        mask = build_pool_mask(layout)
    else:
        mask = build_causal(layout)
    scheme = "sequential" if cfg.gist_positions == "SEQUENTIAL" else "frozen_zero"
    return mask, layout.positions(scheme)


def _forward_gists(cfg: SynthConfig, lcfg: LayerConfig, block: BlockParams,
                   bank: Tensor, ctx: np.ndarray, mask, positions) -> Tensor:
    b, n, d = ctx.shape
    m = n // cfg.xi
    ones = Tensor(np.ones((b, 1, 1)))
    gist_rows = bank[:m].reshape((1, m, d)) * ones
    x = engine.concat([Tensor(ctx), gist_rows], axis=1)
    out = block_forward(x, block, lcfg, mask, positions)
    return out[:, n:, :]


def evaluate(cfg: SynthConfig, lcfg: LayerConfig, block: BlockParams,
             bank: Tensor, eval_seed: int = 0) -> float:
    """nn_accuracy over fresh samples, cycling the length grid."""
    vocab = _vocab_proxy_table(cfg) if cfg.source == "VOCAB_PROXY" else None
    grid = cfg.length_grid()
    per_batch = 16
    n_batches = max(1, cfg.eval_samples // per_batch)
    hits, total = 0.0, 0
    for i in range(n_batches):
        rng = substream(eval_seed, "synth-eval", cfg.N, cfg.xi, i)
        n = int(grid[i % len(grid)])
        ctx = _context_rows(cfg, rng, per_batch, n, vocab)
        mask, positions = _masks_for(cfg, n)
        pred = _forward_gists(cfg, lcfg, block, bank, ctx, mask, positions)
        acc = nn_accuracy(pred.data, pooled_targets(ctx, cfg.xi))
        hits += acc * per_batch
        total += per_batch
    return hits / total


def train_layer(cfg: SynthConfig) -> TrainResult:
    lcfg = cfg.layer_config()
    init_rng = substream(cfg.seed, "synth-init", cfg.N, cfg.xi, cfg.mask)
    block = init_block(lcfg, init_rng)
    bank = Tensor(init_rng.normal(size=(cfg.N // cfg.xi, cfg.d_model))
                  / np.sqrt(cfg.d_model), requires_grad=True)
    params = [t for _, t in block.named("b.")] + [bank]
    opt = Adam([(t, 1.0) for t in params], lr=cfg.lr)
    data_rng = substream(cfg.seed, "synth-data", cfg.N, cfg.xi, cfg.mask)
    vocab = _vocab_proxy_table(cfg) if cfg.source == "VOCAB_PROXY" else None
    grid = cfg.length_grid()
    result = TrainResult(block, bank, 0.0)
    for step in range(cfg.steps):
        n = int(data_rng.choice(grid))
        ctx = _context_rows(cfg, data_rng, cfg.batch, n, vocab)
        mask, positions = _masks_for(cfg, n)
        pred = _forward_gists(cfg, lcfg, block, bank, ctx, mask, positions)
        diff = pred - Tensor(pooled_targets(ctx, cfg.xi))
        loss = (diff * diff).mean()
        value = float(loss.data)
        result.losses.append(value)
        if not np.isfinite(value) or value > DIVERGENCE_LIMIT:
            result.status = "diverged"
            result.steps_run = step
            result.accuracy = 0.0
            return result
        for t in params:
            t.grad = None
        loss.backward()
        opt.step()
        result.steps_run = step + 1
        if (cfg.eval_every and cfg.stop_accuracy is not None
                and (step + 1) % cfg.eval_every == 0):
            acc = evaluate(cfg, lcfg, block, bank)
            if acc >= cfg.stop_accuracy:
                result.status = "early_stop"
                result.accuracy = acc
                return result
    result.accuracy = evaluate(cfg, lcfg, block, bank)
    return result


GRID_FIELDS = ("N", "xi", "source", "regime", "mask", "heads",
               "gist_positions", "best_accuracy", "best_lr", "steps")


def run_grid(cells, lrs=(1e-3, 1e-4, 1e-5), n_seeds: int = 3,
             seed_base: int = 0, progress=None) -> list:
    """Train each cell over seeds x lrs; report the best accuracy per cell.

    A cell with `stop_accuracy` set skips its remaining runs once the best
    so far reaches the bar (one-sided: this can only lower the reported
    best). Diverged runs score 0 and are noted; the grid always continues.
    """
    rows = []
    for cell in cells:
        best_acc, best_lr, statuses = -1.0, None, []
        for lr in lrs:
            for seed in range(n_seeds):
                if cell.stop_accuracy is not None and best_acc >= cell.stop_accuracy:
                    break
                res = train_layer(replace(cell, lr=lr, seed=seed_base + seed))
                statuses.append(res.status)
                if res.accuracy > best_acc:
                    best_acc, best_lr = res.accuracy, lr
                if progress is not None:
                    progress(cell, lr, seed, res)
        rows.append({
            "N": cell.N, "xi": cell.xi, "source": cell.source,
            "regime": cell.regime, "mask": cell.mask, "heads": cell.heads,
            "gist_positions": cell.gist_positions,
            "best_accuracy": best_acc, "best_lr": best_lr,
            "steps": cell.steps,
            "statuses": ";".join(statuses),
        })
    return rows
