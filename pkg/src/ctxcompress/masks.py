"""Attention-mask builders and validation.

Masks are boolean (rows, cols) matrices; entry (i, j) is True when query
row i may attend key column j. Four builders cover the mask families used
across the package: plain causal, the appended-gist bottleneck mask, the
single-layer pool mask, and the interspersed gist-pool mask with its full
knob set. `validate_mask` re-derives the expected pattern through an
independent rule formulation and reports granular violations.

Layout conventions. Appended layouts order rows [BOS, CONTEXT*n, GIST*m,
QUERY*q, ANSWER*a]; interspersed layouts place one gist after every xi
context tokens (the final window may be shorter). Window k is the k-th
group of xi context tokens, counted over context tokens only, in both
layout kinds. The single-layer pooling experiments use layouts without a
BOS row (`bos=False`); BOS-specific rules apply only when BOS is present.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .binio import atomic_write_text, read_blob, write_blob

BOS, CONTEXT, GIST, QUERY, ANSWER = 0, 1, 2, 3, 4
ROLE_NAMES = {BOS: "bos", CONTEXT: "context", GIST: "gist", QUERY: "query", ANSWER: "answer"}

MASK_BITSET_VERSION = 1


@dataclass(frozen=True)
class GistPoolKnobs:
    """Interspersed-mask ablation switches.

    `pooling_windows` is how many windows back a gist row may attend,
    counting its own window; None means unbounded (back to the start of
    the sequence), which always implies attending BOS.
    """

    pooling_windows: int | None = 5
    contexts_attend_gists: bool = False
    gists_attend_gists: bool = True
    gists_attend_self: bool = True
    gists_attend_bos: bool = True

    def __post_init__(self):
        if self.pooling_windows is not None and self.pooling_windows < 1:
            raise ValueError("pooling_windows must be >= 1 or None (unbounded)")
        if self.pooling_windows is None and not self.gists_attend_bos:
            object.__setattr__(self, "gists_attend_bos", True)


DEFAULT_KNOBS = GistPoolKnobs()


def table8_knob_grid() -> list:
    """All 40 knob combinations of the published ablation grid."""
    combos = []
    flags = (False, True)
    for w in (1, 5, None):
        for ctx_g in flags:
            for g_g in flags:
                for g_self in flags:
                    for g_bos in ((True,) if w is None else flags):
                        combos.append(GistPoolKnobs(w, ctx_g, g_g, g_self, g_bos))
    return combos


class SequenceLayout:
    """Role tags of one merged sequence plus its compression rate."""

    def __init__(self, roles, xi: int, kind: str, bos: bool):
        self.roles = np.asarray(roles, dtype=np.int8)
        self.xi = int(xi)
        self.kind = kind
        self.bos = bool(bos)
        if self.xi < 1:
            raise ValueError("xi must be a positive integer")
        if kind not in ("appended", "interspersed"):
            raise ValueError(f"unknown layout kind {kind!r}")
        if self.bos:
            if len(self.roles) == 0 or self.roles[0] != BOS:
                raise ValueError("layouts with bos=True must start with the BOS role")
            if (self.roles == BOS).sum() != 1:
                raise ValueError("exactly one BOS role is allowed")
        elif (self.roles == BOS).any():
            raise ValueError("bos=False layout contains a BOS role")
        if self.n_gist and self.n_gist != math.ceil(self.n_ctx / self.xi):
            raise ValueError(
                f"gist count {self.n_gist} != ceil({self.n_ctx}/{self.xi})")

    def __len__(self):
        return len(self.roles)

    @property
    def n_ctx(self) -> int:
        return int((self.roles == CONTEXT).sum())

    @property
    def n_gist(self) -> int:
        return int((self.roles == GIST).sum())

    def rows_of(self, role: int) -> np.ndarray:
        return np.flatnonzero(self.roles == role)

    def context_windows(self) -> np.ndarray:
        """Window index of each context token, in context order."""
        return np.arange(self.n_ctx) // self.xi

    def positions(self, gist_scheme: str = "sequential") -> np.ndarray:
        """Per-row rotary position indices.

        sequential: shared counter over all rows (gists occupy real slots).
        frozen_zero: shared counter with every gist position forced to 0.
        separate: one counter for non-gist rows, a second counter starting
        at 0 for gist rows.
        """
        n = len(self.roles)
        if gist_scheme == "sequential":
            return np.arange(n, dtype=np.int64)
        if gist_scheme == "frozen_zero":
            pos = np.arange(n, dtype=np.int64)
            pos[self.roles == GIST] = 0
            return pos
        if gist_scheme == "separate":
            is_gist = self.roles == GIST
            pos = np.empty(n, dtype=np.int64)
            pos[~is_gist] = np.arange((~is_gist).sum())
            pos[is_gist] = np.arange(is_gist.sum())
            return pos
        raise ValueError(f"unknown gist position scheme {gist_scheme!r}")


def _window_sizes(n_ctx: int, xi: int) -> list:
    if xi < 1:
        raise ValueError("xi must be a positive integer")
    m = math.ceil(n_ctx / xi)
    return [min(xi, n_ctx - k * xi) for k in range(m)]


def appended_layout(n_ctx: int, xi: int, n_query: int = 0, n_answer: int = 0,
                    bos: bool = True, with_gists: bool = True) -> SequenceLayout:
    roles = ([BOS] if bos else [])
    roles += [CONTEXT] * n_ctx
    if with_gists:
        roles += [GIST] * len(_window_sizes(n_ctx, xi))
    roles += [QUERY] * n_query + [ANSWER] * n_answer
    return SequenceLayout(roles, xi, "appended", bos)


def interspersed_layout(n_ctx: int, xi: int, n_query: int = 0, n_answer: int = 0,
                        bos: bool = True) -> SequenceLayout:
    roles = [BOS] if bos else []
    for size in _window_sizes(n_ctx, xi):
        roles += [CONTEXT] * size + [GIST]
    roles += [QUERY] * n_query + [ANSWER] * n_answer
    return SequenceLayout(roles, xi, "interspersed", bos)


# -- builders ----------------------------------------------------------------


def build_causal(layout: SequenceLayout) -> np.ndarray:
    n = len(layout)
    return np.tril(np.ones((n, n), dtype=bool))


def build_gist_mask(layout: SequenceLayout) -> np.ndarray:
    """Bottleneck mask: query/answer rows reach the context only via gists."""
    if layout.kind != "appended" or layout.n_gist == 0:
        raise ValueError("build_gist_mask requires an appended layout with gist rows")
    mask = build_causal(layout)
    qa_rows = np.isin(layout.roles, (QUERY, ANSWER))
    ctx_cols = layout.roles == CONTEXT
    mask[np.ix_(qa_rows, ctx_cols)] = False
    return mask


def build_pool_mask(layout: SequenceLayout, gists_attend_self: bool = True,
                    strict: bool = True) -> np.ndarray:
    """Single-layer pool mask: gist row k sees exactly its own window.

    Context rows stay causal. Gist rows get their window columns, their own
    row (toggleable), and the BOS column when the layout has one. Query and
    answer rows, when present, behave as in the bottleneck mask.
    """
    if layout.kind != "appended" or layout.n_gist == 0:
        raise ValueError("build_pool_mask requires an appended layout with gist rows")
    if strict and layout.n_ctx % layout.xi != 0:
        raise ValueError(
            f"context length {layout.n_ctx} not divisible by xi={layout.xi}")
    n = len(layout)
    roles = layout.roles
    mask = np.zeros((n, n), dtype=bool)
    tri = build_causal(layout)

    non_gist_pre = np.isin(roles, (BOS, CONTEXT))
    mask[np.ix_(non_gist_pre, non_gist_pre)] = tri[np.ix_(non_gist_pre, non_gist_pre)]

    gist_rows = layout.rows_of(GIST)
    ctx_cols = layout.rows_of(CONTEXT)
    win = layout.context_windows()
    for k, r in enumerate(gist_rows):
        mask[r, ctx_cols[win == k]] = True
        if gists_attend_self:
            mask[r, r] = True

    qa_rows = layout.rows_of(QUERY).tolist() + layout.rows_of(ANSWER).tolist()
    for r in qa_rows:
        mask[r, gist_rows] = True
        qa_prior = [r2 for r2 in qa_rows if r2 <= r]
        mask[r, qa_prior] = True

    if layout.bos:
        mask[:, 0] = True
    return mask


def build_gistpool_mask(layout: SequenceLayout,
                        knobs: GistPoolKnobs = DEFAULT_KNOBS) -> np.ndarray:
    """Interspersed mask: each gist pools a bounded span of recent windows."""
    if layout.kind != "interspersed" or layout.n_gist == 0:
        raise ValueError("build_gistpool_mask requires an interspersed layout with gist rows")
    n = len(layout)
    roles = layout.roles
    pos = np.arange(n)
    mask = np.zeros((n, n), dtype=bool)

    ctx_rows = layout.rows_of(CONTEXT)
    gist_rows = layout.rows_of(GIST)
    win = layout.context_windows()

    # context rows: causal over BOS+context, gists visible only via the knob
    ctx_like = np.isin(roles, (BOS, CONTEXT))
    causal = pos[None, :] <= pos[:, None]
    mask[np.ix_(ctx_like, ctx_like)] = causal[np.ix_(ctx_like, ctx_like)]
    if knobs.contexts_attend_gists:
        earlier_gist = (roles[None, :] == GIST) & (pos[None, :] < pos[:, None])
        mask[ctx_rows] |= earlier_gist[ctx_rows]

    # gist rows: own window plus the previous pooling_windows-1 windows
    for g, r in enumerate(gist_rows):
        if knobs.pooling_windows is None:
            reach = win <= g
        else:
            reach = (win <= g) & (win > g - knobs.pooling_windows)
        mask[r, ctx_rows[reach]] = True
        if knobs.gists_attend_gists:
            mask[r, gist_rows[:g]] = True
        if knobs.gists_attend_self:
            mask[r, r] = True
        if knobs.gists_attend_bos and layout.bos:
            mask[r, 0] = True

    # query/answer rows: BOS + every gist + causal within query/answer
    qa = np.isin(roles, (QUERY, ANSWER))
    mask[np.ix_(qa, roles == GIST)] = True
    mask[np.ix_(qa, qa)] = causal[np.ix_(qa, qa)]

    if layout.bos:
        mask[roles != GIST, 0] = True
    return mask


# -- validation ---------------------------------------------------------------


def _expected_mask(layout: SequenceLayout, method: str, knobs: GistPoolKnobs | None,
                   gists_attend_self: bool) -> np.ndarray:
    """Rule-based re-derivation of the expected pattern, written as boolean
    algebra over role/position/window vectors (deliberately not sharing the
    builders' index-assignment code)."""
    roles = layout.roles
    n = len(roles)
    pos = np.arange(n)
    tri = pos[None, :] <= pos[:, None]
    is_ctx, is_gist = roles == CONTEXT, roles == GIST
    is_qa = (roles == QUERY) | (roles == ANSWER)
    is_bos = roles == BOS

    if method == "causal":
        return tri

    # window id per column/row; -1 where not a context token
    winc = np.full(n, -1)
    winc[is_ctx] = np.arange(is_ctx.sum()) // layout.xi
    gid = np.full(n, -1)
    gid[is_gist] = np.arange(is_gist.sum())

    if method == "gist":
        return tri & ~(is_qa[:, None] & is_ctx[None, :])

    if method == "pool":
        exp = np.zeros((n, n), dtype=bool)
        pre = is_bos | is_ctx
        exp |= (pre[:, None] & pre[None, :]) & tri
        exp |= is_gist[:, None] & is_ctx[None, :] & (gid[:, None] == winc[None, :])
        if gists_attend_self:
            exp |= np.diag(is_gist)
        exp |= is_qa[:, None] & is_gist[None, :]
        exp |= (is_qa[:, None] & is_qa[None, :]) & tri
        if layout.bos:
            exp[:, 0] = True
        return exp

    if method == "gistpool":
        knobs = knobs or DEFAULT_KNOBS
        exp = np.zeros((n, n), dtype=bool)
        pre = is_bos | is_ctx
        exp |= (pre[:, None] & pre[None, :]) & tri
        if knobs.contexts_attend_gists:
            exp |= (is_ctx[:, None] & is_gist[None, :]) & (pos[None, :] < pos[:, None])
        in_reach = winc[None, :] <= gid[:, None]
        if knobs.pooling_windows is not None:
            in_reach &= winc[None, :] > gid[:, None] - knobs.pooling_windows
        exp |= (is_gist[:, None] & is_ctx[None, :]) & in_reach
        if knobs.gists_attend_gists:
            exp |= (is_gist[:, None] & is_gist[None, :]) & (pos[None, :] < pos[:, None])
        if knobs.gists_attend_self:
            exp |= np.diag(is_gist)
        if knobs.gists_attend_bos and layout.bos:
            exp[is_gist, 0] = True
        exp |= is_qa[:, None] & is_gist[None, :]
        exp |= (is_qa[:, None] & is_qa[None, :]) & tri
        if layout.bos:
            exp[~is_gist, 0] = True
        return exp

    raise ValueError(f"unknown mask method {method!r}")


def _region(layout: SequenceLayout, i: int, j: int, method: str) -> str:
    ri, rj = layout.roles[i], layout.roles[j]
    if (ri == QUERY or ri == ANSWER) and rj == CONTEXT:
        return "bottleneck"
    if ri == GIST and rj == CONTEXT:
        return "pool-window" if method in ("pool", "gistpool") else "gist-context"
    return f"{ROLE_NAMES[int(ri)]}-{ROLE_NAMES[int(rj)]}"


def validate_mask(mask: np.ndarray, layout: SequenceLayout, method: str,
                  knobs: GistPoolKnobs | None = None,
                  gists_attend_self: bool = True) -> list:
    """Check structural invariants and the method's exact rule set.

    Returns a list of (rule, row, col) tuples; empty iff the mask is valid.
    """
    violations = []
    n = len(layout)
    if mask.shape != (n, n) or mask.dtype != np.bool_:
        return [("shape-or-dtype", -1, -1)]

    pos = np.arange(n)
    future = mask & (pos[None, :] > pos[:, None])
    for i, j in zip(*np.nonzero(future)):
        violations.append(("future", int(i), int(j)))
    for i in np.flatnonzero(~mask.any(axis=1)):
        violations.append(("empty-row", int(i), -1))
    expected = _expected_mask(layout, method, knobs, gists_attend_self)
    if layout.bos:
        for i in np.flatnonzero(~mask[:, 0] & expected[:, 0]):
            violations.append(("bos-column", int(i), 0))

    for i, j in zip(*np.nonzero(mask & ~expected & ~future)):
        violations.append((f"extra:{_region(layout, i, j, method)}", int(i), int(j)))
    missing = expected & ~mask
    if layout.bos:
        missing[:, 0] = False  # already reported as bos-column
    for i, j in zip(*np.nonzero(missing)):
        violations.append((f"missing:{_region(layout, i, j, method)}", int(i), int(j)))
    return violations


# -- export -------------------------------------------------------------------


def mask_to_text(mask: np.ndarray) -> str:
    return "\n".join("".join("1" if v else "0" for v in row) for row in mask) + "\n"


def text_to_mask(text: str) -> np.ndarray:
    rows = [line for line in text.strip().splitlines() if line]
    return np.array([[c == "1" for c in line] for line in rows], dtype=bool)


def save_mask_text(mask: np.ndarray, path) -> None:
    atomic_write_text(path, mask_to_text(mask))


def save_mask_bitset(mask: np.ndarray, path) -> None:
    write_blob(path, "mask-bitset", MASK_BITSET_VERSION,
               {"rows": int(mask.shape[0]), "cols": int(mask.shape[1])},
               {"bits": np.packbits(mask, axis=1)})


def load_mask_bitset(path) -> np.ndarray:
    meta, arrays, _ = read_blob(path, expect_kind="mask-bitset")
    bits = np.unpackbits(arrays["bits"], axis=1)[:, : meta["cols"]]
    return bits.astype(bool)
