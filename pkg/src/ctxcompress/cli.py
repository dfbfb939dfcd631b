"""Command-line front end: run manifests, summarize results, export masks.

Output layout: every run writes into one directory (flag > manifest field >
$CTXCOMPRESS_OUT/<kind> > ./runs/<kind>) and nowhere else. Each run leaves
`stamp.json` carrying the seed, a hash of the effective manifest, and the
package version; no timestamps, so reruns are byte-identical. Exit codes:
0 success, 1 acceptance violation, 2 config error.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import click
import numpy as np
import yaml

from . import __version__
from .binio import atomic_write_text, read_csv_rows, rows_to_csv
from .compress import Method
from .constructions import attention_gap_curve, required_scale_curve
from .gradsuite import GRAD_TOL, run_grad_suite
from .masks import (DEFAULT_KNOBS, GistPoolKnobs, appended_layout, build_causal,
                    build_gist_mask, build_gistpool_mask, build_pool_mask,
                    interspersed_layout, save_mask_bitset, save_mask_text)
from .recalltask import CHANCE_EXACT, RecallSpec, summarize_results, train_compare
from .synthpool import GRID_FIELDS, SynthConfig, run_grid

ENV_OUT = "CTXCOMPRESS_OUT"

KINDS = ("synthpool-grid", "recall-compare", "constructions", "grad-suite")


class ConfigError(Exception):
    """Manifest problem; the message names the offending field."""


def _hash_config(manifest: dict) -> str:
    return hashlib.sha256(
        json.dumps(manifest, sort_keys=True).encode()).hexdigest()


def _write_stamp(outdir: Path, manifest: dict) -> None:
    stamp = {"kind": manifest["kind"], "seed": manifest["seed"],
             "config_sha256": _hash_config(manifest),
             "code_version": __version__}
    atomic_write_text(outdir / "stamp.json",
                      json.dumps(stamp, sort_keys=True, indent=1) + "\n")


def _write_failures(outdir: Path, records: list) -> None:
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    atomic_write_text(outdir / "failures.jsonl", text)


def _field(cfg: dict, key: str, types, path: str, default="__required__"):
    if key not in cfg:
        if default != "__required__":
            return default
        raise ConfigError(f"{path}.{key}: missing required field")
    v = cfg[key]
    if types is float and isinstance(v, int):
        v = float(v)
    if not isinstance(v, types):
        names = getattr(types, "__name__", None) or "/".join(
            t.__name__ for t in types)
        raise ConfigError(f"{path}.{key}: expected {names}, "
                          f"got {type(v).__name__}")
    return v


def load_manifest(path, seed_override=None) -> dict:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"manifest: not parseable YAML ({e})")
    if not isinstance(raw, dict):
        raise ConfigError("manifest: top level must be a mapping")
    kind = _field(raw, "kind", str, "manifest")
    if kind not in KINDS:
        raise ConfigError(f"manifest.kind: {kind!r} is not one of {KINDS}")
    seed = _field(raw, "seed", int, "manifest", default=0)
    if seed_override is not None:
        seed = seed_override
    config = _field(raw, "config", dict, "manifest", default={})
    out = _field(raw, "output", str, "manifest", default=None)
    return {"kind": kind, "seed": seed, "config": config, "output": out}


def _resolve_outdir(manifest: dict, flag_out) -> Path:
    if flag_out:
        return Path(flag_out)
    if manifest["output"]:
        return Path(manifest["output"])
    return Path(os.environ.get(ENV_OUT, "runs")) / manifest["kind"]


# -- synthpool-grid ----------------------------------------------------------

_GRID_SHARED = {"steps": 10000, "batch": 64, "d_model": 128, "mlp_hidden": 512,
                "eval_samples": 64, "eval_every": 0, "stop_accuracy": None,
                "source": "HYPERSPHERE", "heads": "1/1",
                "gist_positions": "SEQUENTIAL"}


def _grid_cells(cfg: dict, seed: int) -> tuple:
    cells_raw = _field(cfg, "cells", list, "config")
    lrs = [float(x) for x in _field(cfg, "lrs", list, "config",
                                    default=[1e-3, 1e-4, 1e-5])]
    n_seeds = _field(cfg, "n_seeds", int, "config", default=3)
    shared = dict(_GRID_SHARED)
    for k in shared:
        if k in cfg:
            shared[k] = cfg[k]
    cells = []
    for i, cell in enumerate(cells_raw):
        if not isinstance(cell, dict):
            raise ConfigError(f"config.cells[{i}]: expected mapping")
        merged = {**shared, **cell}
        try:
            cells.append(SynthConfig(lr=lrs[0], seed=seed, **merged))
        except (ValueError, TypeError) as e:
            raise ConfigError(f"config.cells[{i}]: {e}")
    return cells, lrs, n_seeds


def _grid_cell_worker(args):
    cell, lrs, n_seeds, seed_base = args
    return run_grid([cell], lrs=lrs, n_seeds=n_seeds, seed_base=seed_base)[0]


def _run_synthpool_grid(manifest: dict, outdir: Path, jobs: int) -> int:
    cells, lrs, n_seeds = _grid_cells(manifest["config"], manifest["seed"])
    work = [(c, lrs, n_seeds, manifest["seed"]) for c in cells]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            rows = list(ex.map(_grid_cell_worker, work))
    else:
        rows = [_grid_cell_worker(w) for w in work]
    failures = [{"cell": {k: r[k] for k in GRID_FIELDS[:7]},
                 "statuses": r["statuses"]}
                for r in rows if "diverged" in r["statuses"]]
    rows_to_csv(outdir / "results.csv", rows, fields=GRID_FIELDS)
    _write_failures(outdir, failures)
    return 0


# -- recall-compare ----------------------------------------------------------

_RECALL_SHARED = ("n_layers", "d_model", "n_heads", "n_kv_heads", "mlp_hidden",
                  "n_pairs", "steps", "batch", "lr", "eval_size",
                  "train_queries")


def _recall_specs(cfg: dict, seed: int) -> tuple:
    methods_raw = _field(cfg, "methods", list, "config")
    n_seeds = _field(cfg, "n_seeds", int, "config", default=3)
    shared = {k: cfg[k] for k in _RECALL_SHARED if k in cfg}
    if "lr" in shared:
        shared["lr"] = float(shared["lr"])
    specs = []
    for i, m in enumerate(methods_raw):
        if not isinstance(m, dict) or "method" not in m:
            raise ConfigError(f"config.methods[{i}]: expected mapping "
                              "with a 'method' field")
        try:
            method = Method(m["method"])
            specs.append(RecallSpec(method=method, xi=m.get("xi", 1), **shared))
        except (ValueError, TypeError) as e:
            raise ConfigError(f"config.methods[{i}]: {e}")
    seeds = [seed + i for i in range(n_seeds)]
    return specs, seeds


def _recall_run_worker(args):
    spec, seed = args
    from .recalltask import train_recall
    res = train_recall(spec, seed)
    res.bundle = None
    res.losses = res.losses[-1:]  # keep artifacts small and comparable
    return res


def _run_recall_compare(manifest: dict, outdir: Path, jobs: int) -> int:
    specs, seeds = _recall_specs(manifest["config"], manifest["seed"])
    work = [(spec, seed) for spec in specs for seed in seeds]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_recall_run_worker, work))
    else:
        results = [_recall_run_worker(w) for w in work]
    from .recalltask import results_to_jsonl, summary_to_csv
    results_to_jsonl(outdir / "runs.jsonl", results)
    summary_to_csv(outdir / "summary.csv", results)
    _write_failures(outdir, [
        {"method": r.spec.method.value, "xi": r.spec.xi, "seed": r.seed,
         "status": r.status} for r in results if r.status != "done"])
    return 0


# -- constructions -----------------------------------------------------------

def _run_constructions(manifest: dict, outdir: Path, jobs: int) -> int:
    cfg = manifest["config"]
    seed = manifest["seed"]
    wrote = False
    if "scale" in cfg:
        sc = _field(cfg, "scale", dict, "config")
        rows = required_scale_curve(
            _field(sc, "d", int, "config.scale"),
            [int(x) for x in _field(sc, "ls", list, "config.scale")],
            weight=_field(sc, "weight", float, "config.scale", default=0.999),
            seed=seed)
        rows_to_csv(outdir / "scale_curve.csv", rows)
        wrote = True
    if "gap" in cfg:
        gp = _field(cfg, "gap", dict, "config")
        rows = attention_gap_curve(
            _field(gp, "d", int, "config.gap"),
            [int(x) for x in _field(gp, "ls", list, "config.gap")],
            bound_kq=_field(gp, "bound_kq", float, "config.gap", default=1.0),
            bound_x=_field(gp, "bound_x", float, "config.gap", default=1.0),
            seed=seed)
        rows_to_csv(outdir / "gap_curve.csv", rows)
        wrote = True
    if not wrote:
        raise ConfigError("config: needs a 'scale' or 'gap' section")
    _write_failures(outdir, [])
    return 0


# -- grad-suite ---------------------------------------------------------------

def _run_grad_suite(manifest: dict, outdir: Path, jobs: int) -> int:
    n_samples = _field(manifest["config"], "n_samples", int, "config",
                       default=4)
    rows = run_grad_suite(n_samples=n_samples)
    rows_to_csv(outdir / "grad_report.csv", rows)
    _write_failures(outdir, [r for r in rows if not r["pass"]])
    return 0 if all(r["pass"] for r in rows) else 1


_RUNNERS = {"synthpool-grid": _run_synthpool_grid,
            "recall-compare": _run_recall_compare,
            "constructions": _run_constructions,
            "grad-suite": _run_grad_suite}


# -- summarize ---------------------------------------------------------------

def _summarize_grid_rows(path, rows) -> list:
    need = {"mask", "xi", "best_accuracy"}
    missing = need - set(rows[0])
    if missing:
        raise ConfigError(f"{path}: missing column {sorted(missing)[0]!r}")
    groups = {}
    for r in rows:
        groups.setdefault((r["mask"], int(r["xi"])), []).append(
            float(r["best_accuracy"]))
    out = []
    for (mask, xi), accs in sorted(groups.items()):
        flags = []
        if mask == "POOL" and min(accs) < 0.90:
            flags.append("pool-accuracy<0.90")
        out.append({"group": f"{mask}/xi={xi}", "n": len(accs),
                    "mean": float(np.mean(accs)), "best": float(max(accs)),
                    "violations": ";".join(flags)})
    return out


def _summarize_recall_lines(path, records) -> list:
    need = {"method", "xi", "exact_match", "eval_loss"}
    for rec in records:
        missing = need - set(rec)
        if missing:
            raise ConfigError(f"{path}: missing column {sorted(missing)[0]!r}")
    groups = {}
    for rec in records:
        groups.setdefault((rec["method"], int(rec["xi"])), []).append(rec)
    out = []
    for (method, xi), recs in sorted(groups.items()):
        accs = [float(r["exact_match"]) for r in recs]
        mean = float(np.mean(accs))
        flags = []
        if method == "full" and mean < 0.95:
            flags.append("full-exact<0.95")
        if method == "no_context":
            sizes = [int(r["eval_size"]) for r in recs if "eval_size" in r]
            if sizes:
                sigma = (CHANCE_EXACT * (1 - CHANCE_EXACT) / min(sizes)) ** 0.5
                if abs(mean - CHANCE_EXACT) > 3 * sigma:
                    flags.append("no_context-off-chance>3sigma")
        out.append({"group": f"{method}/xi={xi}", "n": len(recs),
                    "mean": mean, "best": float(max(accs)),
                    "mean_loss": float(np.mean([float(r["eval_loss"])
                                                for r in recs])),
                    "violations": ";".join(flags)})
    return out


def summarize_files(paths) -> list:
    rows = []
    for path in paths:
        p = Path(path)
        if p.suffix == ".jsonl":
            records = [json.loads(s) for s in p.read_text().splitlines() if s]
            if not records:
                continue
            rows.extend(_summarize_recall_lines(p, records))
        else:
            content = read_csv_rows(p)
            if not content:
                continue
            rows.extend(_summarize_grid_rows(p, content))
    return rows


def _print_table(rows, columns) -> None:
    widths = [max(len(c), *(len(_cell(r.get(c, ""))) for r in rows))
              for c in columns]
    click.echo("  ".join(c.ljust(w) for c, w in zip(columns, widths)))
    for r in rows:
        click.echo("  ".join(_cell(r.get(c, "")).ljust(w)
                             for c, w in zip(columns, widths)))


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


# -- commands ------------------------------------------------------------------

@click.group()
def main():
    """Compression-method experiment runner."""


@main.command()
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--output", default=None, help="Output directory override.")
@click.option("--jobs", default=1, show_default=True,
              help="Worker processes; results are assembled in manifest order.")
@click.option("--seed", default=None, type=int, help="Manifest seed override.")
def run(manifest, output, jobs, seed):
    """Execute a manifest and persist its artifacts."""
    try:
        m = load_manifest(manifest, seed_override=seed)
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        raise SystemExit(2)
    outdir = _resolve_outdir(m, output)
    outdir.mkdir(parents=True, exist_ok=True)
    try:
        status = _RUNNERS[m["kind"]](m, outdir, jobs)
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        raise SystemExit(2)
    _write_stamp(outdir, m)
    click.echo(f"{m['kind']}: artifacts in {outdir}")
    raise SystemExit(status)


@main.command()
@click.argument("files", nargs=-1, required=True,
                type=click.Path(exists=True, dir_okay=False))
@click.option("--out", default=None, help="Also write the table as CSV.")
def summarize(files, out):
    """Aggregate result files per method and compression rate."""
    try:
        rows = summarize_files(files)
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        raise SystemExit(2)
    if not rows:
        click.echo("no rows")
        raise SystemExit(0)
    columns = list(rows[0].keys())
    _print_table(rows, columns)
    if out:
        rows_to_csv(out, rows)
    if any(r["violations"] for r in rows):
        click.echo("acceptance violations flagged", err=True)
        raise SystemExit(1)


_MASK_BUILDERS = {"causal": build_causal, "gist": build_gist_mask,
                  "pool": build_pool_mask, "gistpool": build_gistpool_mask}


@main.command("export-mask")
@click.option("--kind", type=click.Choice(sorted(_MASK_BUILDERS)), required=True)
@click.option("--n-ctx", type=int, required=True)
@click.option("--xi", type=int, default=1, show_default=True)
@click.option("--n-query", type=int, default=0)
@click.option("--n-answer", type=int, default=0)
@click.option("--bos/--no-bos", default=True)
@click.option("--with-gists/--no-gists", default=True,
              help="Include gist rows in appended layouts.")
@click.option("--pooling-windows", default=str(DEFAULT_KNOBS.pooling_windows),
              help="Window lookback for gistpool; 'none' = unbounded.")
@click.option("--contexts-attend-gists", is_flag=True, default=False)
@click.option("--no-gists-attend-gists", is_flag=True, default=False)
@click.option("--no-gists-attend-self", is_flag=True, default=False)
@click.option("--no-gists-attend-bos", is_flag=True, default=False)
@click.option("--out", required=True, help="Path prefix for .txt and .bits.")
def export_mask(kind, n_ctx, xi, n_query, n_answer, bos, with_gists,
                pooling_windows, contexts_attend_gists, no_gists_attend_gists,
                no_gists_attend_self, no_gists_attend_bos, out):
    """Write one attention mask as a text grid and a packed bitset."""
    try:
        if pooling_windows.lower() == "none":
            pw = None
        else:
            pw = int(pooling_windows)
        knobs = GistPoolKnobs(pooling_windows=pw,
                              contexts_attend_gists=contexts_attend_gists,
                              gists_attend_gists=not no_gists_attend_gists,
                              gists_attend_self=not no_gists_attend_self,
                              gists_attend_bos=not no_gists_attend_bos)
        if kind == "gistpool":
            layout = interspersed_layout(n_ctx, xi, n_query=n_query,
                                         n_answer=n_answer, bos=bos)
        else:
            layout = appended_layout(n_ctx, xi, n_query=n_query,
                                     n_answer=n_answer, bos=bos,
                                     with_gists=with_gists)
        if kind == "gistpool":
            mask = build_gistpool_mask(layout, knobs)
        else:
            mask = _MASK_BUILDERS[kind](layout)
    except ValueError as e:
        click.echo(f"config error: {e}", err=True)
        raise SystemExit(2)
    save_mask_text(mask, f"{out}.txt")
    save_mask_bitset(mask, f"{out}.bits")
    click.echo(f"wrote {out}.txt and {out}.bits ({mask.shape[0]}x{mask.shape[1]})")


@main.command("grad-suite")
@click.option("--out", default=None, help="Output directory.")
@click.option("--samples", default=4, show_default=True,
              help="Entries checked per parameter tensor.")
def grad_suite(out, samples):
    """Finite-difference check of every trainable architecture."""
    m = {"kind": "grad-suite", "seed": 0, "config": {"n_samples": samples},
         "output": out}
    outdir = _resolve_outdir(m, out)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = run_grad_suite(n_samples=samples)
    rows_to_csv(outdir / "grad_report.csv", rows)
    _write_failures(outdir, [r for r in rows if not r["pass"]])
    _write_stamp(outdir, m)
    _print_table(rows, ["arch", "n_tensors", "max_rel_err", "pass"])
    if not all(r["pass"] for r in rows):
        click.echo(f"gradient errors exceed {GRAD_TOL}", err=True)
        raise SystemExit(1)
