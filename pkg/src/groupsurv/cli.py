"""Command-line entry point: ``groupsurv <command> [flags]``.

Every command writes ``resolved_config.json`` into its run directory
``<out>/<run_id>/``. Passing that file back through ``--config`` replays the
run with identical settings.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import resource
import sys
import time
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import PHENOTYPES, CohortManifest, SynthConfig, generate_cohort, load_slide, read_sidecar
from .errors import ArgumentError, ConfigError, exit_code_for
from .graph import build_graph
from .metrics import KMCurve, km_curve, log_rank, stratify_median
from .model import load_checkpoint
from .sscan import INFER_CHUNK, Phi
from .trainer import (ABLATION_TABLES, TrainConfig, evaluate_fold, load_graphs, run_ablation, train_fold)

log = logging.getLogger("groupsurv")

# per-command flag defaults; None in argparse means "not given on the command line"
DEFAULTS = {
    "synth": {"seed": None},
    "train": {"manifest": None, "seed": None, "fold": "all", "epochs": None},
    "eval": {"checkpoint": None, "manifest": None, "fold": None},
    "ablate": {"manifest": None, "seed": None, "tables": "2a,2c,3e,3f", "folds": None, "epochs": None},
    "stratify": {"predictions": None, "key": "R", "plot": False},
    "export-attention": {"checkpoint": None, "manifest": None, "slides": None, "block": -1, "plot": False},
    "bench": {"lengths": "1000,2000,4000,8000", "d_model": 64, "d_state": 16, "repeats": 7, "seed": 0},
}
CONFIG_TYPES = {"synth": SynthConfig, "train": TrainConfig, "ablate": TrainConfig}


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="groupsurv", description="Group-based survival modelling on patch bags.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", type=Path, help="JSON config, or a resolved_config.json to replay")
        sp.add_argument("--out", type=Path, default=Path("runs"), help="parent directory of the run directory")
        if seed:
            sp.add_argument("--seed", type=int)
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    sp = common(sub.add_parser("synth", help="generate a planted-signal cohort"))

    sp = common(sub.add_parser("train", help="cross-validated training"))
    sp.add_argument("--manifest", type=Path, help="cohort directory or manifest.jsonl")
    sp.add_argument("--fold", help="fold index or 'all'")
    sp.add_argument("--epochs", type=int)

    sp = common(sub.add_parser("eval", help="score a fold with a checkpoint"), seed=False)
    sp.add_argument("--checkpoint", type=Path)
    sp.add_argument("--manifest", type=Path)
    sp.add_argument("--fold", type=int)

    sp = common(sub.add_parser("ablate", help="run the ablation grids"))
    sp.add_argument("--manifest", type=Path)
    sp.add_argument("--tables", help=f"comma list from {sorted(ABLATION_TABLES)}")
    sp.add_argument("--folds", help="comma list of fold indices (default: all)")
    sp.add_argument("--epochs", type=int)

    sp = common(sub.add_parser("stratify", help="median-risk split, KM curves and log-rank test"), seed=False)
    sp.add_argument("--predictions", type=Path, help="JSONL records with a risk key, time and event")
    sp.add_argument("--key", help="risk field used for the split (default R)")
    sp.add_argument("--plot", action="store_true", default=None)

    sp = common(sub.add_parser("export-attention", help="per-patch attention weights"), seed=False)
    sp.add_argument("--checkpoint", type=Path)
    sp.add_argument("--manifest", type=Path)
    sp.add_argument("--slides", help="comma list of slide ids forming one group")
    sp.add_argument("--block", type=int, help="block index (default: last)")
    sp.add_argument("--plot", action="store_true", default=None)

    sp = common(sub.add_parser("bench", help="scan-path scaling benchmark"))
    sp.add_argument("--lengths", help="comma list of increasing sequence lengths")
    sp.add_argument("--d-model", dest="d_model", type=int)
    sp.add_argument("--d-state", dest="d_state", type=int)
    sp.add_argument("--repeats", type=int)
    return p


def _read_json(path: Path) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return data


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, tuple):
        return list(v)
    return v


def resolve(args: argparse.Namespace) -> tuple:
    """Merge command-line flags, the optional config file and defaults.

    Returns ``(options, config)`` where ``config`` is a config object for
    commands that take one, else ``None``.
    """
    cmd = args.command
    given = {k: v for k, v in vars(args).items() if k in DEFAULTS[cmd] and v is not None}
    file_opts, file_cfg = {}, {}
    if args.config is not None:
        data = _read_json(args.config)
        if "command" in data:
            if data["command"] != cmd:
                raise ConfigError(f"{args.config} was resolved for {data['command']!r}, not {cmd!r}")
            extra = set(data) - {"command", "options", "config", "version"}
            if extra:
                raise ConfigError(f"unknown keys in resolved config: {sorted(extra)}")
            file_opts = data.get("options", {})
            file_cfg = data.get("config") or {}
            unknown = set(file_opts) - set(DEFAULTS[cmd])
            if unknown:
                raise ConfigError(f"unknown options for {cmd}: {sorted(unknown)}")
        elif cmd in CONFIG_TYPES:
            file_cfg = data
        else:
            unknown = set(data) - set(DEFAULTS[cmd])
            if unknown:
                raise ConfigError(f"unknown options for {cmd}: {sorted(unknown)}")
            file_opts = data
    opts = {**DEFAULTS[cmd], **file_opts, **given}

    config = None
    kind = CONFIG_TYPES.get(cmd)
    if kind is not None:
        config = kind.from_dict(file_cfg)
        if opts.get("seed") is not None:
            config.seed = int(opts["seed"])
        if opts.get("epochs") is not None:
            config.epochs = int(opts["epochs"])
        config.validate()
    return opts, config


def _config_dict(config) -> dict | None:
    if config is None:
        return None
    if isinstance(config, TrainConfig):
        return config.to_dict()
    d = asdict(config)
    if d.get("phenotype_means") is not None:
        d["phenotype_means"] = {k: list(map(float, v)) for k, v in d["phenotype_means"].items()}
    return d


def _run_dir(out: Path, cmd: str, opts: dict, config) -> tuple:
    resolved = {"command": cmd, "version": __version__,
                "options": {k: _jsonable(v) for k, v in opts.items()}, "config": _config_dict(config)}
    blob = json.dumps(resolved, sort_keys=True).encode()
    run_id = f"{cmd}-{hashlib.sha256(blob).hexdigest()[:10]}"
    run_dir = Path(out) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "resolved_config.json", "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
    return run_dir, resolved


def _require(opts: dict, *names):
    missing = [n for n in names if opts.get(n) is None]
    if missing:
        raise ArgumentError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


def _int_list(text: str, name: str) -> list:
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError as exc:
        raise ArgumentError(f"{name} must be a comma list of integers, got {text!r}") from exc


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


# -- commands ----------------------------------------------------------------------

def cmd_synth(opts, config, run_dir: Path) -> dict:
    manifest = generate_cohort(config, run_dir / "cohort")
    return {"cohort": str(manifest.root), "n_slides": len(manifest.entries),
            "bin_edges": manifest.bin_edges.tolist()}


def cmd_train(opts, config: TrainConfig, run_dir: Path) -> dict:
    _require(opts, "manifest")
    manifest = CohortManifest.load(opts["manifest"])
    folds = list(range(config.n_folds)) if str(opts["fold"]) == "all" else _int_list(opts["fold"], "--fold")
    graphs = load_graphs(manifest, window=config.model.window)
    per_fold = []
    for f in folds:
        rec, _ = train_fold(config, manifest, f, run_dir, graphs)
        log.info("fold %d: val C = %.4f (%.1fs)", f, rec.val_c_index, rec.wall_time)
        per_fold.append({"fold": f, "val_c_index": rec.val_c_index, "checkpoint": rec.checkpoint,
                         "n_updates": rec.n_updates, "wall_time": rec.wall_time})
    cis = [r["val_c_index"] for r in per_fold]
    metrics = {"folds": per_fold, "mean_c_index": float(np.mean(cis)), "std_c_index": float(np.std(cis)),
               "config_hash": config.hash()}
    _write_json(run_dir / "metrics.json", metrics)
    return metrics


def cmd_eval(opts, config, run_dir: Path) -> dict:
    _require(opts, "checkpoint", "manifest")
    manifest = CohortManifest.load(opts["manifest"])
    report, records = evaluate_fold(opts["checkpoint"], manifest, opts["fold"])
    _write_jsonl(run_dir / "predictions.jsonl", records)
    _write_json(run_dir / "report.json", report)
    return report


def cmd_ablate(opts, config: TrainConfig, run_dir: Path) -> dict:
    _require(opts, "manifest")
    manifest = CohortManifest.load(opts["manifest"])
    tables = [t.strip() for t in str(opts["tables"]).split(",") if t.strip()]
    folds = _int_list(opts["folds"], "--folds") if opts["folds"] is not None else None
    rows = run_ablation(config, manifest, tables, folds, run_dir)
    _write_json(run_dir / "ablation.json", rows)
    return {"rows": len(rows), "table": str(run_dir / "ablation.csv")}


def stratify_records(records: list, key: str = "R") -> dict:
    """Median split on ``key`` with KM series and a log-rank test per arm."""
    for i, r in enumerate(records):
        for field in (key, "time", "event"):
            if field not in r:
                raise ArgumentError(f"prediction record {i} lacks {field!r}")
    risk = np.array([float(r[key]) for r in records])
    t = np.array([float(r["time"]) for r in records])
    e = np.array([int(r["event"]) for r in records])
    strat = stratify_median(risk)
    out = {"median": strat.median, "degenerate": strat.degenerate, "n_high": int(strat.high.size),
           "n_low": int(strat.low.size), "curves": {}, "log_rank": None}
    for name, idx in (("high", strat.high), ("low", strat.low)):
        if idx.size:
            out["curves"][name] = km_curve(t[idx], e[idx]).to_records()
    if not strat.degenerate:
        lr = log_rank((t[strat.high], e[strat.high]), (t[strat.low], e[strat.low]))
        out["log_rank"] = {"chi2": lr.chi2, "p": lr.p, "observed_high": lr.observed_a,
                           "expected_high": lr.expected_a, "variance": lr.variance}
    return out


def cmd_stratify(opts, config, run_dir: Path) -> dict:
    _require(opts, "predictions")
    records = [json.loads(line) for line in Path(opts["predictions"]).read_text().splitlines() if line.strip()]
    result = stratify_records(records, opts["key"])
    for name, curve in result["curves"].items():
        _write_json(run_dir / f"km_{name}.json", curve)
    _write_json(run_dir / "log_rank.json", {k: v for k, v in result.items() if k != "curves"})
    if opts["plot"]:
        _plot_km(result, run_dir / "km.png")
    return result["log_rank"] or {"degenerate": True}


def _plot_km(result: dict, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for name, records in result["curves"].items():
        c = KMCurve.from_records(records)
        ax.step(c.times, c.survival, where="post", label=f"{name} risk")
    if result["log_rank"] is not None:
        ax.set_title(f"log-rank p = {result['log_rank']['p']:.3g}")
    ax.set_xlabel("time")
    ax.set_ylabel("survival")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def attention_records(model, manifest: CohortManifest, slide_ids: list, block: int = -1) -> list:
    """One forward pass over ``slide_ids`` as a group; sigmoid weights per patch."""
    known = set(manifest.slide_ids)
    unknown = [s for s in slide_ids if s not in known]
    if unknown:
        raise ArgumentError(f"unknown slide ids: {unknown}")
    if not model.blocks:
        raise ArgumentError("model has no scanning blocks, so there is no attention to export")
    if model.cfg.branch == "pos":
        raise ArgumentError("model uses the position branch only; it has no attention scores")
    graphs = [build_graph(load_slide(manifest.entry(s), manifest), model.cfg.window) for s in slide_ids]
    model.eval()
    with torch.no_grad():
        fwd = model(graphs)
    logits = fwd.attention[block]
    records = []
    for g, lg in zip(graphs, logits):
        w = torch.sigmoid(lg).double().numpy()
        for (row, col), weight in zip(g.bag.coords, w):
            records.append({"slide_id": g.slide_id, "row": int(row), "col": int(col), "weight": float(weight)})
    return records


def _plot_attention(records: list, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ids = list(dict.fromkeys(r["slide_id"] for r in records))
    fig, axes = plt.subplots(1, len(ids), figsize=(3 * len(ids), 3), squeeze=False)
    for ax, sid in zip(axes[0], ids):
        rs = [r for r in records if r["slide_id"] == sid]
        grid = np.full((max(r["row"] for r in rs) + 1, max(r["col"] for r in rs) + 1), np.nan)
        for r in rs:
            grid[r["row"], r["col"]] = r["weight"]
        im = ax.imshow(grid, cmap="magma", vmin=0.0, vmax=1.0)
        ax.set_title(sid, fontsize=8)
        ax.axis("off")
    fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8)
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_export_attention(opts, config, run_dir: Path) -> dict:
    _require(opts, "checkpoint", "manifest", "slides")
    model = load_checkpoint(opts["checkpoint"])
    manifest = CohortManifest.load(opts["manifest"])
    ids = [s.strip() for s in str(opts["slides"]).split(",") if s.strip()]
    if not ids:
        raise ArgumentError("--slides is empty")
    records = attention_records(model, manifest, ids, int(opts["block"]))
    _write_jsonl(run_dir / "attention.jsonl", records)
    summary = {"n_records": len(records), "slides": ids}
    pheno_path = Path(manifest.root) / "phenotypes.jsonl"
    if pheno_path.exists():
        summary["mean_weight_by_phenotype"] = phenotype_weights(records, manifest, read_sidecar(pheno_path))
    if opts["plot"]:
        _plot_attention(records, run_dir / "attention.png")
    _write_json(run_dir / "summary.json", summary)
    return summary


def phenotype_weights(records: list, manifest: CohortManifest, phenotypes: dict) -> dict:
    """Mean exported weight per generator phenotype (synthetic cohorts only)."""
    by_slide = {}
    for r in records:
        by_slide.setdefault(r["slide_id"], []).append(r)
    sums = {p: [0.0, 0] for p in PHENOTYPES}
    for sid, rs in by_slide.items():
        bag = load_slide(manifest.entry(sid), manifest)
        index = {(int(a), int(b)): i for i, (a, b) in enumerate(bag.coords)}
        labels = phenotypes[sid]["phenotypes"]
        for r in rs:
            p = PHENOTYPES[labels[index[(r["row"], r["col"])]]]
            sums[p][0] += r["weight"]
            sums[p][1] += 1
    return {p: s / n for p, (s, n) in sums.items() if n}


def _machine() -> dict:
    return {"platform": platform.platform(), "machine": platform.machine(), "processor": platform.processor(),
            "python": platform.python_version(), "torch": torch.__version__, "numpy": np.__version__,
            "cpu_count": os.cpu_count(), "torch_threads": torch.get_num_threads()}


def bench_scan(lengths, d_model: int = 64, d_state: int = 16, repeats: int = 7, seed: int = 0) -> dict:
    """Forward wall time of the scan path (one Phi block) at each length."""
    lengths = [int(n) for n in lengths]
    if not lengths or any(n <= 0 for n in lengths):
        raise ArgumentError("sequence lengths must be positive")
    if any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ArgumentError("sequence lengths must be strictly increasing")
    torch.manual_seed(seed)
    phi = Phi(d_model, d_state)
    rows = []
    with torch.no_grad():
        for n in lengths:
            x = torch.randn(n, d_model)
            phi(x)  # warm-up at this size
            best = float("inf")
            for _ in range(max(1, repeats)):
                t0 = time.perf_counter()
                phi(x)
                best = min(best, time.perf_counter() - t0)
            # dominant transient: the (T, D, N) discretized tensors, one inference chunk at a time
            transient = 4 * min(n, INFER_CHUNK) * d_model * d_state * x.element_size()
            rows.append({"length": n, "seconds": best, "transient_bytes": transient,
                         "max_rss_kb": resource.getrusage(resource.RUSAGE_SELF).ru_maxrss})
    for prev, cur in zip(rows, rows[1:]):
        doublings = np.log2(cur["length"] / prev["length"])
        cur["time_ratio"] = cur["seconds"] / prev["seconds"]
        cur["time_ratio_per_doubling"] = cur["time_ratio"] ** (1.0 / doublings)
    ratios = [r["time_ratio_per_doubling"] for r in rows[1:]]
    return {"rows": rows, "max_ratio_per_doubling": max(ratios) if ratios else None,
            "d_model": d_model, "d_state": d_state, "repeats": repeats, "machine": _machine()}


def cmd_bench(opts, config, run_dir: Path) -> dict:
    report = bench_scan(_int_list(opts["lengths"], "--lengths"), int(opts["d_model"]), int(opts["d_state"]),
                        int(opts["repeats"]), int(opts["seed"]))
    _write_json(run_dir / "bench.json", report)
    return {"max_ratio_per_doubling": report["max_ratio_per_doubling"]}


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "stratify": cmd_stratify, "export-attention": cmd_export_attention, "bench": cmd_bench}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts, config = resolve(args)
        run_dir, _ = _run_dir(args.out, args.command, opts, config)
        handler = logging.FileHandler(run_dir / "run.log")
        logging.getLogger().addHandler(handler)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            summary = COMMANDS[args.command](opts, config, run_dir)
        logging.getLogger().removeHandler(handler)
        handler.close()
    except Exception as exc:  # mapped to exit codes below
        code = exit_code_for(exc)
        if code == 1:
            raise
        print(f"groupsurv {args.command}: error: {exc}", file=sys.stderr)
        return code
    print(json.dumps({"run_dir": str(run_dir), **(summary or {})}, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
