"""Training, cross-validation and ablation orchestration."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data import CohortManifest, kfold_split, load_slide, make_groups
from .errors import ArgumentError, ConfigError, LoadError, NumericError
from .graph import SlideGraph, build_graph
from .metrics import c_index, log_rank, stratify_median
from .model import GroupSurvModel, ModelConfig, load_checkpoint, save_checkpoint
from .survival import cox_loss, dt_loss, hybrid_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 2e-4
    accumulation_steps: int = 32
    alpha: float = 0.5
    epochs: int = 15
    seed: int = 0
    n_folds: int = 5
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    cox_reduction: str = "mean"
    dt_reduction: str = "mean"
    # compute the Cox risk set over every group of an accumulation window
    pool_cox_window: bool = False
    # early stopping on an inner holdout carved from the training slides
    patience: Optional[int] = None
    holdout_fraction: float = 0.15
    dtype: str = "float32"
    model: ModelConfig = field(default_factory=ModelConfig)

    @property
    def group_size(self) -> int:
        return self.model.group_size

    @property
    def k_intervals(self) -> int:
        return self.model.k_intervals

    def effective_alpha(self) -> float:
        return {"risk": 1.0, "prob": 0.0}.get(self.model.head, self.alpha)

    def validate(self) -> "TrainConfig":
        self.model.validate()
        if self.lr < 0 or self.accumulation_steps < 1 or self.epochs < 0 or self.n_folds < 2:
            raise ConfigError("need lr >= 0, accumulation_steps >= 1, epochs >= 0, n_folds >= 2")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")
        if self.patience is not None and not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must lie in (0, 1)")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        model = ModelConfig.from_dict(d.pop("model", {}))
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(model=model, **d).validate()

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class RunRecord:
    config_hash: str
    fold: int
    epoch_losses: list = field(default_factory=list)
    epoch_val_c_index: list = field(default_factory=list)
    val_c_index: Optional[float] = None
    n_updates: int = 0
    stop_epoch: Optional[int] = None
    wall_time: float = 0.0
    checkpoint: Optional[str] = None
    policy: dict = field(default_factory=dict)
    diagnostic: Optional[dict] = None

    def comparable(self) -> dict:
        """Record contents minus wall time, for determinism checks."""
        d = asdict(self)
        d.pop("wall_time")
        d.pop("checkpoint")
        return d

    def append_to(self, path) -> None:
        with open(path, "a") as fh:
            fh.write(json.dumps(asdict(self), sort_keys=True) + "\n")


def load_graphs(manifest: CohortManifest, ids: Optional[Sequence[str]] = None, window: int = 5) -> dict:
    ids = manifest.slide_ids if ids is None else ids
    return {sid: build_graph(load_slide(manifest.entry(sid), manifest), window) for sid in ids}


def resolve_fold(manifest: CohortManifest, cfg: TrainConfig, fold) -> tuple:
    if isinstance(fold, (tuple, list)) and len(fold) == 2 and not isinstance(fold[0], str):
        return 0, list(fold[0]), list(fold[1])
    folds = kfold_split(manifest, cfg.n_folds, cfg.seed)
    if not 0 <= int(fold) < len(folds):
        raise ArgumentError(f"fold {fold} out of range for {len(folds)} folds")
    train_ids, val_ids = folds[int(fold)]
    return int(fold), train_ids, val_ids


def _torch_dtype(name: str):
    return torch.float64 if name == "float64" else torch.float32


def build_model(cfg: TrainConfig) -> GroupSurvModel:
    torch.manual_seed(cfg.seed)
    model = GroupSurvModel(cfg.model)
    return model.to(_torch_dtype(cfg.dtype))


def group_loss(model: GroupSurvModel, cfg: TrainConfig, graphs: Sequence[SlideGraph], labels):
    fwd = model(graphs)
    times = [lab.time for lab in labels]
    events = [lab.event for lab in labels]
    alpha = cfg.effective_alpha()
    l_risk = cox_loss(fwd.output.r, times, events, cfg.cox_reduction) if alpha > 0 else None
    l_prob = dt_loss(fwd.output, [lab.interval for lab in labels], events, cfg.dt_reduction) if alpha < 1 else None
    return hybrid_loss(alpha, l_risk, l_prob), l_risk, l_prob, fwd


@torch.no_grad()
def predict(model: GroupSurvModel, graphs: dict, ids: Sequence[str], group_size: int, seed) -> dict:
    """Per-slide outputs from fixed-seed groups; returns ``{slide_id: {R, r, score}}``."""
    model.eval()
    out = {}
    for gids in make_groups(list(ids), group_size, seed):
        fwd = model([graphs[s] for s in gids])
        score = fwd.output.score(model.cfg.head)
        for j, sid in enumerate(gids):
            out[sid] = {"R": float(fwd.output.R[j]), "r": float(fwd.output.r[j]), "score": float(score[j])}
    model.train()
    return out


def _fold_c_index(preds: dict, labels: dict) -> float:
    ids = list(preds)
    return c_index([preds[s]["score"] for s in ids], [labels[s].time for s in ids], [labels[s].event for s in ids])


def _eval_seed(cfg: TrainConfig, fold: int) -> list:
    return [cfg.seed, fold, 0xE7A1]


def train_fold(cfg: TrainConfig, manifest: CohortManifest, fold=0, out_dir=None,
               graphs: Optional[dict] = None):
    """Train one cross-validation fold; returns ``(RunRecord, model)``.

    When ``out_dir`` is given the checkpoint is written there and the record
    appended to ``runs.jsonl``.
    """
    cfg.validate()
    if manifest.k_intervals != cfg.k_intervals:
        raise ConfigError(f"manifest has K={manifest.k_intervals}, config expects K={cfg.k_intervals}")
    fold, train_ids, val_ids = resolve_fold(manifest, cfg, fold)
    if graphs is None:
        graphs = load_graphs(manifest, train_ids + val_ids, cfg.model.window)
    labels = manifest.labels()
    if any(labels[s].interval is None for s in train_ids):
        raise ArgumentError("manifest is not discretized")

    monitor_ids = None
    if cfg.patience is not None:
        rng = np.random.default_rng([cfg.seed, fold, 0x401D])
        perm = rng.permutation(len(train_ids))
        n_hold = max(2, int(round(cfg.holdout_fraction * len(train_ids))))
        monitor_ids = [train_ids[i] for i in sorted(perm[:n_hold])]
        train_ids = [train_ids[i] for i in sorted(perm[n_hold:])]

    model = build_model(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=tuple(cfg.betas), eps=cfg.eps)
    record = RunRecord(cfg.hash(), fold, policy={
        "epochs": cfg.epochs, "patience": cfg.patience, "holdout_fraction": cfg.holdout_fraction,
        "optimizer": {"name": "adam", "lr": cfg.lr, "betas": list(cfg.betas), "eps": cfg.eps},
        "cox_reduction": cfg.cox_reduction, "dt_reduction": cfg.dt_reduction,
        "pool_cox_window": cfg.pool_cox_window, "alpha": cfg.effective_alpha(),
    })
    start = time.perf_counter()
    val_set = set(val_ids)
    best = (-np.inf, None, 0)
    stale = 0

    for epoch in range(cfg.epochs):
        groups = make_groups(train_ids, cfg.group_size, [cfg.seed, fold, epoch])
        for g in groups:
            assert not val_set.intersection(g), "validation slide leaked into a training group"
        totals = {"loss": 0.0, "risk": 0.0, "prob": 0.0}
        opt.zero_grad(set_to_none=True)
        for w0 in range(0, len(groups), cfg.accumulation_steps):
            window = groups[w0:w0 + cfg.accumulation_steps]
            window_loss = _accumulate_window(model, cfg, window, graphs, labels, totals, record, epoch)
            if not np.isfinite(window_loss):
                record.wall_time = time.perf_counter() - start
                raise NumericError(f"non-finite loss at epoch {epoch}: {record.diagnostic}")
            opt.step()
            opt.zero_grad(set_to_none=True)
            record.n_updates += 1
        record.epoch_losses.append({k: v / len(groups) for k, v in totals.items()})
        preds = predict(model, graphs, val_ids, cfg.group_size, _eval_seed(cfg, fold))
        record.epoch_val_c_index.append(_safe_c(preds, labels))
        if monitor_ids is not None:
            mon = _safe_c(predict(model, graphs, monitor_ids, cfg.group_size, _eval_seed(cfg, fold)), labels)
            if mon > best[0]:
                best, stale = (mon, copy.deepcopy(model.state_dict()), epoch), 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
        log.debug("fold %d epoch %d loss %.4f", fold, epoch, record.epoch_losses[-1]["loss"])

    record.stop_epoch = len(record.epoch_losses)
    if monitor_ids is not None and best[1] is not None:
        model.load_state_dict(best[1])
        record.stop_epoch = best[2] + 1
    preds = predict(model, graphs, val_ids, cfg.group_size, _eval_seed(cfg, fold))
    record.val_c_index = _safe_c(preds, labels)
    record.wall_time = time.perf_counter() - start
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = save_checkpoint(model, out_dir / f"fold{fold}.npz", {
            "train_config": cfg.to_dict(), "fold": fold, "bin_edges": manifest.bin_edges.tolist(),
            "val_ids": val_ids,
        })
        record.checkpoint = str(ckpt)
        record.append_to(out_dir / "runs.jsonl")
    return record, model


def _safe_c(preds: dict, labels: dict) -> float:
    try:
        return _fold_c_index(preds, labels)
    except NumericError:
        return float("nan")


def _accumulate_window(model, cfg, window, graphs, labels, totals, record, epoch) -> float:
    """Backpropagate the mean loss over ``window`` groups into ``.grad``."""
    n = len(window)
    alpha = cfg.effective_alpha()
    if cfg.pool_cox_window and alpha > 0:
        return _accumulate_pooled(model, cfg, window, graphs, labels, totals, alpha)
    window_total = 0.0
    for gids in window:
        loss, l_risk, l_prob, _ = group_loss(model, cfg, [graphs[s] for s in gids], [labels[s] for s in gids])
        value = loss.item()
        if not np.isfinite(value):
            record.diagnostic = {"epoch": epoch, "group": list(gids), "loss": value}
            return value
        (loss / n).backward()
        totals["loss"] += value
        totals["risk"] += l_risk.item() if l_risk is not None else 0.0
        totals["prob"] += l_prob.item() if l_prob is not None else 0.0
        window_total += value / n
    return window_total


def _accumulate_pooled(model, cfg, window, graphs, labels, totals, alpha) -> float:
    """Variant with one Cox risk set spanning every group of the window."""
    n = len(window)
    risks, times, events, prob_terms = [], [], [], []
    for gids in window:
        labs = [labels[s] for s in gids]
        fwd = model([graphs[s] for s in gids])
        risks.append(fwd.output.r)
        times += [lab.time for lab in labs]
        events += [lab.event for lab in labs]
        if alpha < 1:
            prob_terms.append(dt_loss(fwd.output, [lab.interval for lab in labs],
                                      [lab.event for lab in labs], cfg.dt_reduction))
    l_risk = cox_loss(torch.cat(risks), times, events, cfg.cox_reduction)
    l_prob = torch.stack(prob_terms).mean() if prob_terms else None
    loss = hybrid_loss(alpha, l_risk, l_prob)
    loss.backward()
    value = loss.item()
    totals["loss"] += value * n
    totals["risk"] += l_risk.item() * n
    totals["prob"] += l_prob.item() * n if l_prob is not None else 0.0
    return value


def evaluate_fold(checkpoint, manifest: CohortManifest, fold=None, graphs: Optional[dict] = None):
    """Score the validation slides of a fold with a saved (or in-memory) model.

    Returns ``(report, predictions)``; ``predictions`` is a list of per-slide
    records ``{slide_id, R, r, score, time, event, stage}``.
    """
    model = checkpoint if isinstance(checkpoint, GroupSurvModel) else load_checkpoint(checkpoint)
    meta = getattr(model, "checkpoint_meta", {}).get("extra", {})
    if meta.get("bin_edges") is not None and not np.allclose(meta["bin_edges"], manifest.bin_edges):
        raise LoadError("checkpoint discretization differs from the manifest bin edges")
    cfg = TrainConfig.from_dict(meta["train_config"]) if "train_config" in meta else TrainConfig(model=model.cfg)
    if model.cfg.k_intervals != manifest.k_intervals:
        raise LoadError("checkpoint K differs from the manifest")
    if fold is None:
        fold = meta.get("fold", 0)
    fold, _, val_ids = resolve_fold(manifest, cfg, fold)
    if graphs is None:
        graphs = load_graphs(manifest, val_ids, model.cfg.window)
    labels = manifest.labels()
    preds = predict(model, graphs, val_ids, model.cfg.group_size, _eval_seed(cfg, fold))
    ci = _fold_c_index(preds, labels)
    records = []
    for sid in val_ids:
        lab = labels[sid]
        records.append({"slide_id": sid, **preds[sid], "time": lab.time, "event": lab.event, "stage": lab.stage})
    report = {"fold": fold, "c_index": ci, "n": len(val_ids), "chi2": None, "p": None}
    strat = stratify_median([r["score"] for r in records])
    if not strat.degenerate:
        t = np.array([r["time"] for r in records])
        e = np.array([r["event"] for r in records])
        try:
            lr = log_rank((t[strat.high], e[strat.high]), (t[strat.low], e[strat.low]))
            report["chi2"], report["p"] = lr.chi2, lr.p
        except NumericError:
            pass
    return report, records


# -- ablations ---------------------------------------------------------------------

ABLATION_TABLES = {
    "2a": [("PG-/SG-", {"patch_group": False, "slide_group": False}),
           ("PG+/SG-", {"patch_group": True, "slide_group": False}),
           ("PG-/SG+", {"patch_group": False, "slide_group": True}),
           ("PG+/SG+", {"patch_group": True, "slide_group": True})],
    "2b": [("graph-", {"use_graph": False}), ("graph+", {"use_graph": True})],
    "2c": [("risk", {"head": "risk"}), ("prob", {"head": "prob"}), ("dual", {"head": "dual"})],
    "3e": [("pos", {"branch": "pos"}), ("att", {"branch": "att"}), ("both", {"branch": "both"})],
    "3f": [("B=4", {"group_size": 4}), ("B=6", {"group_size": 6}), ("B=8", {"group_size": 8})],
}


def ablation_configs(base: TrainConfig, tables: Sequence[str]) -> list:
    out = []
    for table in tables:
        if table not in ABLATION_TABLES:
            raise ArgumentError(f"unknown ablation table {table!r}; choose from {sorted(ABLATION_TABLES)}")
        for name, toggles in ABLATION_TABLES[table]:
            cfg = replace(base, model=replace(base.model, **toggles)).validate()
            out.append((table, name, cfg))
    return out


def run_ablation(base_cfg: TrainConfig, manifest: CohortManifest, tables=("2a", "2c", "3e", "3f"),
                 folds: Optional[Sequence[int]] = None, out_dir=None, graphs: Optional[dict] = None) -> list:
    """Train every configuration of the requested tables on the same folds and seed.

    Each row carries the fold C-indices, their mean/std and the delta against
    the base configuration's row within the same table (when present).
    """
    folds = list(range(base_cfg.n_folds)) if folds is None else list(folds)
    if graphs is None:
        graphs = load_graphs(manifest, window=base_cfg.model.window)
    rows = []
    for table, name, cfg in ablation_configs(base_cfg, tables):
        cis = []
        run_dir = Path(out_dir) / f"{table}_{name.replace('/', '_')}" if out_dir is not None else None
        for f in folds:
            rec, _ = train_fold(cfg, manifest, f, run_dir, graphs)
            cis.append(rec.val_c_index)
        rows.append({"table": table, "setting": name, "config_hash": cfg.hash(), "folds": folds,
                     "c_index": cis, "mean": float(np.mean(cis)), "std": float(np.std(cis)),
                     "is_base": cfg.model == base_cfg.model})
    for table in {r["table"] for r in rows}:
        ref = [r for r in rows if r["table"] == table and r["is_base"]]
        for r in rows:
            if r["table"] == table:
                r["delta_vs_base"] = r["mean"] - ref[0]["mean"] if ref else None
    if out_dir is not None:
        write_ablation_table(rows, Path(out_dir) / "ablation.csv")
    return rows


def write_ablation_table(rows: list, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ["table", "setting", "config_hash", "mean", "std", "delta_vs_base", "c_index"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r["table"], r["setting"], r["config_hash"], f"{r['mean']:.6f}", f"{r['std']:.6f}",
                        "" if r.get("delta_vs_base") is None else f"{r['delta_vs_base']:.6f}",
                        ";".join(f"{c:.6f}" for c in r["c_index"])])
    return path
