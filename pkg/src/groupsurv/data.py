"""Synthetic cohorts, feature-file I/O, folds and groups.

On-disk layout of a cohort directory::

    manifest.jsonl        one {slide_id, path, time, event, interval, stage} per line
    manifest.meta.json    {k_intervals, bin_edges, seed, synth}
    features/<id>.f32     row-major little-endian float32, N x D
    features/<id>.json    {slide_id, n_patches, dim, coords, checksum}
    truth.jsonl           {slide_id, true_log_risk}  (evaluation only)
    phenotypes.jsonl      {slide_id, phenotypes}     (evaluation only)
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ArgumentError, ConfigError, CorruptFileError
from .survival import assign_intervals, discretize_times

PHENOTYPES = ("normal", "tumorA", "tumorB", "necrosis")
FEATURE_DTYPE = np.dtype("<f4")


@dataclass
class PatchBag:
    slide_id: str
    features: np.ndarray  # (N, D) float32
    coords: np.ndarray  # (N, 2) int64, (row, col)

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        if self.features.ndim != 2 or self.features.shape[0] < 1 or self.features.shape[1] < 1:
            raise ArgumentError(f"{self.slide_id}: features must be a non-empty N x D matrix")
        if self.coords.shape[0] != self.features.shape[0]:
            raise ArgumentError(f"{self.slide_id}: {self.coords.shape[0]} coords for {self.features.shape[0]} patches")

    @property
    def n_patches(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def has_unique_coords(self) -> bool:
        return np.unique(self.coords, axis=0).shape[0] == self.n_patches


@dataclass
class SurvivalLabel:
    time: float
    event: int
    interval: Optional[int] = None
    stage: Optional[int] = None

    def __post_init__(self):
        if not self.time > 0:
            raise ArgumentError(f"survival time must be positive, got {self.time}")
        if self.event not in (0, 1):
            raise ArgumentError(f"event must be 0 or 1, got {self.event}")


@dataclass
class ManifestEntry:
    slide_id: str
    path: str
    label: SurvivalLabel

    def to_record(self) -> dict:
        rec = {"slide_id": self.slide_id, "path": self.path, "time": self.label.time,
               "event": self.label.event, "interval": self.label.interval}
        if self.label.stage is not None:
            rec["stage"] = self.label.stage
        return rec


@dataclass
class CohortManifest:
    entries: list
    k_intervals: int
    bin_edges: np.ndarray
    seed: int = 0
    root: Path = field(default_factory=Path)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges, dtype=float)
        ids = [e.slide_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ArgumentError("slide ids in a manifest must be unique")
        if self.bin_edges.size != max(self.k_intervals - 1, 0):
            raise ArgumentError(f"expected {self.k_intervals - 1} bin edges, got {self.bin_edges.size}")
        if np.any(np.diff(self.bin_edges) <= 0):
            raise ArgumentError("bin edges must be strictly increasing")
        for e in self.entries:
            if e.label.interval is not None:
                want = int(assign_intervals([e.label.time], self.bin_edges)[0])
                if e.label.interval != want:
                    raise ArgumentError(f"{e.slide_id}: interval {e.label.interval} inconsistent with bin edges")

    @property
    def slide_ids(self) -> list:
        return [e.slide_id for e in self.entries]

    def entry(self, slide_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.slide_id == slide_id:
                return e
        raise ArgumentError(f"unknown slide {slide_id!r}")

    def labels(self) -> dict:
        return {e.slide_id: e.label for e in self.entries}

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "manifest.jsonl", "w") as fh:
            for e in self.entries:
                fh.write(json.dumps(e.to_record(), sort_keys=True) + "\n")
        meta = {"k_intervals": self.k_intervals, "bin_edges": self.bin_edges.tolist(), "seed": self.seed, **self.extra}
        (directory / "manifest.meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
        return directory / "manifest.jsonl"

    @classmethod
    def load(cls, path) -> "CohortManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.jsonl"
        meta = json.loads((path.parent / "manifest.meta.json").read_text())
        entries = []
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            label = SurvivalLabel(float(rec["time"]), int(rec["event"]), rec.get("interval"), rec.get("stage"))
            entries.append(ManifestEntry(rec["slide_id"], rec["path"], label))
        extra = {k: v for k, v in meta.items() if k not in ("k_intervals", "bin_edges", "seed")}
        return cls(entries, int(meta["k_intervals"]), meta["bin_edges"], int(meta.get("seed", 0)), path.parent, extra)


def discretize_manifest(manifest: CohortManifest, k: int, train_ids: Optional[Iterable[str]] = None) -> CohortManifest:
    """Recompute bin edges (optionally from a subset) and reassign intervals."""
    pool = set(train_ids) if train_ids is not None else None
    ev_times = [e.label.time for e in manifest.entries
                if e.label.event == 1 and (pool is None or e.slide_id in pool)]
    edges = discretize_times(ev_times, k)
    entries = []
    for e in manifest.entries:
        lab = SurvivalLabel(e.label.time, e.label.event, int(assign_intervals([e.label.time], edges)[0]), e.label.stage)
        entries.append(ManifestEntry(e.slide_id, e.path, lab))
    return CohortManifest(entries, k, edges, manifest.seed, manifest.root, dict(manifest.extra))


# -- feature files -----------------------------------------------------------------

def _checksum(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def write_slide(bag: PatchBag, path) -> Path:
    """Write ``bag`` to ``path`` (``.f32``) plus its ``.json`` sidecar header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = np.ascontiguousarray(bag.features, dtype=FEATURE_DTYPE).tobytes(order="C")
    path.write_bytes(raw)
    header = {"slide_id": bag.slide_id, "n_patches": bag.n_patches, "dim": bag.dim,
              "coords": bag.coords.tolist(), "checksum": _checksum(raw)}
    path.with_suffix(".json").write_text(json.dumps(header, sort_keys=True))
    return path


def read_slide(path) -> PatchBag:
    path = Path(path)
    try:
        header = json.loads(path.with_suffix(".json").read_text())
        raw = path.read_bytes()
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"{path}: unreadable header: {exc}") from exc
    n, d = int(header["n_patches"]), int(header["dim"])
    if len(raw) != n * d * FEATURE_DTYPE.itemsize:
        raise CorruptFileError(f"{path}: header declares {n} x {d} values, file holds {len(raw) // FEATURE_DTYPE.itemsize}")
    if len(header["coords"]) != n:
        raise CorruptFileError(f"{path}: header lists {len(header['coords'])} coords for {n} patches")
    if header.get("checksum") not in (None, _checksum(raw)):
        raise CorruptFileError(f"{path}: checksum mismatch")
    feats = np.frombuffer(raw, dtype=FEATURE_DTYPE).reshape(n, d).copy()
    return PatchBag(header["slide_id"], feats, np.asarray(header["coords"], dtype=np.int64))


def load_slide(entry: ManifestEntry, manifest: Optional[CohortManifest] = None) -> PatchBag:
    path = manifest.resolve(entry) if manifest is not None else Path(entry.path)
    bag = read_slide(path)
    if bag.slide_id != entry.slide_id:
        raise CorruptFileError(f"{path}: header slide id {bag.slide_id!r} != manifest {entry.slide_id!r}")
    return bag


def read_sidecar(path) -> dict:
    """Read a jsonl sidecar keyed by slide id."""
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            out[rec.pop("slide_id")] = rec
    return out


# -- synthetic cohorts -------------------------------------------------------------

@dataclass
class SynthConfig:
    """Planted-signal cohort parameters.

    When ``phenotype_means`` is omitted, means are drawn from the seed with the
    two tumor subtypes mirrored about the normal mean (so tumor burden does not
    move the pooled slide mean) and necrosis offset along its own direction.
    """

    n_slides: int = 300
    patches_min: int = 100
    patches_max: int = 400
    dim: int = 64
    grid_width: int = 20
    phenotype_means: Optional[dict] = None
    tumor_shift: float = 6.0
    necrosis_shift: float = 4.0
    beta: float = 10.0
    gamma: float = 10.0
    tumor_fraction_max: float = 0.7
    necrosis_fraction_max: float = 0.3
    noise_scale: float = 1.0
    censor_rate: float = 0.2
    k_intervals: int = 4
    seed: int = 0

    def validate(self):
        if not 0.0 <= self.censor_rate < 1.0:
            raise ConfigError("censor_rate must lie in [0, 1)")
        if self.patches_min < 1 or self.patches_max < self.patches_min:
            raise ConfigError("need 1 <= patches_min <= patches_max")
        if self.n_slides < 1 or self.dim < 1 or self.grid_width < 1:
            raise ConfigError("n_slides, dim and grid_width must be positive")
        if not (0 <= self.tumor_fraction_max and 0 <= self.necrosis_fraction_max
                and self.tumor_fraction_max + self.necrosis_fraction_max <= 1):
            raise ConfigError("tumor and necrosis fraction bounds must be non-negative and sum to <= 1")
        means = self.resolve_means()
        vecs = [means[p] for p in PHENOTYPES]
        for i in range(len(vecs)):
            if vecs[i].shape != (self.dim,):
                raise ConfigError(f"phenotype mean {PHENOTYPES[i]} must have length {self.dim}")
            for j in range(i):
                if np.array_equal(vecs[i], vecs[j]):
                    raise ConfigError(f"phenotype means {PHENOTYPES[j]} and {PHENOTYPES[i]} coincide")

    def resolve_means(self) -> dict:
        if self.phenotype_means is not None:
            missing = set(PHENOTYPES) - set(self.phenotype_means)
            if missing:
                raise ConfigError(f"phenotype_means missing {sorted(missing)}")
            return {p: np.asarray(self.phenotype_means[p], dtype=float) for p in PHENOTYPES}
        rng = np.random.default_rng([self.seed, 0xC0FFEE])
        normal = rng.normal(0.0, 1.0, self.dim)
        t_dir = rng.normal(size=self.dim)
        t_dir /= np.linalg.norm(t_dir)
        n_dir = rng.normal(size=self.dim)
        n_dir -= (n_dir @ t_dir) * t_dir
        n_dir /= np.linalg.norm(n_dir)
        return {
            "normal": normal,
            "tumorA": normal + self.tumor_shift * t_dir,
            "tumorB": normal - self.tumor_shift * t_dir,
            "necrosis": normal + self.necrosis_shift * n_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


def _slide_layout(n: int, width: int) -> np.ndarray:
    idx = np.arange(n)
    return np.stack([idx // width, idx % width], axis=1).astype(np.int64)


def _simulate_slide(cfg: SynthConfig, means: dict, rng: np.random.Generator):
    n = int(rng.integers(cfg.patches_min, cfg.patches_max + 1))
    coords = _slide_layout(n, cfg.grid_width)
    p_t = rng.uniform(0.0, cfg.tumor_fraction_max)
    p_n = rng.uniform(0.0, cfg.necrosis_fraction_max)
    n_nec = int(round(p_n * n))
    n_tum = min(int(round(p_t * n)), n - n_nec)
    # tumor forms a blob around a random center with a necrotic core
    center = coords[rng.integers(n)] + rng.normal(0.0, 0.5, 2)
    order = np.argsort(np.linalg.norm(coords - center, axis=1), kind="stable")
    labels = np.zeros(n, dtype=np.int64)
    labels[order[:n_nec]] = 3
    tumor = order[n_nec:n_nec + n_tum]
    frac_a = rng.uniform()
    labels[tumor] = np.where(rng.uniform(size=tumor.size) < frac_a, 1, 2)
    mu = np.stack([means[p] for p in PHENOTYPES])[labels]
    feats = (mu + cfg.noise_scale * rng.normal(size=(n, cfg.dim))).astype(FEATURE_DTYPE)
    # realized fractions define the planted log-risk
    real_t = n_tum / n
    real_n = n_nec / n
    log_risk = cfg.beta * real_t + cfg.gamma * real_n
    return feats, coords, labels, log_risk


def generate_cohort(cfg: SynthConfig, out_dir, seed: Optional[int] = None) -> CohortManifest:
    """Simulate a cohort, write it under ``out_dir`` and return its manifest.

    Output is a pure function of ``(cfg, seed)``; ``seed`` defaults to ``cfg.seed``.
    """
    cfg.validate()
    seed = cfg.seed if seed is None else int(seed)
    out_dir = Path(out_dir)
    try:
        (out_dir / "features").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create cohort directory {out_dir}: {exc}") from exc
    means = cfg.resolve_means()
    children = np.random.SeedSequence(seed).spawn(cfg.n_slides + 1)
    cohort_rng = np.random.default_rng(children[-1])
    width = max(3, len(str(cfg.n_slides - 1)))

    slides = []
    for i in range(cfg.n_slides):
        rng = np.random.default_rng(children[i])
        feats, coords, labels, log_risk = _simulate_slide(cfg, means, rng)
        time = rng.exponential(1.0 / math.exp(log_risk))
        event = 1
        if rng.uniform() < cfg.censor_rate:
            time = rng.uniform(0.0, time)
            event = 0
        time = max(time, np.finfo(float).tiny)
        sid = f"slide_{i:0{width}d}"
        write_slide(PatchBag(sid, feats, coords), out_dir / "features" / f"{sid}.f32")
        slides.append((sid, float(time), event, labels, float(log_risk)))

    # ordinal stage: quartile of a noisy copy of the planted risk
    risks = np.array([s[4] for s in slides])
    noisy = risks + cohort_rng.normal(0.0, 0.5 * (risks.std() + 1e-12), risks.size)
    stages = 1 + np.searchsorted(np.quantile(noisy, [0.25, 0.5, 0.75]), noisy, side="right")

    event_times = [s[1] for s in slides if s[2] == 1]
    edges = discretize_times(event_times, cfg.k_intervals)
    entries = []
    for (sid, time, event, _, _), stage in zip(slides, stages):
        interval = int(assign_intervals([time], edges)[0])
        entries.append(ManifestEntry(sid, f"features/{sid}.f32", SurvivalLabel(time, event, interval, int(stage))))

    synth = asdict(cfg)
    if synth["phenotype_means"] is not None:
        synth["phenotype_means"] = {k: list(map(float, v)) for k, v in synth["phenotype_means"].items()}
    manifest = CohortManifest(entries, cfg.k_intervals, edges, seed, out_dir, {"synth": synth})
    manifest.save(out_dir)
    with open(out_dir / "truth.jsonl", "w") as fh:
        for sid, _, _, _, lr in slides:
            fh.write(json.dumps({"slide_id": sid, "true_log_risk": lr}, sort_keys=True) + "\n")
    with open(out_dir / "phenotypes.jsonl", "w") as fh:
        for sid, _, _, labels, _ in slides:
            fh.write(json.dumps({"slide_id": sid, "phenotypes": labels.tolist()}, sort_keys=True) + "\n")
    return manifest


# -- folds and groups --------------------------------------------------------------

def _ids(source) -> list:
    return list(source.slide_ids) if isinstance(source, CohortManifest) else list(source)


def kfold_split(source, k: int, seed: int = 0) -> list:
    """Seeded k-fold partition; returns ``[(train_ids, val_ids), ...]``."""
    ids = _ids(source)
    if k < 2 or k > len(ids):
        raise ArgumentError(f"need 2 <= k <= n_slides ({len(ids)}), got k={k}")
    perm = np.random.default_rng(seed).permutation(len(ids))
    folds = np.array_split(perm, k)
    out = []
    for f in folds:
        val = set(f.tolist())
        out.append(([ids[i] for i in perm if i not in val], [ids[i] for i in sorted(val)]))
    return out


def make_groups(slide_ids: Sequence[str], group_size: int, seed=0) -> list:
    """Shuffle ids and chunk them into groups of ``group_size``.

    A trailing group smaller than ``group_size`` is kept as is.
    """
    ids = list(slide_ids)
    if not ids:
        raise ArgumentError("cannot group an empty id list")
    if group_size < 1:
        raise ArgumentError("group size must be >= 1")
    perm = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    return [shuffled[i:i + group_size] for i in range(0, len(shuffled), group_size)]
