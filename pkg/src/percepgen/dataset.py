"""Paired dataset construction, the JSON-lines manifest, splits and sample counts."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .effects import EffectParams, FileDepth, FileSegments, GradientDepth, KMeansSegments, Providers, synthesize_pair
from .errors import DatasetError
from .imaging import Image, read_png, resize_center_crop, write_png
from .prompts import ADJECTIVES, canonical_prompt, parse_prompt
from .tasks import PAPER_CATEGORIES, TaskCategory, TaskSpec

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
MANIFEST_FORMAT = 1
SOURCE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
DEFAULT_ADJECTIVES = {"none": 0.7, "mildly": 0.1, "lightly": 0.1, "strongly": 0.1}


def stable_seed(*parts) -> int:
    digest = hashlib.sha256("/".join(map(str, parts)).encode()).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass
class DatasetConfig:
    categories: list = field(default_factory=lambda: [c.name for c in PAPER_CATEGORIES])
    # int for every category, or {category name: count}
    per_category: object = 880
    resolution: int = 1024
    seed: int = 0
    adjectives: dict = field(default_factory=lambda: dict(DEFAULT_ADJECTIVES))
    effects: dict = field(default_factory=dict)
    depth_dir: str | None = None
    segments_dir: str | None = None
    source_provenance: str = "user-supplied photographs"
    workers: int = 1

    def count_for(self, category: TaskCategory) -> int:
        if isinstance(self.per_category, dict):
            return int(self.per_category.get(category.name, 0))
        return int(self.per_category)

    def parsed_categories(self):
        cats = [TaskCategory.parse(c) for c in self.categories]
        if len(set(cats)) != len(cats):
            raise DatasetError("duplicate category in dataset config")
        return cats

    def as_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "DatasetConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})

    def digest(self) -> str:
        d = self.as_dict()
        d.pop("workers")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Record:
    id: str
    input_path: str
    target_path: str
    prompt: str
    tasks: tuple
    split: str = "train"

    @property
    def category(self) -> TaskCategory:
        return TaskCategory(t.kind for t in self.tasks)

    def as_dict(self):
        return {
            "id": self.id,
            "input_path": self.input_path,
            "target_path": self.target_path,
            "prompt": self.prompt,
            "tasks": [t.as_dict() for t in self.tasks],
            "category": self.category.name,
            "split": self.split,
        }

    @classmethod
    def from_dict(cls, d) -> "Record":
        return cls(
            d["id"], d["input_path"], d["target_path"], d["prompt"],
            tuple(TaskSpec.from_dict(t) for t in d["tasks"]), d.get("split", "train"),
        )


@dataclass
class DatasetManifest:
    root: Path
    records: list
    header: dict = field(default_factory=dict)

    @property
    def categories(self):
        """Declared categories (header), falling back to those observed."""
        names = self.header.get("categories")
        if names:
            return [TaskCategory.parse(n) for n in names]
        seen = {r.category for r in self.records}
        return sorted(seen, key=TaskCategory.sort_key)

    @property
    def counts(self) -> dict:
        out = {c: 0 for c in self.categories}
        for r in self.records:
            out[r.category] = out.get(r.category, 0) + 1
        return out

    @property
    def created_with(self) -> str:
        return self.header.get("created_with", "")

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def by_category(self, split=None) -> dict:
        out = {c: [] for c in self.categories}
        for r in self.records:
            if split is None or r.split == split:
                out.setdefault(r.category, []).append(r)
        return out

    def path(self, rel) -> Path:
        return Path(self.root) / rel

    def load_pair(self, record: Record):
        return read_png(self.path(record.input_path)), read_png(self.path(record.target_path))

    def lines(self):
        header = dict(self.header)
        header["type"] = "header"
        header["format"] = MANIFEST_FORMAT
        header["counts"] = {c.name: n for c, n in self.counts.items()}
        yield json.dumps(header, sort_keys=True)
        for r in self.records:
            yield json.dumps(r.as_dict(), sort_keys=True)

    def save(self, path=None) -> Path:
        path = Path(path) if path else Path(self.root) / MANIFEST_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(self.lines()) + "\n", encoding="utf-8")
        return path

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.lines()).encode()).hexdigest()

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        if not path.exists():
            raise DatasetError(f"manifest not found: {path}")
        lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
        if not lines:
            raise DatasetError(f"empty manifest: {path}")
        header = json.loads(lines[0])
        if header.get("type") != "header":
            raise DatasetError("manifest must start with a header object")
        if header.get("format") != MANIFEST_FORMAT:
            raise DatasetError(f"unsupported manifest format {header.get('format')}")
        header = {k: v for k, v in header.items() if k not in ("type", "format", "counts")}
        records = [Record.from_dict(json.loads(ln)) for ln in lines[1:]]
        return cls(path.parent, records, header)

    def verify(self):
        """Raise DatasetError on the first integrity violation."""
        ids = set()
        for r in self.records:
            if r.id in ids:
                raise DatasetError(f"duplicate record id {r.id}")
            ids.add(r.id)
            for rel in (r.input_path, r.target_path):
                if not self.path(rel).exists():
                    raise DatasetError(f"record {r.id}: missing file {rel}")
            if parse_prompt(r.prompt).tasks != r.tasks:
                raise DatasetError(f"record {r.id}: prompt {r.prompt!r} does not match tasks")
            if r.split not in ("train", "test"):
                raise DatasetError(f"record {r.id}: bad split {r.split!r}")


def list_sources(source_dir) -> list:
    source_dir = Path(source_dir)
    if not source_dir.is_dir():
        raise DatasetError(f"source directory not found: {source_dir}")
    return sorted(p for p in source_dir.iterdir() if p.suffix.lower() in SOURCE_SUFFIXES)


def _sample_intensities(category, adjectives, rng):
    names = sorted(adjectives)
    probs = np.array([adjectives[n] for n in names], dtype=np.float64)
    probs = probs / probs.sum()
    out = []
    for kind in category.kinds:
        choice = names[rng.choice(len(names), p=probs)]
        out.append(TaskSpec(kind, 1.0 if choice == "none" else ADJECTIVES[choice]))
    return tuple(out)


def _make_providers(config: DatasetConfig, params: EffectParams) -> Providers:
    depth = FileDepth(Path(config.depth_dir)) if config.depth_dir else GradientDepth()
    if config.segments_dir:
        segments = FileSegments(Path(config.segments_dir))
    else:
        segments = KMeansSegments(k=params.segments, seed=params.seed)
    return Providers(depth, segments)


def _synthesize_job(job):
    config, source_path, tasks, record_seed, out_dir, record_id = job
    params = EffectParams.from_dict({**config.effects, "seed": record_seed})
    source = resize_center_crop(read_png(source_path), config.resolution)
    providers = _make_providers(config, params)
    x, y = synthesize_pair(source, tasks, params, providers, name=Path(source_path).name)
    write_png(x, Path(out_dir) / "input" / f"{record_id}.png")
    write_png(y, Path(out_dir) / "target" / f"{record_id}.png")


def build_dataset(sources, config: DatasetConfig, out_dir) -> DatasetManifest:
    """Synthesize every category's pairs and write PNGs plus ``manifest.jsonl``."""
    out_dir = Path(out_dir)
    source_paths = list_sources(sources) if not isinstance(sources, list) else list(sources)
    categories = config.parsed_categories()
    needed = max((config.count_for(c) for c in categories), default=0)
    if needed > len(source_paths):
        raise DatasetError(
            f"need at least {needed} source images, found {len(source_paths)}"
        )
    try:
        (out_dir / "input").mkdir(parents=True, exist_ok=True)
        (out_dir / "target").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot write dataset to {out_dir}: {exc}") from exc

    records, jobs = [], []
    for cat in categories:
        n = config.count_for(cat)
        rng = np.random.default_rng(stable_seed(config.seed, cat.name))
        order = rng.permutation(len(source_paths))[:n]
        for i, src_idx in enumerate(order):
            rid = f"{cat.name.replace('+', '-')}_{i:05d}"
            tasks = _sample_intensities(cat, config.adjectives, rng)
            record_seed = stable_seed(config.seed, cat.name, i)
            jobs.append((config, str(source_paths[src_idx]), tasks, record_seed, str(out_dir), rid))
            records.append(
                Record(rid, f"input/{rid}.png", f"target/{rid}.png", canonical_prompt(tasks), tasks)
            )

    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            list(pool.map(_synthesize_job, jobs, chunksize=8))
    else:
        for job in jobs:
            _synthesize_job(job)

    header = {
        "created_with": config.digest(),
        # worker count does not affect content, so it stays out of the header
        "config": {k: v for k, v in config.as_dict().items() if k != "workers"},
        "categories": [c.name for c in categories],
        "sources": {"provenance": config.source_provenance, "count": len(source_paths)},
        "version": __version__,
    }
    manifest = DatasetManifest(out_dir, records, header)
    manifest.save()
    log.info("built %d pairs in %s", len(records), out_dir)
    return manifest


def split_dataset(manifest: DatasetManifest, test_fraction: float, seed: int = 0) -> DatasetManifest:
    """Stratified per-category train/test split; returns a new manifest."""
    if not 0.0 <= test_fraction < 1.0:
        raise DatasetError("test_fraction must lie in [0, 1)")
    test_ids = set()
    for cat, recs in manifest.by_category().items():
        n_test = int(round(test_fraction * len(recs)))
        rng = np.random.default_rng(stable_seed(seed, "split", cat.name))
        picks = rng.permutation(len(recs))[:n_test]
        test_ids.update(recs[i].id for i in picks)
    records = [replace(r, split="test" if r.id in test_ids else "train") for r in manifest.records]
    header = dict(manifest.header, split={"test_fraction": test_fraction, "seed": seed})
    return DatasetManifest(manifest.root, records, header)


def sample_counts(manifest: DatasetManifest, phase: int | None = None) -> dict:
    """Training-split sample count per category.

    Phase 1 only sees single-task categories; phase 2 (or ``None``) sees all.
    """
    counts = {}
    for cat, recs in manifest.by_category("train").items():
        if phase == 1 and not cat.is_single:
            continue
        counts[cat] = len(recs)
    return counts


def load_arrays(manifest: DatasetManifest, records):
    """Stack records into signed-domain float32 arrays (N, 3, H, W)."""
    xs, ys = [], []
    for r in records:
        x, y = manifest.load_pair(r)
        xs.append(x.to("signed").data.transpose(2, 0, 1))
        ys.append(y.to("signed").data.transpose(2, 0, 1))
    return np.stack(xs).astype(np.float32), np.stack(ys).astype(np.float32)


# --- procedural source images ------------------------------------------------------


def synthetic_source(size: int, seed: int) -> Image:
    """A procedural scene: sky/ground gradient, coloured shapes, fine texture."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    top, bottom = rng.random(3), rng.random(3)
    img = top * (1 - yy[..., None]) + bottom * yy[..., None]
    for _ in range(rng.integers(3, 8)):
        cx, cy = rng.random(2)
        rx, ry = 0.05 + 0.25 * rng.random(2)
        color = rng.random(3)
        if rng.random() < 0.5:
            mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1
        else:
            mask = (np.abs(xx - cx) <= rx) & (np.abs(yy - cy) <= ry)
        shade = 0.85 + 0.15 * (1 - yy[mask])
        img[mask] = color * shade[:, None]
    freq = rng.uniform(8, 24)
    img += 0.04 * np.sin(2 * np.pi * freq * (xx + 0.5 * yy))[..., None]
    return Image.from_unit(np.clip(img, 0, 1), "u8")


def write_synthetic_sources(out_dir, count: int, size: int = 256, seed: int = 0) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        paths.append(write_png(synthetic_source(size, stable_seed(seed, "source", i)), out_dir / f"src_{i:05d}.png"))
    return paths
