"""Image-quality tables, daisy-chain baselines, inference timing and ablations."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataset import DatasetManifest, stable_seed
from .errors import ContractError
from .imaging import Image, psnr, ssim, write_png
from .model import ModelBundle
from .tasks import TaskCategory

log = logging.getLogger(__name__)

# Published full-scale numbers (1024x1024, RTX 3090 / Jetson Nano). Kept for
# report footers only; desk-scale runs are never compared against them.
PAPER_REFERENCE = {
    "label": "paper-reported, different scale/hardware",
    "image_quality": {
        "F": {"single-task": (27.43, 0.79), "ours": (25.64, 0.74)},
        "DRE": {"single-task": (33.38, 0.92), "ours": (31.07, 0.88)},
        "ID": {"single-task": (35.90, 0.95), "ours": (34.05, 0.92)},
        "C": {"single-task": (16.87, 0.81), "ours": (17.04, 0.81)},
        "ID+C": {"two-task": (16.94, 0.81), "daisy-chain": (16.02, 0.73), "ours": (16.74, 0.80)},
        "DRE+C": {"two-task": (16.49, 0.80), "daisy-chain": (16.27, 0.80), "ours": (15.91, 0.78)},
        "ID+F": {"two-task": (27.15, 0.78), "daisy-chain": (27.15, 0.78), "ours": (25.65, 0.71)},
        "DRE+F": {"two-task": (26.60, 0.75), "daisy-chain": (26.59, 0.76), "ours": (25.06, 0.69)},
        "DRE+ID+F+C": {"four-task": (16.27, 0.62), "daisy-chain": (12.46, 0.30), "ours": (17.14, 0.66)},
    },
    "performance": {
        "desktop": {"single-task": (1.34, 7.656), "daisy-chain-2": (3.79, 15.312),
                    "daisy-chain-4": (7.65, 30.624), "n-task": (1.34, 7.656), "ours": (1.74, 50.593)},
        "embedded": {"single-task": (129.56, 7.656), "daisy-chain-2": (409.16, 15.312),
                     "daisy-chain-4": (810.28, 30.624), "n-task": (129.56, 7.656),
                     "streaming": (179.14, 1.222), "ours": (260.82, 50.593)},
    },
}


# --- predictors ----------------------------------------------------------------------
# A predictor maps (input image, prompt) to an output image.


class BundlePredictor:
    def __init__(self, bundle: ModelBundle):
        self.bundle = bundle

    def __call__(self, img: Image, prompt: str) -> Image:
        return self.bundle.enhance(img, prompt).to("u8")


class IdentityPredictor:
    """Returns its input; the do-nothing anchor every model must beat."""

    def __call__(self, img: Image, prompt: str) -> Image:
        return img


class OraclePredictor:
    """Looks up the stored target for an input, for pipeline self-checks."""

    def __init__(self, manifest: DatasetManifest):
        self._targets = {}
        for r in manifest.records:
            x, y = manifest.load_pair(r)
            self._targets[(_digest(x), r.prompt)] = y

    def __call__(self, img: Image, prompt: str) -> Image:
        return self._targets[(_digest(img), prompt)]


class DaisyChain:
    """Applies predictors in sequence, each with its own prompt."""

    def __init__(self, stages):
        self.stages = list(stages)  # [(predictor, prompt), ...]
        if not self.stages:
            raise ContractError("a daisy chain needs at least one stage")

    def __call__(self, img: Image, prompt: str = "") -> Image:
        return daisy_chain_apply(self.stages, img)


def _digest(img: Image) -> str:
    return hashlib.sha256(img.to("u8").data.tobytes()).hexdigest()


def daisy_chain_apply(stages, img: Image) -> Image:
    """Feed ``img`` through ``[(predictor_or_bundle, prompt), ...]`` in order."""
    out = img
    for i, (model, prompt) in enumerate(stages):
        if isinstance(model, ModelBundle):
            model = BundlePredictor(model)
        log.info("daisy chain stage %d: %s (%r)", i, type(model).__name__, prompt)
        out = model(out.to("u8"), prompt)
    return out


# --- evaluation table ------------------------------------------------------------------


@dataclass
class CategoryResult:
    category: str
    n: int
    psnr_db: float
    ssim: float
    per_image: list = field(default_factory=list)

    def as_dict(self):
        return {"category": self.category, "n": self.n, "psnr_db": _num(self.psnr_db),
                "ssim": self.ssim}


@dataclass
class EvalReport:
    results: dict
    skipped: list = field(default_factory=list)

    def __getitem__(self, category):
        return self.results[str(category)]

    def as_dict(self):
        return {
            "categories": {k: v.as_dict() for k, v in self.results.items()},
            "skipped": self.skipped,
            "reference": PAPER_REFERENCE,
        }

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.as_dict(), indent=2))
        return path


def _num(v):
    return "inf" if math.isinf(v) else v


def evaluate_model(
    model,
    manifest: DatasetManifest,
    categories=None,
    split: str = "test",
    out_dir=None,
    grid_limit: int = 4,
) -> EvalReport:
    """Mean PSNR/SSIM of ``model(input, prompt)`` against the stored targets."""
    if isinstance(model, ModelBundle):
        model = BundlePredictor(model)
    by_cat = manifest.by_category(split)
    wanted = [TaskCategory.parse(c) if isinstance(c, str) else c for c in categories] if categories else list(by_cat)
    results, skipped = {}, []
    for cat in wanted:
        recs = by_cat.get(cat, [])
        if not recs:
            log.warning("category %s has no %s records; skipped", cat, split)
            skipped.append(cat.name)
            continue
        p_vals, s_vals, tiles = [], [], []
        for r in recs:
            x, y = manifest.load_pair(r)
            pred = model(x, r.prompt).to("u8")
            p_vals.append(psnr(pred, y))
            s_vals.append(ssim(pred, y))
            if out_dir and len(tiles) < grid_limit:
                tiles.append(np.concatenate([x.data, pred.data, y.data], axis=1))
        results[cat.name] = CategoryResult(
            cat.name, len(recs), float(np.mean(p_vals)), float(np.mean(s_vals)),
            [{"id": r.id, "psnr_db": _num(p), "ssim": s} for r, p, s in zip(recs, p_vals, s_vals)],
        )
        if out_dir and tiles:
            write_png(Image(np.concatenate(tiles, axis=0), "u8"), Path(out_dir) / f"grid_{cat.name}.png")
    report = EvalReport(results, skipped)
    if out_dir:
        report.write(Path(out_dir) / "report.json")
    return report


# --- timing -----------------------------------------------------------------------------


def hardware_descriptor() -> dict:
    return {
        "machine": platform.machine(),
        "processor": platform.processor() or platform.machine(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "threads": torch.get_num_threads(),
        "device": "cpu",
    }


def benchmark_inference(bundles, input_size=None, warmup: int = 3, iters: int = 20,
                        prompt: str = "foveate", include_embedding: bool = False) -> dict:
    """Wall-clock a single image through one bundle or a chain of bundles."""
    if iters <= 0:
        raise ContractError("iters must be positive")
    chain = bundles if isinstance(bundles, (list, tuple)) else [bundles]
    size = input_size or chain[0].gen_config.input_size
    gen = torch.Generator().manual_seed(0)
    x = torch.rand(1, 3, size, size, generator=gen) * 2 - 1
    embs = [b.embed(prompt) if b.gen_config.text_conditioning else None for b in chain]

    def run():
        h = x
        for b, e in zip(chain, embs):
            if include_embedding and b.gen_config.text_conditioning:
                e = b.embed(prompt)
            h = b.forward_tensor(h, e)
        return h

    for _ in range(warmup):
        run()
    times = []
    for _ in range(iters):
        t0 = time.perf_counter()
        run()
        times.append((time.perf_counter() - t0) * 1000.0)
    times = np.array(times)
    return {
        "mean_ms": float(times.mean()),
        "p50_ms": float(np.percentile(times, 50)),
        "p95_ms": float(np.percentile(times, 95)),
        "iters": iters,
        "warmup": warmup,
        "input_size": size,
        "models": len(chain),
        "hardware": hardware_descriptor(),
    }


# --- sample-size ablation ---------------------------------------------------------------------


def subsample_category(manifest: DatasetManifest, category, n: int, seed: int = 0) -> DatasetManifest:
    """Keep only ``n`` training records of ``category``; test records are untouched."""
    category = TaskCategory.parse(category) if isinstance(category, str) else category
    train = [r for r in manifest.records if r.split == "train" and r.category == category]
    rng = np.random.default_rng(stable_seed(seed, "subsample", category.name))
    keep = {train[i].id for i in rng.permutation(len(train))[:n]}
    records = [
        r for r in manifest.records
        if r.split != "train" or r.category != category or r.id in keep
    ]
    return DatasetManifest(manifest.root, records, dict(manifest.header))


def sample_size_ablation(
    manifest: DatasetManifest,
    reduced_category,
    train_fn,
    reduced_counts=(0, 50, 100, 150, 200),
    out_dir=None,
    seed: int = 0,
) -> dict:
    """Train boosted and unboosted models at each reduced count and score them.

    ``train_fn(manifest, use_boost)`` must return a trained ModelBundle. The
    reduced category is evaluated on the (unreduced) test split.
    """
    reduced_category = TaskCategory.parse(reduced_category) if isinstance(reduced_category, str) else reduced_category
    full = sum(1 for r in manifest.split("train") if r.category == reduced_category)
    curves = {"boosted": [], "unboosted": []}
    for n in reduced_counts:
        sub = subsample_category(manifest, reduced_category, n, seed)
        for arm, use_boost in (("boosted", True), ("unboosted", False)):
            bundle = train_fn(sub, use_boost)
            rep = evaluate_model(bundle, sub, [reduced_category])
            res = rep[reduced_category.name]
            curves[arm].append({"count": n, "psnr_db": res.psnr_db, "ssim": res.ssim})
            log.info("ablation %s n=%d %s: %.2f dB", reduced_category, n, arm, res.psnr_db)
    result = {
        "reduced_category": reduced_category.name,
        "full_count": full,
        "reduced_counts": list(reduced_counts),
        "curves": curves,
    }
    if out_dir:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "ablation.json").write_text(json.dumps(result, indent=2))
        plot_ablation(result, out_dir / "ablation.png")
    return result


def plot_ablation(result: dict, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    for arm, style in (("boosted", "o-"), ("unboosted", "s--")):
        pts = result["curves"][arm]
        counts = [p["count"] for p in pts]
        axes[0].plot(counts, [p["psnr_db"] for p in pts], style, label=arm)
        axes[1].plot(counts, [p["ssim"] for p in pts], style, label=arm)
    axes[0].set_ylabel("PSNR (dB)")
    axes[1].set_ylabel("SSIM")
    for ax in axes:
        ax.set_xlabel(f"{result['reduced_category']} training samples")
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
