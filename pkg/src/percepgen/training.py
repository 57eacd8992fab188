"""Losses and the two-phase adversarial training loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataset import DatasetManifest, load_arrays, sample_counts
from .errors import ContractError, TrainingError
from .imaging import Image, psnr
from .model import DiscriminatorConfig, GeneratorConfig, ModelBundle, TaskAwareDiscriminator, Generator, save_checkpoint
from .prompts import embed_prompt, get_provider
from .tasks import TaskCategory

log = logging.getLogger(__name__)

EPS = 1e-7


@dataclass
class LossConfig:
    lam: float = 100.0
    b_max: float = 4.0
    gan_label_smoothing: bool = False
    use_gan: bool = True
    use_boost: bool = True

    def __post_init__(self):
        if self.lam < 0 or self.b_max < 0:
            raise ContractError("lam and b_max must be non-negative")


@dataclass
class TrainSchedule:
    phase1_epochs: int = 40
    phase2_epochs: int = 60
    batch_size: int = 8
    lr: float = 2e-4
    betas: tuple = (0.5, 0.999)
    seed: int = 0
    checkpoint_every: int = 0
    probe_per_category: int = 2
    # final epochs over which lr falls linearly to zero (0 keeps it constant)
    decay_epochs: int = 0
    debug: bool = False

    def __post_init__(self):
        if self.phase1_epochs < 0 or self.phase2_epochs < 0:
            raise ContractError("phase epochs must be non-negative")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if not 0 <= self.decay_epochs <= self.phase1_epochs + self.phase2_epochs:
            raise ContractError("decay_epochs must lie in [0, total epochs]")
        self.betas = tuple(self.betas)

    @classmethod
    def from_total(cls, epochs: int, phase1_fraction: float = 0.4, **kw) -> "TrainSchedule":
        p1 = int(round(epochs * phase1_fraction))
        return cls(phase1_epochs=p1, phase2_epochs=epochs - p1, **kw)

    @property
    def epochs(self) -> int:
        return self.phase1_epochs + self.phase2_epochs

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``."""
        start = self.epochs - self.decay_epochs
        if self.decay_epochs == 0 or epoch <= start:
            return self.lr
        return self.lr * (self.epochs - epoch + 1) / (self.decay_epochs + 1)


# --- losses -----------------------------------------------------------------------------


def boost_factors(counts: dict, b_max: float) -> dict:
    """Per-category L1 boost, 1 for the best-populated category up to 1 + b_max."""
    if not counts:
        raise ContractError("no categories to boost")
    sc_max = max(counts.values())
    if sc_max <= 0:
        raise ContractError("all sample counts are zero")
    return {cat: 1.0 + b_max * (1.0 - n / sc_max) for cat, n in counts.items()}


def ta_l1_loss(y, gt, boost=1.0):
    """Mean absolute error with each batch item scaled by its boost factor."""
    y = torch.as_tensor(y)
    gt = torch.as_tensor(gt, dtype=y.dtype)
    per_item = (y - gt).abs().reshape(y.shape[0], -1).mean(dim=1)
    b = torch.as_tensor(boost, dtype=y.dtype)
    return (per_item * b).mean()


def tcgan_losses(p_real, p_fake, eps=EPS, label_smoothing=False, debug=False):
    """Task-aware conditional GAN losses from probability maps.

    ``p_real`` scores (input, ground truth, task); ``p_fake`` scores (input,
    generated, task). Returns ``(d_loss, g_loss)``; the generator term is the
    non-saturating ``-log p_fake``.
    """
    p_real = torch.as_tensor(p_real)
    p_fake = torch.as_tensor(p_fake, dtype=p_real.dtype)
    if debug:
        for name, p in (("p_real", p_real), ("p_fake", p_fake)):
            if torch.any((p <= 0) | (p >= 1)):
                log.warning("%s has values outside (0, 1) before clamping", name)
    p0 = p_real.clamp(eps, 1 - eps)
    p1 = p_fake.clamp(eps, 1 - eps)
    if label_smoothing:
        real_term = -(0.9 * torch.log(p0) + 0.1 * torch.log1p(-p0)).mean()
    else:
        real_term = -torch.log(p0).mean()
    d_loss = real_term - torch.log1p(-p1).mean()
    g_loss = -torch.log(p1).mean()
    return d_loss, g_loss


def total_generator_loss(g_gan, ta_l1, lam):
    return g_gan + lam * ta_l1


# --- training loop ----------------------------------------------------------------------------


@dataclass
class TrainResult:
    bundle: ModelBundle
    history: list = field(default_factory=list)
    run_dir: Path | None = None

    def metric(self, key):
        return [h[key] for h in self.history]


class _Data:
    def __init__(self, manifest, records, provider_id, dtype=torch.float32):
        self.records = records
        x, y = load_arrays(manifest, records)
        self.x = torch.from_numpy(x).to(dtype)
        self.y = torch.from_numpy(y).to(dtype)
        self.categories = [r.category for r in records]
        provider = get_provider(provider_id)
        cache = {}
        embs = []
        for r in records:
            if r.prompt not in cache:
                cache[r.prompt] = torch.from_numpy(embed_prompt(r.prompt, provider).vector).to(dtype)
            embs.append(cache[r.prompt])
        self.emb = torch.stack(embs) if embs else torch.zeros(0)


def _select(manifest: DatasetManifest, split: str, categories):
    recs = manifest.split(split)
    if categories is not None:
        allowed = {TaskCategory.parse(c) if isinstance(c, str) else c for c in categories}
        recs = [r for r in recs if r.category in allowed]
    return recs


def _probe_records(manifest, categories, per_category):
    out = []
    pool = _select(manifest, "test", categories) or _select(manifest, "train", categories)
    seen = {}
    for r in pool:
        if seen.get(r.category, 0) < per_category:
            out.append(r)
            seen[r.category] = seen.get(r.category, 0) + 1
    return out


def _signed_to_u8(t):
    arr = t.detach().cpu().double().numpy().transpose(1, 2, 0)
    return Image(np.clip(arr, -1, 1), "signed").to("u8")


def train(
    manifest: DatasetManifest,
    gen_config: GeneratorConfig | None = None,
    disc_config: DiscriminatorConfig | None = None,
    loss_config: LossConfig | None = None,
    schedule: TrainSchedule | None = None,
    run_dir=None,
    categories=None,
    provider_id: str = "hashed-token",
    on_epoch=None,
) -> TrainResult:
    """Train G (and D unless the GAN term is off) on the manifest's train split.

    Phase 1 draws only single-task categories; phase 2 draws every category.
    Boost factors are recomputed from the train-split counts at each phase.
    """
    gen_config = gen_config or GeneratorConfig()
    disc_config = disc_config or DiscriminatorConfig(text_dim=gen_config.text_dim)
    loss_config = loss_config or LossConfig()
    schedule = schedule or TrainSchedule()

    records = _select(manifest, "train", categories)
    if not records:
        raise TrainingError("the manifest has no training records for the requested categories")
    if schedule.phase1_epochs > 0 and not any(r.category.is_single for r in records):
        raise TrainingError("phase 1 needs at least one single-task category")

    torch.manual_seed(schedule.seed)
    rng = np.random.default_rng(schedule.seed)
    gen = Generator(gen_config)
    disc = TaskAwareDiscriminator(disc_config) if loss_config.use_gan else None
    bundle = ModelBundle(gen, gen_config, disc, disc_config if disc else None, provider_id)

    data = _Data(manifest, records, provider_id)
    probes = _probe_records(manifest, categories, schedule.probe_per_category)
    probe_data = _Data(manifest, probes, provider_id) if probes else None

    opt_g = torch.optim.Adam(gen.parameters(), lr=schedule.lr, betas=schedule.betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=schedule.lr, betas=schedule.betas) if disc else None

    run_dir = Path(run_dir) if run_dir else None
    metrics_fh = None
    if run_dir:
        try:
            run_dir.mkdir(parents=True, exist_ok=True)
            (run_dir / "train_config.json").write_text(json.dumps({
                "generator": gen_config.as_dict(), "discriminator": disc_config.as_dict(),
                "loss": asdict(loss_config), "schedule": asdict(schedule),
                "provider_id": provider_id, "manifest": manifest.created_with,
                "categories": [str(c) for c in categories] if categories else None,
            }, indent=2))
            metrics_fh = open(run_dir / "metrics.jsonl", "a", encoding="utf-8")
        except OSError as exc:
            raise TrainingError(f"cannot write to run directory {run_dir}: {exc}") from exc

    use_text = gen_config.text_conditioning
    history = []
    epoch = 0
    try:
        for phase, n_epochs in ((1, schedule.phase1_epochs), (2, schedule.phase2_epochs)):
            if n_epochs == 0:
                continue
            eligible = np.array([
                i for i, c in enumerate(data.categories) if phase == 2 or c.is_single
            ])
            used = {data.categories[i] for i in eligible}
            counts = {c: n for c, n in sample_counts(manifest, phase).items() if c in used}
            boosts = boost_factors(counts, loss_config.b_max) if loss_config.use_boost else {c: 1.0 for c in used}
            # items outside this phase are never drawn; 1.0 is a placeholder
            item_boost = torch.tensor([boosts.get(c, 1.0) for c in data.categories], dtype=data.x.dtype)
            for _ in range(n_epochs):
                epoch += 1
                for opt in (opt_g, opt_d):
                    for group in (opt.param_groups if opt else ()):
                        group["lr"] = schedule.lr_at(epoch)
                t0 = time.perf_counter()
                sums = {"d_loss": 0.0, "g_loss": 0.0, "taL1": 0.0, "l1": 0.0}
                seen = 0
                gen.train()
                order = rng.permutation(eligible)
                for start in range(0, len(order), schedule.batch_size):
                    idx = torch.from_numpy(order[start:start + schedule.batch_size])
                    x, gt = data.x[idx], data.y[idx]
                    emb = data.emb[idx]
                    b = item_boost[idx]
                    y = gen(x, emb if use_text else None)

                    d_val = 0.0
                    if disc is not None:
                        p0 = disc(x, gt, emb)
                        p1 = disc(x, y.detach(), emb)
                        d_loss, _ = tcgan_losses(p0, p1, label_smoothing=loss_config.gan_label_smoothing,
                                                 debug=schedule.debug)
                        opt_d.zero_grad(set_to_none=True)
                        d_loss.backward()
                        opt_d.step()
                        d_val = d_loss.item()
                        _, g_gan = tcgan_losses(p0.detach(), disc(x, y, emb))
                    else:
                        g_gan = torch.zeros((), dtype=y.dtype)
                    l1 = ta_l1_loss(y, gt, b)
                    total = total_generator_loss(g_gan, l1, loss_config.lam)
                    if not torch.isfinite(total) or not math.isfinite(d_val):
                        raise TrainingError(
                            f"non-finite loss at epoch {epoch}, batch {start // schedule.batch_size}: "
                            f"d_loss={d_val}, g_gan={g_gan.item()}, taL1={l1.item()}"
                        )
                    opt_g.zero_grad(set_to_none=True)
                    total.backward()
                    opt_g.step()

                    n = len(idx)
                    seen += n
                    sums["d_loss"] += d_val * n
                    sums["g_loss"] += g_gan.item() * n
                    sums["taL1"] += l1.item() * n
                    sums["l1"] += (y - gt).abs().mean().item() * n

                entry = {"epoch": epoch, "phase": phase, **{k: v / seen for k, v in sums.items()}}
                entry["probe_psnr"] = _probe_psnr(bundle, probe_data) if probe_data else {}
                entry["seconds"] = round(time.perf_counter() - t0, 3)
                history.append(entry)
                log.info("epoch %d phase %d taL1 %.4f d %.3f g %.3f", epoch, phase,
                         entry["taL1"], entry["d_loss"], entry["g_loss"])
                if metrics_fh:
                    metrics_fh.write(json.dumps(entry) + "\n")
                    metrics_fh.flush()
                if on_epoch:
                    on_epoch(entry)
                if run_dir and schedule.checkpoint_every and epoch % schedule.checkpoint_every == 0:
                    bundle.state = _state(epoch, phase, schedule, loss_config)
                    save_checkpoint(bundle, run_dir / f"checkpoint_{epoch:04d}.pgck")
        bundle.state = _state(epoch, 2 if schedule.phase2_epochs else 1, schedule, loss_config)
        if run_dir:
            save_checkpoint(bundle, run_dir / "model.pgck")
    except OSError as exc:
        raise TrainingError(f"I/O failure during training: {exc}") from exc
    finally:
        if metrics_fh:
            metrics_fh.close()
    gen.eval()
    return TrainResult(bundle, history, run_dir)


def _state(epoch, phase, schedule, loss_config):
    return {"epoch": epoch, "phase": phase, "schedule": asdict(schedule), "loss": asdict(loss_config)}


@torch.no_grad()
def _probe_psnr(bundle, probe):
    out = {}
    gen = bundle.generator
    gen.eval()
    emb = probe.emb if bundle.gen_config.text_conditioning else None
    pred = gen(probe.x, emb)
    per_cat = {}
    for i, cat in enumerate(probe.categories):
        val = psnr(_signed_to_u8(pred[i]), _signed_to_u8(probe.y[i]))
        per_cat.setdefault(cat.name, []).append(min(val, 100.0))
    for name, vals in per_cat.items():
        out[name] = float(np.mean(vals))
    gen.train()
    return out
