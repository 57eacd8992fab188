"""Text-conditioned U-Net generator, task-aware patch discriminator, checkpoints."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import __version__
from .errors import CheckpointError, CheckpointVersionError, ContractError
from .imaging import Image
from .prompts import TEXT_DIM, embed_prompt, get_provider, parse_prompt

CHECKPOINT_MAGIC = b"PGCK"
CHECKPOINT_FORMAT = 1
KERNEL = 4


@dataclass
class GeneratorConfig:
    input_size: int = 128
    levels: int = 5
    base_channels: int = 16
    max_multiplier: int = 8
    text_dim: int = TEXT_DIM
    em_hidden: list = field(default_factory=lambda: [1024, 1024])
    skip_connections: bool = True
    # False gives the vanilla U-Net baseline: no mapper, bottleneck passed through
    text_conditioning: bool = True
    # tanh(decoder) by default; residual gives clamp(input + decoder) with the
    # last layer zeroed, so an untrained model is the identity
    residual: bool = False

    def __post_init__(self):
        if self.levels < 2:
            raise ContractError("levels must be >= 2")
        if self.input_size % (2**self.levels):
            raise ContractError(
                f"input_size {self.input_size} is not divisible by 2^{self.levels}"
            )
        self.em_hidden = [int(w) for w in self.em_hidden]

    @property
    def channels(self):
        return [self.base_channels * min(2**i, self.max_multiplier) for i in range(self.levels)]

    @property
    def bottleneck(self):
        side = self.input_size // 2**self.levels
        return (self.channels[-1], side, side)

    @property
    def bottleneck_size(self) -> int:
        c, h, w = self.bottleneck
        return c * h * w

    @property
    def em_widths(self):
        return [self.text_dim + self.bottleneck_size, *self.em_hidden, self.bottleneck_size]

    def as_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class DiscriminatorConfig:
    layers: int = 4
    base_channels: int = 32
    max_multiplier: int = 8
    text_dim: int = TEXT_DIM
    text_channels: int = 8
    text_conditioning: bool = True

    def __post_init__(self):
        if self.layers < 1:
            raise ContractError("discriminator needs at least one layer")

    @property
    def channels(self):
        return [self.base_channels * min(2**i, self.max_multiplier) for i in range(self.layers)]

    @property
    def input_channels(self) -> int:
        return 6 + (self.text_channels if self.text_conditioning else 0)

    def as_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# Full-scale widths put the generator at ~3.0M U-Net + ~47.6M mapper
# (50.6M total) and the vanilla baseline at 7.66M.
def desk_generator(**overrides) -> GeneratorConfig:
    return GeneratorConfig(**{"input_size": 128, "levels": 5, "base_channels": 16,
                              "em_hidden": [1024, 1024], **overrides})


def full_scale_generator(**overrides) -> GeneratorConfig:
    return GeneratorConfig(**{"input_size": 1024, "levels": 8, "base_channels": 15,
                              "em_hidden": [5504, 4608], **overrides})


def full_scale_baseline(**overrides) -> GeneratorConfig:
    return GeneratorConfig(**{"input_size": 1024, "levels": 8, "base_channels": 24,
                              "text_conditioning": False, "em_hidden": [], **overrides})


def desk_discriminator(**overrides) -> DiscriminatorConfig:
    return DiscriminatorConfig(**{"layers": 4, "base_channels": 32, "text_channels": 8, **overrides})


PRESETS = {
    "desk": desk_generator,
    "full": full_scale_generator,
    "full-baseline": full_scale_baseline,
}


class EmbeddingMapper(nn.Module):
    """MLP fusing [text embedding, flattened bottleneck] into a bottleneck-shaped tensor."""

    def __init__(self, text_dim, bottleneck, hidden):
        super().__init__()
        self.text_dim = text_dim
        self.bottleneck = tuple(bottleneck)
        c, h, w = self.bottleneck
        widths = [text_dim + c * h * w, *hidden, c * h * w]
        layers = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            layers.append(nn.Linear(a, b))
            if i < len(widths) - 2:
                layers.append(nn.LeakyReLU(0.2))
        self.mlp = nn.Sequential(*layers)

    def forward(self, text_emb, image_emb):
        if text_emb.ndim != 2 or text_emb.shape[1] != self.text_dim:
            raise ContractError(
                f"text embedding shape {tuple(text_emb.shape)} != (B, {self.text_dim})"
            )
        if tuple(image_emb.shape[1:]) != self.bottleneck:
            raise ContractError(
                f"image embedding shape {tuple(image_emb.shape[1:])} != {self.bottleneck}"
            )
        joint = torch.cat([text_emb, image_emb.flatten(1)], dim=1)
        return self.mlp(joint).view(-1, *self.bottleneck)


def _down(cin, cout, act=True, norm=True):
    layers = [nn.LeakyReLU(0.2)] if act else []
    layers.append(nn.Conv2d(cin, cout, KERNEL, 2, 1, bias=not norm))
    if norm:
        layers.append(nn.InstanceNorm2d(cout, affine=True))
    return nn.Sequential(*layers)


def _up(cin, cout, norm=True):
    layers = [nn.ReLU(), nn.ConvTranspose2d(cin, cout, KERNEL, 2, 1, bias=not norm)]
    if norm:
        layers.append(nn.InstanceNorm2d(cout, affine=True))
    return nn.Sequential(*layers)


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        ch = config.channels
        L = config.levels
        enc = [_down(3, ch[0], act=False, norm=False)]
        for i in range(1, L - 1):
            enc.append(_down(ch[i - 1], ch[i]))
        enc.append(_down(ch[L - 2], ch[L - 1], norm=False))
        self.encoder = nn.ModuleList(enc)

        mult = 2 if config.skip_connections else 1
        dec = [None] * L
        dec[L - 1] = _up(ch[L - 1], ch[L - 2])
        for i in range(L - 2, 0, -1):
            dec[i] = _up(mult * ch[i], ch[i - 1])
        dec[0] = _up(mult * ch[0], 3, norm=False)
        self.decoder = nn.ModuleList(dec)

        self.mapper = (
            EmbeddingMapper(config.text_dim, config.bottleneck, config.em_hidden)
            if config.text_conditioning
            else None
        )
        if config.residual:
            out_conv = self.decoder[0][1]
            nn.init.zeros_(out_conv.weight)
            nn.init.zeros_(out_conv.bias)

    def encode(self, x):
        feats = []
        for block in self.encoder:
            x = block(x)
            feats.append(x)
        return feats

    def forward(self, x, text_emb=None):
        cfg = self.config
        side = 2**cfg.levels
        if x.ndim != 4 or x.shape[1] != 3:
            raise ContractError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
        if x.shape[2] % side or x.shape[3] % side:
            raise ContractError(
                f"input {x.shape[2]}x{x.shape[3]} not divisible by 2^{cfg.levels}"
            )
        feats = self.encode(x)
        h = feats[-1]
        if self.mapper is not None:
            if text_emb is None:
                raise ContractError("text-conditioned generator needs a text embedding")
            h = self.mapper(text_emb, h)
        h = self.decoder[-1](h)
        for i in range(cfg.levels - 2, -1, -1):
            if cfg.skip_connections:
                h = torch.cat([h, feats[i]], dim=1)
            h = self.decoder[i](h)
        if cfg.residual:
            return torch.clamp(x + h, -1.0, 1.0)
        return torch.tanh(h)


class TaskAwareDiscriminator(nn.Module):
    """Patch classifier on [input, probe, projected task embedding] channels."""

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        ch = config.channels
        self.text_proj = (
            nn.Linear(config.text_dim, config.text_channels) if config.text_conditioning else None
        )
        blocks = [nn.Conv2d(config.input_channels, ch[0], KERNEL, 2, 1), nn.LeakyReLU(0.2)]
        for i in range(1, config.layers):
            blocks += [
                nn.Conv2d(ch[i - 1], ch[i], KERNEL, 2, 1, bias=False),
                nn.InstanceNorm2d(ch[i], affine=True),
                nn.LeakyReLU(0.2),
            ]
        blocks.append(nn.Conv2d(ch[-1], 1, 3, 1, 1))
        self.net = nn.Sequential(*blocks)

    def stack(self, image, probe, text_emb=None):
        if image.shape != probe.shape:
            raise ContractError(f"shape mismatch: {tuple(image.shape)} vs {tuple(probe.shape)}")
        parts = [image, probe]
        if self.text_proj is not None:
            if text_emb is None:
                raise ContractError("task-aware discriminator needs a text embedding")
            t = self.text_proj(text_emb)[:, :, None, None]
            parts.append(t.expand(-1, -1, image.shape[2], image.shape[3]))
        return torch.cat(parts, dim=1)

    def logits(self, image, probe, text_emb=None):
        return self.net(self.stack(image, probe, text_emb))

    def forward(self, image, probe, text_emb=None):
        return torch.sigmoid(self.logits(image, probe, text_emb))


# --- parameter accounting -------------------------------------------------------


def _conv(cin, cout, bias):
    return cin * cout * KERNEL * KERNEL + (cout if bias else 0)


def parameter_breakdown(config: GeneratorConfig) -> dict:
    ch, L = config.channels, config.levels
    mult = 2 if config.skip_connections else 1
    unet = _conv(3, ch[0], True)
    for i in range(1, L - 1):
        unet += _conv(ch[i - 1], ch[i], False) + 2 * ch[i]
    unet += _conv(ch[L - 2], ch[L - 1], True)
    unet += _conv(ch[L - 1], ch[L - 2], False) + 2 * ch[L - 2]
    for i in range(L - 2, 0, -1):
        unet += _conv(mult * ch[i], ch[i - 1], False) + 2 * ch[i - 1]
    unet += _conv(mult * ch[0], 3, True)
    em = 0
    if config.text_conditioning:
        w = config.em_widths
        em = sum(a * b + b for a, b in zip(w[:-1], w[1:]))
    return {"unet": unet, "em": em, "total": unet + em}


def discriminator_parameters(config: DiscriminatorConfig) -> int:
    ch = config.channels
    n = config.text_dim * config.text_channels + config.text_channels if config.text_conditioning else 0
    n += config.input_channels * ch[0] * 16 + ch[0]
    for i in range(1, config.layers):
        n += ch[i - 1] * ch[i] * 16 + 2 * ch[i]
    return n + ch[-1] * 9 + 1


def count_parameters(obj) -> int:
    """Trainable parameters of a generator config/module/bundle (discriminator excluded)."""
    if isinstance(obj, GeneratorConfig):
        return parameter_breakdown(obj)["total"]
    if isinstance(obj, DiscriminatorConfig):
        return discriminator_parameters(obj)
    if isinstance(obj, ModelBundle):
        return parameter_breakdown(obj.gen_config)["total"]
    if isinstance(obj, nn.Module):
        return sum(p.numel() for p in obj.parameters() if p.requires_grad)
    raise TypeError(f"cannot count parameters of {type(obj).__name__}")


# --- bundle ---------------------------------------------------------------------------


def image_to_tensor(img: Image) -> torch.Tensor:
    arr = img.to("signed").data.transpose(2, 0, 1).astype(np.float32)
    return torch.from_numpy(np.ascontiguousarray(arr))[None]


def tensor_to_image(t: torch.Tensor) -> Image:
    arr = t.detach().cpu().double().numpy()[0].transpose(1, 2, 0)
    return Image(np.clip(arr, -1.0, 1.0), "signed")


@dataclass
class ModelBundle:
    generator: Generator
    gen_config: GeneratorConfig
    discriminator: TaskAwareDiscriminator | None = None
    disc_config: DiscriminatorConfig | None = None
    provider_id: str = "hashed-token"
    state: dict = field(default_factory=dict)

    @classmethod
    def create(cls, gen_config=None, disc_config=None, provider_id="hashed-token", seed=0):
        gen_config = gen_config or desk_generator()
        torch.manual_seed(seed)
        gen = Generator(gen_config)
        disc = TaskAwareDiscriminator(disc_config) if disc_config else None
        return cls(gen, gen_config, disc, disc_config, provider_id)

    def embed(self, prompt) -> torch.Tensor:
        vec = embed_prompt(prompt, get_provider(self.provider_id)).vector
        if vec.shape[0] != self.gen_config.text_dim:
            raise ContractError(
                f"provider {self.provider_id!r} yields {vec.shape[0]}-d embeddings, "
                f"model expects {self.gen_config.text_dim}"
            )
        return torch.from_numpy(vec.astype(np.float32))[None]

    @torch.no_grad()
    def forward_tensor(self, x: torch.Tensor, text_emb: torch.Tensor | None) -> torch.Tensor:
        self.generator.eval()
        return self.generator(x, text_emb if self.gen_config.text_conditioning else None)

    def enhance(self, img: Image, prompt: str) -> Image:
        """Run the generator on one image; returns a signed-domain image."""
        spec = parse_prompt(prompt)
        size = self.gen_config.input_size
        if self.gen_config.text_conditioning and (img.height, img.width) != (size, size):
            raise ContractError(f"model expects {size}x{size} input, got {img.width}x{img.height}")
        emb = self.embed(spec) if self.gen_config.text_conditioning else None
        return tensor_to_image(self.forward_tensor(image_to_tensor(img), emb))

    def parameter_count(self) -> int:
        return count_parameters(self)


def save_checkpoint(bundle: ModelBundle, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = [("generator." + k, v) for k, v in bundle.generator.state_dict().items()]
    if bundle.discriminator is not None:
        tensors += [("discriminator." + k, v) for k, v in bundle.discriminator.state_dict().items()]
    index, blobs, offset = [], [], 0
    for name, t in tensors:
        data = t.detach().cpu().numpy().astype("<f4", copy=False).tobytes()
        index.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "format_version": CHECKPOINT_FORMAT,
        "package_version": __version__,
        "generator": bundle.gen_config.as_dict(),
        "discriminator": bundle.disc_config.as_dict() if bundle.disc_config else None,
        "provider_id": bundle.provider_id,
        "state": bundle.state,
        "tensors": index,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_FORMAT, len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)
    return path


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        header, _ = _read_header(fh)
    return header


def _read_header(fh):
    magic = fh.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"not a checkpoint file (magic {magic!r})")
    version, length = struct.unpack("<II", fh.read(8))
    if version != CHECKPOINT_FORMAT:
        raise CheckpointVersionError(version, CHECKPOINT_FORMAT)
    header = json.loads(fh.read(length).decode("utf-8"))
    return header, 12 + length


def load_checkpoint(path) -> ModelBundle:
    with open(path, "rb") as fh:
        header, start = _read_header(fh)
        payload = fh.read()
    gen_cfg = GeneratorConfig.from_dict(header["generator"])
    disc_cfg = DiscriminatorConfig.from_dict(header["discriminator"]) if header["discriminator"] else None
    bundle = ModelBundle(
        Generator(gen_cfg), gen_cfg,
        TaskAwareDiscriminator(disc_cfg) if disc_cfg else None, disc_cfg,
        header["provider_id"], header.get("state", {}),
    )
    gen_sd, disc_sd = {}, {}
    for entry in header["tensors"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"checkpoint truncated at tensor {entry['name']}")
        arr = np.frombuffer(payload, dtype="<f4", count=entry["nbytes"] // 4, offset=entry["offset"])
        t = torch.from_numpy(arr.reshape(entry["shape"]).astype(np.float32))
        owner, key = entry["name"].split(".", 1)
        (gen_sd if owner == "generator" else disc_sd)[key] = t
    bundle.generator.load_state_dict(gen_sd)
    if bundle.discriminator is not None:
        bundle.discriminator.load_state_dict(disc_sd)
    bundle.generator.eval()
    return bundle
