"""Prompt grammar and text embeddings.

Grammar (case-insensitive, whitespace-normalised)::

    prompt      := phrase ("and" phrase)*
    phrase      := [adjective] verb_phrase
    verb_phrase := "foveate" | "denoise" | "enhance dynamic range"
                 | "apply chromostereopsis"
    adjective   := "mildly" | "slightly" | "lightly" | "strongly"
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import PromptParseError, ProviderUnavailable
from .tasks import TaskCategory, TaskKind, TaskSpec

VERB_PHRASES = {
    TaskKind.F: ("foveate",),
    TaskKind.ID: ("denoise",),
    TaskKind.DRE: ("enhance", "dynamic", "range"),
    TaskKind.C: ("apply", "chromostereopsis"),
}
ADJECTIVES = {"mildly": 0.3, "slightly": 0.45, "lightly": 0.6, "strongly": 1.0}
# rendering of each intensity; full strength is written without an adjective
_RENDER_ADJECTIVE = {0.3: "mildly", 0.45: "slightly", 0.6: "lightly"}
INTENSITIES = (0.3, 0.45, 0.6, 1.0)
MAX_TASKS = 4
TEXT_DIM = 512


@dataclass(frozen=True)
class PromptSpec:
    tasks: tuple
    raw_text: str = field(default="", compare=False)

    def __post_init__(self):
        tasks = tuple(self.tasks)
        if not 1 <= len(tasks) <= MAX_TASKS:
            raise PromptParseError(f"a prompt needs 1-{MAX_TASKS} tasks, got {len(tasks)}")
        kinds = [t.kind for t in tasks]
        if len(set(kinds)) != len(kinds):
            raise PromptParseError("duplicate task in prompt")
        object.__setattr__(self, "tasks", tasks)

    @property
    def category(self) -> TaskCategory:
        return TaskCategory(t.kind for t in self.tasks)

    def normalized(self) -> "PromptSpec":
        """Same tasks, sorted into canonical task order."""
        return PromptSpec(tuple(sorted(self.tasks, key=lambda t: t.kind.rank)), self.raw_text)

    def intensity(self, kind: TaskKind) -> float | None:
        for t in self.tasks:
            if t.kind == kind:
                return t.intensity
        return None


def _tokens(text: str):
    return str(text).lower().split()


def parse_prompt(text: str) -> PromptSpec:
    tokens = _tokens(text)
    if not tokens:
        raise PromptParseError("empty prompt", token="")
    tasks = []
    seen = set()
    i = 0
    while True:
        if i >= len(tokens):
            raise PromptParseError("prompt ends with a dangling 'and'", token="and")
        intensity = 1.0
        if tokens[i] in ADJECTIVES:
            intensity = ADJECTIVES[tokens[i]]
            i += 1
            if i >= len(tokens):
                raise PromptParseError(
                    f"adjective {tokens[i - 1]!r} is not followed by a task", token=tokens[i - 1]
                )
        kind = _match_verb(tokens, i)
        if kind in seen:
            raise PromptParseError(
                f"duplicate task {tokens[i]!r} ({kind.value}) in prompt", token=tokens[i]
            )
        seen.add(kind)
        tasks.append(TaskSpec(kind, intensity))
        i += len(VERB_PHRASES[kind])
        if i == len(tokens):
            break
        if tokens[i] != "and":
            raise PromptParseError(f"unknown token {tokens[i]!r}, expected 'and'", token=tokens[i])
        i += 1
    if len(tasks) > MAX_TASKS:
        raise PromptParseError(f"at most {MAX_TASKS} tasks per prompt")
    return PromptSpec(tuple(tasks), raw_text=str(text))


def _match_verb(tokens, i) -> TaskKind:
    head = tokens[i]
    for kind, words in VERB_PHRASES.items():
        if head != words[0]:
            continue
        for j, word in enumerate(words[1:], start=1):
            got = tokens[i + j] if i + j < len(tokens) else None
            if got != word:
                shown = got if got is not None else "<end>"
                raise PromptParseError(
                    f"unknown token {shown!r} in {' '.join(words)!r}", token=shown
                )
        return kind
    raise PromptParseError(f"unknown verb {head!r}", token=head)


def render_task(task: TaskSpec) -> str:
    verb = " ".join(VERB_PHRASES[task.kind])
    if task.intensity == 1.0:
        return verb
    try:
        adjective = _RENDER_ADJECTIVE[task.intensity]
    except KeyError:
        raise PromptParseError(
            f"intensity {task.intensity} has no adjective; use one of {INTENSITIES}"
        ) from None
    return f"{adjective} {verb}"


def canonical_prompt(spec: PromptSpec | Sequence[TaskSpec]) -> str:
    tasks = spec.tasks if isinstance(spec, PromptSpec) else tuple(spec)
    return " and ".join(render_task(t) for t in tasks)


def category_prompt(category: TaskCategory, intensities=None) -> str:
    """Canonical prompt for a category, tasks in canonical order."""
    intensities = intensities or {}
    return canonical_prompt(
        [TaskSpec(k, intensities.get(k, 1.0)) for k in category.kinds]
    )


# --- embeddings ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TextEmbedding:
    vector: np.ndarray
    provider_id: str

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ValueError("text embedding must be a finite 1-D vector")
        object.__setattr__(self, "vector", v)

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


class HashedTokenProvider:
    """Network-free provider: seeded Gaussian per token, averaged, L2-normalised."""

    provider_id = "hashed-token"

    def __init__(self, dim: int = TEXT_DIM, salt: str = "percepgen"):
        self.dim = dim
        self.salt = salt
        self._cache = {}

    def _token_vector(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            digest = hashlib.sha256(f"{self.salt}:{token}".encode()).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            vec = rng.standard_normal(self.dim)
            self._cache[token] = vec
        return vec

    def __call__(self, text: str) -> np.ndarray:
        tokens = _tokens(text)
        if not tokens:
            raise ValueError("cannot embed empty text")
        mean = np.mean([self._token_vector(t) for t in tokens], axis=0)
        return mean / np.linalg.norm(mean)


class ClipTextProvider:
    """Pretrained CLIP text tower via ``transformers`` (weights must be obtainable)."""

    provider_id = "clip"

    def __init__(self, model_name: str = "openai/clip-vit-base-patch32"):
        try:
            import torch
            from transformers import CLIPModel, CLIPTokenizer

            self._tokenizer = CLIPTokenizer.from_pretrained(model_name)
            self._model = CLIPModel.from_pretrained(model_name).eval()
        except Exception as exc:  # missing package, weights or network
            raise ProviderUnavailable(f"CLIP provider unavailable: {exc}") from exc
        self._torch = torch
        self.dim = self._model.config.projection_dim

    def __call__(self, text: str) -> np.ndarray:
        with self._torch.no_grad():
            batch = self._tokenizer([text], padding=True, return_tensors="pt")
            feats = self._model.get_text_features(**batch)[0]
        v = feats.double().numpy()
        return v / np.linalg.norm(v)


_PROVIDER_FACTORIES = {
    HashedTokenProvider.provider_id: HashedTokenProvider,
    ClipTextProvider.provider_id: ClipTextProvider,
}
_provider_cache = {}


def get_provider(provider_id: str = HashedTokenProvider.provider_id):
    if provider_id not in _PROVIDER_FACTORIES:
        raise ProviderUnavailable(
            f"unknown text provider {provider_id!r}; known: {sorted(_PROVIDER_FACTORIES)}"
        )
    if provider_id not in _provider_cache:
        _provider_cache[provider_id] = _PROVIDER_FACTORIES[provider_id]()
    return _provider_cache[provider_id]


def register_provider(provider_id: str, factory):
    _PROVIDER_FACTORIES[provider_id] = factory
    _provider_cache.pop(provider_id, None)


def embed_text(text: str, provider="hashed-token") -> TextEmbedding:
    if isinstance(provider, str):
        provider = get_provider(provider)
    return TextEmbedding(provider(text), provider.provider_id)


def embed_prompt(text_or_spec, provider="hashed-token") -> TextEmbedding:
    """Embed the canonical rendering of a prompt, so equivalent wordings agree.

    Tasks are put in canonical order first; "foveate and denoise" and
    "denoise and foveate" share one embedding.
    """
    spec = text_or_spec if isinstance(text_or_spec, PromptSpec) else parse_prompt(text_or_spec)
    return embed_text(canonical_prompt(spec.normalized()), provider)
