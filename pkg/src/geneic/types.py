"""Plain value types passed between the pipeline stages."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import ContractError


def _frozen(arr, dtype=np.float64) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ImageSample:
    id: str
    pixels: np.ndarray  # H x W x C in [0, 1]

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or min(px.shape) <= 0:
            raise ContractError(f"image {self.id!r}: expected H x W x C pixels, got shape {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ContractError(f"image {self.id!r}: pixel values must be finite and within [0, 1]")
        object.__setattr__(self, "pixels", _frozen(px))

    @property
    def shape(self):
        return self.pixels.shape


@dataclass(frozen=True)
class VisualEmbedding:
    tokens: np.ndarray  # q x d_dec, already projected into decoder space

    def __post_init__(self):
        t = np.asarray(self.tokens, dtype=np.float64)
        if t.ndim != 2 or t.shape[0] < 1:
            raise ContractError(f"visual embedding must be q x d_dec with q >= 1, got {t.shape}")
        object.__setattr__(self, "tokens", _frozen(t))


@dataclass(frozen=True)
class TokenSeq:
    tokens: tuple[int, ...]
    eos_terminated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class CaptionSample:
    seq: TokenSeq
    text: str
    logprobs: tuple[float, ...]
    mode: Literal["greedy", "sampled"]

    def __post_init__(self):
        object.__setattr__(self, "logprobs", tuple(float(x) for x in self.logprobs))
        if len(self.logprobs) != len(self.seq.tokens):
            raise ContractError("one log-probability per token is required")

    @property
    def logprob(self) -> float:
        return float(sum(self.logprobs))


@dataclass(frozen=True)
class JointEmbedding:
    vec: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        object.__setattr__(self, "vec", _frozen(np.ravel(self.vec)))

    def norm(self) -> float:
        return float(np.linalg.norm(self.vec))

    def normalize(self) -> "JointEmbedding":
        n = self.norm()
        if n == 0.0 or not np.isfinite(n):
            raise ContractError("cannot normalize a zero-norm joint embedding")
        return JointEmbedding(self.vec / n, normalized=True)


@dataclass(frozen=True)
class FeatureMapSet:
    grid: np.ndarray  # l x w x c

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float64)
        if g.ndim != 3 or min(g.shape) <= 0:
            raise ContractError(f"feature maps must be l x w x c, got shape {g.shape}")
        if not np.all(np.isfinite(g)):
            raise ContractError("feature maps contain non-finite values")
        object.__setattr__(self, "grid", _frozen(g))

    @property
    def shape(self):
        return self.grid.shape


@dataclass(frozen=True)
class ComposedInput:
    """Decoder input: visual slots followed by a prompt block.

    ``prompt_span`` is the half-open row range ``(start, stop)`` of the prompt.
    """

    slots: np.ndarray
    prompt_span: tuple[int, int] = field(default=(0, 0))

    def __post_init__(self):
        s = np.asarray(self.slots, dtype=np.float64)
        if s.ndim != 2:
            raise ContractError(f"slots must be a 2-D matrix, got shape {s.shape}")
        start, stop = (int(v) for v in self.prompt_span)
        if not 0 <= start <= stop <= s.shape[0]:
            raise ContractError(f"prompt span {self.prompt_span} outside {s.shape[0]} slots")
        object.__setattr__(self, "slots", _frozen(s))
        object.__setattr__(self, "prompt_span", (start, stop))

    @property
    def n_prompt(self) -> int:
        return self.prompt_span[1] - self.prompt_span[0]

    def with_prompt(self, block: np.ndarray) -> "ComposedInput":
        """Return a copy whose prompt rows are replaced by ``block``."""
        slots = np.array(self.slots)
        slots[self.prompt_span[0]:self.prompt_span[1]] = block
        return ComposedInput(slots, self.prompt_span)
