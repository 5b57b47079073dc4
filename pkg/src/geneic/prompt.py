"""Learnable prompt vectors, decoder-input composition and prompt checkpoints."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .backend import make_rng, text_to_ids
from .errors import ContractError, FormatError
from .io import atomic_write
from .types import ComposedInput, VisualEmbedding

INIT_STD = 0.02
PROMPT_MAGIC = b"GIPV"
PROMPT_VERSION = 1


@dataclass(frozen=True)
class PromptState:
    """M x d_dec prompt block, stored as float32 so checkpoints are lossless."""

    vectors: np.ndarray
    step: int = 0

    def __post_init__(self):
        v = np.array(self.vectors, dtype=np.float32, copy=True)
        if v.ndim != 2:
            raise ContractError(f"prompt vectors must be M x d_dec, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ContractError("prompt vectors must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "step", int(self.step))

    @property
    def M(self):
        return self.vectors.shape[0]

    @property
    def d_dec(self):
        return self.vectors.shape[1]

    def __eq__(self, other):
        if not isinstance(other, PromptState):
            return NotImplemented
        return (
            self.step == other.step
            and self.vectors.shape == other.vectors.shape
            and self.vectors.tobytes() == other.vectors.tobytes()
        )

    __hash__ = None


def init_prompt(M, d_dec, seed=0, std=INIT_STD):
    """Draw an M x d_dec prompt block i.i.d. from N(0, std^2) with a PCG64 stream."""
    if M < 0 or d_dec <= 0:
        raise ContractError(f"invalid prompt shape M={M}, d_dec={d_dec}")
    rng = make_rng(seed)
    return PromptState(rng.standard_normal((M, d_dec)) * std, step=0)


def compose_input(vis: VisualEmbedding, prompt: PromptState) -> ComposedInput:
    """Stack the visual slots and then the prompt rows: ``[vis ; prompt]``."""
    q, d = vis.tokens.shape
    if prompt.M and prompt.d_dec != d:
        raise ContractError(f"prompt width {prompt.d_dec} != visual width {d}")
    block = prompt.vectors.astype(np.float64).reshape(prompt.M, d)
    return ComposedInput(np.vstack([vis.tokens, block]), (q, q + prompt.M))


def compose_input_text(vis, text, bundle):
    """Hand-crafted prompt baseline: visual slots followed by the prompt's token embeddings."""
    ids = text_to_ids(text, bundle)
    rows = bundle.decoder.token_embeddings()[ids]
    q = vis.tokens.shape[0]
    if rows.shape[1] != vis.tokens.shape[1]:
        raise ContractError("token embedding width differs from visual width")
    return ComposedInput(np.vstack([vis.tokens, rows]), (q, q + len(ids)))


# checkpoint: magic, version u32, M u32, d u32, M*d float32, step u64 (all LE)

def prompt_to_bytes(state):
    return b"".join([
        PROMPT_MAGIC,
        struct.pack("<III", PROMPT_VERSION, state.M, state.d_dec),
        np.ascontiguousarray(state.vectors, dtype="<f4").tobytes(),
        struct.pack("<Q", state.step),
    ])


def prompt_from_bytes(blob):
    if len(blob) < 16:
        raise FormatError(f"prompt checkpoint truncated: {len(blob)} bytes, header needs 16", len(blob))
    if blob[:4] != PROMPT_MAGIC:
        raise FormatError(f"bad magic {bytes(blob[:4])!r}, expected {PROMPT_MAGIC!r}", 0)
    version, M, d = struct.unpack_from("<III", blob, 4)
    if version != PROMPT_VERSION:
        raise FormatError(f"unsupported prompt checkpoint version {version}", 4)
    expected = 16 + 4 * M * d + 8
    if len(blob) != expected:
        raise FormatError(
            f"prompt checkpoint is {len(blob)} bytes, header implies {expected}", min(len(blob), expected)
        )
    vec = np.frombuffer(blob, dtype="<f4", count=M * d, offset=16).reshape(M, d)
    (step,) = struct.unpack_from("<Q", blob, 16 + 4 * M * d)
    return PromptState(vec, step)


def save_prompt(state, path):
    atomic_write(path, prompt_to_bytes(state))


def load_prompt(path):
    with open(path, "rb") as fh:
        return prompt_from_bytes(fh.read())
