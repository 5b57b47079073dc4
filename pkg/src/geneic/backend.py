"""Frozen model interfaces and the deterministic toy backend.

The pipeline talks to four roles: a visual encoder (image -> decoder-space
slots), an autoregressive decoder over composed slots, a joint image/text
scorer and a latent autoencoder.  ``build_toy_backend`` gives small numpy
implementations of all four whose parameters are fixed at construction and
whose decoder exposes exact gradients with respect to the prompt rows.

Toy decoder, for slots ``S`` (n x d) and tokens ``t_0 .. t_{T-1}``::

    h   = tanh(Wc @ mean(S) + bc)
    x_0 = S[-1],  x_k = E[t_{k-1}]
    z_k = tanh(Wh @ h + U @ x_k + ba)
    logits_k = O @ z_k + bo          (eos masked at k = 0)
"""
from __future__ import annotations

import hashlib
import importlib
import io
import struct
from dataclasses import asdict, dataclass
from typing import Callable, Protocol

import numpy as np

from .errors import ContractError, FormatError, InputShapeError, TokenizationError
from .text import tokenize
from .types import (
    CaptionSample,
    ComposedInput,
    FeatureMapSet,
    ImageSample,
    JointEmbedding,
    TokenSeq,
    VisualEmbedding,
)

EOS_ID = 0
EOS_TOKEN = "<eos>"

_BASE_WORDS = (
    EOS_TOKEN, "bird", "of", "red", "with", "a", "blue", "wings",
    "small", "photo", "flower", "yellow", "petals", "the", "green", "car",
)


def default_vocabulary(size):
    """Word list of ``size`` entries; id 0 is always ``<eos>``."""
    words = list(_BASE_WORDS[:size])
    words += [f"w{k}" for k in range(len(words), size)]
    return words


@dataclass(frozen=True)
class DimSpec:
    vocab: int = 16
    d_dec: int = 8
    d_j: int = 8
    q: int = 2
    l: int = 4
    w: int = 4
    c: int = 8
    max_len: int = 5
    height: int = 8
    width: int = 8
    channels: int = 1

    @property
    def image_shape(self):
        return (self.height, self.width, self.channels)

    @property
    def grid_shape(self):
        return (self.l, self.w, self.c)

    @property
    def patch(self):
        return (self.height // self.l, self.width // self.w)

    def validate(self):
        for name, value in asdict(self).items():
            if value <= 0:
                raise ContractError(f"dimension {name} must be positive, got {value}")
        if self.vocab < 4:
            raise ContractError("vocabulary needs eos plus at least 3 content tokens")
        if self.height % self.l or self.width % self.w:
            raise ContractError("image height/width must be multiples of the latent grid")
        ph, pw = self.patch
        if ph * pw * self.channels > self.c:
            raise ContractError(
                f"latent channels c={self.c} cannot hold a {ph}x{pw}x{self.channels} patch losslessly"
            )


# --------------------------------------------------------------------------
# role interfaces


class VisualEncoder(Protocol):
    image_shape: tuple[int, int, int]

    def encode(self, pixels: np.ndarray) -> np.ndarray: ...


class LanguageDecoder(Protocol):
    vocab: list[str]
    d_dec: int

    def token_embeddings(self) -> np.ndarray: ...

    def step_logits(self, slots: np.ndarray, prefix: list[int]) -> np.ndarray: ...

    def logprob_and_grad(self, slots: np.ndarray, tokens: list[int]) -> tuple[float, np.ndarray]: ...


class JointScorer(Protocol):
    d_j: int

    def embed_image(self, pixels: np.ndarray) -> np.ndarray: ...

    def embed_text(self, text: str) -> np.ndarray: ...


class Autoencoder(Protocol):
    grid_shape: tuple[int, int, int]

    def encode(self, pixels: np.ndarray) -> np.ndarray: ...

    def decode(self, grid: np.ndarray) -> np.ndarray: ...


# --------------------------------------------------------------------------
# toy implementations


def _log_softmax(logits):
    m = np.max(logits)
    shifted = logits - m
    return shifted - np.log(np.sum(np.exp(shifted)))


class ToyEncoder:
    def __init__(self, weight, bias, q, d_dec, image_shape):
        self.weight, self.bias = weight, bias
        self.q, self.d_dec = q, d_dec
        self.image_shape = tuple(image_shape)

    def encode(self, pixels):
        out = self.weight @ pixels.reshape(-1) + self.bias
        return out.reshape(self.q, self.d_dec)

    def parameters(self):
        return {"encoder.weight": self.weight, "encoder.bias": self.bias}


class ToyDecoder:
    def __init__(self, vocab, embed, ctx_w, ctx_b, hid_w, in_w, in_b, out_w, out_b):
        self.vocab = list(vocab)
        self.embed = embed
        self.ctx_w, self.ctx_b = ctx_w, ctx_b
        self.hid_w, self.in_w, self.in_b = hid_w, in_w, in_b
        self.out_w, self.out_b = out_w, out_b
        self.d_dec = embed.shape[1]

    def parameters(self):
        return {
            "decoder.embed": self.embed,
            "decoder.ctx_w": self.ctx_w,
            "decoder.ctx_b": self.ctx_b,
            "decoder.hid_w": self.hid_w,
            "decoder.in_w": self.in_w,
            "decoder.in_b": self.in_b,
            "decoder.out_w": self.out_w,
            "decoder.out_b": self.out_b,
        }

    def token_embeddings(self):
        return self.embed

    def _context(self, slots):
        return np.tanh(self.ctx_w @ slots.mean(axis=0) + self.ctx_b)

    def _logits(self, h, x, first):
        z = np.tanh(self.hid_w @ h + self.in_w @ x + self.in_b)
        logits = self.out_w @ z + self.out_b
        if first:
            logits[EOS_ID] = -np.inf
        return logits, z

    def step_logits(self, slots, prefix):
        h = self._context(slots)
        x = slots[-1] if not prefix else self.embed[prefix[-1]]
        return self._logits(h, x, first=not prefix)[0]

    def run(self, slots, choose, max_len):
        """Generate up to ``max_len`` tokens; ``choose(step, logits)`` picks each."""
        h = self._context(slots)
        x = slots[-1]
        tokens, logprobs = [], []
        for t in range(max_len):
            logits, _ = self._logits(h, x, first=(t == 0))
            tok = int(choose(t, logits))
            tokens.append(tok)
            logprobs.append(float(_log_softmax(logits)[tok]))
            if tok == EOS_ID:
                break
            x = self.embed[tok]
        return tokens, logprobs

    def logprob_and_grad(self, slots, tokens):
        """Sequence log-probability and its gradient with respect to every slot row."""
        n = slots.shape[0]
        pool = slots.mean(axis=0)
        h = np.tanh(self.ctx_w @ pool + self.ctx_b)
        dh = np.zeros_like(h)
        dslots = np.zeros_like(slots)
        total = 0.0
        x = slots[-1]
        for t, tok in enumerate(tokens):
            logits, z = self._logits(h, x, first=(t == 0))
            logp = _log_softmax(logits)
            total += logp[tok]
            g = -np.exp(logp)
            g[tok] += 1.0
            da = (self.out_w.T @ g) * (1.0 - z * z)
            dh += self.hid_w.T @ da
            if t == 0:
                dslots[-1] += self.in_w.T @ da
            x = self.embed[tok]
        dpool = self.ctx_w.T @ (dh * (1.0 - h * h))
        dslots += dpool / n
        return float(total), dslots


class ToyJointScorer:
    def __init__(self, vocab, img_w, img_b, txt_table, txt_b):
        self.vocab = list(vocab)
        self._index = {w: i for i, w in enumerate(self.vocab)}
        self.img_w, self.img_b = img_w, img_b
        self.txt_table, self.txt_b = txt_table, txt_b
        self.d_j = img_b.shape[0]

    def parameters(self):
        return {
            "scorer.img_w": self.img_w,
            "scorer.img_b": self.img_b,
            "scorer.txt_table": self.txt_table,
            "scorer.txt_b": self.txt_b,
        }

    def embed_image(self, pixels):
        return self.img_w @ pixels.reshape(-1) + self.img_b

    def embed_text(self, text):
        # bag of distinct known words; unknown words carry no signal
        ids = sorted({self._index[w] for w in tokenize(text) if w in self._index})
        return self.txt_b + self.txt_table[ids].sum(axis=0)


class ToyAutoencoder:
    """Patchwise orthogonal map: each latent cell holds one image patch."""

    def __init__(self, basis, bias, image_shape, grid_shape):
        self.basis, self.bias = basis, bias  # basis: c x P with orthonormal columns
        self.image_shape = tuple(image_shape)
        self.grid_shape = tuple(grid_shape)
        self._pinv = np.linalg.pinv(basis)

    def parameters(self):
        return {"autoencoder.basis": self.basis, "autoencoder.bias": self.bias}

    def _patches(self, pixels):
        H, W, C = self.image_shape
        l, w, _ = self.grid_shape
        ph, pw = H // l, W // w
        p = pixels.reshape(l, ph, w, pw, C).transpose(0, 2, 1, 3, 4)
        return p.reshape(l, w, ph * pw * C)

    def encode(self, pixels):
        return self._patches(pixels) @ self.basis.T + self.bias

    def decode(self, grid):
        H, W, C = self.image_shape
        l, w, _ = self.grid_shape
        ph, pw = H // l, W // w
        patches = (grid - self.bias) @ self._pinv.T
        img = patches.reshape(l, w, ph, pw, C).transpose(0, 2, 1, 3, 4).reshape(H, W, C)
        return np.clip(img, 0.0, 1.0)


@dataclass
class BackendBundle:
    """The four frozen roles plus the dimension contract they share."""

    encoder: VisualEncoder
    decoder: LanguageDecoder
    scorer: JointScorer
    autoencoder: Autoencoder
    dims: DimSpec
    name: str = "toy"

    @property
    def vocab(self):
        return self.decoder.vocab

    def parameters(self):
        params = {}
        for part in (self.encoder, self.decoder, self.scorer, self.autoencoder):
            getter = getattr(part, "parameters", None)
            if getter is not None:
                params.update(getter())
        return params

    def to_bytes(self):
        return serialize_params(self.parameters())

    def digest(self):
        return hashlib.sha256(self.to_bytes()).hexdigest()


# --------------------------------------------------------------------------
# parameter blob ("GICB")

BACKEND_MAGIC = b"GICB"
BACKEND_VERSION = 1


def serialize_params(params):
    buf = io.BytesIO()
    buf.write(BACKEND_MAGIC)
    buf.write(struct.pack("<I", BACKEND_VERSION))
    for name, arr in params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def deserialize_params(blob):
    view = memoryview(blob)

    def take(offset, n, what):
        if offset + n > len(view):
            raise FormatError(f"truncated backend blob while reading {what}", offset)
        return bytes(view[offset:offset + n]), offset + n

    magic, off = take(0, 4, "magic")
    if magic != BACKEND_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {BACKEND_MAGIC!r}", 0)
    raw, off = take(off, 4, "version")
    (version,) = struct.unpack("<I", raw)
    if version != BACKEND_VERSION:
        raise FormatError(f"unsupported backend blob version {version}", 4)
    params = {}
    while off < len(view):
        raw, off = take(off, 2, "name length")
        (nlen,) = struct.unpack("<H", raw)
        name, off = take(off, nlen, "name")
        raw, off = take(off, 1, "rank")
        rank = raw[0]
        raw, off = take(off, 4 * rank, "dims")
        shape = struct.unpack(f"<{rank}I", raw)
        count = int(np.prod(shape, dtype=np.int64))
        raw, off = take(off, 4 * count, f"values of {name.decode()}")
        params[name.decode("utf-8")] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
    return params


# --------------------------------------------------------------------------
# construction


def _f32(a):
    """Round to float32 so the serialized blob is an exact image of the parameters."""
    out = np.asarray(a, dtype=np.float32).astype(np.float64)
    out.setflags(write=False)
    return out


def _orthonormal_columns(rng, rows, cols):
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))


def toy_params(seed, dims):
    """Draw the raw toy parameter dictionary for ``dims`` from ``seed``."""
    rng = np.random.Generator(np.random.PCG64(seed))
    V, d, dj, q = dims.vocab, dims.d_dec, dims.d_j, dims.q
    n_px = dims.height * dims.width * dims.channels
    ph, pw = dims.patch
    P = ph * pw * dims.channels
    return {
        "encoder.weight": rng.standard_normal((q * d, n_px)) * (2.0 / np.sqrt(n_px)),
        "encoder.bias": rng.standard_normal(q * d) * 0.5,
        "decoder.embed": rng.standard_normal((V, d)),
        "decoder.ctx_w": rng.standard_normal((d, d)) * (1.5 / np.sqrt(d)),
        "decoder.ctx_b": rng.standard_normal(d) * 0.1,
        "decoder.hid_w": rng.standard_normal((d, d)) * (1.5 / np.sqrt(d)),
        "decoder.in_w": rng.standard_normal((d, d)) * (1.5 / np.sqrt(d)),
        "decoder.in_b": rng.standard_normal(d) * 0.1,
        "decoder.out_w": rng.standard_normal((V, d)) * (3.0 / np.sqrt(d)),
        "decoder.out_b": rng.standard_normal(V) * 0.1,
        "scorer.img_w": rng.standard_normal((dj, n_px)) * (1.0 / np.sqrt(n_px)),
        "scorer.img_b": rng.standard_normal(dj) * 0.1,
        "scorer.txt_table": rng.standard_normal((V, dj)) / np.sqrt(dj),
        "scorer.txt_b": rng.standard_normal(dj) * 0.1,
        "autoencoder.basis": _orthonormal_columns(rng, dims.c, P),
        "autoencoder.bias": rng.standard_normal(dims.c) * 0.1,
    }


def bundle_from_params(params, dims, vocab=None):
    dims.validate()
    vocab = list(vocab) if vocab is not None else default_vocabulary(dims.vocab)
    if len(vocab) != dims.vocab or vocab[EOS_ID] != EOS_TOKEN:
        raise ContractError(f"vocabulary must have {dims.vocab} entries with {EOS_TOKEN!r} at id 0")
    p = {k: _f32(v) for k, v in params.items()}
    encoder = ToyEncoder(p["encoder.weight"], p["encoder.bias"], dims.q, dims.d_dec, dims.image_shape)
    decoder = ToyDecoder(
        vocab, p["decoder.embed"], p["decoder.ctx_w"], p["decoder.ctx_b"], p["decoder.hid_w"],
        p["decoder.in_w"], p["decoder.in_b"], p["decoder.out_w"], p["decoder.out_b"],
    )
    scorer = ToyJointScorer(vocab, p["scorer.img_w"], p["scorer.img_b"], p["scorer.txt_table"], p["scorer.txt_b"])
    ae = ToyAutoencoder(p["autoencoder.basis"], p["autoencoder.bias"], dims.image_shape, dims.grid_shape)
    bundle = BackendBundle(encoder, decoder, scorer, ae, dims)
    _check_shapes(bundle)
    return bundle


def _check_shapes(bundle):
    dims = bundle.dims
    d = bundle.decoder
    if d.embed.shape != (dims.vocab, dims.d_dec) or d.out_w.shape != (dims.vocab, dims.d_dec):
        raise ContractError("decoder tables disagree with vocab/d_dec")
    if bundle.encoder.weight.shape[0] != dims.q * dims.d_dec:
        raise ContractError("encoder output disagrees with q*d_dec")
    if bundle.scorer.txt_table.shape != (dims.vocab, dims.d_j) or bundle.scorer.img_b.shape != (dims.d_j,):
        raise ContractError("scorer tables disagree with vocab/d_j")


def build_toy_backend(seed=0, dims=None, overrides=None, vocab=None):
    """Build the deterministic toy backend.

    ``overrides`` maps parameter names (see ``toy_params``) to replacement
    arrays; tests use it to rig specific behaviours.
    """
    dims = dims or DimSpec()
    dims.validate()
    params = toy_params(seed, dims)
    for name, value in (overrides or {}).items():
        if name not in params:
            raise ContractError(f"unknown toy parameter {name!r}")
        value = np.asarray(value, dtype=np.float64)
        if value.shape != params[name].shape:
            raise ContractError(f"override {name!r} has shape {value.shape}, expected {params[name].shape}")
        params[name] = value
    return bundle_from_params(params, dims, vocab)


def save_backend(bundle, path):
    from .io import atomic_write

    atomic_write(path, bundle.to_bytes())


def load_toy_backend(path, dims=None, vocab=None):
    with open(path, "rb") as fh:
        params = deserialize_params(fh.read())
    return bundle_from_params(params, dims or DimSpec(), vocab)


# adapters for real backends register a zero-argument-or-kwargs factory here
ADAPTERS: dict[str, Callable[..., BackendBundle]] = {}


def register_adapter(name, factory):
    ADAPTERS[name] = factory


def resolve_backend(selector="toy", seed=0, dims=None, **kwargs):
    """``toy`` | a registered adapter name | ``package.module:factory``."""
    if selector == "toy":
        return build_toy_backend(seed, dims)
    if selector in ADAPTERS:
        return ADAPTERS[selector](**kwargs)
    if ":" in selector:
        mod, _, attr = selector.partition(":")
        return getattr(importlib.import_module(mod), attr)(**kwargs)
    raise ContractError(f"unknown backend {selector!r}; registered adapters: {sorted(ADAPTERS)}")


# --------------------------------------------------------------------------
# operations


def _check_image(image, bundle):
    if image.shape != tuple(bundle.dims.image_shape):
        raise InputShapeError(
            f"image {image.id!r} has shape {image.shape}, backend expects {tuple(bundle.dims.image_shape)}"
        )


def encode_image(image, bundle):
    _check_image(image, bundle)
    return VisualEmbedding(bundle.encoder.encode(image.pixels))


def detokenize(tokens, bundle):
    return " ".join(bundle.vocab[t] for t in tokens if t != EOS_ID)


def text_to_ids(text, bundle):
    """Map a text prompt onto vocabulary ids; every word must be known."""
    words = tokenize(text)
    if not words:
        raise TokenizationError("text prompt is empty")
    index = {w: i for i, w in enumerate(bundle.vocab)}
    missing = [w for w in words if w not in index]
    if missing:
        raise TokenizationError(f"out-of-vocabulary words: {missing}")
    return [index[w] for w in words]


def _check_input(inp, bundle):
    if inp.slots.shape[0] == 0:
        raise ContractError("composed input has no slots")
    if inp.slots.shape[1] != bundle.dims.d_dec:
        raise ContractError(f"slot width {inp.slots.shape[1]} != d_dec {bundle.dims.d_dec}")


def decode(inp, bundle, mode="greedy", max_len=None, temperature=1.0, rng_seed=0):
    """Generate a caption from a composed input.

    Greedy picks the argmax at each step (lowest id wins ties).  Sampled mode
    draws from ``softmax(logits / temperature)`` with a PCG64 stream seeded by
    ``rng_seed``.  The recorded log-probabilities are always the untempered
    model log-probabilities.
    """
    _check_input(inp, bundle)
    max_len = bundle.dims.max_len if max_len is None else int(max_len)
    if max_len < 1:
        raise ContractError("max_len must be at least 1")
    if mode == "greedy":
        def choose(_, logits):
            return int(np.argmax(logits))
    elif mode == "sampled":
        if not temperature > 0:
            raise ContractError("sampled decoding needs temperature > 0")
        rng = make_rng(rng_seed)

        def choose(_, logits):
            return sample_categorical(logits / temperature, rng)
    else:
        raise ContractError(f"unknown decode mode {mode!r}")
    tokens, logprobs = bundle.decoder.run(inp.slots, choose, max_len)
    seq = TokenSeq(tokens, eos_terminated=bool(tokens) and tokens[-1] == EOS_ID)
    return CaptionSample(seq, detokenize(tokens, bundle), logprobs, mode)


def sample_categorical(logits, rng):
    """Inverse-CDF draw from ``softmax(logits)``; -inf entries are never chosen."""
    p = np.exp(logits - np.max(logits))
    cdf = np.cumsum(p)
    u = rng.random() * cdf[-1]
    idx = int(np.searchsorted(cdf, u, side="right"))
    idx = min(idx, len(p) - 1)
    while p[idx] == 0.0:  # u landed exactly on a masked boundary
        idx -= 1
    return idx


def make_rng(*seed_parts):
    """PCG64 generator keyed by non-negative ints (nested tuples are flattened)."""
    flat = []
    stack = list(seed_parts)[::-1]
    while stack:
        s = stack.pop()
        if isinstance(s, (tuple, list)):
            stack.extend(list(s)[::-1])
        else:
            flat.append(int(s))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(flat)))


def sequence_logprob_grad(inp, tokens, bundle):
    """Return ``(log P(tokens | input), d log P / d prompt rows)``."""
    _check_input(inp, bundle)
    ids = list(tokens.tokens if isinstance(tokens, TokenSeq) else tokens)
    if not ids:
        raise ContractError("token sequence is empty")
    V = bundle.dims.vocab
    bad = [t for t in ids if not 0 <= t < V]
    if bad:
        raise ContractError(f"token ids {bad} outside vocabulary of size {V}")
    logprob, dslots = bundle.decoder.logprob_and_grad(inp.slots, ids)
    start, stop = inp.prompt_span
    return logprob, dslots[start:stop].copy()


def joint_embed_image(image, bundle):
    _check_image(image, bundle)
    return JointEmbedding(bundle.scorer.embed_image(image.pixels))


def joint_embed_text(text, bundle):
    if not text or not text.strip():
        raise ContractError("cannot embed empty text")
    return JointEmbedding(bundle.scorer.embed_text(text))


def ae_encode(image, bundle):
    _check_image(image, bundle)
    return FeatureMapSet(bundle.autoencoder.encode(image.pixels))


def ae_decode(fmap, bundle, id="decoded"):
    if fmap.shape != tuple(bundle.dims.grid_shape):
        raise ContractError(f"grid shape {fmap.shape} != backend grid {tuple(bundle.dims.grid_shape)}")
    return ImageSample(id, bundle.autoencoder.decode(fmap.grid))
