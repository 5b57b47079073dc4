"""Self-critical optimisation of the prompt block against a frozen backend."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .backend import decode, encode_image, joint_embed_image, joint_embed_text, sequence_logprob_grad
from .clustering import build_pair_batches, cluster_corpus, embed_corpus
from .errors import ContractError, DegenerateBatchError, FormatError, NumericError
from .io import atomic_write, dump_jsonl, read_jsonl
from .losses import DEGENERATE_EPS, LossReport, loss_report, reward_report, scst_advantages
from .prompt import INIT_STD, PromptState, compose_input, init_prompt, load_prompt, save_prompt
from .transfer import make_transferred_image

GRAD_SCOPES = ("both", "original_only")


@dataclass(frozen=True)
class TrainConfig:
    M: int = 8
    N: int = 1000
    beta: float = 0.5
    epochs: int = 30
    batch_size: int = 10
    lr0: float = 5e-4
    lr_min: float = 0.0
    weight_decay: float = 0.05
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    init_std: float = INIT_STD
    temperature: float = 1.0
    max_len: int = 20
    fraction: float = 0.25
    grad_scope: str = "both"
    k: int | None = None
    kmeans_max_iter: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.M < 0 or self.N < 1 or self.epochs < 0 or self.batch_size < 1:
            raise ContractError("M >= 0, N >= 1, epochs >= 0 and batch_size >= 1 are required")
        if self.beta < 0 or self.lr0 <= 0 or not 0 <= self.lr_min <= self.lr0:
            raise ContractError("need beta >= 0 and 0 <= lr_min <= lr0 with lr0 > 0")
        if self.temperature <= 0 or self.max_len < 1 or self.init_std < 0:
            raise ContractError("temperature and max_len must be positive")
        if not 0.0 <= self.fraction <= 1.0:
            raise ContractError("fraction must lie in [0, 1]")
        if self.grad_scope not in GRAD_SCOPES:
            raise ContractError(f"grad_scope must be one of {GRAD_SCOPES}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    def __post_init__(self):
        for name in ("m", "v"):
            arr = np.array(getattr(self, name), dtype=np.float32, copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def zeros_like(cls, prompt):
        return cls(np.zeros_like(prompt.vectors), np.zeros_like(prompt.vectors), 0)


@dataclass
class TrainLog:
    config: dict
    digest_before: str
    records: list = field(default_factory=list)
    digest_after: str | None = None

    def lines(self):
        out = [{"type": "header", "config": self.config, "digest_before": self.digest_before}]
        out += [{"type": "step", **r} for r in self.records]
        if self.digest_after is not None:
            out.append({"type": "footer", "digest_after": self.digest_after})
        return out

    def dumps(self):
        return dump_jsonl(self.lines())

    def save(self, path):
        atomic_write(path, self.dumps())

    @classmethod
    def load(cls, path):
        lines = read_jsonl(path)
        if not lines or lines[0].get("type") != "header":
            raise FormatError(f"{path}: training log lacks a header line")
        log = cls(lines[0]["config"], lines[0]["digest_before"])
        for line in lines[1:]:
            kind = line.pop("type", None)
            if kind == "step":
                log.records.append(line)
            elif kind == "footer":
                log.digest_after = line["digest_after"]
        return log


def cosine_lr(step, total_steps, lr0, lr_min=0.0):
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def adamw_update(prompt, grad, state, lr, cfg):
    """One AdamW step with decoupled weight decay; returns new (prompt, state)."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != prompt.vectors.shape:
        raise ContractError(f"gradient shape {grad.shape} != prompt shape {prompt.vectors.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite prompt gradient; step aborted")
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    t = state.t + 1
    p = prompt.vectors.astype(np.float64)
    p = p * (1.0 - lr * cfg.weight_decay)
    m = b1 * state.m.astype(np.float64) + (1.0 - b1) * grad
    v = b2 * state.v.astype(np.float64) + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    p = p - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return PromptState(p, prompt.step + 1), OptimizerState(m, v, t)


def _embed_caption(caption, bundle):
    return joint_embed_text(caption.text, bundle)


def scst_step(batch, prompt, bundle, cfg, rng_seed, images, transferred):
    """Self-critical policy-gradient estimate for one batch of pairs.

    ``images[i]`` is the original and ``transferred[i]`` its attribute-transferred
    twin.  Returns ``(grad, LossReport, AdvantageBatch)``, where ``grad`` is the
    gradient of the loss (negative expected reward) w.r.t. the prompt rows.
    """
    if not len(batch):
        raise ContractError("empty batch")
    sampled, greedy, grads, live = [], [], [], []
    for k, (i, _j) in enumerate(batch.pairs):
        x, x_t = images[i], transferred[i]
        inp = compose_input(encode_image(x, bundle), prompt)
        inp_t = compose_input(encode_image(x_t, bundle), prompt)
        g, g_t = (decode(c, bundle, "greedy", cfg.max_len) for c in (inp, inp_t))
        s = decode(inp, bundle, "sampled", cfg.max_len, cfg.temperature, (rng_seed, k, 0))
        s_t = decode(inp_t, bundle, "sampled", cfg.max_len, cfg.temperature, (rng_seed, k, 1))
        v, v_t = joint_embed_image(x, bundle), joint_embed_image(x_t, bundle)
        # a pair whose images embed identically carries no attribute signal
        if not _same_image(v, v_t):
            live.append(k)
        sampled.append(reward_report(v, v_t, _embed_caption(s, bundle), _embed_caption(s_t, bundle), cfg.beta))
        greedy.append(reward_report(v, v_t, _embed_caption(g, bundle), _embed_caption(g_t, bundle), cfg.beta))
        grads.append((inp, s, inp_t, s_t))

    adv = scst_advantages(sampled, greedy, cfg.beta)
    if not live:
        raise DegenerateBatchError(f"all {len(batch)} pairs have identical original and transferred images")

    grad = np.zeros((prompt.M, prompt.d_dec))
    for k in live:
        if adv.advantages[k] == 0.0:
            continue
        inp, s, inp_t, s_t = grads[k]
        _, dlog = sequence_logprob_grad(inp, s.seq, bundle)
        if cfg.grad_scope == "both":
            _, dlog_t = sequence_logprob_grad(inp_t, s_t.seq, bundle)
            dlog = dlog + dlog_t
        grad -= adv.advantages[k] * dlog
    grad /= len(live)
    adv = replace(adv, live=tuple(live))
    report = loss_report([sampled[k] for k in live], cfg.beta)
    return grad, report, adv


def _same_image(v, v_t):
    """True when the image change direction dV is below the degeneracy threshold."""
    dV = v.normalize().vec - v_t.normalize().vec
    return bool(np.linalg.norm(dV) < DEGENERATE_EPS)


# optimizer checkpoint: magic, version u32, M u32, d u32, t u64, epochs_done u32, m, v (f32 LE)
OPT_MAGIC = b"GIOS"
OPT_VERSION = 1


def optimizer_to_bytes(state, epochs_done=0):
    M, d = state.m.shape
    return b"".join([
        OPT_MAGIC,
        struct.pack("<III", OPT_VERSION, M, d),
        struct.pack("<QI", state.t, epochs_done),
        np.ascontiguousarray(state.m, dtype="<f4").tobytes(),
        np.ascontiguousarray(state.v, dtype="<f4").tobytes(),
    ])


def optimizer_from_bytes(blob):
    if len(blob) < 28:
        raise FormatError("optimizer checkpoint truncated in header", len(blob))
    if blob[:4] != OPT_MAGIC:
        raise FormatError(f"bad magic {bytes(blob[:4])!r}, expected {OPT_MAGIC!r}", 0)
    version, M, d = struct.unpack_from("<III", blob, 4)
    if version != OPT_VERSION:
        raise FormatError(f"unsupported optimizer checkpoint version {version}", 4)
    t, epochs_done = struct.unpack_from("<QI", blob, 16)
    n = M * d
    if len(blob) != 28 + 8 * n:
        raise FormatError(f"optimizer checkpoint is {len(blob)} bytes, expected {28 + 8 * n}", len(blob))
    m = np.frombuffer(blob, "<f4", n, 28).reshape(M, d)
    v = np.frombuffer(blob, "<f4", n, 28 + 4 * n).reshape(M, d)
    return OptimizerState(m, v, t), epochs_done


def _epoch_paths(ckpt_dir, epoch):
    ckpt_dir = Path(ckpt_dir)
    return ckpt_dir / f"prompt_epoch_{epoch:03d}.gipv", ckpt_dir / f"optim_epoch_{epoch:03d}.gios"


def _latest_epoch(ckpt_dir):
    found = sorted(Path(ckpt_dir).glob("optim_epoch_*.gios"))
    return int(found[-1].stem.rsplit("_", 1)[1]) if found else None


def _mean(xs):
    return float(np.mean(xs)) if xs else None


def train(images, bundle, cfg, checkpoint_dir=None, log_path=None, resume=False, progress=None):
    """Run the full prompt-learning loop.

    Clusters the corpus once, then per epoch rebuilds shuffled pairs, regenerates
    the transferred images and runs ``scst_step`` + ``adamw_update`` per batch
    under a whole-run cosine schedule.  Returns ``(prompt, TrainLog)``.
    """
    if len(images) < 2:
        raise ContractError("training needs at least two images")
    images = list(images)[: cfg.N]
    digest_before = bundle.digest()
    log = TrainLog(cfg.to_dict(), digest_before)

    index = embed_corpus(images, bundle)
    assignment = cluster_corpus(index, cfg.k, cfg.seed, cfg.kmeans_max_iter)
    prompt = init_prompt(cfg.M, bundle.dims.d_dec, cfg.seed, cfg.init_std)
    opt = OptimizerState.zeros_like(prompt)
    steps_per_epoch = math.ceil(len(images) / cfg.batch_size)
    total_steps = max(1, cfg.epochs * steps_per_epoch)

    start_epoch = 0
    if resume:
        if checkpoint_dir is None or log_path is None:
            raise ContractError("resume needs a checkpoint directory and a log path")
        last = _latest_epoch(checkpoint_dir)
        if last is not None:
            old = TrainLog.load(log_path)
            if old.config != log.config or old.digest_before != digest_before:
                raise ContractError("cannot resume: config or backend differs from the logged run")
            p_path, o_path = _epoch_paths(checkpoint_dir, last)
            prompt = load_prompt(p_path)
            opt, done = optimizer_from_bytes(o_path.read_bytes())
            start_epoch = done
            log.records = [r for r in old.records if r["epoch"] < start_epoch]

    for epoch in range(start_epoch, cfg.epochs):
        batches = build_pair_batches(assignment, index, cfg.batch_size, (cfg.seed, 1, epoch))
        transferred = {}
        for batch in batches:
            for i, j in batch.pairs:
                transferred[i] = make_transferred_image(images[i], images[j], bundle, cfg.fraction)
        for b, batch in enumerate(batches):
            step = epoch * steps_per_epoch + b
            lr = cosine_lr(step, total_steps, cfg.lr0, cfg.lr_min)
            rec = {"epoch": epoch, "step": step, "lr": lr}
            try:
                grad, report, adv = scst_step(batch, prompt, bundle, cfg, (cfg.seed, 2, epoch, b), images, transferred)
            except DegenerateBatchError:
                rec.update(skipped=True, n_degenerate=len(batch))
                log.records.append(rec)
                continue
            prompt, opt = adamw_update(prompt, grad, opt, lr, cfg)
            rec.update(_step_record(report, adv))
            log.records.append(rec)
            if progress:
                progress(rec)
        if checkpoint_dir is not None:
            p_path, o_path = _epoch_paths(checkpoint_dir, epoch)
            save_prompt(prompt, p_path)
            atomic_write(o_path, optimizer_to_bytes(opt, epoch + 1))
            if log_path is not None:
                log.save(log_path)

    log.digest_after = bundle.digest()
    if log.digest_after != digest_before:
        raise RuntimeError("backend parameters changed during training")
    if checkpoint_dir is not None:
        save_prompt(prompt, Path(checkpoint_dir) / "prompt.gipv")
        atomic_write(Path(checkpoint_dir) / "optimizer.gios", optimizer_to_bytes(opt, cfg.epochs))
    if log_path is not None:
        log.save(log_path)
    return prompt, log


def _step_record(report: LossReport, adv):
    keep = adv.live if adv.live is not None else range(len(adv))
    sampled = [adv.sampled[k] for k in keep]
    greedy = [adv.greedy[k] for k in keep]
    live_s = [r.r_attr for r in sampled if not r.attr_degenerate]
    live_g = [r.r_attr for r in greedy if not r.attr_degenerate]
    return {
        "skipped": False,
        "L_a": report.L_a,
        "L_s": report.L_s,
        "L": report.L,
        "n": report.n,
        "n_degenerate": report.n_degenerate,
        "mean_advantage": float(np.mean([adv.advantages[k] for k in keep])),
        "r_attr_sampled": _mean(live_s),
        "r_sem_sampled": _mean([r.r_sem for r in sampled]),
        "r_attr_greedy": _mean(live_g),
        "r_sem_greedy": _mean([r.r_sem for r in greedy]),
    }


def config_snapshot(cfg=None):
    return json.dumps((cfg or TrainConfig()).to_dict(), sort_keys=True)
