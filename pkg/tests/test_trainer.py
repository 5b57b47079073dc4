import json
import math

import numpy as np
import pytest

from geneic.backend import DimSpec, build_toy_backend
from geneic.clustering import PairBatch
from geneic.errors import ContractError, DegenerateBatchError, FormatError, NumericError
from geneic.prompt import PromptState, init_prompt, load_prompt
from geneic.toydata import toy_corpus
from geneic.trainer import (
    OptimizerState, TrainConfig, TrainLog, adamw_update, cosine_lr, optimizer_from_bytes,
    optimizer_to_bytes, scst_step, train,
)

from helpers import enumerable_task


def test_cosine_schedule():
    assert cosine_lr(0, 100, 5e-4) == 5e-4
    assert cosine_lr(100, 100, 5e-4, 1e-5) == pytest.approx(1e-5, abs=1e-18)
    assert cosine_lr(50, 100, 5e-4, 1e-4) == pytest.approx(3e-4, abs=1e-18)
    lrs = [cosine_lr(s, 40, 1.0) for s in range(41)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ContractError):
        cosine_lr(41, 40, 1.0)


def test_adamw_zero_grad_no_decay_is_identity():
    cfg = TrainConfig(weight_decay=0.0)
    p = init_prompt(3, 4, seed=1)
    q, st = adamw_update(p, np.zeros((3, 4)), OptimizerState.zeros_like(p), 1e-3, cfg)
    assert q.vectors.tobytes() == p.vectors.tobytes() and st.t == 1 and q.step == 1


def test_adamw_first_step_by_hand():
    cfg = TrainConfig(weight_decay=0.0)
    p = PromptState(np.array([[0.25]]))
    q, st = adamw_update(p, np.array([[0.5]]), OptimizerState.zeros_like(p), 1e-3, cfg)
    m = (1 - 0.9) * 0.5
    v = (1 - 0.999) * 0.25
    m_hat, v_hat = m / (1 - 0.9), v / (1 - 0.999)
    expect = 0.25 - 1e-3 * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert q.vectors[0, 0] == np.float32(expect)
    assert st.m[0, 0] == np.float32(m) and st.v[0, 0] == np.float32(v)


def test_adamw_decoupled_decay():
    cfg = TrainConfig(weight_decay=0.1)
    p = PromptState(np.array([[2.0, -4.0]]))
    q, _ = adamw_update(p, np.zeros((1, 2)), OptimizerState.zeros_like(p), 0.01, cfg)
    np.testing.assert_array_equal(q.vectors, np.float32(p.vectors * (1 - 0.01 * 0.1)))


def test_adamw_rejects_bad_gradients():
    cfg = TrainConfig()
    p = init_prompt(2, 2)
    with pytest.raises(NumericError):
        adamw_update(p, np.full((2, 2), np.nan), OptimizerState.zeros_like(p), 1e-3, cfg)
    with pytest.raises(ContractError):
        adamw_update(p, np.zeros((3, 2)), OptimizerState.zeros_like(p), 1e-3, cfg)


def test_optimizer_state_roundtrip():
    st = OptimizerState(np.random.default_rng(0).random((3, 4)), np.random.default_rng(1).random((3, 4)), 17)
    blob = optimizer_to_bytes(st, 5)
    back, epochs = optimizer_from_bytes(blob)
    assert epochs == 5 and back.t == 17
    assert optimizer_to_bytes(back, 5) == blob
    with pytest.raises(FormatError):
        optimizer_from_bytes(b"NOPE" + blob[4:])
    with pytest.raises(FormatError):
        optimizer_from_bytes(blob[:-2])


def test_config_validation():
    with pytest.raises(ContractError):
        TrainConfig(batch_size=0)
    with pytest.raises(ContractError):
        TrainConfig(grad_scope="neither")
    with pytest.raises(ContractError):
        TrainConfig(fraction=2.0)
    with pytest.raises(ContractError):
        TrainConfig.from_dict({"epochz": 3})
    cfg = TrainConfig(M=4, seed=9)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# --- scst_step --------------------------------------------------------------

def _peaked_backend():
    out_b = np.full(16, -60.0)
    out_b[3] = 60.0
    return build_toy_backend(0, overrides={"decoder.out_w": np.zeros((16, 8)), "decoder.out_b": out_b})


def test_zero_advantage_gives_zero_gradient():
    b = _peaked_backend()
    imgs = toy_corpus(4, seed=2)
    images = dict(enumerate(imgs[:2]))
    transferred = {0: imgs[2], 1: imgs[3]}
    grad, rep, adv = scst_step(PairBatch(((0, 1), (1, 0)), 2), init_prompt(2, 8), b, TrainConfig(M=2, max_len=3),
                               0, images, transferred)
    assert np.all(adv.advantages == 0) and np.all(grad == 0)
    assert rep.n == 2


def test_scst_step_is_deterministic_per_seed():
    b, images, transferred = enumerable_task(0)
    prompt = PromptState(np.random.default_rng(3).standard_normal((2, 8)))
    cfg = TrainConfig(M=2, max_len=2)
    batch = PairBatch(((0, 1), (1, 0)), 2)
    g1 = scst_step(batch, prompt, b, cfg, 42, images, transferred)[0]
    g2 = scst_step(batch, prompt, b, cfg, 42, images, transferred)[0]
    assert g1.tobytes() == g2.tobytes()
    assert any(scst_step(batch, prompt, b, cfg, s, images, transferred)[0].tobytes() != g1.tobytes()
               for s in range(43, 60))


def test_identical_pairs_are_excluded():
    b, images, transferred = enumerable_task(0)
    prompt = PromptState(np.random.default_rng(3).standard_normal((2, 8)))
    cfg = TrainConfig(M=2, max_len=2)
    same = {0: images[0], 1: transferred[1]}
    grad, rep, adv = scst_step(PairBatch(((0, 1), (1, 0)), 2), prompt, b, cfg, 1, images, same)
    assert adv.live == (1,) and rep.n == 1
    with pytest.raises(DegenerateBatchError):
        scst_step(PairBatch(((0, 1),), 1), prompt, b, cfg, 1, images, same)
    with pytest.raises(ContractError):
        scst_step(PairBatch((), 1), prompt, b, cfg, 1, images, same)


def test_original_only_scope_differs():
    b, images, transferred = enumerable_task(0)
    prompt = PromptState(np.random.default_rng(3).standard_normal((2, 8)))
    batch = PairBatch(((0, 1), (1, 0)), 2)
    both = scst_step(batch, prompt, b, TrainConfig(M=2, max_len=2), 5, images, transferred)[0]
    orig = scst_step(batch, prompt, b, TrainConfig(M=2, max_len=2, grad_scope="original_only"), 5, images,
                     transferred)[0]
    assert both.shape == orig.shape and not np.array_equal(both, orig)


# --- train ------------------------------------------------------------------

SMALL = dict(M=4, epochs=2, batch_size=4, max_len=5)


def test_zero_epochs_returns_initial_prompt(bundle, tmp_path):
    cfg = TrainConfig(**{**SMALL, "epochs": 0})
    prompt, log = train(toy_corpus(8), bundle, cfg, tmp_path, tmp_path / "log.jsonl")
    assert prompt == init_prompt(4, 8, cfg.seed, cfg.init_std)
    assert load_prompt(tmp_path / "prompt.gipv") == prompt
    assert log.records == []


def test_train_writes_checkpoints_and_log(bundle, tmp_path):
    cfg = TrainConfig(**SMALL)
    prompt, log = train(toy_corpus(10), bundle, cfg, tmp_path, tmp_path / "log.jsonl")
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["log.jsonl", "optim_epoch_000.gios", "optim_epoch_001.gios", "optimizer.gios",
                     "prompt.gipv", "prompt_epoch_000.gipv", "prompt_epoch_001.gipv"]
    assert load_prompt(tmp_path / "prompt.gipv") == prompt
    assert prompt.step == len([r for r in log.records if not r["skipped"]]) == 6
    lines = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert lines[0]["type"] == "header" and lines[-1]["type"] == "footer"
    assert lines[0]["config"] == cfg.to_dict()
    assert TrainLog.load(tmp_path / "log.jsonl") == log
    steps = [r["step"] for r in log.records]
    assert steps == list(range(6))
    rec = log.records[0]
    assert rec["lr"] == cfg.lr0
    for key in ("L_a", "L_s", "L", "n", "mean_advantage", "r_sem_sampled", "r_sem_greedy"):
        assert key in rec
    assert 0.0 <= rec["L_s"] <= 2.0


def test_train_uses_first_N_images(bundle):
    cfg = TrainConfig(**{**SMALL, "N": 6, "epochs": 1})
    _, log = train(toy_corpus(20), bundle, cfg)
    assert sum(r["n"] for r in log.records if not r["skipped"]) <= 6
    assert len(log.records) == 2


def test_train_is_reproducible(bundle):
    cfg = TrainConfig(**SMALL)
    a, la = train(toy_corpus(10), bundle, cfg)
    b, lb = train(toy_corpus(10), bundle, cfg)
    assert a == b and la.dumps() == lb.dumps()
    c, _ = train(toy_corpus(10), bundle, TrainConfig(**{**SMALL, "seed": 1}))
    assert c != a


def test_resume_matches_uninterrupted(bundle, tmp_path):
    cfg = TrainConfig(**{**SMALL, "epochs": 3})
    full, log = train(toy_corpus(10), bundle, cfg, tmp_path / "a", tmp_path / "a.jsonl")
    train(toy_corpus(10), bundle, TrainConfig(**{**SMALL, "epochs": 3}), tmp_path / "b", tmp_path / "b.jsonl")
    for name in ("prompt_epoch_002.gipv", "optim_epoch_002.gios", "prompt.gipv", "optimizer.gios"):
        (tmp_path / "b" / name).unlink()
    resumed, _ = train(toy_corpus(10), bundle, cfg, tmp_path / "b", tmp_path / "b.jsonl", resume=True)
    assert resumed == full
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    for name in ("prompt.gipv", "optimizer.gios", "optim_epoch_002.gios"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_resume_rejects_changed_config(bundle, tmp_path):
    train(toy_corpus(10), bundle, TrainConfig(**SMALL), tmp_path, tmp_path / "log.jsonl")
    with pytest.raises(ContractError):
        train(toy_corpus(10), bundle, TrainConfig(**{**SMALL, "lr0": 1e-3}), tmp_path, tmp_path / "log.jsonl",
              resume=True)


def test_train_needs_two_images(bundle):
    with pytest.raises(ContractError):
        train(toy_corpus(1), bundle, TrainConfig(**SMALL))


def test_identical_corpus_steps_are_skipped(bundle):
    img = toy_corpus(1)[0]
    from geneic.types import ImageSample
    imgs = [ImageSample(f"d{k}", img.pixels) for k in range(4)]
    prompt, log = train(imgs, bundle, TrainConfig(**{**SMALL, "epochs": 1}))
    assert all(r["skipped"] for r in log.records)
    assert prompt == init_prompt(4, 8)


def test_backend_digest_recorded(bundle):
    _, log = train(toy_corpus(6), bundle, TrainConfig(**{**SMALL, "epochs": 1}))
    assert log.digest_before == log.digest_after == bundle.digest()


def test_logged_values_are_self_consistent(bundle):
    cfg = TrainConfig(**{**SMALL, "epochs": 3})
    _, log = train(toy_corpus(12, seed=4), bundle, cfg)
    total = cfg.epochs * math.ceil(12 / cfg.batch_size)
    for rec in log.records:
        assert rec["lr"] == cosine_lr(rec["step"], total, cfg.lr0, cfg.lr_min)
        if rec["skipped"]:
            continue
        assert abs(rec["L_s"] - (1 - rec["r_sem_sampled"])) <= 1e-9
        if rec["L_a"] is not None:
            assert abs(rec["L_a"] - (1 - rec["r_attr_sampled"])) <= 1e-9
            assert abs(rec["L"] - (rec["L_a"] + cfg.beta * rec["L_s"])) <= 1e-9
    steps = [r["step"] for r in log.records]
    assert steps == sorted(steps) and len(set(steps)) == len(steps)
