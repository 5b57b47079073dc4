import json
import os

import numpy as np
import pytest

from geneic.config import load_config, with_data
from geneic.errors import ContractError, FormatError
from geneic.io import atomic_write, load_corpus, load_image, read_jsonl, read_manifest, save_image, write_jsonl
from geneic.toydata import toy_corpus, write_corpus
from geneic.trainer import TrainConfig
from geneic.types import ImageSample


def test_atomic_write_replaces_and_respects_umask(tmp_path):
    p = tmp_path / "f.txt"
    atomic_write(p, "one")
    atomic_write(p, b"two")
    assert p.read_bytes() == b"two"
    mask = os.umask(0)
    os.umask(mask)
    assert (p.stat().st_mode & 0o777) == 0o666 & ~mask
    assert [x.name for x in tmp_path.iterdir()] == ["f.txt"]


def test_jsonl_roundtrip_and_errors(tmp_path):
    p = tmp_path / "x.jsonl"
    write_jsonl(p, [{"a": 1}, {"b": [1, 2]}])
    assert read_jsonl(p) == [{"a": 1}, {"b": [1, 2]}]
    p.write_text('{"a": 1}\n\n{oops\n')
    with pytest.raises(FormatError, match="line 3"):
        read_jsonl(p)


def test_png_roundtrip_is_8bit_exact(tmp_path):
    px = np.round(np.random.default_rng(0).random((8, 8, 3)) * 255) / 255
    save_image(tmp_path / "a.png", ImageSample("a", px))
    back = load_image(tmp_path / "a.png")
    assert back.id == "a" and back.shape == (8, 8, 3)
    np.testing.assert_allclose(back.pixels, px, atol=1e-12)
    assert load_image(tmp_path / "a.png", channels=1).shape == (8, 8, 1)


def test_unsupported_image_format(tmp_path):
    (tmp_path / "a.jpg").write_bytes(b"\xff\xd8")
    with pytest.raises(ContractError):
        load_image(tmp_path / "a.jpg")


def test_manifest_and_corpus(tmp_path):
    imgs = toy_corpus(3)
    manifest = write_corpus(imgs, tmp_path, captions={"img0000": ["a bird"]})
    recs = read_manifest(manifest)
    assert [r["id"] for r in recs] == ["img0000", "img0001", "img0002"]
    assert recs[0]["captions"] == ["a bird"]
    loaded, _, errors = load_corpus(manifest, channels=1)
    assert errors == [] and len(loaded) == 3
    assert np.max(np.abs(loaded[1].pixels - imgs[1].pixels)) <= 0.5 / 255 + 1e-12
    (tmp_path / "img0001.png").unlink()
    _, _, errors = load_corpus(manifest)
    assert len(errors) == 1 and errors[0].startswith("img0001")


def test_manifest_validation(tmp_path):
    m = tmp_path / "m.jsonl"
    m.write_text('{"id": "a", "path": "a.png"}\n{"id": "a", "path": "b.png"}\n')
    with pytest.raises(ContractError, match="duplicate"):
        read_manifest(m)
    m.write_text('{"id": "a"}\n')
    with pytest.raises(FormatError):
        read_manifest(m)


# --- config -----------------------------------------------------------------

def test_defaults_without_file():
    cfg = load_config(env={})
    assert cfg.train == TrainConfig() and cfg.data.backend == "toy" and cfg.metrics.clip_s_weight == 1.0


def test_toml_and_overrides(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text('[train]\nepochs = 3\nlr0 = 0.01\n[data]\nmanifest = "data/m.jsonl"\n[metrics]\nclip_s_weight = 2.5\n')
    cfg = load_config(p, ["train.M=4", "train.k=3", "data.out_dir=elsewhere"], env={})
    assert cfg.train.epochs == 3 and cfg.train.lr0 == 0.01 and cfg.train.M == 4 and cfg.train.k == 3
    assert cfg.data.manifest == str(tmp_path / "data" / "m.jsonl")
    assert cfg.data.out_dir == "elsewhere"
    assert cfg.metrics.clip_s_weight == 2.5


def test_unknown_keys_rejected(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text("[train]\nepoch = 3\n")
    with pytest.raises(ContractError, match="epoch"):
        load_config(p, env={})
    p.write_text("[trian]\nepochs = 3\n")
    with pytest.raises(ContractError):
        load_config(p, env={})
    with pytest.raises(ContractError):
        load_config(None, ["train.nope=1"], env={})
    with pytest.raises(ContractError):
        load_config(None, ["epochs=1"], env={})


def test_seed_from_environment(tmp_path):
    assert load_config(env={"GENEIC_SEED": "17"}).train.seed == 17
    assert load_config(None, ["train.seed=3"], env={"GENEIC_SEED": "17"}).train.seed == 3


def test_with_data_ignores_none():
    cfg = load_config(env={})
    assert with_data(cfg, manifest=None) is cfg
    assert with_data(cfg, manifest="m").data.manifest == "m"
