import numpy as np

from geneic.backend import DimSpec, build_toy_backend, make_rng
from geneic.types import ImageSample

RIGGED_TOKEN = 7


def random_image(rng, dims=None, image_id="x"):
    dims = dims or DimSpec()
    return ImageSample(image_id, rng.random(dims.image_shape))


def rigged_semantic_backend(seed=0):
    """Toy backend whose scorer rewards any caption containing token 7.

    Every image embeds near +e0 (with a small per-image wobble so that
    original/transferred pairs still differ).  Captions containing token 7
    land at cosine ~0.95 with every image; all other captions near 0.1.
    """
    dims = DimSpec()
    rng = make_rng(99)
    n_px = dims.height * dims.width * dims.channels
    img_w = np.zeros((dims.d_j, n_px))
    img_w[1:] = rng.standard_normal((dims.d_j - 1, n_px)) * (0.3 / np.sqrt(n_px))
    img_b = np.zeros(dims.d_j)
    img_b[0] = 1.0
    table = np.zeros((dims.vocab, dims.d_j))
    table[:, 2:] = rng.standard_normal((dims.vocab, dims.d_j - 2)) / np.sqrt(dims.d_j - 2)
    table[RIGGED_TOKEN] = 0.0
    table[RIGGED_TOKEN, 0] = 9.5
    table[RIGGED_TOKEN, 1] = 3.12
    txt_b = np.zeros(dims.d_j)
    txt_b[0] = 0.15
    return build_toy_backend(seed, dims, overrides={
        "scorer.img_w": img_w, "scorer.img_b": img_b,
        "scorer.txt_table": table, "scorer.txt_b": txt_b,
    })


def enumerable_task(seed=0):
    """Vocab-4, max_len-2 backend with two distinct (original, transferred) pairs."""
    dims = DimSpec(vocab=4, max_len=2)
    bundle = build_toy_backend(seed, dims)
    rng = np.random.default_rng(5)
    imgs = [random_image(rng, dims, f"i{k}") for k in range(4)]
    images = {0: imgs[0], 1: imgs[1]}
    transferred = {0: imgs[2], 1: imgs[3]}
    return bundle, images, transferred
