"""Regenerate tests/fixtures/golden.json from the toy backend (seed 0).

Run only when a deliberate change to the toy backend invalidates the goldens:
    python tests/regen_golden.py
"""
import json
from pathlib import Path

import numpy as np

from geneic.backend import ae_encode, build_toy_backend, encode_image, decode
from geneic.clustering import embed_corpus
from geneic.interpret import interpret_prompt
from geneic.prompt import PromptState, compose_input, init_prompt, save_prompt
from geneic.toydata import toy_corpus
from geneic.transfer import transfer_grids
from geneic.backend import ae_decode
from geneic.types import ImageSample

OUT = Path(__file__).parent / "fixtures" / "golden.json"
PROMPT_FIXTURE = OUT.parent / "prompt_m8_d8.gipv"


def main():
    b = build_toy_backend(0)
    zero = ImageSample("zero", np.zeros(b.dims.image_shape))
    corpus = toy_corpus(10, seed=0)
    f_i, f_j, plan, swapped = transfer_grids(corpus[0], corpus[2], b, 0.25)
    out_img = ae_decode(swapped, b)
    prompt = init_prompt(8, b.dims.d_dec, seed=0)
    doc = {
        "digest_seed0": b.digest(),
        "encode_zero": encode_image(zero, b).tokens.tolist(),
        "ae_encode_zero": ae_encode(zero, b).grid.tolist(),
        "embed_corpus_10": embed_corpus(corpus, b).embeddings.tolist(),
        "transfer_0_2": {"channels": list(plan.channels), "pixels": out_img.pixels.tolist()},
        "interpret_seed0": interpret_prompt(prompt, b),
        "captions_seed0": [
            decode(compose_input(encode_image(im, b), prompt), b, "greedy", 20).text for im in corpus[:5]
        ],
    }
    OUT.parent.mkdir(exist_ok=True)
    OUT.write_text(json.dumps(doc, indent=1) + "\n")
    # 280-byte checkpoint: an initialised M=8, d=8 prompt at step 123
    save_prompt(PromptState(prompt.vectors, 123), PROMPT_FIXTURE)


if __name__ == "__main__":
    main()
