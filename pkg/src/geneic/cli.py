"""``geneic`` command line: cluster | transfer | train | caption | evaluate | interpret."""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .backend import ae_decode, decode, encode_image, load_toy_backend, resolve_backend
from .clustering import cluster_corpus, embed_corpus, find_partner, save_index
from .config import load_config, with_data
from .errors import ContractError, FormatError, GeneicError
from .interpret import format_table, interpret_prompt, table_json
from .io import atomic_write, load_corpus, read_jsonl, save_image, write_jsonl
from .metrics import evaluate
from .prompt import compose_input, compose_input_text, load_prompt
from .trainer import train
from .transfer import transfer_grids


class UsageError(Exception):
    pass


def _backend(cfg):
    if cfg.data.backend_file:
        return load_toy_backend(cfg.data.backend_file)
    return resolve_backend(cfg.data.backend, seed=cfg.data.backend_seed)


def _corpus(manifest, bundle):
    if not manifest:
        raise UsageError("no corpus manifest given (use --manifest or [data] manifest)")
    images, records, errors = load_corpus(manifest, channels=bundle.dims.channels)
    for im in images:
        if im.shape != tuple(bundle.dims.image_shape):
            errors.append(f"{im.id}: shape {im.shape} != backend input {tuple(bundle.dims.image_shape)}")
    if errors:
        raise GeneicError("could not load corpus:\n  " + "\n  ".join(errors))
    return images, records


def _out(cfg, name, explicit=None):
    return Path(explicit) if explicit else Path(cfg.data.out_dir) / name


def _load_checkpoint(path, bundle):
    state = load_prompt(path)
    if state.M and state.d_dec != bundle.dims.d_dec:
        raise FormatError(f"{path}: prompt width {state.d_dec} does not match backend d_dec {bundle.dims.d_dec}")
    return state


def _file_sha(paths):
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


# --- commands ------------------------------------------------------------------

def cmd_cluster(cfg, args):
    bundle = _backend(cfg)
    images, records = _corpus(cfg.data.manifest, bundle)
    out = _out(cfg, "index.json", args.out)
    k = args.k if args.k is not None else cfg.train.k
    key = hashlib.sha256(json.dumps({
        "corpus": _file_sha([cfg.data.manifest] + [r["path"] for r in records]),
        "backend": bundle.digest(), "k": k, "seed": cfg.train.seed,
        "max_iter": cfg.train.kmeans_max_iter,
    }, sort_keys=True).encode()).hexdigest()
    if out.exists() and not args.force:
        try:
            if json.loads(out.read_text()).get("cache_key") == key:
                print(f"up to date: {out}")
                return 0
        except (json.JSONDecodeError, OSError):
            pass
    index = embed_corpus(images, bundle)
    assignment = cluster_corpus(index, k, cfg.train.seed, cfg.train.kmeans_max_iter)
    save_index(index, out, assignment, extra={"cache_key": key})
    sizes = np.bincount(assignment.labels, minlength=assignment.k)
    print(f"clustered {len(index)} images into k={assignment.k} clusters (sizes {sizes.tolist()}) -> {out}")
    return 0


def cmd_transfer(cfg, args):
    bundle = _backend(cfg)
    images, _ = _corpus(cfg.data.manifest, bundle)
    fraction = cfg.train.fraction if args.fraction is None else args.fraction
    out_dir = _out(cfg, "transfer", args.out)
    index = embed_corpus(images, bundle)
    assignment = cluster_corpus(index, cfg.train.k, cfg.train.seed, cfg.train.kmeans_max_iter)
    sidecar = []
    for i, x in enumerate(images):
        j = find_partner(i, assignment, index) if len(images) > 1 else i
        f_i, f_j, plan, swapped = transfer_grids(x, images[j], bundle, fraction)
        img = ae_decode(swapped, bundle, id=f"{x.id}~{images[j].id}")
        name = f"{x.id}.png"
        save_image(out_dir / name, img)
        sidecar.append({
            "id": x.id, "partner": images[j].id, "file": name, "fraction": fraction,
            "channels": list(plan.channels),
            "max_abs_pixel_change": float(np.max(np.abs(img.pixels - x.pixels))),
        })
    atomic_write(out_dir / "transfer.json", json.dumps(sidecar, indent=1) + "\n")
    print(f"wrote {len(sidecar)} transferred images to {out_dir}")
    return 0


def cmd_train(cfg, args):
    bundle = _backend(cfg)
    images, _ = _corpus(cfg.data.manifest, bundle)
    if len(images) >= 2 and all(np.array_equal(images[0].pixels, im.pixels) for im in images[1:]):
        raise GeneicError("degenerate corpus: every image is identical, so no attribute transfer is possible")
    ckpt = Path(cfg.data.checkpoint_dir)
    log_path = Path(cfg.data.log_path)
    if cfg.train.epochs == 0:
        ckpt.mkdir(parents=True, exist_ok=True)

    def progress(rec):
        if args.verbose:
            print(f"epoch {rec['epoch']} step {rec['step']} lr {rec['lr']:.2e} "
                  f"L_s {rec['L_s']:.4f} adv {rec['mean_advantage']:+.4f}", file=sys.stderr)

    prompt, log = train(images, bundle, cfg.train, checkpoint_dir=ckpt, log_path=log_path,
                        resume=args.resume, progress=progress)
    done = [r for r in log.records if not r.get("skipped")]
    print(f"trained {len(done)} steps ({len(log.records) - len(done)} skipped); "
          f"checkpoint {ckpt / 'prompt.gipv'}, log {log_path}")
    if args.figures:
        from .plots import plot_training_curves

        fig = plot_training_curves(log, Path(args.figures) / "training_curves.png")
        print(f"figure {fig}")
    return 0


def cmd_caption(cfg, args):
    bundle = _backend(cfg)
    manifest = args.split or cfg.data.manifest
    images, _ = _corpus(manifest, bundle)
    if args.text_prompt:
        state = None
    else:
        path = args.checkpoint or Path(cfg.data.checkpoint_dir) / "prompt.gipv"
        state = _load_checkpoint(path, bundle)
    rows = []
    for im in images:
        vis = encode_image(im, bundle)
        inp = compose_input_text(vis, args.text_prompt, bundle) if state is None else compose_input(vis, state)
        cap = decode(inp, bundle, "greedy", cfg.train.max_len)
        rows.append({"image_id": im.id, "caption": cap.text})
    out = _out(cfg, "candidates.jsonl", args.out)
    write_jsonl(out, rows)
    print(f"wrote {len(rows)} captions to {out}")
    return 0


def _read_candidates(path):
    out = {}
    for i, rec in enumerate(read_jsonl(path), 1):
        if "image_id" not in rec or "caption" not in rec:
            raise FormatError(f"{path}: line {i}: expected image_id and caption")
        out[str(rec["image_id"])] = rec["caption"]
    return out


def _read_references(path):
    out = {}
    for i, rec in enumerate(read_jsonl(path), 1):
        if "image_id" not in rec or not isinstance(rec.get("captions"), list):
            raise FormatError(f"{path}: line {i}: expected image_id and a captions list")
        out.setdefault(str(rec["image_id"]), []).extend(rec["captions"])
    return out


def format_report(report):
    d = report.to_dict()
    cols = [("B@1", d["bleu1"] * 100), ("B@2", d["bleu2"] * 100), ("B@3", d["bleu3"] * 100),
            ("B@4", d["bleu4"] * 100), ("METEOR", None), ("ROUGE-L", d["rouge_l"] * 100),
            ("CIDEr", None if d["cider"] is None else d["cider"] * 100), ("CLIP-S", d["clip_s"]),
            ("Vocab", d["vocab"]), ("%Novel", d["pct_novel"]), ("Length", d["mean_length"]),
            ("%Unique", d["pct_unique"])]
    cells = [(k, "n/a" if v is None else (str(v) if isinstance(v, int) else f"{v:.1f}")) for k, v in cols]
    widths = [max(len(k), len(v)) for k, v in cells]
    return "\n".join([
        "  ".join(k.rjust(w) for (k, _), w in zip(cells, widths)),
        "  ".join(v.rjust(w) for (_, v), w in zip(cells, widths)),
    ]) + "\n"


def cmd_evaluate(cfg, args):
    cands = _read_candidates(args.candidates)
    refs_path = args.references or cfg.data.references
    if not refs_path:
        raise UsageError("no references file given (use --references or [data] references)")
    refs = _read_references(refs_path)
    missing = [k for k in cands if k not in refs]
    if missing:
        raise GeneicError(f"missing references for {len(missing)} image(s): {missing[:5]}")
    train_refs = None
    if cfg.metrics.train_references:
        train_refs = [c for caps in _read_references(cfg.metrics.train_references).values() for c in caps]
    images = bundle = None
    manifest = args.manifest or cfg.data.manifest
    if manifest:
        bundle = _backend(cfg)
        images, _ = _corpus(manifest, bundle)
    weight = cfg.metrics.clip_s_weight if args.clip_s_weight is None else args.clip_s_weight
    report = evaluate(cands, refs, train_refs, images, bundle, weight)
    out = _out(cfg, "metrics.json", args.out)
    atomic_write(out, json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    sys.stdout.write(format_report(report))
    if args.figures:
        from .plots import plot_metric_report

        print(f"figure {plot_metric_report(report, Path(args.figures) / 'metrics.png')}")
    return 0


def cmd_interpret(cfg, args):
    bundle = _backend(cfg)
    path = args.checkpoint or Path(cfg.data.checkpoint_dir) / "prompt.gipv"
    rows = interpret_prompt(_load_checkpoint(path, bundle), bundle)
    sys.stdout.write(format_table(rows))
    if args.json:
        atomic_write(args.json, table_json(rows))
    return 0


# --- parser ----------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file with [train], [data] and [metrics] sections")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, help="training seed (falls back to GENEIC_SEED)")
    common.add_argument("--manifest", help="corpus manifest (JSON lines of id/path)")
    common.add_argument("--backend", help="'toy', a registered adapter, or module:factory")
    common.add_argument("--backend-file", help="serialized toy backend parameters")

    p = argparse.ArgumentParser(prog="geneic", description=__doc__)
    p.add_argument("--version", action="version", version=f"geneic {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("cluster", parents=[common], help="embed and cluster the target-domain corpus")
    c.add_argument("--k", type=int)
    c.add_argument("--out", help="index manifest path (default OUT_DIR/index.json)")
    c.add_argument("--force", action="store_true", help="ignore an up-to-date cached index")

    c = sub.add_parser("transfer", parents=[common], help="dump attribute-transferred images")
    c.add_argument("--fraction", type=float)
    c.add_argument("--out", help="output directory (default OUT_DIR/transfer)")

    c = sub.add_parser("train", parents=[common], help="learn prompt vectors")
    c.add_argument("--epochs", type=int)
    c.add_argument("--checkpoint-dir")
    c.add_argument("--log", help="JSON-lines training log path")
    c.add_argument("--resume", action="store_true", help="continue from the latest epoch checkpoint")
    c.add_argument("--figures", help="directory for training-curve figures")
    c.add_argument("-v", "--verbose", action="store_true")

    c = sub.add_parser("caption", parents=[common], help="greedy captions under a prompt checkpoint")
    c.add_argument("--checkpoint")
    c.add_argument("--split", help="manifest of the images to caption (default: --manifest)")
    c.add_argument("--text-prompt", help="use a hand-crafted text prompt instead of a checkpoint")
    c.add_argument("--out", help="candidates file (default OUT_DIR/candidates.jsonl)")

    c = sub.add_parser("evaluate", parents=[common], help="score candidates against references")
    c.add_argument("--candidates", required=True)
    c.add_argument("--references")
    c.add_argument("--clip-s-weight", type=float)
    c.add_argument("--out", help="report path (default OUT_DIR/metrics.json)")
    c.add_argument("--figures", help="directory for the metric figure")

    c = sub.add_parser("interpret", parents=[common], help="nearest-word and generated-word probes")
    c.add_argument("--checkpoint")
    c.add_argument("--json", help="also write the table as JSON here")
    return p


COMMANDS = {
    "cluster": cmd_cluster,
    "transfer": cmd_transfer,
    "train": cmd_train,
    "caption": cmd_caption,
    "evaluate": cmd_evaluate,
    "interpret": cmd_interpret,
}


def _run_config(args):
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    if getattr(args, "epochs", None) is not None:
        overrides.append(f"train.epochs={args.epochs}")
    cfg = load_config(args.config, overrides)
    return with_data(
        cfg,
        manifest=args.manifest,
        backend=args.backend,
        backend_file=args.backend_file,
        checkpoint_dir=getattr(args, "checkpoint_dir", None),
        log_path=getattr(args, "log", None),
    )


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _run_config(args)
    except (ContractError, OSError, ValueError) as exc:
        parser.print_usage(sys.stderr)
        print(f"geneic: error: {exc}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"geneic: error: {exc}", file=sys.stderr)
        return 2
    except (GeneicError, OSError) as exc:
        print(f"geneic: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
