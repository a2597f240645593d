"""Command-line lifecycle for the retrieval toolkit.

Subcommands cover generate -> train -> embed -> eval plus one-shot
search and a long-running HTTP server.  Every command is deterministic
given its flags and seeds, exits 0 on success, and prints a one-line
diagnostic to stderr (exit 1) when an inner module rejects its input.
Set ``PRKT_LOG=debug|info|warning`` to control log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from html import escape
from pathlib import Path

import numpy as np

from patret.dataset import generate_synthetic, load_manifest, read_drawing
from patret.evaluation import evaluate, render_table
from patret.retrieval import (
    embed_dataset,
    embed_images,
    k_reciprocal_rerank,
    load_embeddings,
    save_embeddings,
    search,
)
from patret.train import TrainConfig, load_checkpoint, train

log = logging.getLogger("patret")

_LOG_LEVELS = {"debug": logging.DEBUG, "info": logging.INFO, "warning": logging.WARNING}


def _configure_logging() -> None:
    name = os.environ.get("PRKT_LOG", "warning").lower()
    logging.basicConfig(
        level=_LOG_LEVELS.get(name, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )


def _eval_policy(bundle):
    from patret.augment import AugmentPolicy

    return AugmentPolicy(
        crop_size=bundle.eval_size,
        translate_max=0,
        hflip_prob=0.0,
        pad_value=bundle.pad_value,
        eval_size=bundle.eval_size,
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    manifest = generate_synthetic(
        args.out,
        num_ids=args.ids,
        views_per_id=args.views,
        image_size=args.size,
        stroke_width=args.stroke,
        seed=args.seed,
        val_fraction=args.val_fraction,
    )
    print(
        f"wrote {len(manifest.entries)} images "
        f"({len(manifest.split_entries('train'))} train / "
        f"{len(manifest.split_entries('val'))} val) under {manifest.root_dir}"
    )
    return 0


def cmd_train(args) -> int:
    config = TrainConfig.load(args.config)

    def progress(iteration, loss):
        print(f"iter {iteration:>6}  loss {loss:.4f}", flush=True)

    result = train(config, progress=progress)
    print(f"checkpoint: {result.checkpoint_path}")
    if result.best_checkpoint_path is not None:
        print(
            f"best checkpoint: {result.best_checkpoint_path} "
            f"(val mAP {result.best_val_map:.4f})"
        )
    print(f"log: {result.log_path}")
    return 0


def cmd_embed(args) -> int:
    split = None if args.split == "all" else args.split
    manifest = load_manifest(args.manifest)
    store = embed_dataset(
        args.checkpoint, manifest, split, batch_size=args.batch_size
    )
    path = save_embeddings(store, args.out)
    print(f"embedded {store.size} images ({store.dim}-d) -> {path}")
    return 0


def cmd_eval(args) -> int:
    store = load_embeddings(args.embeddings)
    report = evaluate(
        store, use_rerank=args.rerank, k1=args.k1, k2=args.k2, lam=args.lam
    )
    if args.table:
        name = "rerank" if args.rerank else "cosine"
        print(render_table({name: report}))
    else:
        print(report.to_json())
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
        log.info("wrote report to %s", args.out)
    return 0


def _html_gallery(out_path: Path, image_root: Path, query_path: Path, rows) -> None:
    def img_tag(path: Path) -> str:
        rel = os.path.relpath(path, out_path.parent)
        return f'<img src="{escape(rel)}" alt="">'

    cells = [
        "<figure>"
        + img_tag(query_path)
        + "<figcaption>query</figcaption></figure>"
    ]
    for rank, pid, ref, score in rows:
        cells.append(
            "<figure>"
            + img_tag(image_root / ref)
            + f"<figcaption>#{rank} {escape(pid)} {score:.4f}</figcaption></figure>"
        )
    out_path.write_text(
        "<!doctype html><meta charset='utf-8'><title>search results</title>"
        "<style>figure{display:inline-block;margin:8px;text-align:center;"
        "font:12px monospace}img{image-rendering:pixelated;border:1px solid #999}"
        "</style>\n" + "\n".join(cells) + "\n"
    )


def cmd_search(args) -> int:
    store = load_embeddings(args.embeddings)
    bundle = load_checkpoint(args.checkpoint, expect_embed_dim=store.dim)
    drawing = read_drawing(args.query)
    qvec = embed_images(bundle.params, [drawing], _eval_policy(bundle))[0]

    k = args.k
    if k > store.size:
        print(
            f"warning: k={k} exceeds gallery size {store.size}; clamping",
            file=sys.stderr,
        )
        k = store.size
    if args.rerank:
        dist = k_reciprocal_rerank(
            store, qvec[None, :], k1=args.k1, k2=args.k2, lam=args.lam
        )[0]
        order = np.argsort(dist, kind="stable")[:k]
    else:
        order = np.array([hit.row for hit in search(store, qvec, k).hits])
    scores = store.vectors @ qvec  # cosine, regardless of ordering method

    rows = [
        (rank, store.labels[i], store.refs[i], float(scores[i]))
        for rank, i in enumerate(order, start=1)
    ]
    for rank, pid, ref, score in rows:
        print(f"{rank:>3}  {pid}  {ref}  {score:.4f}")
    if args.html:
        image_root = Path(args.image_root or Path(args.embeddings).parent)
        _html_gallery(Path(args.html), image_root, Path(args.query), rows)
        log.info("wrote gallery to %s", args.html)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from patret.server import build_state, create_app

    state = build_state(
        args.checkpoint,
        args.embeddings,
        args.image_root,
        k1=args.k1,
        k2=args.k2,
        lam=args.lam,
    )
    app = create_app(state, static_dir=args.static_dir)
    level = os.environ.get("PRKT_LOG", "info").lower()
    uvicorn.run(
        app,
        host=args.host,
        port=args.port,
        log_level=level if level in ("debug", "info", "warning") else "info",
    )
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_rerank_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k1", type=int, default=20, help="mutual-neighborhood size")
    p.add_argument("--k2", type=int, default=6, help="query-expansion size")
    p.add_argument(
        "--lam",
        type=float,
        default=0.3,
        help="weight of the original distance in the blend (1 = no re-ranking)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patret",
        description="patent line-drawing retrieval: generate, train, embed, "
        "evaluate, search, serve",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="render a synthetic wireframe drawing corpus")
    p.add_argument("--ids", type=int, required=True, help="number of patent ids")
    p.add_argument("--views", type=int, required=True, help="views per id")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64, help="image side in pixels")
    p.add_argument("--stroke", type=int, default=2, help="stroke width in pixels")
    p.add_argument("--val-fraction", type=float, default=0.25)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True, help="path to a TrainConfig JSON file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="embed a manifest split into a PEMB file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=["train", "val", "all"], default="all")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--out", required=True, help="output .pemb path")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval", help="leave-one-out mAP / Rank-N on a PEMB file")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--rerank", action="store_true")
    _add_rerank_flags(p)
    p.add_argument("--table", action="store_true", help="text table instead of JSON")
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("search", help="rank the gallery for one query image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--query", required=True, help="query image path")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--rerank", action="store_true")
    _add_rerank_flags(p)
    p.add_argument("--html", help="write a static thumbnail gallery here")
    p.add_argument(
        "--image-root",
        help="directory gallery refs resolve against (default: embeddings dir)",
    )
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("serve", help="serve the search API and web console")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--image-root", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--static-dir", help="directory with the built web console")
    _add_rerank_flags(p)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:
        print(f"{args.command}: error: {e}", file=sys.stderr)
        log.debug("unhandled error", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
