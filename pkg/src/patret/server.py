"""HTTP search service: JSON API plus the static web console.

All artifacts load once at startup into an immutable ``ServeState``;
request handlers only read it, so concurrent searches are safe.  Query
images are eval-normalized exactly like gallery images (center crop or
pad to the checkpoint's eval size — never rescaled).

API
---
- ``GET  /api/health`` -> ``{"status": "ok", "gallery_size": R}``
- ``POST /api/search`` -> multipart upload (``file``) or JSON
  ``{"gallery_ref": str}``, optional ``k`` and ``rerank`` fields;
  responds ``{"hits": [{"rank", "patent_id", "image_url", "score"}],
  "rerank_used": bool, "k": int}``.  ``score`` is always the cosine
  similarity; re-ranking changes only the order.
- ``GET  /api/images/<ref>`` -> image bytes for a gallery ref
- ``GET  /`` -> the web console (or a plain fallback page)
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import FileResponse, HTMLResponse
from fastapi.staticfiles import StaticFiles

from patret.augment import AugmentPolicy
from patret.dataset import ManifestError, read_drawing
from patret.model import ModelParams
from patret.retrieval import (
    EmbeddingStore,
    embed_images,
    k_reciprocal_rerank,
    load_embeddings,
    search,
)
from patret.train import load_checkpoint

__all__ = ["ServeState", "build_state", "create_app"]

FALLBACK_PAGE = """<!doctype html>
<meta charset="utf-8"><title>patret</title>
<body style="font-family: monospace; margin: 2em">
<h1>patret search API</h1>
<p>The web console is not bundled. The JSON API is live:</p>
<ul>
<li>GET /api/health</li>
<li>POST /api/search (multipart "file" or {"gallery_ref": ...})</li>
<li>GET /api/images/&lt;ref&gt;</li>
</ul>
</body>
"""


@dataclass(frozen=True)
class ServeState:
    """Everything a request needs; never mutated after startup."""

    params: ModelParams
    store: EmbeddingStore
    image_root: Path
    policy: AugmentPolicy
    k1: int = 20
    k2: int = 6
    lam: float = 0.3


def build_state(
    checkpoint_path,
    embeddings_path,
    image_root,
    k1: int = 20,
    k2: int = 6,
    lam: float = 0.3,
) -> ServeState:
    store = load_embeddings(embeddings_path)
    bundle = load_checkpoint(checkpoint_path, expect_embed_dim=store.dim)
    policy = AugmentPolicy(
        crop_size=bundle.eval_size,
        translate_max=0,
        hflip_prob=0.0,
        pad_value=bundle.pad_value,
        eval_size=bundle.eval_size,
    )
    root = Path(image_root)
    if not root.is_dir():
        raise FileNotFoundError(f"image root {root} is not a directory")
    return ServeState(
        params=bundle.params,
        store=store,
        image_root=root,
        policy=policy,
        k1=k1,
        k2=k2,
        lam=lam,
    )


def _parse_bool(value, default=False) -> bool:
    if value is None:
        return default
    if isinstance(value, bool):
        return value
    return str(value).strip().lower() in ("1", "true", "yes", "on")


def _parse_k(value, gallery_size: int, default: int = 10) -> int:
    if value is None or value == "":
        k = default
    else:
        try:
            k = int(value)
        except (TypeError, ValueError):
            raise HTTPException(status_code=400, detail=f"k must be an integer, got {value!r}")
    if k < 1:
        raise HTTPException(status_code=400, detail="k must be >= 1")
    return min(k, gallery_size)


def create_app(state: ServeState, static_dir=None) -> FastAPI:
    app = FastAPI(title="patret search")
    ref_to_row = {ref: i for i, ref in enumerate(state.store.refs)}

    @app.get("/api/health")
    def health():
        return {"status": "ok", "gallery_size": state.store.size}

    def query_vector_from_upload(data: bytes, filename: str) -> np.ndarray:
        try:
            drawing = read_drawing(io.BytesIO(data), name=filename or "upload")
        except ManifestError as e:
            raise HTTPException(status_code=400, detail=str(e))
        try:
            return embed_images(state.params, [drawing], state.policy)[0]
        except ValueError as e:
            raise HTTPException(status_code=400, detail=f"cannot embed query: {e}")

    def query_vector_from_ref(ref) -> np.ndarray:
        row = ref_to_row.get(str(ref))
        if row is None:
            raise HTTPException(status_code=400, detail=f"unknown gallery_ref {ref!r}")
        return state.store.vectors[row]

    def ranked_rows(qvec: np.ndarray, k: int, rerank: bool) -> np.ndarray:
        if not rerank:
            return np.array([h.row for h in search(state.store, qvec, k).hits])
        size = state.store.size
        k1 = min(state.k1, size)
        k2 = max(1, min(state.k2, k1 - 1))
        if k1 <= k2:
            raise HTTPException(
                status_code=400,
                detail=f"gallery of {size} is too small to re-rank",
            )
        dist = k_reciprocal_rerank(
            state.store, qvec[None, :], k1=k1, k2=k2, lam=state.lam
        )[0]
        return np.argsort(dist, kind="stable")[:k]

    @app.post("/api/search")
    async def api_search(request: Request):
        content_type = request.headers.get("content-type", "")
        if content_type.startswith("multipart/form-data"):
            try:
                form = await request.form()
            except Exception:
                raise HTTPException(status_code=400, detail="malformed multipart body")
            upload = form.get("file")
            gallery_ref = form.get("gallery_ref")
            k_raw, rerank_raw = form.get("k"), form.get("rerank")
            if upload is not None and hasattr(upload, "read"):
                qvec = query_vector_from_upload(
                    await upload.read(), getattr(upload, "filename", "")
                )
            elif gallery_ref:
                qvec = query_vector_from_ref(gallery_ref)
            else:
                raise HTTPException(
                    status_code=400,
                    detail="provide an image under 'file' or a 'gallery_ref'",
                )
        else:
            try:
                body = await request.json()
            except json.JSONDecodeError:
                raise HTTPException(
                    status_code=400,
                    detail="send multipart/form-data or a JSON body",
                )
            if not isinstance(body, dict) or "gallery_ref" not in body:
                raise HTTPException(
                    status_code=400, detail="JSON body needs a 'gallery_ref'"
                )
            qvec = query_vector_from_ref(body["gallery_ref"])
            k_raw, rerank_raw = body.get("k"), body.get("rerank")

        k = _parse_k(k_raw, state.store.size)
        rerank = _parse_bool(rerank_raw)
        rows = ranked_rows(qvec, k, rerank)
        scores = state.store.vectors @ qvec
        hits = [
            {
                "rank": rank,
                "patent_id": state.store.labels[i],
                "image_url": f"/api/images/{state.store.refs[i]}",
                "score": float(scores[i]),
            }
            for rank, i in enumerate(rows, start=1)
        ]
        return {"hits": hits, "rerank_used": rerank, "k": k}

    @app.get("/api/images/{ref:path}")
    def get_image(ref: str):
        root = state.image_root.resolve()
        full = (root / ref).resolve()
        if root not in full.parents or not full.is_file():
            raise HTTPException(status_code=404, detail=f"unknown image {ref!r}")
        return FileResponse(full)

    if static_dir and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="console")
    else:

        @app.get("/", response_class=HTMLResponse)
        def index():
            return FALLBACK_PAGE

    return app
