"""Walk the HTTP search API without leaving Python.

The package ships a small JSON-over-HTTP server (``patret serve``) so
non-Python clients - like the bundled web console in frontend/ - can
query a gallery. This script mounts the very same ASGI app in-process
with a test client and exercises every endpoint, then prints the
command that serves it for real.

Requires the artifacts from demos/02_train_and_evaluate.py.

Run:  python3 demos/04_http_api.py
"""

import json
import warnings
from pathlib import Path

warnings.filterwarnings(
    "ignore", message="Using `httpx` with `starlette.testclient` is deprecated"
)
from starlette.testclient import TestClient  # noqa: E402

from patret.dataset import load_manifest
from patret.retrieval import embed_dataset, save_embeddings
from patret.server import build_state, create_app

ROOT = Path("demo_artifacts/train_demo")


def main() -> None:
    checkpoint = ROOT / "run" / "model.prkt"
    if not checkpoint.exists():
        raise SystemExit("run demos/02_train_and_evaluate.py first")

    manifest = load_manifest(ROOT / "corpus" / "manifest.jsonl")
    pemb = ROOT / "run" / "gallery.pemb"
    if not pemb.exists():
        save_embeddings(embed_dataset(checkpoint, manifest, split=None), pemb)

    state = build_state(checkpoint, pemb, image_root=ROOT / "corpus")
    client = TestClient(create_app(state))

    print("GET /api/health")
    print("  ", client.get("/api/health").json())

    ref = manifest.entries[0].image_path
    print(f"\nPOST /api/search with gallery_ref={ref!r}, k=3")
    hits = client.post(
        "/api/search", json={"gallery_ref": ref, "k": 3}
    ).json()["hits"]
    for h in hits:
        print(f"   rank {h['rank']}  {h['patent_id']}  "
              f"score {h['score']:.4f}  {h['image_url']}")

    print("\nPOST /api/search with a file upload and rerank=true, k=3")
    image_bytes = (ROOT / "corpus" / ref).read_bytes()
    body = client.post(
        "/api/search",
        files={"file": ("query.png", image_bytes, "image/png")},
        data={"k": "3", "rerank": "true"},
    ).json()
    print(f"   rerank_used={body['rerank_used']} k={body['k']}")
    print("  ", json.dumps(body["hits"][0]))

    print(f"\nGET {hits[0]['image_url']}")
    resp = client.get(hits[0]["image_url"])
    print(f"   {resp.headers['content-type']}, {len(resp.content)} bytes")

    print("\nErrors come back as JSON with a message:")
    bad = client.post("/api/search", json={"gallery_ref": "nope.png"})
    print(f"   {bad.status_code} {bad.json()}")

    print("\nServe it for real (then open http://127.0.0.1:8321/):")
    print(f"  patret serve --checkpoint {checkpoint} --embeddings {pemb}"
          f" --image-root {ROOT / 'corpus'} --port 8321")


if __name__ == "__main__":
    main()
