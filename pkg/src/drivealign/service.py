"""HTTP label service: serves unlabeled batches to the annotation UI and
ingests best-of-N choices, writing the same pair records the oracle path
produces.

Batches are leased rather than locked: the oldest unlabeled batch whose
lease is free (or expired) is served next, so an abandoned session never
strands a batch. Label ingestion and pair-store writes are serialized
through one lock. The ground truth never leaves the server; it only enters
pair records as the fallback winner.
"""

from __future__ import annotations

import threading
import time
from pathlib import Path

from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from . import preference, world
from .errors import DataFormatError
from .preference import Label, list_batches, load_labels, read_batch_archive

LEASE_SECONDS_DEFAULT = 600.0


class LabelStore:
    """Single-writer view over the batch archive, labels and pairs files."""

    def __init__(self, data_dir, lease_seconds=LEASE_SECONDS_DEFAULT):
        self.data_dir = Path(data_dir)
        self.lease_seconds = lease_seconds
        self.labels_path = self.data_dir / "labels" / "labels.jsonl"
        self.pairs_path = self.data_dir / "pairs" / "pairs.jsonl"
        self._lock = threading.Lock()
        self._leases = {}
        self.batch_ids = list_batches(self.data_dir)
        self._labeled = set()
        if self.labels_path.exists():
            for label in load_labels(self.labels_path):
                self._labeled.add(label.batch_id)

    def progress(self):
        with self._lock:
            labeled = len(self._labeled)
            return {"labeled": labeled,
                    "remaining": len(self.batch_ids) - labeled}

    def next_batch(self):
        """Oldest unlabeled batch with a free/expired lease, or None."""
        now = time.monotonic()
        with self._lock:
            for bid in self.batch_ids:
                if bid in self._labeled:
                    continue
                expiry = self._leases.get(bid)
                if expiry is not None and expiry > now:
                    continue
                self._leases[bid] = now + self.lease_seconds
                return read_batch_archive(self.data_dir, bid)
        return None

    def submit(self, batch_id, choice):
        """Record one label; returns an HTTP-style status code."""
        if batch_id not in self.batch_ids:
            return 404
        batch = read_batch_archive(self.data_dir, batch_id)
        if choice is not None:
            if not isinstance(choice, int) or isinstance(choice, bool):
                return 400
            if not 0 <= choice < batch.n:
                return 400
        with self._lock:
            if batch_id in self._labeled:
                return 409
            label = Label(batch_id, choice, preference.LABELER_HUMAN,
                          timestamp=time.time())
            pairs = preference.pairs_from_label(batch, label)
            preference.append_labels(self.labels_path, [label])
            preference.append_pairs(self.pairs_path, pairs)
            self._labeled.add(batch_id)
            self._leases.pop(batch_id, None)
        return 204


def batch_payload(batch):
    """The wire form served to annotators; ground truth is never included."""
    return {
        "batch_id": batch.batch_id,
        "map": world.map_to_record(batch.map),
        "dt": batch.dt,
        "scenarios": [
            {
                "sample_id": sc.sample_id,
                "agents": [
                    {
                        "id": a.agent_id,
                        "length": a.shape.length,
                        "width": a.shape.width,
                        "states": a.states.tolist(),
                    }
                    for a in sc.agents
                ],
            }
            for sc in batch.scenarios
        ],
    }


def create_app(data_dir, lease_seconds=LEASE_SECONDS_DEFAULT,
               static_dir=None) -> FastAPI:
    store = LabelStore(data_dir, lease_seconds)
    app = FastAPI(title="drivealign label service")
    app.state.store = store

    @app.get("/api/batch/next")
    def get_next():
        batch = store.next_batch()
        if batch is None:
            return Response(status_code=204)
        return JSONResponse(batch_payload(batch))

    @app.post("/api/batch/{batch_id}/label")
    async def post_label(batch_id: str, request: Request):
        try:
            body = await request.json()
        except Exception:
            return JSONResponse({"error": "body must be JSON"}, status_code=400)
        if not isinstance(body, dict) or "choice" not in body:
            return JSONResponse({"error": "missing field 'choice'"},
                                status_code=400)
        choice = body["choice"]
        try:
            status = store.submit(batch_id, choice)
        except DataFormatError as exc:
            return JSONResponse({"error": str(exc)}, status_code=404)
        if status == 204:
            return Response(status_code=204)
        messages = {400: f"malformed choice {choice!r}",
                    404: f"unknown batch {batch_id}",
                    409: f"batch {batch_id} already labeled"}
        return JSONResponse({"error": messages[status]}, status_code=status)

    @app.get("/api/progress")
    def get_progress():
        return store.progress()

    if static_dir is not None and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=static_dir, html=True),
                  name="ui")
    return app


def serve(data_dir, port=8080, lease_seconds=LEASE_SECONDS_DEFAULT,
          static_dir=None):
    import uvicorn
    app = create_app(data_dir, lease_seconds, static_dir)
    uvicorn.run(app, host="127.0.0.1", port=port, log_level="warning")
