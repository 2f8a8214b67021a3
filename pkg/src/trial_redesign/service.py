"""HTTP wrapper that serves a reference oracle over the ``{"probability": x}`` protocol."""

from __future__ import annotations

from fastapi import Body, FastAPI, HTTPException

from .oracle import ReferenceOracle, ScoringSpec
from .protocol import ProtocolError, protocol_from_document


def create_app(spec: ScoringSpec) -> FastAPI:
    oracle = ReferenceOracle(spec)
    app = FastAPI(title="trial-redesign reference oracle")

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "oracle": oracle.descriptor}

    @app.post("/score")
    def score(document: dict = Body(...)) -> dict:
        try:
            p = protocol_from_document(document)
        except (ProtocolError, KeyError, TypeError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=f"invalid protocol: {exc}")
        return {"probability": oracle.score(p)}

    return app


def serve(spec: ScoringSpec, host: str = "127.0.0.1", port: int = 8000) -> None:
    import uvicorn

    uvicorn.run(create_app(spec), host=host, port=port, log_level="info")
