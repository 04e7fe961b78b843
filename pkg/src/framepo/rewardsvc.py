"""HTTP client for an external answer-scoring service, plus a mock server.

Protocol (HTTP/1.1, JSON):

    POST /score   {"episode_id", "frame_ids", "question", "options", "request_id"}
              ->  200 {"logits": [...], "request_id": "..."}
    GET /healthz  -> 200

Frame ids are sent, never pixels. ``REFOCUS_SCORE_ENDPOINT`` overrides the
configured endpoint.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import socket
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Mapping, Sequence

import numpy as np

from .synthenv import Episode, OracleConfig, oracle_logits

__all__ = [
    "ScoreRequest",
    "ScoreResponse",
    "RewardServiceError",
    "RetriableError",
    "ProtocolError",
    "ScoreClient",
    "RemoteScorer",
    "score_remote",
    "request_id_for",
    "resolve_endpoint",
    "MockScoreServer",
    "oracle_handler",
    "ENDPOINT_ENV",
]

log = logging.getLogger(__name__)

ENDPOINT_ENV = "REFOCUS_SCORE_ENDPOINT"


class RewardServiceError(RuntimeError):
    retriable = False


class RetriableError(RewardServiceError):
    retriable = True


class ProtocolError(RewardServiceError):
    pass


def request_id_for(episode_id: str, frame_ids: Sequence[int]) -> str:
    h = hashlib.sha256()
    h.update(episode_id.encode())
    h.update(b"\x00")
    h.update(",".join(str(int(f)) for f in sorted(frame_ids)).encode())
    return h.hexdigest()[:32]


@dataclass(frozen=True)
class ScoreRequest:
    episode_id: str
    frame_ids: list
    question: str
    options: list
    request_id: str

    def __post_init__(self):
        ids = [int(f) for f in self.frame_ids]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValueError("frame_ids must be strictly increasing")
        if len(self.options) < 2:
            raise ValueError("need at least two options")

    @classmethod
    def for_subset(cls, episode: Episode, frame_ids: Sequence[int], question: str = "") -> "ScoreRequest":
        ids = sorted(int(f) for f in frame_ids)
        return cls(episode.id, ids, question, list(episode.options), request_id_for(episode.id, ids))

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ScoreResponse:
    logits: list
    request_id: str
    attempts: int = 1


def resolve_endpoint(endpoint: str | None) -> str:
    env = os.environ.get(ENDPOINT_ENV)
    chosen = env or endpoint
    if not chosen:
        raise ValueError(f"no scoring endpoint configured (set {ENDPOINT_ENV} or pass one)")
    return chosen.rstrip("/")


def _parse_response(raw: bytes, req: ScoreRequest) -> list:
    try:
        body = json.loads(raw)
        logits = [float(x) for x in body["logits"]]
        rid = body.get("request_id")
    except (ValueError, KeyError, TypeError) as exc:
        raise ProtocolError(f"malformed response for {req.request_id}: {exc}") from exc
    if rid != req.request_id:
        raise ProtocolError(f"request_id mismatch: sent {req.request_id}, got {rid}")
    if len(logits) != len(req.options):
        raise ProtocolError(f"expected {len(req.options)} logits, got {len(logits)}")
    if not all(math.isfinite(x) for x in logits):
        raise ProtocolError("non-finite logits in response")
    return logits


def _post_once(url: str, req: ScoreRequest, timeout_s: float) -> list:
    data = json.dumps(req.to_json()).encode()
    http_req = urllib.request.Request(url, data=data, method="POST",
                                      headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(http_req, timeout=timeout_s) as resp:
            raw = resp.read()
    except urllib.error.HTTPError as exc:
        if 400 <= exc.code < 500:
            raise RewardServiceError(f"HTTP {exc.code} for {req.request_id}") from exc
        raise RetriableError(f"HTTP {exc.code} for {req.request_id}") from exc
    except (socket.timeout, TimeoutError) as exc:
        raise RetriableError(f"timeout for {req.request_id}") from exc
    except urllib.error.URLError as exc:
        raise RetriableError(f"connection failed for {req.request_id}: {exc.reason}") from exc
    except ConnectionError as exc:
        raise RetriableError(f"connection failed for {req.request_id}: {exc}") from exc
    return _parse_response(raw, req)


def score_remote(endpoint: str | None, req: ScoreRequest, timeout_ms: float = 5000, retries: int = 3,
                 backoff_s: float = 0.05) -> ScoreResponse:
    """POST one request, retrying transient failures with exponential backoff.

    ``retries`` is the total number of attempts.
    """
    if retries < 1:
        raise ValueError("retries must be >= 1")
    url = resolve_endpoint(endpoint) + "/score"
    last = None
    for attempt in range(1, retries + 1):
        try:
            logits = _post_once(url, req, timeout_ms / 1000.0)
            log.debug("scored %s in %d attempt(s)", req.request_id, attempt)
            return ScoreResponse(logits=logits, request_id=req.request_id, attempts=attempt)
        except RewardServiceError as exc:
            last = exc
            log.info("attempt %d/%d for %s failed: %s", attempt, retries, req.request_id, exc)
            if not exc.retriable or attempt == retries:
                raise
            time.sleep(backoff_s * 2 ** (attempt - 1))
    raise last  # pragma: no cover


class ScoreClient:
    """Shareable client; ``score_many`` keeps at most ``max_inflight`` requests open."""

    def __init__(self, endpoint: str | None = None, timeout_ms: float = 5000, retries: int = 3,
                 backoff_s: float = 0.05, max_inflight: int = 8):
        if max_inflight < 1:
            raise ValueError("max_inflight must be >= 1")
        self.endpoint = resolve_endpoint(endpoint)
        self.timeout_ms = timeout_ms
        self.retries = retries
        self.backoff_s = backoff_s
        self.max_inflight = max_inflight
        self._gate = threading.BoundedSemaphore(max_inflight)
        self._pool = ThreadPoolExecutor(max_inflight)

    def score(self, req: ScoreRequest) -> ScoreResponse:
        with self._gate:
            return score_remote(self.endpoint, req, self.timeout_ms, self.retries, self.backoff_s)

    def score_many(self, reqs: Sequence[ScoreRequest]) -> list:
        # pool.map yields in submission order; request ids are checked per response
        return list(self._pool.map(self.score, reqs))

    def healthy(self) -> bool:
        try:
            with urllib.request.urlopen(self.endpoint + "/healthz", timeout=self.timeout_ms / 1000.0) as r:
                return r.status == 200
        except (urllib.error.URLError, OSError):
            return False

    def close(self) -> None:
        self._pool.shutdown()


class RemoteScorer:
    """Reward backend with the same call shape as the in-process oracle."""

    def __init__(self, client: ScoreClient, question: str = ""):
        self.client = client
        self.question = question

    def __call__(self, episode: Episode, frame_ids: Sequence[int]) -> np.ndarray:
        resp = self.client.score(ScoreRequest.for_subset(episode, frame_ids, self.question))
        return np.asarray(resp.logits, dtype=np.float64)

    def score_many(self, episode: Episode, subsets: Sequence[Sequence[int]]) -> list:
        reqs = [ScoreRequest.for_subset(episode, s, self.question) for s in subsets]
        return [np.asarray(r.logits, dtype=np.float64) for r in self.client.score_many(reqs)]


# -- mock server -------------------------------------------------------------

Handler = Callable[[dict], tuple]


def oracle_handler(episodes: Mapping[str, Episode] | Sequence[Episode], oc: OracleConfig | None = None) -> Handler:
    """Server-side twin of the in-process oracle, resolving frame ids against known episodes."""
    if not isinstance(episodes, Mapping):
        episodes = {ep.id: ep for ep in episodes}
    oc = oc if oc is not None else OracleConfig()

    def handle(body: dict) -> tuple:
        ep = episodes.get(body.get("episode_id"))
        if ep is None:
            return 404, {"error": "unknown episode"}
        z = oracle_logits(ep, body["frame_ids"], oc)
        return 200, {"logits": z.tolist(), "request_id": body["request_id"]}

    return handle


class MockScoreServer:
    """Threaded HTTP server on localhost driven by a ``handler(body) -> (status, json)`` function."""

    def __init__(self, handler: Handler, delay_s: float = 0.0):
        self.handler = handler
        self.delay_s = delay_s
        self.requests = 0
        self.inflight = 0
        self.max_inflight_seen = 0
        self._lock = threading.Lock()
        outer = self

        class _H(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, *args):
                pass

            def _send(self, status: int, payload: dict):
                data = json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def do_GET(self):
                if self.path == "/healthz":
                    self._send(200, {"ok": True})
                else:
                    self._send(404, {"error": "not found"})

            def do_POST(self):
                n = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(n) or b"{}")
                if self.path != "/score":
                    self._send(404, {"error": "not found"})
                    return
                with outer._lock:
                    outer.requests += 1
                    outer.inflight += 1
                    outer.max_inflight_seen = max(outer.max_inflight_seen, outer.inflight)
                try:
                    if outer.delay_s:
                        time.sleep(outer.delay_s)
                    status, payload = outer.handler(body)
                finally:
                    with outer._lock:
                        outer.inflight -= 1
                self._send(status, payload)

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), _H)
        self._server.daemon_threads = True
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def endpoint(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "MockScoreServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
