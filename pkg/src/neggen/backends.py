"""Clients for the text, inpainting and scoring services.

All three speak JSON over HTTP POST. Each client has an in-tree mock
counterpart in :mod:`neggen.mock` with the same method signatures.
"""
from __future__ import annotations

import base64
import hashlib
import logging
import math
import os
import shutil
import time
from dataclasses import dataclass
from pathlib import Path

import requests

from neggen.prompts import parse_json_reply

log = logging.getLogger(__name__)

TEXT_URL_ENV = "NEGGEN_TEXT_BACKEND_URL"
TEXT_TOKEN_ENV = "NEGGEN_TEXT_BACKEND_TOKEN"
IMAGE_URL_ENV = "NEGGEN_IMAGE_BACKEND_URL"
IMAGE_TOKEN_ENV = "NEGGEN_IMAGE_BACKEND_TOKEN"
SCORER_URL_ENV = "NEGGEN_SCORER_URL"
SCORER_TOKEN_ENV = "NEGGEN_SCORER_TOKEN"


class BackendError(RuntimeError):
    """A backend call failed; callers record it and move on."""


class BackendUnavailable(BackendError):
    """The backend could not be reached at all; pipelines abort on this."""


class ReplyParseError(BackendError):
    """Every attempt returned an unusable reply."""


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary parts (independent of ``PYTHONHASHSEED``)."""
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "big") >> 1


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    max_tokens: int = 512
    temperature: float = 0.7
    seed: int = 0

    def to_wire(self) -> dict:
        return {"prompt": self.prompt, "max_tokens": self.max_tokens,
                "temperature": self.temperature, "seed": self.seed}


@dataclass(frozen=True)
class GenerationResponse:
    text: str
    backend_id: str
    latency: float = 0.0


def _auth_headers(token: str | None) -> dict:
    return {"Authorization": f"Bearer {token}"} if token else {}


def _post(session: requests.Session, url: str, payload: dict, token: str | None, timeout: float) -> dict:
    try:
        resp = session.post(url, json=payload, headers=_auth_headers(token), timeout=timeout)
    except (requests.ConnectionError, requests.Timeout) as exc:
        raise BackendUnavailable(f"{url}: {exc}") from exc
    if resp.status_code != 200:
        raise BackendError(f"{url}: HTTP {resp.status_code}")
    try:
        body = resp.json()
    except ValueError as exc:
        raise BackendError(f"{url}: response is not JSON") from exc
    if not isinstance(body, dict):
        raise BackendError(f"{url}: response is not a JSON object")
    return body


class HttpTextBackend:
    def __init__(self, url: str, token: str | None = None, timeout: float = 120.0):
        self.url = url
        self.token = token
        self.timeout = timeout
        self.backend_id = f"http:{url}"
        self._session = requests.Session()

    @classmethod
    def from_env(cls, url: str | None = None, **kw) -> HttpTextBackend:
        url = url or os.environ.get(TEXT_URL_ENV)
        if not url:
            raise BackendUnavailable(f"no text backend URL (set {TEXT_URL_ENV})")
        return cls(url, os.environ.get(TEXT_TOKEN_ENV), **kw)

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        t0 = time.perf_counter()
        body = _post(self._session, self.url, request.to_wire(), self.token, self.timeout)
        text = body.get("text")
        if not isinstance(text, str) or not text.strip():
            raise BackendError("text backend returned an empty reply")
        return GenerationResponse(text, self.backend_id, time.perf_counter() - t0)


def call_text(backend, request: GenerationRequest, *, retries: int = 3, parse=None, stats=None):
    """Call ``backend`` and parse the reply, retrying up to ``retries`` times.

    ``parse`` maps reply text to a value and raises ``ValueError`` on junk;
    the default returns the raw text. Every retry bumps the request seed.
    Raises ``ReplyParseError`` after exhaustion and lets
    ``BackendUnavailable`` through immediately.
    """
    parse = parse or (lambda text: text)
    last_error: Exception | None = None
    for attempt in range(retries + 1):
        req = request if attempt == 0 else GenerationRequest(
            request.prompt, request.max_tokens, request.temperature, request.seed + attempt)
        if attempt and stats is not None:
            stats.retries += 1
        try:
            reply = backend.generate(req)
            return parse(reply.text)
        except BackendUnavailable:
            raise
        except (BackendError, ValueError) as exc:
            last_error = exc
            log.debug("attempt %d failed: %s", attempt + 1, exc)
    raise ReplyParseError(f"giving up after {retries + 1} attempts: {last_error}")


def call_json(backend, request: GenerationRequest, *, retries: int = 3, stats=None):
    return call_text(backend, request, retries=retries, parse=parse_json_reply, stats=stats)


def _encode_image(path: Path) -> str:
    return base64.b64encode(Path(path).read_bytes()).decode("ascii")


class HttpInpaintBackend:
    """Box-conditioned inpainting service.

    ``mode="local"`` exchanges file paths (shared filesystem); ``"remote"``
    exchanges base64-encoded image bytes.
    """

    def __init__(self, url: str, token: str | None = None, mode: str = "local", timeout: float = 600.0,
                 base: Path | None = None):
        if mode not in ("local", "remote"):
            raise ValueError("mode must be 'local' or 'remote'")
        self.base = base
        self.url = url
        self.token = token
        self.mode = mode
        self.timeout = timeout
        self.backend_id = f"http:{url}"
        self._session = requests.Session()

    @classmethod
    def from_env(cls, url: str | None = None, **kw) -> HttpInpaintBackend:
        url = url or os.environ.get(IMAGE_URL_ENV)
        if not url:
            raise BackendUnavailable(f"no image backend URL (set {IMAGE_URL_ENV})")
        return cls(url, os.environ.get(IMAGE_TOKEN_ENV), **kw)

    def inpaint(self, request, out_path: Path) -> Path:
        payload = request.to_wire()
        src = Path(request.source_path)
        if self.base is not None and not src.is_absolute():
            src = Path(self.base) / src
        payload["image"] = str(src) if self.mode == "local" else _encode_image(src)
        body = _post(self._session, self.url, payload, self.token, self.timeout)
        image = body.get("image")
        if not isinstance(image, str) or not image:
            raise BackendError("inpaint backend returned no image")
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        if self.mode == "local":
            shutil.copyfile(image, out_path)
        else:
            try:
                out_path.write_bytes(base64.b64decode(image, validate=True))
            except ValueError as exc:
                raise BackendError("inpaint backend returned invalid base64") from exc
        return out_path


class HttpScorer:
    """Image-text similarity service returning one unnormalized logit per text."""

    def __init__(self, url: str, token: str | None = None, mode: str = "local", timeout: float = 120.0):
        self.url = url
        self.token = token
        self.mode = mode
        self.timeout = timeout
        self._session = requests.Session()

    @classmethod
    def from_env(cls, url: str | None = None, **kw) -> HttpScorer:
        url = url or os.environ.get(SCORER_URL_ENV)
        if not url:
            raise BackendUnavailable(f"no scorer URL (set {SCORER_URL_ENV})")
        return cls(url, os.environ.get(SCORER_TOKEN_ENV), **kw)

    def score(self, image_path, crop, texts: list[str]) -> list[float]:
        image = str(image_path) if self.mode == "local" else _encode_image(Path(image_path))
        payload = {"image": image, "crop": None if crop is None else crop.as_list(), "texts": list(texts)}
        body = _post(self._session, self.url, payload, self.token, self.timeout)
        logits = body.get("logits")
        return check_logits(logits, len(texts))


def check_logits(logits, n: int) -> list[float]:
    if not isinstance(logits, list) or len(logits) != n:
        raise BackendError(f"scorer returned {logits!r}, expected {n} logits")
    out = [float(v) for v in logits]
    if not all(math.isfinite(v) for v in out):
        raise BackendError("scorer returned non-finite logits")
    return out
