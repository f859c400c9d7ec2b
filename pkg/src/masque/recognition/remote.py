"""HTTP client for external face-verification services.

Endpoint and credentials come from MASQUE_FACE_API_URL and MASQUE_FACE_API_KEY.
Images are only ever logged by their SHA-256 hash.
"""
from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

import httpx
import numpy as np
from PIL import Image

from masque.errors import AuthError, ConfigError, RateLimited, ServiceUnavailable

log = logging.getLogger(__name__)

URL_ENV = "MASQUE_FACE_API_URL"
KEY_ENV = "MASQUE_FACE_API_KEY"


def _png_b64(image) -> str:
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


def _excerpt(text: str, n: int = 120) -> str:
    return text[:n] + ("..." if len(text) > n else "")


class ResponseAdapter:
    """Builds the request body and extracts a 0-100 score for one provider shape."""

    def body(self, img_a: str, img_b: str, key: str) -> dict:
        return {"image_a": img_a, "image_b": img_b}

    def headers(self, key: str) -> dict:
        return {"Authorization": f"Bearer {key}"}

    def score(self, payload: dict) -> float:
        raise NotImplementedError


class ConfidenceAdapter(ResponseAdapter):
    """Services answering ``{"confidence": <0-100>}``."""

    def score(self, payload):
        return float(payload["confidence"])


class SimilarityAdapter(ResponseAdapter):
    """Services answering ``{"similarity": <0-1>}``."""

    def score(self, payload):
        return 100.0 * float(payload["similarity"])


ADAPTERS = {"confidence": ConfidenceAdapter, "similarity": SimilarityAdapter}

_credential_locks: dict[str, threading.Lock] = {}
_locks_guard = threading.Lock()


def _lock_for(key: str) -> threading.Lock:
    with _locks_guard:
        return _credential_locks.setdefault(hashlib.sha256(key.encode()).hexdigest(), threading.Lock())


@dataclass
class ClientConfig:
    url: str
    api_key: str
    adapter: str = "confidence"
    attempts: int = 3
    backoff: float = 0.5
    timeout: float = 30.0

    @classmethod
    def from_env(cls, **overrides) -> "ClientConfig":
        url, key = os.environ.get(URL_ENV), os.environ.get(KEY_ENV)
        if not url or not key:
            raise ConfigError(f"set {URL_ENV} and {KEY_ENV} to use a remote verification service")
        return cls(url=url, api_key=key, **overrides)


@dataclass
class RemoteVerifier:
    config: ClientConfig
    transport: httpx.BaseTransport | None = None
    sleep: Callable[[float], None] = field(default=time.sleep)

    def _client(self):
        return httpx.Client(transport=self.transport, timeout=self.config.timeout)

    def verify(self, image_a, image_b) -> float:
        cfg = self.config
        adapter = ADAPTERS[cfg.adapter]()
        a, b = _png_b64(image_a), _png_b64(image_b)
        ha = hashlib.sha256(a.encode()).hexdigest()[:16]
        hb = hashlib.sha256(b.encode()).hexdigest()[:16]
        last: Exception | None = None
        with _lock_for(cfg.api_key), self._client() as client:
            for attempt in range(cfg.attempts):
                if attempt:
                    self.sleep(cfg.backoff * 2 ** (attempt - 1))
                log.info("remote verify attempt=%d images=%s,%s", attempt + 1, ha, hb)
                try:
                    resp = client.post(cfg.url, json=adapter.body(a, b, cfg.api_key),
                                       headers=adapter.headers(cfg.api_key))
                except httpx.HTTPError as e:
                    last = ServiceUnavailable(f"request failed: {e}")
                    continue
                log.info("remote verify status=%d images=%s,%s", resp.status_code, ha, hb)
                if resp.status_code in (401, 403):
                    raise AuthError(f"service rejected credentials (HTTP {resp.status_code})")
                if resp.status_code == 429:
                    last = RateLimited("service rate limit exceeded (HTTP 429)")
                    continue
                if resp.status_code >= 500:
                    last = ServiceUnavailable(f"HTTP {resp.status_code}: {_excerpt(resp.text)}")
                    continue
                if resp.status_code >= 400:
                    raise ServiceUnavailable(f"HTTP {resp.status_code}: {_excerpt(resp.text)}")
                try:
                    score = adapter.score(resp.json())
                except (ValueError, KeyError, TypeError, json.JSONDecodeError):
                    raise ServiceUnavailable(f"malformed response body: {_excerpt(resp.text)}") from None
                log.info("remote verify score=%.2f images=%s,%s", score, ha, hb)
                return score
        raise last


def remote_verify(client_config: ClientConfig, image_a, image_b, transport=None, sleep=time.sleep) -> float:
    return RemoteVerifier(client_config, transport, sleep).verify(image_a, image_b)
