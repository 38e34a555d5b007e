"""Provider-agnostic chat interface with deterministic record/replay caching.

Every LLM-dependent code path can run offline: ``replay`` serves recorded
transcripts (and never falls through to the network), ``mock`` answers
from a canned table or handler.  The cache is an append-only JSON-lines
file keyed by a digest of the full request plus a repetition counter.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field

from .errors import CacheMissError, ConfigError, TransportError

VALID_ROLES = {"system", "user", "assistant"}
MODES = ("live", "record", "replay", "mock")


@dataclass(frozen=True)
class ChatRequest:
    provider: str
    model: str
    messages: tuple  # ((role, text), ...)
    temperature: float = 1.0

    def __post_init__(self):
        if not self.messages:
            raise ConfigError("chat request needs at least one message")
        for role, _ in self.messages:
            if role not in VALID_ROLES:
                raise ConfigError(f"invalid message role: {role!r}")

    def summary(self):
        first_user = next((t for r, t in self.messages if r == "user"), "")
        return {"provider": self.provider, "model": self.model,
                "head": first_user[:120]}


def repetition_key(req, i):
    """Stable digest separating the i-th repetition of a request."""
    if i < 0:
        raise ValueError("repetition index must be >= 0")
    payload = json.dumps(
        {"provider": req.provider, "model": req.model,
         "messages": [list(m) for m in req.messages],
         "temperature": req.temperature, "repetition": i},
        sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class TranscriptCache:
    """Append-only JSON-lines store of (key, reply) pairs."""

    def __init__(self, path):
        self.path = path
        self._entries = {}
        if path and os.path.exists(path):
            with open(path) as f:
                for line in f:
                    line = line.strip()
                    if not line:
                        continue
                    rec = json.loads(line)
                    self._entries[rec["key"]] = rec["reply"]

    def __contains__(self, key):
        return key in self._entries

    def get(self, key):
        return self._entries.get(key)

    def append(self, key, req, reply):
        if self._entries.get(key) == reply:
            return  # idempotent for identical (key, value)
        self._entries[key] = reply
        rec = {"key": key, "request": req.summary(), "reply": reply,
               "timestamp": time.time()}
        with open(self.path, "a") as f:
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")


def _default_transport(req, retries=2):
    """Minimal OpenAI-compatible HTTP transport; needs provider credentials."""
    import requests

    api_key = os.environ.get("PROMPTPOSE_API_KEY")
    base_url = os.environ.get("PROMPTPOSE_API_BASE", "https://api.openai.com/v1")
    if not api_key:
        raise TransportError("PROMPTPOSE_API_KEY is not set", retries=0)
    body = {"model": req.model,
            "messages": [{"role": r, "content": t} for r, t in req.messages],
            "temperature": req.temperature}
    last = None
    for attempt in range(retries + 1):
        try:
            resp = requests.post(f"{base_url}/chat/completions",
                                 headers={"Authorization": f"Bearer {api_key}"},
                                 json=body, timeout=60)
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]["content"]
        except Exception as e:  # noqa: BLE001 - wrapped below with retry count
            last = e
    raise TransportError(f"provider call failed: {last}", retries=retries)


class LLMGateway:
    """Chat gateway running in one of {live, record, replay, mock} modes."""

    def __init__(self, mode="mock", cache_path=None, mock_table=None,
                 mock_handler=None, transport=None):
        if mode not in MODES:
            raise ConfigError(f"unknown gateway mode: {mode!r}")
        self.mode = mode
        self.cache = TranscriptCache(cache_path) if cache_path else None
        self.mock_table = dict(mock_table or {})
        self.mock_handler = mock_handler
        self.transport = transport or _default_transport
        self.calls = 0

    def chat(self, req, repetition=0):
        """Return the reply text for one (request, repetition) pair."""
        key = repetition_key(req, repetition)
        if self.mode == "replay":
            if self.cache is None or key not in self.cache:
                raise CacheMissError(f"no cached reply for key {key[:16]}…")
            return self.cache.get(key)
        if self.mode == "mock":
            if key in self.mock_table:
                return self.mock_table[key]
            if self.mock_handler is not None:
                return self.mock_handler(req, repetition)
            raise CacheMissError("mock gateway has no entry for this request")
        reply = self.transport(req)
        self.calls += 1
        if self.mode == "record":
            if self.cache is None:
                raise ConfigError("record mode requires a cache path")
            self.cache.append(key, req, reply)
        return reply
