"""Completion backends for QA generation: remote HTTP and file-backed mock."""

from __future__ import annotations

import hashlib
import json
import os
import time
from pathlib import Path
from typing import Protocol

import requests

TOKEN_ENV = "PEFTBENCH_API_TOKEN"
URL_ENV = "PEFTBENCH_BACKEND_URL"


class BackendError(RuntimeError):
    """A single request failed; the caller records it and moves on."""


class BackendUnreachable(BackendError):
    """The backend could not be contacted at all, even after retries."""


class CompletionBackend(Protocol):
    def complete(self, prompt: str, max_tokens: int = 512, temperature: float = 0.7) -> str: ...


def prompt_key(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class MockBackend:
    """Canned completions keyed by the sha256 hex digest of the prompt."""

    def __init__(self, table: dict[str, str]):
        self.table = dict(table)

    @classmethod
    def from_file(cls, path: str | Path) -> "MockBackend":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    @classmethod
    def from_prompts(cls, mapping: dict[str, str]) -> "MockBackend":
        return cls({prompt_key(p): c for p, c in mapping.items()})

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.table, indent=1, sort_keys=True, ensure_ascii=False),
                              encoding="utf-8")

    def complete(self, prompt: str, max_tokens: int = 512, temperature: float = 0.7) -> str:
        try:
            return self.table[prompt_key(prompt)]
        except KeyError:
            raise BackendError(f"mock backend has no completion for prompt {prompt_key(prompt)[:12]}") from None


class RemoteBackend:
    """POSTs ``{"prompt", "max_tokens", "temperature"}`` and reads ``{"text"}``.

    Connection errors and 5xx responses are retried with exponential backoff.
    """

    def __init__(self, url: str | None = None, token: str | None = None, retries: int = 3,
                 backoff: float = 0.5, timeout: float = 60.0):
        self.url = url or os.environ.get(URL_ENV)
        if not self.url:
            raise ValueError(f"no backend URL given and ${URL_ENV} is unset")
        self.token = token if token is not None else os.environ.get(TOKEN_ENV)
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout

    def complete(self, prompt: str, max_tokens: int = 512, temperature: float = 0.7) -> str:
        body = {"prompt": prompt, "max_tokens": int(max_tokens), "temperature": float(temperature)}
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        last: Exception | None = None
        for attempt in range(self.retries):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = requests.post(self.url, json=body, headers=headers, timeout=self.timeout)
            except requests.ConnectionError as exc:
                last = BackendUnreachable(f"{self.url}: {exc}")
                continue
            except requests.RequestException as exc:
                last = BackendError(f"{self.url}: {exc}")
                continue
            if resp.status_code >= 500:
                last = BackendError(f"{self.url}: HTTP {resp.status_code}")
                continue
            if resp.status_code != 200:
                raise BackendError(f"{self.url}: HTTP {resp.status_code}")
            try:
                text = resp.json()["text"]
            except (ValueError, KeyError, TypeError) as exc:
                raise BackendError(f"malformed backend response: {exc}") from exc
            if not isinstance(text, str):
                raise BackendError("malformed backend response: 'text' is not a string")
            return text
        raise last
