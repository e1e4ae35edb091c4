"""Minimal OpenAI-compatible completions client with per-token logprobs.

Talks to the legacy /completions endpoint, which is the one that returns
per-token logprobs for the sampled continuation. Requests are retried with
exponential backoff; an endpoint that answers without logprob data aborts
the export immediately (there is nothing useful to record).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import requests

ROLES = ("draft", "target")


class LogprobsUnsupportedError(RuntimeError):
    pass


class CompletionError(RuntimeError):
    pass


@dataclass(frozen=True)
class EndpointSpec:
    base_url: str
    model_name: str
    role: str
    max_tokens_per_block: int = 500
    temperature: float = 0.8

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        if self.max_tokens_per_block < 1:
            raise ValueError("max_tokens_per_block must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    @property
    def completions_url(self) -> str:
        return self.base_url.rstrip("/") + "/completions"


@dataclass(frozen=True)
class CompletionBlock:
    text: str
    token_logprobs: tuple[float, ...]


def _extract_block(payload: dict) -> CompletionBlock:
    try:
        choice = payload["choices"][0]
    except (KeyError, IndexError, TypeError):
        raise CompletionError(f"malformed completion response: {payload!r}") from None
    logprobs = choice.get("logprobs")
    if not isinstance(logprobs, dict) or "token_logprobs" not in logprobs:
        raise LogprobsUnsupportedError(
            "endpoint did not return per-token logprobs; enable the completions "
            "logprob facility (logprobs >= 0) on the server or pick an endpoint "
            "that supports it")
    raw = logprobs["token_logprobs"]
    if raw is None or any(v is None for v in raw):
        raise CompletionError("response contains null token logprobs")
    # float jitter can push a certain token's logprob epsilon above zero
    return CompletionBlock(
        text=choice.get("text", ""),
        token_logprobs=tuple(min(float(v), 0.0) for v in raw),
    )


def fetch_block(endpoint: EndpointSpec, prompt: str, *, session: requests.Session,
                retries: int = 3, backoff: float = 0.5,
                timeout: float = 120.0) -> CompletionBlock:
    """One sampled block of up to max_tokens_per_block tokens.

    Retries transient failures `retries` times with exponential backoff;
    a response without logprob support aborts without retrying.
    """
    body = {
        "model": endpoint.model_name,
        "prompt": prompt,
        "max_tokens": endpoint.max_tokens_per_block,
        "temperature": endpoint.temperature,
        "logprobs": 1,
        "echo": False,
    }
    last_error: Exception | None = None
    for attempt in range(retries + 1):
        try:
            resp = session.post(endpoint.completions_url, json=body, timeout=timeout)
            resp.raise_for_status()
            return _extract_block(resp.json())
        except LogprobsUnsupportedError:
            raise
        except (requests.RequestException, ValueError, CompletionError) as exc:
            last_error = exc
            if attempt < retries:
                time.sleep(backoff * (2 ** attempt))
    raise CompletionError(
        f"request failed after {retries + 1} attempts: {last_error}")
