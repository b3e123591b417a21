"""HTTP client for a chat-completion VLM server with first-token logprobs.

The transport protocol (exact request and response field names) is pinned
in PROTOCOL.md at the repository root and asserted byte-for-byte by the
golden tests. Summary: ranking is one greedy chat completion asking for
``top_logprobs`` at the first generated position; probabilities are
exp(logprob). The greedy completion text doubles as the decoded answer
for the top-ranked token. Decoding any other token re-issues the request
with that token pre-filled as the assistant turn and continuation enabled.
"""

from __future__ import annotations

import base64
import math
import os
import threading
import time
from dataclasses import dataclass
from typing import Any, Callable

import httpx

from .backend import (
    BackendUnreachableError,
    FirstTokenDistribution,
    GenerationRequest,
    LogprobsUnsupportedError,
    ProtocolError,
    VlmBackend,
)

TOKEN_ENV_VAR = "CARD_ROUTER_BACKEND_TOKEN"

DEFAULT_TIMEOUT_SECONDS = 60.0
DEFAULT_MAX_RETRIES = 2
DEFAULT_IN_FLIGHT_LIMIT = 4
DEFAULT_BACKOFF_SECONDS = 0.5

_COMPLETIONS_PATH = "/v1/chat/completions"
_HEALTH_PATH = "/v1/models"
_ANSWER_CACHE_LIMIT = 1024


@dataclass(frozen=True)
class RemoteConfig:
    """Connection settings for a remote VLM server."""

    base_url: str
    model: str
    timeout: float = DEFAULT_TIMEOUT_SECONDS
    max_retries: int = DEFAULT_MAX_RETRIES
    in_flight_limit: int = DEFAULT_IN_FLIGHT_LIMIT
    backoff: float = DEFAULT_BACKOFF_SECONDS


def _image_data_url(image: bytes) -> str:
    if image.startswith(b"\x89PNG"):
        mime = "image/png"
    elif image.startswith(b"\xff\xd8"):
        mime = "image/jpeg"
    else:
        mime = "image/png"
    return f"data:{mime};base64,{base64.b64encode(image).decode('ascii')}"


class RemoteBackend(VlmBackend):
    """Talks to an HTTP JSON chat-completion endpoint.

    Retries at most ``max_retries`` times with exponential backoff on 5xx
    and transport timeouts; 4xx responses fail immediately as protocol
    errors. Concurrent requests are capped by a semaphore. The bearer
    token, when present in the environment, rides in the Authorization
    header.
    """

    def __init__(
        self,
        config: RemoteConfig,
        *,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self._config = config
        self._sleep = sleep
        self._client = httpx.Client(
            base_url=config.base_url.rstrip("/"),
            timeout=config.timeout,
            transport=transport,
        )
        self._semaphore = threading.BoundedSemaphore(config.in_flight_limit)
        self._cache_lock = threading.Lock()
        self._greedy_answers: dict[str, tuple[str, str]] = {}

    @property
    def identifier(self) -> str:
        return f"remote:{self._config.model}@{self._config.base_url.rstrip('/')}"

    def close(self) -> None:
        self._client.close()

    def __enter__(self) -> "RemoteBackend":
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()

    def _headers(self) -> dict[str, str]:
        token = os.environ.get(TOKEN_ENV_VAR)
        if token:
            return {"Authorization": f"Bearer {token}"}
        return {}

    def _post(self, payload: dict[str, Any]) -> dict[str, Any]:
        last_error: Exception | None = None
        for attempt in range(self._config.max_retries + 1):
            if attempt:
                self._sleep(self._config.backoff * (2 ** (attempt - 1)))
            try:
                with self._semaphore:
                    response = self._client.post(
                        _COMPLETIONS_PATH, json=payload, headers=self._headers()
                    )
            except httpx.TimeoutException as exc:
                last_error = exc
                continue
            except httpx.TransportError as exc:
                last_error = exc
                continue
            if response.status_code >= 500:
                last_error = ProtocolError(
                    f"server error {response.status_code}: {response.text[:200]}"
                )
                continue
            if response.status_code >= 400:
                raise ProtocolError(
                    f"backend rejected request: {response.status_code} {response.text[:200]}"
                )
            try:
                data = response.json()
            except ValueError as exc:
                raise ProtocolError(f"response body is not JSON: {exc}") from exc
            if not isinstance(data, dict):
                raise ProtocolError("response body is not a JSON object")
            return data
        raise BackendUnreachableError(
            f"backend unreachable after {self._config.max_retries + 1} attempts: {last_error}"
        )

    def _messages(self, request: GenerationRequest) -> list[dict[str, Any]]:
        user_content: Any
        if request.image is not None:
            user_content = [
                {"type": "text", "text": request.user_prompt},
                {"type": "image_url", "image_url": {"url": _image_data_url(request.image)}},
            ]
        else:
            user_content = request.user_prompt
        return [
            {"role": "system", "content": request.system_prompt},
            {"role": "user", "content": user_content},
        ]

    @staticmethod
    def _choice(data: dict[str, Any]) -> dict[str, Any]:
        choices = data.get("choices")
        if not isinstance(choices, list) or not choices or not isinstance(choices[0], dict):
            raise ProtocolError("response carries no choices")
        return choices[0]

    @staticmethod
    def _content(choice: dict[str, Any]) -> str:
        message = choice.get("message")
        if not isinstance(message, dict) or not isinstance(message.get("content"), str):
            raise ProtocolError("choice carries no message content")
        return message["content"]

    def rank_first_tokens(self, request: GenerationRequest, k: int = 5) -> FirstTokenDistribution:
        if k < 2:
            raise ValueError(f"k must be at least 2, got {k}")
        payload = {
            "model": self._config.model,
            "messages": self._messages(request),
            "max_tokens": request.max_answer_tokens,
            "temperature": 0,
            "logprobs": True,
            "top_logprobs": k,
        }
        data = self._post(payload)
        choice = self._choice(data)
        logprobs = choice.get("logprobs")
        if not isinstance(logprobs, dict):
            raise LogprobsUnsupportedError("backend returned no logprobs block")
        content_positions = logprobs.get("content")
        if not isinstance(content_positions, list) or not content_positions:
            raise LogprobsUnsupportedError("backend returned no per-token logprobs")
        tops = content_positions[0].get("top_logprobs")
        if not isinstance(tops, list) or len(tops) < 2:
            raise LogprobsUnsupportedError("backend returned fewer than two ranked tokens")
        entries = []
        for item in tops:
            if not isinstance(item, dict) or "token" not in item or "logprob" not in item:
                raise ProtocolError("malformed top_logprobs entry")
            entries.append((str(item["token"]), math.exp(float(item["logprob"]))))
        entries.sort(key=lambda pair: pair[1], reverse=True)
        entries = entries[:k]
        answer = self._content(choice)
        top_token = entries[0][0]
        if top_token.strip() and not answer.lstrip().startswith(top_token.strip()):
            raise ProtocolError(
                f"greedy answer {answer[:40]!r} does not start with top token {top_token!r}"
            )
        with self._cache_lock:
            if len(self._greedy_answers) >= _ANSWER_CACHE_LIMIT:
                self._greedy_answers.clear()
            self._greedy_answers[request.signature()] = (top_token, answer)
        return FirstTokenDistribution(entries=tuple(entries), truncated_at=len(entries))

    def decode_with_first_token(self, request: GenerationRequest, first_token: str) -> str:
        with self._cache_lock:
            cached = self._greedy_answers.get(request.signature())
        if cached is not None and cached[0] == first_token:
            return cached[1]
        payload = {
            "model": self._config.model,
            "messages": self._messages(request)
            + [{"role": "assistant", "content": first_token}],
            "max_tokens": request.max_answer_tokens,
            "temperature": 0,
            "continue_final_message": True,
        }
        data = self._post(payload)
        continuation = self._content(self._choice(data))
        # Some servers echo the seeded prefix back; do not prepend it twice.
        if continuation.startswith(first_token):
            return continuation
        return first_token + continuation

    def healthcheck(self) -> bool:
        try:
            self._client.get(_HEALTH_PATH, headers=self._headers(), timeout=5.0)
        except httpx.HTTPError:
            return False
        return True
