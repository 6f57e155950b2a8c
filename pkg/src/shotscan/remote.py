"""Completions-protocol scoring over HTTP.

Each candidate class is scored by appending its continuation to the prompt
and requesting an echo of token log-probabilities (max_tokens=0, temperature
0). The candidate's score is the sum of log-probabilities of the tokens whose
text offset falls inside the continuation. Transient failures (connection
errors, 429, 5xx) are retried with exponential backoff up to the configured
bound; anything else is a protocol error.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import httpx

from .digests import sha256_hex
from .errors import BackendError, ConfigError, ProtocolError, TransportError
from .prompting import RenderedPrompt
from .scorer import CandidateScore

RETRY_STATUSES = frozenset({408, 425, 429, 500, 502, 503, 504})


@dataclass(frozen=True)
class RemoteConfig:
    endpoint: str
    model: str | None = None
    token_env: str | None = None
    timeout: float = 60.0
    retries: int = 3
    backoff: float = 0.5
    max_in_flight: int = 8
    batch_size: int = 64
    length_normalize: bool = False
    max_prompt_chars: int | None = None
    audit_log: str | None = None
    candidate_format: str = " {label}"

    def __post_init__(self):
        if not self.endpoint:
            raise ConfigError("remote backend needs an endpoint URL")
        if self.retries < 0:
            raise ConfigError("retries must be >= 0")
        if self.max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


class RemoteBackend:
    """HTTP client for a completions-style scoring endpoint.

    Safe for concurrent use; a semaphore caps in-flight requests regardless of
    how many threads call in. `request_count` tallies POSTs actually sent.
    """

    def __init__(self, config: RemoteConfig):
        self.config = config
        self._headers = {"Content-Type": "application/json"}
        if config.token_env:
            token = os.environ.get(config.token_env)
            if not token:
                raise ConfigError(f"environment variable {config.token_env} is not set")
            self._headers["Authorization"] = f"Bearer {token}"
        self._client = httpx.Client(timeout=config.timeout)
        self._semaphore = threading.Semaphore(config.max_in_flight)
        self._lock = threading.Lock()
        self._audit_fh = None
        if config.audit_log:
            path = Path(config.audit_log)
            path.parent.mkdir(parents=True, exist_ok=True)
            self._audit_fh = path.open("a", encoding="utf-8")
        self.request_count = 0
        self.digest = "remote:" + sha256_hex(
            json.dumps(
                [config.endpoint, config.model, config.length_normalize, config.candidate_format]
            )
        )
        self.preferred_batch = config.batch_size

    def close(self) -> None:
        self._client.close()
        if self._audit_fh is not None:
            self._audit_fh.close()

    def score(self, prompt_text: str, candidates: Sequence[str]) -> list[CandidateScore]:
        """Score each candidate continuation against the prompt.

        One request per candidate; continuations are taken verbatim.
        """
        if not candidates:
            raise ValueError("candidates must not be empty")
        scores = []
        for index, candidate in enumerate(candidates):
            text = prompt_text + candidate
            choice = self._complete([text])[0]
            scores.append(CandidateScore(index, self._continuation_logprob(choice, len(prompt_text))))
        return scores

    def score_batch(
        self, prompts: Sequence[RenderedPrompt], classes: Sequence[str]
    ) -> list[tuple[float, ...]]:
        """Batched variant: all (prompt, class) continuations of the call go out
        in as few POSTs as `batch_size` permits, one prompt entry per candidate."""
        candidates = [self.config.candidate_format.format(label=c) for c in classes]
        texts: list[str] = []
        boundaries: list[int] = []
        for prompt in prompts:
            self._check_budget(prompt)
            for candidate in candidates:
                texts.append(prompt.text + candidate)
                boundaries.append(len(prompt.text))
        choices: list[dict] = []
        for start in range(0, len(texts), self.config.batch_size):
            choices.extend(self._complete(texts[start : start + self.config.batch_size]))
        rows = []
        width = len(classes)
        for i in range(len(prompts)):
            row = tuple(
                self._continuation_logprob(choices[i * width + j], boundaries[i * width + j])
                for j in range(width)
            )
            rows.append(row)
        return rows

    def _check_budget(self, prompt: RenderedPrompt) -> None:
        limit = self.config.max_prompt_chars
        if limit is not None and len(prompt.text) > limit:
            raise BackendError(
                f"prompt for query {prompt.query_id} is {len(prompt.text)} chars, "
                f"over the {limit}-char budget"
            )

    def _complete(self, texts: Sequence[str]) -> list[dict]:
        body = {
            "prompt": list(texts),
            "max_tokens": 0,
            "echo": True,
            "logprobs": 0,
            "temperature": 0,
        }
        if self.config.model:
            body["model"] = self.config.model
        last_failure = "no attempt made"
        for attempt in range(self.config.retries + 1):
            if attempt:
                time.sleep(self.config.backoff * (2 ** (attempt - 1)))
            try:
                with self._semaphore:
                    with self._lock:
                        self.request_count += 1
                    response = self._client.post(
                        self.config.endpoint, json=body, headers=self._headers
                    )
            except httpx.HTTPError as exc:
                last_failure = f"{type(exc).__name__}: {exc}"
                continue
            if response.status_code in RETRY_STATUSES:
                last_failure = f"HTTP {response.status_code}"
                continue
            if response.status_code != 200:
                raise TransportError(f"POST {self.config.endpoint} returned HTTP {response.status_code}")
            try:
                payload = response.json()
            except ValueError as exc:
                raise ProtocolError(f"response is not valid JSON: {exc}") from exc
            if "choices" not in payload:
                raise ProtocolError("response missing 'choices'")
            choices = payload["choices"]
            if len(choices) != len(texts):
                raise ProtocolError(
                    f"response carries {len(choices)} choices for {len(texts)} prompts"
                )
            self._audit(body, response.text)
            return choices
        raise TransportError(
            f"POST {self.config.endpoint} failed after {self.config.retries + 1} attempts "
            f"({last_failure})"
        )

    def _continuation_logprob(self, choice: dict, boundary: int) -> float:
        logprobs = choice.get("logprobs")
        if logprobs is None:
            raise ProtocolError("response missing 'logprobs'")
        token_logprobs = logprobs.get("token_logprobs")
        if token_logprobs is None:
            raise ProtocolError("response missing 'token_logprobs'")
        offsets = logprobs.get("text_offset")
        if offsets is None:
            raise ProtocolError("response missing 'text_offset'")
        values = [lp for lp, off in zip(token_logprobs, offsets) if off >= boundary]
        if not values:
            raise ProtocolError("no tokens cover the candidate continuation")
        if any(v is None or not isinstance(v, (int, float)) for v in values):
            raise ProtocolError("continuation token without a log-probability")
        total = float(sum(values))
        if self.config.length_normalize:
            total /= len(values)
        return total

    def _audit(self, body: dict, response_text: str) -> None:
        if self._audit_fh is None:
            return
        line = json.dumps(
            {
                "request_sha256": sha256_hex(json.dumps(body, sort_keys=True)),
                "response_sha256": sha256_hex(response_text),
                "n_prompts": len(body["prompt"]),
            },
            sort_keys=True,
        )
        with self._lock:
            self._audit_fh.write(line + "\n")
            self._audit_fh.flush()
