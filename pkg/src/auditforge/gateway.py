"""Pluggable chat-completion backends and prompt templating.

Two backends share one interface: an HTTP client for remote chat-completion
providers (with bounded retries and exponential backoff) and a scripted
stub that replays fixture responses deterministically, which keeps the
whole distillation pipeline runnable offline.

The stub is keyed by a stable hash of (role name, rendered prompt) rather
than the full request, so fixtures survive refactors of the transport code.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import requests

logger = logging.getLogger(__name__)

API_KEY_ENV = "AUDITFORGE_API_KEY"

ROLE_NAMES = ("Distillation", "Developer", "Security")
ALLOWED_PLACEHOLDERS = frozenset(
    {"seed_code", "label", "rationale", "scenario", "vulnerable_code"}
)
_PLACEHOLDER_RE = re.compile(r"\{([a-z][a-z0-9_]*)\}")

FINISH_REASONS = ("stop", "length", "error")


class BackendError(RuntimeError):
    """A completion backend failed to produce a response."""


class RetryBudgetExceededError(BackendError):
    """All retry attempts were spent on transient failures."""


class FixtureMissError(BackendError):
    """The stub backend has no fixture for the requested key."""

    def __init__(self, key: str, tag: str):
        self.key = key
        self.tag = tag
        super().__init__(f"no stub fixture for key {key!r} (agent tag {tag!r})")


class MissingBindingError(ValueError):
    """A template placeholder has no binding."""

    def __init__(self, placeholder: str):
        self.placeholder = placeholder
        super().__init__(f"no binding for placeholder {placeholder!r}")


@dataclass(frozen=True)
class PromptTemplate:
    """An agent prompt: a body with named placeholders plus a few-shot block."""

    role_name: str
    body: str
    example_label: str
    example_rationale: str

    def __post_init__(self) -> None:
        if not self.example_label or not self.example_rationale:
            raise ValueError(
                f"template {self.role_name}: example_label and example_rationale "
                "are both required"
            )
        stray = self.placeholders() - ALLOWED_PLACEHOLDERS
        if stray:
            raise ValueError(
                f"template {self.role_name}: unknown placeholder "
                f"{sorted(stray)[0]!r} in body"
            )

    def placeholders(self) -> set[str]:
        return set(_PLACEHOLDER_RE.findall(self.body))


def render_prompt(template: PromptTemplate, bindings: Mapping[str, str]) -> str:
    """Substitute bindings into the template body and append its few-shot block.

    Pure function: equal inputs yield byte-equal output.  Missing bindings
    raise; bindings not referenced by the body are ignored with a warning.
    """
    referenced = template.placeholders()
    missing = referenced - set(bindings)
    if missing:
        raise MissingBindingError(sorted(missing)[0])
    unused = set(bindings) - referenced
    if unused:
        logger.warning(
            "template %s: ignoring unused bindings %s",
            template.role_name, sorted(unused),
        )
    rendered = _PLACEHOLDER_RE.sub(lambda m: bindings[m.group(1)], template.body)
    return (
        f"{rendered}\n\n"
        f"Example label: {template.example_label}\n"
        f"Example rationale: {template.example_rationale}"
    )


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.2
    max_output_tokens: int = 4096

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ("system", "user"):
            raise ValueError(f"invalid message role {self.role!r}")


@dataclass(frozen=True)
class CompletionRequest:
    """One chat-completion call.  `tag` identifies the calling agent role."""

    model_name: str
    messages: tuple[ChatMessage, ...]
    sampling: SamplingParams = SamplingParams()
    tag: str = ""

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("request needs at least one message")
        if self.messages[0].role != "system":
            raise ValueError("first message must have role 'system'")

    def user_prompt(self) -> str:
        return "\n\n".join(m.content for m in self.messages if m.role == "user")


@dataclass(frozen=True)
class TokenUsage:
    input_tokens: int = 0
    output_tokens: int = 0


@dataclass(frozen=True)
class CompletionResponse:
    content: str
    finish_reason: str
    usage: TokenUsage = TokenUsage()

    def __post_init__(self) -> None:
        if self.finish_reason not in FINISH_REASONS:
            raise ValueError(f"invalid finish_reason {self.finish_reason!r}")
        if self.finish_reason == "stop" and not self.content:
            raise ValueError("content must be non-empty when finish_reason is 'stop'")


def stub_key(role_name: str, prompt: str) -> str:
    """Stable fixture key for (agent role, rendered prompt)."""
    digest = hashlib.sha256(f"{role_name}\x1f{prompt}".encode("utf-8"))
    return digest.hexdigest()[:16]


# Default sampling: analysis roles want determinism, generation wants diversity.
DEFAULT_ROLE_SAMPLING = {
    "Distillation": SamplingParams(temperature=0.2),
    "Developer": SamplingParams(temperature=0.8),
    "Security": SamplingParams(temperature=0.2),
}

_EXAMPLE_LABEL = "reentrancy"
_EXAMPLE_RATIONALE = (
    "withdraw() sends ether through an external call before the caller's balance "
    "is zeroed, so a malicious fallback can re-enter and drain the contract."
)


def default_templates() -> dict[str, PromptTemplate]:
    """The three shipped agent templates, overridable via config."""
    return {
        "Distillation": PromptTemplate(
            role_name="Distillation",
            body=(
                "Study the following Solidity contract and identify the most "
                "significant security weakness it contains.\n\n"
                "Contract:\n{seed_code}\n\n"
                "Reply with a JSON object of the form "
                '{"labels": [{"label_id": "...", "label_name": "...", '
                '"rationale": "...", "span": [first_line, last_line]}]} '
                "and nothing else. List the dominant weakness first."
            ),
            example_label=_EXAMPLE_LABEL,
            example_rationale=_EXAMPLE_RATIONALE,
        ),
        "Developer": PromptTemplate(
            role_name="Developer",
            body=(
                "You write realistic Solidity contracts for security training "
                "material.\n\n"
                "Write a complete contract for the scenario below that contains "
                "the described weakness.\n\n"
                "Scenario: {scenario}\n"
                "Weakness label: {label}\n"
                "Why it is a weakness: {rationale}\n\n"
                "Reply with a JSON object of the form "
                '{"labels": [{"label_id": "...", "label_name": "...", '
                '"rationale": "...", "span": [first_line, last_line]}], '
                '"code": "<full Solidity source>"} and nothing else. '
                "Update the rationale so it describes the contract you wrote; "
                "the code must start with a pragma line."
            ),
            example_label=_EXAMPLE_LABEL,
            example_rationale=_EXAMPLE_RATIONALE,
        ),
        "Security": PromptTemplate(
            role_name="Security",
            body=(
                "You harden Solidity contracts.\n\n"
                "Rewrite the following vulnerable contract so the weakness is "
                "fixed while keeping structure and naming as close to the "
                "original as possible.\n\n"
                "Vulnerable contract:\n{vulnerable_code}\n\n"
                "Reply with a JSON object of the form "
                '{"code": "<full secure Solidity source>", '
                '"notes": "<what changed and why it is now safe>"} '
                "and nothing else."
            ),
            example_label=_EXAMPLE_LABEL,
            example_rationale=_EXAMPLE_RATIONALE,
        ),
    }


def load_templates(path: str | Path) -> dict[str, PromptTemplate]:
    """Load template overrides: JSON mapping role name to {body,
    example_label, example_rationale}.  Roles not present keep their
    shipped defaults."""
    overrides = json.loads(Path(path).read_text(encoding="utf-8"))
    templates = default_templates()
    for role, fields in overrides.items():
        if role not in templates:
            raise ValueError(f"unknown template role {role!r}")
        templates[role] = PromptTemplate(
            role_name=role,
            body=fields["body"],
            example_label=fields.get("example_label",
                                     templates[role].example_label),
            example_rationale=fields.get("example_rationale",
                                         templates[role].example_rationale),
        )
    return templates


class StubBackend:
    """Deterministic scripted backend for tests and offline runs."""

    def __init__(self, fixtures: Mapping[str, str | tuple[str, str]], parallelism: int = 4):
        self._fixtures: dict[str, tuple[str, str]] = {}
        for key, value in fixtures.items():
            if isinstance(value, str):
                self._fixtures[key] = (value, "stop")
            else:
                content, finish = value
                self._fixtures[key] = (content, finish)
        self.parallelism = parallelism
        self._slots = threading.BoundedSemaphore(parallelism)

    @classmethod
    def from_jsonl(cls, path: str | Path, parallelism: int = 4) -> "StubBackend":
        """Load a fixture file: JSONL of {key, content, finish_reason}."""
        fixtures: dict[str, tuple[str, str]] = {}
        for line_no, raw in enumerate(Path(path).read_text(encoding="utf-8").split("\n"), 1):
            if not raw.strip():
                continue
            payload = json.loads(raw)
            if "key" not in payload or "content" not in payload:
                raise ValueError(f"fixture line {line_no}: needs 'key' and 'content'")
            fixtures[payload["key"]] = (payload["content"], payload.get("finish_reason", "stop"))
        return cls(fixtures, parallelism=parallelism)

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        key = stub_key(request.tag, request.user_prompt())
        with self._slots:
            if key not in self._fixtures:
                raise FixtureMissError(key, request.tag)
            content, finish = self._fixtures[key]
            return CompletionResponse(
                content=content,
                finish_reason=finish,
                usage=TokenUsage(
                    input_tokens=len(request.user_prompt().split()),
                    output_tokens=len(content.split()),
                ),
            )


class HttpChatBackend:
    """Client for remote chat-completion providers.

    Speaks the widely used JSON shape (POST {model, messages, temperature,
    max_tokens}; reply choices[0].message.content).  Transient failures
    (connection errors, 429, 5xx) are retried with exponential backoff up to
    a configured budget; other 4xx responses are never re-sent.
    """

    def __init__(
        self,
        endpoint_url: str,
        model_name: str,
        api_key: str | None = None,
        max_retries: int = 3,
        timeout: float = 60.0,
        parallelism: int = 4,
        backoff_base: float = 0.5,
        session=None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if not endpoint_url:
            raise ValueError("endpoint_url is required for the remote backend")
        self.endpoint_url = endpoint_url
        self.model_name = model_name
        self._api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        if not self._api_key:
            logger.warning("no API credential configured (%s unset)", API_KEY_ENV)
        self.max_retries = max_retries
        self.timeout = timeout
        self.parallelism = parallelism
        self._backoff_base = backoff_base
        self._session = session if session is not None else requests.Session()
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(parallelism)
        self._correlation = 0
        self._lock = threading.Lock()

    def _next_correlation_id(self) -> int:
        with self._lock:
            self._correlation += 1
            return self._correlation

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        payload = {
            "model": request.model_name or self.model_name,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.sampling.temperature,
            "max_tokens": request.sampling.max_output_tokens,
        }
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        correlation_id = self._next_correlation_id()

        with self._slots:
            last_error: Exception | None = None
            attempts = self.max_retries + 1
            for attempt in range(1, attempts + 1):
                try:
                    response = self._session.post(
                        self.endpoint_url, json=payload, headers=headers,
                        timeout=self.timeout,
                    )
                except requests.RequestException as exc:
                    last_error = exc
                    logger.warning(
                        "request %d attempt %d/%d failed: %s",
                        correlation_id, attempt, attempts, exc,
                    )
                else:
                    status = response.status_code
                    if status == 200:
                        logger.info(
                            "request %d succeeded on attempt %d/%d",
                            correlation_id, attempt, attempts,
                        )
                        return self._parse_response(response)
                    if status != 429 and 400 <= status < 500:
                        raise BackendError(
                            f"request {correlation_id}: non-retryable HTTP {status}: "
                            f"{getattr(response, 'text', '')[:200]}"
                        )
                    last_error = BackendError(f"HTTP {status}")
                    logger.warning(
                        "request %d attempt %d/%d got HTTP %d",
                        correlation_id, attempt, attempts, status,
                    )
                if attempt < attempts:
                    self._sleep(self._backoff_base * (2 ** (attempt - 1)))
            raise RetryBudgetExceededError(
                f"request {correlation_id}: gave up after {attempts} attempts: {last_error}"
            )

    @staticmethod
    def _parse_response(response) -> CompletionResponse:
        try:
            data = response.json()
            choice = data["choices"][0]
            content = choice["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed completion response: {exc}") from exc
        finish = choice.get("finish_reason", "stop")
        if finish not in FINISH_REASONS:
            finish = "stop" if content else "error"
        usage = data.get("usage", {}) or {}
        return CompletionResponse(
            content=content,
            finish_reason=finish,
            usage=TokenUsage(
                input_tokens=int(usage.get("prompt_tokens", 0)),
                output_tokens=int(usage.get("completion_tokens", 0)),
            ),
        )


@dataclass
class Agent:
    """One prompted role bound to a backend; keeps raw responses for audit."""

    role_name: str
    template: PromptTemplate
    backend: object
    model_name: str = "default"
    sampling: SamplingParams = SamplingParams()
    audit_log: list = field(default_factory=list)

    def run(self, bindings: Mapping[str, str]) -> str:
        prompt = render_prompt(self.template, bindings)
        request = CompletionRequest(
            model_name=self.model_name,
            messages=(
                ChatMessage("system", f"You are the {self.role_name} agent for "
                                      "smart-contract security work."),
                ChatMessage("user", prompt),
            ),
            sampling=self.sampling,
            tag=self.role_name,
        )
        response = self.backend.complete(request)
        self.audit_log.append((stub_key(self.role_name, prompt), response.content))
        return response.content
