"""
Client for chat-completion compatible HTTP endpoints.
Retries rate limits, server errors and transport failures with jittered
exponential backoff; never lets the API key reach logs or error messages.
"""

import logging
import os
import random
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import httpx

from errors import (AuthError, ConfigError, GatewayError, MalformedResponse, RateLimited,
                    ServerError, TransportError)

logger = logging.getLogger(__name__)

API_KEY_ENV = "SOCIALGEN_API_KEY"
ROLES = ("system", "user", "assistant")
LOOPBACK_HOSTS = {"127.0.0.1", "localhost", "::1"}


@dataclass(frozen=True)
class GatewayConfig:
    base_url: str = "http://127.0.0.1:8000/v1"
    model: str = "default"
    api_key: str = field(default="", repr=False)
    timeout: float = 30.0
    max_retries: int = 3
    temperature: float = 0.2
    backoff_base: float = 1.0
    backoff_factor: float = 2.0
    jitter: float = 0.2

    def __post_init__(self):
        if not self.timeout > 0:
            raise ConfigError(f"Gateway timeout must be positive, got {self.timeout}")
        if self.max_retries < 0:
            raise ConfigError(f"max_retries must be >= 0, got {self.max_retries}")
        if not self.base_url:
            raise ConfigError("Gateway base_url is empty")

    @classmethod
    def from_env(cls, **overrides) -> "GatewayConfig":
        """Build a config whose API key comes from SOCIALGEN_API_KEY"""
        return cls(api_key=os.environ.get(API_KEY_ENV, ""), **overrides)

    def to_dict(self) -> Dict[str, Any]:
        # never includes the api key
        return {"base_url": self.base_url, "model": self.model, "timeout": self.timeout,
                "max_retries": self.max_retries, "temperature": self.temperature}


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f"Unknown chat role {self.role!r}")
        if not self.content:
            raise ConfigError("Chat message content is empty")

    def to_dict(self) -> Dict[str, str]:
        return {"role": self.role, "content": self.content}


class ChatGateway:
    """Blocking chat-completions client with an injectable transport and clock"""

    RETRY_STATUSES = {429}

    def __init__(self, config: GatewayConfig, transport: Optional[httpx.BaseTransport] = None,
                 sleep: Callable[[float], None] = time.sleep,
                 uniform: Callable[[float, float], float] = random.uniform):
        self.config = config
        self.transport = transport
        self.sleep = sleep
        self.uniform = uniform
        self.last_attempts = 0
        self.delays: List[float] = []

    def scrub(self, text: str) -> str:
        key = self.config.api_key
        return text.replace(key, "***") if key else text

    def backoff_delay(self, retry_index: int) -> float:
        cfg = self.config
        nominal = cfg.backoff_base * cfg.backoff_factor ** retry_index
        return nominal * (1.0 + self.uniform(-cfg.jitter, cfg.jitter))

    def _request_body(self, messages: Sequence[ChatMessage]) -> Dict[str, Any]:
        return {
            "model": self.config.model,
            "messages": [m.to_dict() for m in messages],
            "temperature": self.config.temperature,
        }

    def _extract_content(self, response: httpx.Response) -> str:
        try:
            content = response.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise MalformedResponse(self.scrub(f"Reply lacks choices[0].message.content: {e}"),
                                    fragment=self.scrub(response.text))
        if not isinstance(content, str):
            raise MalformedResponse("Reply content is not text")
        return content

    def chat(self, messages: Sequence[ChatMessage]) -> str:
        if not messages:
            raise ConfigError("chat() needs at least one message")
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        headers = {"Authorization": f"Bearer {self.config.api_key}"} if self.config.api_key else {}
        body = self._request_body(messages)
        self.last_attempts = 0
        self.delays = []
        failure: Optional[GatewayError] = None

        # proxy settings from the environment never apply to a local endpoint
        trust_env = httpx.URL(url).host not in LOOPBACK_HOSTS
        with httpx.Client(timeout=self.config.timeout, transport=self.transport,
                          trust_env=trust_env) as client:
            for attempt in range(self.config.max_retries + 1):
                if attempt > 0:
                    delay = self.backoff_delay(attempt - 1)
                    self.delays.append(delay)
                    logger.warning("Chat attempt %d failed (%s); retrying in %.2fs",
                                   attempt, failure, delay)
                    self.sleep(delay)
                self.last_attempts = attempt + 1
                try:
                    response = client.post(url, json=body, headers=headers)
                except httpx.TimeoutException as e:
                    failure = TransportError(self.scrub(f"Timeout talking to {url}: {e}"))
                    continue
                except httpx.TransportError as e:
                    failure = TransportError(self.scrub(f"Transport failure talking to {url}: {e}"))
                    continue

                status = response.status_code
                if status in (401, 403):
                    raise AuthError(f"Chat endpoint rejected credentials (HTTP {status})")
                if status in self.RETRY_STATUSES:
                    failure = RateLimited(f"Rate limited (HTTP {status})")
                    continue
                if status >= 500:
                    failure = ServerError(f"Server error (HTTP {status})",
                                          fragment=self.scrub(response.text))
                    continue
                if status >= 400:
                    raise GatewayError(f"Chat request rejected (HTTP {status})",
                                       fragment=self.scrub(response.text))
                content = self._extract_content(response)
                logger.debug("Chat reply after %d attempt(s), %d chars", self.last_attempts, len(content))
                return content

        assert failure is not None
        logger.error("Chat failed after %d attempts: %s", self.last_attempts, failure)
        raise failure


def chat(config: GatewayConfig, messages: Sequence[ChatMessage], **hooks) -> str:
    """One-shot convenience wrapper around ChatGateway.chat"""
    return ChatGateway(config, **hooks).chat(messages)
