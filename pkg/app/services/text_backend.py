"""
Text Generation Backends
Template backend (offline, deterministic) and an external HTTP client, used for
item/user profiles and ground-truth explanation distillation
"""
import logging
import os
import re
from abc import ABC, abstractmethod
from typing import Any, Dict, List, NamedTuple, Optional

import httpx
from sklearn.feature_extraction.text import ENGLISH_STOP_WORDS
from tenacity import Retrying, retry_if_exception, stop_after_attempt, wait_exponential

from app.config.settings import BackendConfig
from app.utils.errors import BackendError

logger = logging.getLogger(__name__)

ITEM_PROFILE, USER_PROFILE, DISTILL = "item_profile", "user_profile", "distill"

# metadata keys in priority order across the review sources (books, businesses, places)
SALIENT_KEYS = ("title", "name", "category", "categories", "city", "location", "aspects")

_ASCII_WS = re.compile(r"[ \t\n\r\x0b\x0c]+")
_WORD = re.compile(r"[a-z][a-z'-]*")


def split_words(text: str) -> List[str]:
    """Split on ASCII whitespace only"""
    return [w for w in _ASCII_WS.split(text) if w]


def truncate_words(text: str, max_words: int) -> str:
    words = split_words(text)
    return " ".join(words[:max_words]) if len(words) > max_words else text.strip()


def aspect_keywords(text: str) -> List[str]:
    """Content words of a review in first-occurrence order"""
    seen: List[str] = []
    for w in _WORD.findall(text.lower()):
        w = w.strip("'-")
        if len(w) >= 3 and w not in ENGLISH_STOP_WORDS and w not in seen:
            seen.append(w)
    return seen


class Completion(NamedTuple):
    text: str
    provenance: str


class TextGenBackend(ABC):
    kind = "abstract"

    @abstractmethod
    def complete(self, task: str, prompt: str, fields: Dict[str, Any], max_words: int = 50,
                 seed: int = 0) -> Completion:
        ...


class TemplateBackend(TextGenBackend):
    """Pure function of (task, fields, seed); the rendered prompt is not consulted"""
    kind = "template"

    def complete(self, task: str, prompt: str, fields: Dict[str, Any], max_words: int = 50,
                 seed: int = 0) -> Completion:
        if task == ITEM_PROFILE:
            text = self._item_profile(fields)
        elif task == USER_PROFILE:
            text = self._user_profile(fields)
        elif task == DISTILL:
            text = self._distill(fields)
        else:
            raise BackendError(f"template backend has no renderer for task {task!r}")
        return Completion(truncate_words(text, max_words), "template")

    @staticmethod
    def _item_profile(fields: Dict[str, Any]) -> str:
        meta = fields.get("metadata", {})
        parts = []
        for key in SALIENT_KEYS:
            value = meta.get(key)
            if value in (None, "", []):
                continue
            if isinstance(value, (list, tuple)):
                value = ", ".join(str(v) for v in value)
            parts.append(f"{value}" if key in ("title", "name") else f"{key}: {value}")
        keywords = aspect_keywords(" ".join(fields.get("reviews", [])))[:4]
        if keywords:
            parts.append("liked for " + ", ".join(keywords))
        return "; ".join(parts) if parts else "an item"

    @staticmethod
    def _user_profile(fields: Dict[str, Any]) -> str:
        profiles = fields.get("item_profiles", [])
        return "enjoys " + " | ".join(p.split(";")[0].strip() for p in profiles)

    @staticmethod
    def _distill(fields: Dict[str, Any]) -> str:
        keywords = aspect_keywords(fields.get("review", ""))
        return ("valued " + ", ".join(keywords) + ".") if keywords else "no stated reason."


def _is_retryable(exc: BaseException) -> bool:
    if isinstance(exc, httpx.HTTPStatusError):
        return exc.response.status_code >= 500 or exc.response.status_code == 429
    return isinstance(exc, httpx.TransportError)


class ExternalBackend(TextGenBackend):
    """
    POST {base_url}/generate with {"model", "prompt", "max_words"}, expecting {"text"}

    Transport errors, 429 and 5xx responses are retried with exponential backoff.
    """
    kind = "external"

    def __init__(self, base_url: str, model: str, token: Optional[str] = None, timeout: float = 30.0,
                 retries: int = 3, fallback: Optional[TextGenBackend] = None, backoff: float = 0.5,
                 transport: Optional[httpx.BaseTransport] = None):
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self.model = model
        self.retries = retries
        self.backoff = backoff
        self.fallback = fallback
        self.client = httpx.Client(base_url=base_url, timeout=timeout, headers=headers, transport=transport)

    def _post(self, prompt: str, max_words: int) -> str:
        response = self.client.post("/generate", json={"model": self.model, "prompt": prompt, "max_words": max_words})
        response.raise_for_status()
        payload = response.json()
        if not isinstance(payload, dict) or not isinstance(payload.get("text"), str):
            raise BackendError("malformed response: expected {\"text\": ...}", response.status_code)
        return payload["text"]

    def complete(self, task: str, prompt: str, fields: Dict[str, Any], max_words: int = 50,
                 seed: int = 0) -> Completion:
        retrying = Retrying(
            stop=stop_after_attempt(self.retries + 1),
            wait=wait_exponential(multiplier=self.backoff, max=8),
            retry=retry_if_exception(_is_retryable),
            reraise=True,
        )
        try:
            text = retrying(self._post, prompt, max_words)
            return Completion(truncate_words(text, max_words), "external")
        except (httpx.HTTPError, BackendError) as e:
            status = getattr(getattr(e, "response", None), "status_code", None)
            if isinstance(e, BackendError):
                status = e.status_code
            if self.fallback is not None:
                logger.warning("External backend failed (%s); falling back to %s", e, self.fallback.kind)
                return self.fallback.complete(task, prompt, fields, max_words, seed)
            raise BackendError(f"text generation failed: {e}", status) from e

    def close(self) -> None:
        self.client.close()


def make_backend(config: Optional[BackendConfig] = None) -> TextGenBackend:
    """Build the configured backend; external settings fall back to the process Config"""
    from config import Config

    config = config or BackendConfig()
    if config.kind == "template":
        return TemplateBackend()
    token_env = config.token_env or Config.TEXTGEN_TOKEN_ENV
    return ExternalBackend(
        base_url=config.base_url or Config.TEXTGEN_URL,
        model=config.model or Config.TEXTGEN_MODEL,
        token=os.getenv(token_env),
        timeout=config.timeout,
        retries=config.retries,
        fallback=TemplateBackend() if config.fallback_to_template else None,
    )
