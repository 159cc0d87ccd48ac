"""LLM-written support paragraphs: prompting, validation, caching and clients."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence

from graphre.corpus import Document, atomic_write_text

log = logging.getLogger(__name__)

PROMPT_TEMPLATE = (
    "Generate some context for the given sentence: {sentence} while including "
    "the sentence in the paragraph generated. Keep the paragraph around 4 sentences."
)
PROMPT_VERSION = "v1"
MIN_SENTENCES = 4
MAX_SENTENCES = 6
SOURCES = ("generated", "cached", "mock")

ABBREVIATIONS = frozenset(
    {
        "mr.", "mrs.", "ms.", "dr.", "prof.", "st.", "jr.", "sr.", "vs.", "etc.",
        "e.g.", "i.e.", "inc.", "ltd.", "co.", "corp.", "no.", "fig.", "al.",
        "u.s.", "u.k.", "u.n.", "jan.", "feb.", "mar.", "apr.", "aug.", "sept.",
        "sep.", "oct.", "nov.", "dec.", "approx.", "gen.", "gov.", "sen.", "rep.",
    }
)

# Sentence end: terminator, optional closing quote/bracket, whitespace, then a
# capital letter (optionally behind an opening quote/bracket).
_BOUNDARY = re.compile(r"[.!?]['\")\]”’]*(\s+)(?=['\"(\[“‘]?[A-Z])")
_QUOTES = str.maketrans({"“": '"', "”": '"', "‘": "'", "’": "'", " ": " "})


class AugmentError(RuntimeError):
    pass


class EmptySentence(AugmentError, ValueError):
    pass


class ClientUnavailable(AugmentError):
    pass


class CacheCorrupt(AugmentError):
    pass


def build_prompt(sentence: str) -> str:
    if not sentence or not sentence.strip():
        raise EmptySentence("cannot build a prompt for an empty sentence")
    # str.format would choke on braces inside the sentence.
    return PROMPT_TEMPLATE.replace("{sentence}", sentence)


def segment_sentences(text: str) -> list[tuple[int, int]]:
    """Character spans ``(start, end)`` (end exclusive) of the sentences in ``text``."""
    spans = []
    start = 0
    for m in _BOUNDARY.finditer(text):
        stop = m.start(1)
        last_word = text[start:stop].split()[-1].lower() if text[start:stop].split() else ""
        last_word = last_word.lstrip("(\"'[")
        if last_word in ABBREVIATIONS or re.fullmatch(r"[a-z]\.", last_word):
            continue
        spans.append((start, stop))
        start = m.end(1)
    tail = text[start:]
    if tail.strip():
        spans.append((start, start + len(tail.rstrip())))
    out = []
    for s, e in spans:
        while s < e and text[s].isspace():
            s += 1
        if s < e:
            out.append((s, e))
    return out


def normalize_text(text: str) -> str:
    """Collapse whitespace and fold curly quotes, for containment checks."""
    return " ".join(text.translate(_QUOTES).split())


def _loose(text: str) -> str:
    # Original sentences arrive pre-tokenized ("WordNet , a"), generations do not.
    return re.sub(r"\s+", "", normalize_text(text))


def contains_sentence(paragraph: str, sentence: str) -> bool:
    return _loose(sentence) in _loose(paragraph)


@dataclass(frozen=True)
class SupportDocument:
    text: str
    sentence_spans: tuple[tuple[int, int], ...]
    source: str = "generated"

    @classmethod
    def from_text(cls, text: str, source: str = "generated") -> "SupportDocument":
        if source not in SOURCES:
            raise ValueError(f"unknown support source {source!r}")
        return cls(text=text, sentence_spans=tuple(segment_sentences(text)), source=source)

    @property
    def sentences(self) -> list[str]:
        return [self.text[s:e] for s, e in self.sentence_spans]

    def problems(self, sentence: str) -> list[str]:
        out = []
        n = len(self.sentence_spans)
        if not MIN_SENTENCES <= n <= MAX_SENTENCES:
            out.append(f"{n} sentences, expected {MIN_SENTENCES}-{MAX_SENTENCES}")
        if not contains_sentence(self.text, sentence):
            out.append("original sentence missing")
        return out


class GenerationClient(Protocol):
    def complete(self, prompt: str) -> str: ...


def sentence_hash(sentence: str) -> str:
    return hashlib.sha256(normalize_text(sentence).encode("utf-8")).hexdigest()


class MockClient:
    """Offline client serving canned paragraphs keyed by sentence hash.

    ``fixtures`` maps :func:`sentence_hash` of the original sentence to the
    paragraph. Unknown sentences raise ``KeyError``.
    """

    def __init__(self, fixtures: Optional[dict[str, str]] = None, path: Optional[Path] = None):
        self.fixtures = dict(fixtures or {})
        if path is not None:
            with open(path, encoding="utf-8") as fh:
                self.fixtures.update(json.load(fh))
        self.calls = 0

    def complete(self, prompt: str) -> str:
        self.calls += 1
        sentence = extract_sentence(prompt)
        return self.fixtures[sentence_hash(sentence)]


def extract_sentence(prompt: str) -> str:
    head, _, rest = PROMPT_TEMPLATE.partition("{sentence}")
    if not prompt.startswith(head) or not prompt.endswith(rest):
        raise ValueError("prompt does not follow the support template")
    return prompt[len(head) : len(prompt) - len(rest)]


class ChatCompletionsClient:
    """Client for an OpenAI-compatible ``/chat/completions`` endpoint.

    Transient failures (HTTP 429/5xx, connection errors) are retried with
    exponential backoff before :class:`ClientUnavailable` is raised.
    """

    def __init__(
        self,
        model: str = "gpt-3.5-turbo",
        api_key: Optional[str] = None,
        api_key_env: str = "OPENAI_API_KEY",
        base_url: str = "https://api.openai.com/v1",
        temperature: Optional[float] = None,
        max_attempts: int = 4,
        backoff: float = 2.0,
        timeout: float = 60.0,
        session=None,
    ):
        self.model = model
        self.api_key = api_key or os.environ.get(api_key_env)
        if not self.api_key:
            raise ClientUnavailable(f"no API credential in ${api_key_env}")
        self.base_url = base_url.rstrip("/")
        self.temperature = temperature
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.timeout = timeout
        if session is None:
            import requests

            session = requests.Session()
        self.session = session

    def complete(self, prompt: str) -> str:
        body = {"model": self.model, "messages": [{"role": "user", "content": prompt}]}
        if self.temperature is not None:
            body["temperature"] = self.temperature
        headers = {"Authorization": f"Bearer {self.api_key}"}
        last = None
        for attempt in range(self.max_attempts):
            try:
                resp = self.session.post(
                    f"{self.base_url}/chat/completions", json=body, headers=headers, timeout=self.timeout
                )
            except Exception as exc:  # connection-level failures
                last = exc
            else:
                if resp.status_code == 200:
                    return resp.json()["choices"][0]["message"]["content"]
                last = AugmentError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                if resp.status_code != 429 and resp.status_code < 500:
                    break
            if attempt + 1 < self.max_attempts:
                time.sleep(self.backoff * 2**attempt)
        raise ClientUnavailable(f"generation failed: {last}")


# --- cache -------------------------------------------------------------------


def cache_key(sentence: str, prompt_version: str = PROMPT_VERSION) -> str:
    prompt = build_prompt(sentence)
    return hashlib.sha256(f"{prompt_version}\n{prompt}".encode("utf-8")).hexdigest()


class SupportCache:
    def __init__(self, root: Path, prompt_version: str = PROMPT_VERSION):
        self.root = Path(root)
        self.prompt_version = prompt_version

    def path(self, sentence: str) -> Path:
        return self.root / f"{cache_key(sentence, self.prompt_version)}.json"

    def get(self, sentence: str) -> Optional[SupportDocument]:
        path = self.path(sentence)
        if not path.exists():
            return None
        try:
            record = json.loads(path.read_text(encoding="utf-8"))
            support = SupportDocument.from_text(record["text"], source="cached")
        except (ValueError, KeyError, TypeError) as exc:
            raise CacheCorrupt(f"{path}: {exc}") from exc
        problems = support.problems(sentence)
        if problems:
            raise CacheCorrupt(f"{path}: {'; '.join(problems)}")
        return support

    def put(self, sentence: str, support: SupportDocument, meta: Optional[dict] = None) -> None:
        record = {"prompt_version": self.prompt_version, "sentence": sentence, "text": support.text}
        if meta:
            record.update(meta)
        atomic_write_text(self.path(sentence), json.dumps(record, ensure_ascii=False, indent=1))


# --- generation --------------------------------------------------------------


@dataclass
class GenerationPolicy:
    retries: int = 3
    fallback: bool = True
    concurrency: int = 4
    use_cache: bool = True


@dataclass
class AugmentStats:
    sources: dict = field(default_factory=lambda: {"generated": 0, "cached": 0, "mock": 0, "fallback": 0})
    client_calls: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def bump(self, key: str) -> None:
        with self._lock:
            if key == "client_calls":
                self.client_calls += 1
            else:
                self.sources[key] += 1


def generate_support(
    doc: Document,
    client: Optional[GenerationClient],
    policy: Optional[GenerationPolicy] = None,
    cache: Optional[SupportCache] = None,
    source: str = "generated",
    stats: Optional[AugmentStats] = None,
) -> SupportDocument:
    """Produce a validated support paragraph for ``doc``.

    Cache hits skip the client. Invalid generations are retried up to
    ``policy.retries`` times; after that the original sentence is used as
    its own support (flagged ``mock``) when fallback is enabled.
    """
    policy = policy or GenerationPolicy()
    if not doc.tokens:
        raise EmptySentence(f"document {doc.doc_id!r} has no tokens")
    sentence = doc.sentence
    if cache is not None and policy.use_cache:
        try:
            hit = cache.get(sentence)
        except CacheCorrupt as exc:
            log.warning("regenerating: %s", exc)
            hit = None
        if hit is not None:
            if stats is not None:
                stats.bump("cached")
            return hit

    prompt = build_prompt(sentence)
    reasons = []
    if client is not None:
        for attempt in range(policy.retries + 1):
            if stats is not None:
                stats.bump("client_calls")
            try:
                text = client.complete(prompt)
            except KeyError:
                reasons.append("no canned paragraph")
                break
            except ClientUnavailable as exc:
                reasons.append(str(exc))
                break
            support = SupportDocument.from_text(text.strip(), source=source)
            problems = support.problems(sentence)
            if not problems:
                if cache is not None and policy.use_cache:
                    cache.put(sentence, support)
                if stats is not None:
                    stats.bump(source)
                return support
            reasons.append("; ".join(problems))
            log.debug("attempt %d for %s rejected: %s", attempt + 1, doc.doc_id, problems)

    if not policy.fallback:
        raise ClientUnavailable(f"no valid support for {doc.doc_id!r}: {reasons}")
    if stats is not None:
        stats.bump("fallback")
    return SupportDocument.from_text(sentence, source="mock")


def augment_documents(
    docs: Sequence[Document],
    client: Optional[GenerationClient],
    policy: Optional[GenerationPolicy] = None,
    cache: Optional[SupportCache] = None,
    source: str = "generated",
    stats: Optional[AugmentStats] = None,
) -> list[Document]:
    """Attach support paragraphs, keeping input order; only ``support`` changes."""
    policy = policy or GenerationPolicy()
    stats = stats if stats is not None else AugmentStats()

    def one(doc: Document) -> Document:
        return doc.with_support(generate_support(doc, client, policy, cache, source, stats))

    if policy.concurrency <= 1 or len(docs) <= 1:
        return [one(d) for d in docs]
    with ThreadPoolExecutor(max_workers=policy.concurrency) as pool:
        return list(pool.map(one, docs))
