"""LLM and captioner backends.

Endpoints are configured by string:

* LLM: an ``http(s)://`` chat-completions URL, ``mock:<script.jsonl>`` for a
  scripted transcript, or ``mock:keyword`` / ``mock:keyword-inverted`` for the
  built-in rule-based reasoner used by the synthetic benchmark.
* captioner: an ``http(s)://`` URL, ``store:<file-or-dir>`` for precomputed
  captions, or ``mock:<script.jsonl>``.
"""

from __future__ import annotations

import bisect
import json
import logging
import os
import re
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path

import httpx

from keytree.errors import BackendRefusal, CaptionMissing, ConfigError, FormatError, ScriptExhausted, TransportError
from keytree.prompts import LETTERS, SCORING_FORMAT

log = logging.getLogger(__name__)

API_KEY_ENV = "VIDEOTREE_API_KEY"


@dataclass(frozen=True)
class Caption:
    frame_index: int
    text: str
    source: str  # live | store | mock
    source_frame: int | None = None

    def __post_init__(self):
        text = self.text.strip()
        if not text:
            raise ValueError(f"empty caption for frame {self.frame_index}")
        object.__setattr__(self, "text", text)


@dataclass
class BackendConfig:
    llm_endpoint: str = "mock:keyword"
    captioner: str = "store:."
    model_name: str = "gpt-4-1106-preview"
    temperature: float = 0.0
    request_timeout: float = 60.0
    max_retries: int = 1
    caption_snap_window: int = 1
    max_concurrency: int = 4

    def __post_init__(self):
        if self.temperature < 0:
            raise ConfigError(f"temperature must be >= 0, got {self.temperature}")
        if not self.request_timeout > 0:
            raise ConfigError(f"request_timeout must be positive, got {self.request_timeout}")
        if self.max_retries < 0 or self.caption_snap_window < 0 or self.max_concurrency < 1:
            raise ConfigError("max_retries and caption_snap_window must be >= 0, max_concurrency >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# -- scripts -----------------------------------------------------------------------------------


@dataclass
class ScriptEntry:
    response: str
    match: str | None = None
    used: bool = False


def load_script(path) -> list[ScriptEntry]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise FormatError(f"cannot read mock script {path}: {e.strerror or e}") from e
    entries = []
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            entries.append(ScriptEntry(str(obj["response"]), obj.get("match")))
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise FormatError(f"bad mock script line in {path}: {e}", i) from None
    return entries


class Transcript:
    """Replays scripted responses.

    A request takes the earliest unused entry whose ``match`` substring occurs
    in it; requests matching no such entry take the next unused entry that has
    no ``match``.
    """

    def __init__(self, entries: list[ScriptEntry]):
        self.entries = entries
        self._lock = threading.Lock()

    def next(self, request: str) -> str:
        with self._lock:
            for e in self.entries:
                if not e.used and e.match is not None and e.match in request:
                    e.used = True
                    return e.response
            for e in self.entries:
                if not e.used and e.match is None:
                    e.used = True
                    return e.response
        raise ScriptExhausted(f"mock script has no response left for request: {request[:80]!r}...")


# -- LLM backends -------------------------------------------------------------------------------


class ScriptedLLM:
    def __init__(self, entries: list[ScriptEntry]):
        self.transcript = Transcript(entries)
        self.calls = 0

    def complete(self, prompt: str) -> str:
        self.calls += 1
        return self.transcript.next(prompt)


class ChatCompletionLLM:
    """Chat-completions client; 5xx and transport failures are retried, 4xx are refusals."""

    def __init__(self, cfg: BackendConfig, api_key: str | None = None, transport: httpx.BaseTransport | None = None):
        self.url = cfg.llm_endpoint
        self.cfg = cfg
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.client = httpx.Client(timeout=cfg.request_timeout, headers=headers, transport=transport)
        self._slots = threading.BoundedSemaphore(cfg.max_concurrency)
        self.calls = 0

    def request_body(self, prompt: str) -> dict:
        return {
            "model": self.cfg.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.cfg.temperature,
        }

    def complete(self, prompt: str) -> str:
        self.calls += 1
        body = self.request_body(prompt)
        last = None
        for attempt in range(self.cfg.max_retries + 1):
            try:
                with self._slots:
                    resp = self.client.post(self.url, json=body)
            except httpx.TransportError as e:
                last = f"{type(e).__name__}: {e}"
                log.warning("LLM request failed (attempt %d): %s", attempt + 1, last)
                continue
            if resp.status_code >= 500:
                last = f"HTTP {resp.status_code}: {resp.text[:200]}"
                log.warning("LLM request failed (attempt %d): %s", attempt + 1, last)
                continue
            if not resp.is_success:
                raise BackendRefusal(resp.status_code, resp.text)
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError):
                raise BackendRefusal(resp.status_code, f"malformed completion payload: {resp.text[:200]}") from None
        raise TransportError(f"LLM endpoint {self.url} failed after {self.cfg.max_retries + 1} attempts ({last})")


_STOPWORDS = frozenset(
    "the a an and or of in on at to for with from by is are was were be been does do did what which who whom "
    "why how when where that this these those it its into over under after before during while his her their "
    "c o person video clip frame scene".split()
)


def content_tokens(text: str) -> set[str]:
    return {t for t in re.findall(r"[a-z0-9]+", text.lower()) if len(t) >= 3 and t not in _STOPWORDS}


class KeywordLLM:
    """Deterministic rule-based stand-in for an LLM reasoner.

    Scoring: a caption sharing a content word with the question is highly
    relevant (3), otherwise not relevant (1); ``inverted`` flips this to
    sabotage routing. Answering: picks the option whose distinctive words
    appear in the most captions (ties to the earliest letter).
    """

    def __init__(self, inverted: bool = False):
        self.inverted = inverted
        self.calls = 0

    @staticmethod
    def _parse(prompt: str):
        m = re.search(r"^Description: (.*?)\nQuestion: (.*?)\nOptions: (.*?)\n", prompt, re.S | re.M)
        if m is None:
            raise ValueError("prompt does not follow the expected template")
        captions = m.group(1).split("\n")
        question = m.group(2)
        options = re.findall(r"([A-E]): (.*?)\.(?= [A-E]: |$)", m.group(3))
        return captions, question, [o for _, o in options]

    def _choose(self, captions: list[str], options: list[str]) -> tuple[int, int]:
        toks = [content_tokens(o) for o in options]
        cap_toks = [content_tokens(c) for c in captions]
        scores = []
        for i, t in enumerate(toks):
            others = set().union(*(toks[j] for j in range(len(toks)) if j != i))
            distinct = t - others
            scores.append(sum(1 for ct in cap_toks if ct & distinct))
        best = max(range(len(scores)), key=lambda i: (scores[i], -i))
        return best, scores[best]

    def complete(self, prompt: str) -> str:
        self.calls += 1
        captions, question, options = self._parse(prompt)
        best, hits = self._choose(captions, options)
        confidence = min(100, 20 + 20 * hits)
        head = f"prediction: {LETTERS[best]}, explanation: option matches {hits} caption(s), confidence: {confidence}"
        if SCORING_FORMAT not in prompt:
            return head
        q = content_tokens(question)
        scores = [3 if content_tokens(c) & q else 1 for c in captions]
        if self.inverted:
            scores = [4 - s for s in scores]
        return f"{head}, frame relevance: [{', '.join(map(str, scores))}]"


# -- captioners ---------------------------------------------------------------------------------


class CaptionStore:
    """Precomputed ``{"frame": int, "text": str}`` lines; a directory holds ``<video_id>.captions.jsonl`` files."""

    def __init__(self, path, snap_window: int = 1):
        self.path = Path(path)
        self.snap_window = snap_window
        self._tables: dict[Path, tuple[list[int], dict[int, str]]] = {}
        self._lock = threading.Lock()
        self.file_reads = 0

    def _file_for(self, video_id: str) -> Path:
        return self.path / f"{video_id}.captions.jsonl" if self.path.is_dir() else self.path

    def _table(self, video_id: str):
        path = self._file_for(video_id)
        with self._lock:
            if path not in self._tables:
                self._tables[path] = self._read(path)
                self.file_reads += 1
            return self._tables[path]

    @staticmethod
    def _read(path: Path):
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as e:
            raise CaptionMissing(f"cannot read caption store {path}: {e.strerror or e}") from e
        table: dict[int, str] = {}
        for i, line in enumerate(lines):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                frame, text = obj["frame"], obj["text"]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise FormatError(f"bad caption line in {path}: {e}", i) from None
            if not isinstance(frame, int) or not isinstance(text, str) or not text.strip():
                raise FormatError(f"caption line needs an int frame and non-empty text in {path}", i)
            table[frame] = text
        return sorted(table), table

    def lookup(self, video_id: str, frame_index: int) -> tuple[int, str]:
        keys, table = self._table(video_id)
        if frame_index in table:
            return frame_index, table[frame_index]
        pos = bisect.bisect_left(keys, frame_index)
        # the lower neighbour is considered first so an equal-distance tie goes to it
        candidates = [k for k in (keys[pos - 1] if pos else None, keys[pos] if pos < len(keys) else None) if k is not None]
        best = min(candidates, key=lambda k: (abs(k - frame_index), k), default=None)
        if best is None or abs(best - frame_index) > self.snap_window:
            raise CaptionMissing(
                f"no caption for {video_id} frame {frame_index} within {self.snap_window} frame(s) "
                f"in {self._file_for(video_id)}"
            )
        return best, table[best]


class HttpCaptioner:
    """POSTs ``{"video_id", "frame"}`` and expects ``{"text": ...}`` back."""

    def __init__(self, cfg: BackendConfig, api_key: str | None = None, transport: httpx.BaseTransport | None = None):
        self.url = cfg.captioner
        self.cfg = cfg
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.client = httpx.Client(timeout=cfg.request_timeout, headers=headers, transport=transport)

    def lookup(self, video_id: str, frame_index: int) -> tuple[int, str]:
        last = None
        for _ in range(self.cfg.max_retries + 1):
            try:
                resp = self.client.post(self.url, json={"video_id": video_id, "frame": frame_index})
            except httpx.TransportError as e:
                last = str(e)
                continue
            if resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                continue
            if not resp.is_success:
                raise BackendRefusal(resp.status_code, resp.text)
            try:
                return frame_index, str(resp.json()["text"])
            except (ValueError, KeyError, TypeError):
                raise BackendRefusal(resp.status_code, f"malformed caption payload: {resp.text[:200]}") from None
        raise TransportError(f"captioner {self.url} failed ({last})")


class ScriptedCaptioner:
    """Mock captioner; each request is the string ``"<video_id>:<frame>"``."""

    def __init__(self, entries: list[ScriptEntry]):
        self.transcript = Transcript(entries)

    def lookup(self, video_id: str, frame_index: int) -> tuple[int, str]:
        return frame_index, self.transcript.next(f"{video_id}:{frame_index}")


class Captioner:
    """Caches captions per ``(video_id, frame_index)`` for the lifetime of the object."""

    def __init__(self, source, kind: str):
        self.source = source
        self.kind = kind
        self._cache: dict[tuple[str, int], Caption] = {}
        self._lock = threading.Lock()
        self.misses = 0

    def get_caption(self, video_id: str, frame_index: int) -> Caption:
        key = (video_id, int(frame_index))
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        src_frame, text = self.source.lookup(video_id, int(frame_index))
        cap = Caption(int(frame_index), text, self.kind, src_frame)
        with self._lock:
            if key not in self._cache:
                self._cache[key] = cap
                self.misses += 1
            return self._cache[key]


@dataclass
class Backends:
    llm: object
    captioner: Captioner
    config: BackendConfig = field(default_factory=BackendConfig)

    def complete(self, prompt: str) -> str:
        return self.llm.complete(prompt)

    def caption(self, video_id: str, frame_index: int) -> Caption:
        return self.captioner.get_caption(video_id, frame_index)


def _is_http(s: str) -> bool:
    return s.startswith(("http://", "https://"))


def build_llm(cfg: BackendConfig, base_dir=None, transport=None):
    ep = cfg.llm_endpoint
    if _is_http(ep):
        return ChatCompletionLLM(cfg, os.environ.get(API_KEY_ENV), transport)
    if ep == "mock:keyword":
        return KeywordLLM()
    if ep == "mock:keyword-inverted":
        return KeywordLLM(inverted=True)
    if ep.startswith("mock:"):
        return ScriptedLLM(load_script(_resolve(ep[5:], base_dir)))
    raise ConfigError(f"unsupported LLM endpoint {ep!r}")


def build_captioner(cfg: BackendConfig, base_dir=None, transport=None) -> Captioner:
    spec = cfg.captioner
    if _is_http(spec):
        return Captioner(HttpCaptioner(cfg, os.environ.get(API_KEY_ENV), transport), "live")
    if spec.startswith("store:"):
        return Captioner(CaptionStore(_resolve(spec[6:], base_dir), cfg.caption_snap_window), "store")
    if spec.startswith("mock:"):
        return Captioner(ScriptedCaptioner(load_script(_resolve(spec[5:], base_dir))), "mock")
    raise ConfigError(f"unsupported captioner {spec!r}")


def build_backends(cfg: BackendConfig, base_dir=None, transport=None) -> Backends:
    """Instantiate both backends; relative file paths resolve against ``base_dir``."""
    return Backends(build_llm(cfg, base_dir, transport), build_captioner(cfg, base_dir, transport), cfg)


def _resolve(path: str, base_dir) -> Path:
    p = Path(path or ".")
    return p if p.is_absolute() or base_dir is None else Path(base_dir) / p
