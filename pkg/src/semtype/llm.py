"""Completion backends: remote HTTP, local next-token model, scripted mock.

Every backend exposes ``complete(request)``. Backends that can expose raw
next-token scores (local and mock-with-toy-model) also implement
``next_token_distribution(context)`` and carry a :class:`Vocabulary`.
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
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .core import SemtypeError

log = logging.getLogger(__name__)

API_KEY_ENV = "SEMTYPE_API_KEY"
DEFAULT_CONCURRENCY = 4
EOS_TEXT = b""


class BackendError(SemtypeError):
    """Any failure talking to a completion backend."""


class TransportError(BackendError):
    pass


class AuthFailure(BackendError):
    pass


class BudgetExceeded(BackendError):
    pass


class CapabilityUnsupported(BackendError):
    pass


class UnencodableText(SemtypeError, ValueError):
    pass


def fingerprint(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    max_tokens: int = 64
    temperature: float = 0.0
    stop: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        object.__setattr__(self, "stop", tuple(self.stop))


class Vocabulary:
    """Dense id -> byte-string table with a distinguished end-of-sequence id.

    The EOS token has empty text and is never produced by :meth:`tokenize`.
    """

    def __init__(self, tokens: Sequence[bytes], eos_id: int) -> None:
        self.tokens = [bytes(t) for t in tokens]
        if not 0 <= eos_id < len(self.tokens):
            raise ValueError("eos_id out of range")
        self.eos_id = eos_id
        self._by_text: dict[bytes, int] = {}
        for i, tok in enumerate(self.tokens):
            if i != eos_id and tok:
                self._by_text.setdefault(tok, i)
        self._max_len = max((len(t) for t in self._by_text), default=0)

    @classmethod
    def byte_level(cls, extra: Sequence[str | bytes] = ()) -> "Vocabulary":
        """256 single-byte tokens, then EOS (id 256), then ``extra`` merges."""
        tokens: list[bytes] = [bytes([b]) for b in range(256)]
        tokens.append(EOS_TEXT)
        seen = set(tokens)
        for tok in extra:
            tok = tok.encode("utf-8") if isinstance(tok, str) else bytes(tok)
            if tok and tok not in seen:
                tokens.append(tok)
                seen.add(tok)
        return cls(tokens, 256)

    def __len__(self) -> int:
        return len(self.tokens)

    def text(self, token_id: int) -> bytes:
        return self.tokens[token_id]

    def tokenize(self, text: str | bytes) -> list[int]:
        """Greedy longest-match segmentation."""
        data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        ids = []
        pos = 0
        while pos < len(data):
            for length in range(min(self._max_len, len(data) - pos), 0, -1):
                tid = self._by_text.get(data[pos:pos + length])
                if tid is not None:
                    ids.append(tid)
                    pos += length
                    break
            else:
                raise UnencodableText(f"no token covers byte {data[pos]:#x} at offset {pos}")
        return ids

    def detokenize(self, ids: Sequence[int]) -> str:
        return self.detokenize_bytes(ids).decode("utf-8")

    def detokenize_bytes(self, ids: Sequence[int]) -> bytes:
        return b"".join(self.tokens[i] for i in ids if i != self.eos_id)


@dataclass(frozen=True)
class TokenDistribution:
    context: tuple[int, ...]
    logits: np.ndarray

    def log_probs(self) -> np.ndarray:
        return log_softmax(self.logits)

    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs())


def log_softmax(logits: np.ndarray) -> np.ndarray:
    finite = logits[np.isfinite(logits)]
    shift = finite.max() if finite.size else 0.0
    z = logits - shift
    return z - np.log(np.sum(np.exp(z)))


class RequestLog:
    """Append-only JSONL record of (timestamp, fingerprint, prompt, response)."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, prompt: str, response: str) -> None:
        record = {
            "timestamp": time.time(),
            "fingerprint": fingerprint(prompt),
            "prompt": prompt,
            "response": response,
        }
        with self._lock, self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")

    def replay_map(self) -> dict[str, str]:
        """Fingerprint -> last response; usable as a mock script."""
        out = {}
        if self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                rec = json.loads(line)
                out[rec["fingerprint"]] = rec["response"]
        return out


class Backend:
    """Shared budget accounting and request logging."""

    supports_distribution = False
    vocabulary: Optional[Vocabulary] = None

    def __init__(self, budget: Optional[int] = None, concurrency: int = DEFAULT_CONCURRENCY,
                 request_log: Optional[RequestLog] = None) -> None:
        if concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        self.budget = budget
        self.concurrency = concurrency
        self.request_log = request_log
        self._count = 0
        self._count_lock = threading.Lock()

    @property
    def request_count(self) -> int:
        return self._count

    def _charge(self) -> None:
        with self._count_lock:
            if self.budget is not None and self._count >= self.budget:
                raise BudgetExceeded(f"request budget of {self.budget} exhausted")
            self._count += 1

    def complete(self, request: CompletionRequest) -> str:
        self._charge()
        text = self._complete(request)
        text = _apply_stop(text, request.stop)
        if self.request_log is not None:
            self.request_log.append(request.prompt, text)
        return text

    def _complete(self, request: CompletionRequest) -> str:
        raise NotImplementedError

    def next_token_distribution(self, context: Sequence[int]) -> TokenDistribution:
        raise CapabilityUnsupported(
            f"{type(self).__name__} does not expose next-token distributions"
        )


def _apply_stop(text: str, stop: Sequence[str]) -> str:
    cut = len(text)
    for s in stop:
        if s:
            idx = text.find(s)
            if idx != -1:
                cut = min(cut, idx)
    return text[:cut]


# -- mock ---------------------------------------------------------------------


class ToyModel:
    """Deterministic bigram model over a vocabulary.

    Logits for the next token depend only on the previous token id (or a
    fixed unigram row for the empty context). Weights come from a seeded
    generator; ``bias`` adds a constant boost to the tokens of given strings.
    """

    def __init__(self, vocabulary: Vocabulary, seed: int = 0,
                 bias: Mapping[str, float] | None = None, scale: float = 2.0) -> None:
        self.vocabulary = vocabulary
        self.seed = seed
        rng = np.random.default_rng(seed)
        n = len(vocabulary)
        self.unigram = rng.normal(0.0, scale, size=n)
        self.transitions = rng.normal(0.0, scale, size=(n, n))
        for text, boost in (bias or {}).items():
            ids = vocabulary.tokenize(text)
            if not ids:
                continue
            self.unigram[ids[0]] += boost
            self.transitions[:, ids[0]] += boost
            for prev, nxt in zip(ids, ids[1:]):
                self.transitions[prev, nxt] += boost

    def logits(self, context: Sequence[int]) -> np.ndarray:
        if not context:
            return self.unigram.copy()
        return self.transitions[context[-1]].copy()


@dataclass
class ScriptRule:
    pattern: re.Pattern
    response: str


@dataclass
class MockScript:
    """Prompt -> completion script.

    Lookup order: exact fingerprint, then the first regex rule that
    searches the prompt successfully, then ``default``.
    """

    by_fingerprint: dict[str, str] = field(default_factory=dict)
    rules: list[ScriptRule] = field(default_factory=list)
    default: str = ""

    @classmethod
    def from_mapping(cls, data: Mapping) -> "MockScript":
        rules = [
            ScriptRule(re.compile(r["match"], re.MULTILINE), str(r["response"]))
            for r in data.get("rules") or []
        ]
        return cls(
            by_fingerprint={str(k): str(v) for k, v in (data.get("fingerprints") or {}).items()},
            rules=rules,
            default=str(data.get("default", "")),
        )

    @classmethod
    def load(cls, path: str | Path) -> "MockScript":
        import yaml

        return cls.from_mapping(yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {})

    def respond(self, prompt: str) -> str:
        hit = self.by_fingerprint.get(fingerprint(prompt))
        if hit is not None:
            return hit
        for rule in self.rules:
            if rule.pattern.search(prompt):
                return rule.response
        return self.default


class MockBackend(Backend):
    """Scripted completions plus an optional toy model for distributions."""

    def __init__(self, script: MockScript | Mapping[str, str] | None = None,
                 toy_model: Optional[ToyModel] = None, **kwargs) -> None:
        super().__init__(**kwargs)
        if script is None:
            script = MockScript()
        elif not isinstance(script, MockScript):
            script = MockScript(by_fingerprint=dict(script))
        self.script = script
        self.toy_model = toy_model
        if toy_model is not None:
            self.vocabulary = toy_model.vocabulary
            self.supports_distribution = True

    def _complete(self, request: CompletionRequest) -> str:
        return self.script.respond(request.prompt)

    def next_token_distribution(self, context: Sequence[int]) -> TokenDistribution:
        if self.toy_model is None:
            return super().next_token_distribution(context)
        context = tuple(context)
        return TokenDistribution(context, self.toy_model.logits(context))


# -- remote -------------------------------------------------------------------


RETRYABLE_STATUS = {408, 409, 429, 500, 502, 503, 504}


class RemoteBackend(Backend):
    """OpenAI-style chat completion endpoint.

    Request body: ``{"model", "messages": [{"role": "user", "content"}],
    "max_tokens", "temperature", "stop"}``. The reply text is read from
    ``choices[0].message.content`` (or ``choices[0].text``).
    """

    def __init__(self, endpoint: str, model: str, api_key: Optional[str] = None,
                 max_retries: int = 3, backoff_base: float = 0.5, backoff_cap: float = 8.0,
                 timeout: float = 60.0, client=None, sleep: Callable[[float], None] = time.sleep,
                 **kwargs) -> None:
        super().__init__(**kwargs)
        import httpx

        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self.sleep = sleep
        self.attempts = 0
        self._client = client or httpx.Client(timeout=timeout)

    def backoff(self, attempt: int) -> float:
        return min(self.backoff_cap, self.backoff_base * 2 ** attempt)

    def _complete(self, request: CompletionRequest) -> str:
        import httpx

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        }
        if request.stop:
            body["stop"] = list(request.stop)
        last_error = "no attempts made"
        for attempt in range(self.max_retries + 1):
            if attempt:
                self.sleep(self.backoff(attempt - 1))
            self.attempts += 1
            try:
                resp = self._client.post(self.endpoint, json=body, headers=headers)
            except httpx.HTTPError as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                log.warning("attempt %d to %s failed: %s", attempt + 1, self.endpoint, last_error)
                continue
            if resp.status_code in (401, 403):
                raise AuthFailure(f"HTTP {resp.status_code} from {self.endpoint}")
            if resp.status_code in RETRYABLE_STATUS:
                last_error = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                choice = resp.json()["choices"][0]
                if "message" in choice:
                    return choice["message"]["content"] or ""
                return choice.get("text", "")
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise TransportError(f"malformed response body: {exc}") from exc
        raise TransportError(
            f"{self.endpoint} failed after {self.max_retries + 1} attempts ({last_error})"
        )


# -- local --------------------------------------------------------------------


class LocalBackend(Backend):
    """In-process causal LM exposing logits.

    ``model`` maps a context id sequence to a logits vector whose length
    equals ``len(vocabulary)``. Use :meth:`from_pretrained` to wrap a
    Hugging Face checkpoint.
    """

    supports_distribution = True

    def __init__(self, model: Callable[[Sequence[int]], np.ndarray], vocabulary: Vocabulary,
                 **kwargs) -> None:
        super().__init__(**kwargs)
        self.model = model
        self.vocabulary = vocabulary

    def next_token_distribution(self, context: Sequence[int]) -> TokenDistribution:
        logits = np.asarray(self.model(list(context)), dtype=np.float64)
        if logits.shape != (len(self.vocabulary),):
            raise BackendError(f"model returned logits of shape {logits.shape}")
        return TokenDistribution(tuple(context), logits)

    def _complete(self, request: CompletionRequest) -> str:
        ids = self.vocabulary.tokenize(request.prompt)
        out: list[int] = []
        rng = np.random.default_rng(0)
        for _ in range(request.max_tokens):
            logits = self.next_token_distribution(ids + out).logits
            if request.temperature > 0:
                p = np.exp(log_softmax(logits / request.temperature))
                tid = int(rng.choice(len(p), p=p))
            else:
                tid = int(np.argmax(logits))
            if tid == self.vocabulary.eos_id:
                break
            out.append(tid)
        return self.vocabulary.detokenize_bytes(out).decode("utf-8", errors="replace")

    @classmethod
    def from_pretrained(cls, name: str, **kwargs) -> "LocalBackend":
        try:
            import torch
            from transformers import AutoModelForCausalLM, AutoTokenizer
        except ImportError as exc:
            raise CapabilityUnsupported("local backend needs torch and transformers") from exc
        tokenizer = AutoTokenizer.from_pretrained(name)
        lm = AutoModelForCausalLM.from_pretrained(name)
        lm.eval()
        vocab = hf_vocabulary(tokenizer)
        bos = tokenizer.bos_token_id

        def model(context: Sequence[int]) -> np.ndarray:
            ids = list(context) or ([bos] if bos is not None else [vocab.eos_id])
            with torch.no_grad():
                out = lm(torch.tensor([ids]))
            logits = out.logits[0, -1].double().numpy()
            return logits[: len(vocab)]

        return cls(model, vocab, **kwargs)


_BYTE_FALLBACK = re.compile(r"^<0x([0-9A-Fa-f]{2})>$")


def hf_vocabulary(tokenizer) -> Vocabulary:
    """Byte strings for every id of a Hugging Face tokenizer.

    Handles SentencePiece (``▁`` word marker, ``<0xNN>`` byte fallback) and
    GPT-2 style byte-level BPE. Special tokens other than EOS get empty text
    and are never produced by tokenize().
    """
    pieces = tokenizer.convert_ids_to_tokens(list(range(len(tokenizer))))
    specials = set(tokenizer.all_special_ids)
    byte_decoder = None
    if any("Ġ" in (p or "") for p in pieces):
        byte_decoder = {v: k for k, v in _gpt2_bytes_to_unicode().items()}
    tokens = []
    for i, piece in enumerate(pieces):
        if i in specials or piece is None:
            tokens.append(b"")
            continue
        m = _BYTE_FALLBACK.match(piece)
        if m:
            tokens.append(bytes([int(m.group(1), 16)]))
        elif byte_decoder is not None:
            tokens.append(bytes(byte_decoder.get(ch, 0) for ch in piece))
        else:
            tokens.append(piece.replace("▁", " ").encode("utf-8"))
    eos = tokenizer.eos_token_id if tokenizer.eos_token_id is not None else len(tokens) - 1
    return Vocabulary(tokens, eos)


def _gpt2_bytes_to_unicode() -> dict[int, str]:
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) \
        + list(range(ord("®"), ord("ÿ") + 1))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, (chr(c) for c in cs)))
