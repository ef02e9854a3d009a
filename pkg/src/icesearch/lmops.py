"""Language-model operators: prompt templates, chat-completion client,
response parsing and offline (scripted / replayed) stand-ins.

Every operator exposes ``ask(prompt, call) -> Exchange``. The engine never
sees anything from a model except the text it returned, which is parsed
into a feature set against the known feature universe.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import httpx
import numpy as np

from .subsets import FeatureSet, as_feature_set

log = logging.getLogger(__name__)

DEFAULT_ROLES = (
    "Neurologist",
    "Cardiologist",
    "Radiologist",
    "Epidemiologist",
    "Public Health Professional",
    "Pharmacist",
    "Genetic Counselor",
    "Health Informatics Specialist",
    "Data Scientist",
    "Data Analyst",
    "Machine Learning Engineer",
    "Biostatistician",
    "AI/ML Researcher",
    "Data Engineer",
    "Ethical AI Advocate",
    "Nurse",
    "Emergency Medicine Physician",
)
ZERO_SHOT_ROLE = "medical doctor"


class OperatorUnavailable(RuntimeError):
    """The language model could not be reached after all retries."""


class ProtocolError(RuntimeError):
    """The endpoint answered with a body that is not a chat completion."""


class UnparseableResponse(ValueError):
    """A response names no feature from the universe."""


@dataclass(frozen=True)
class RoleSet:
    roles: tuple[str, ...] = DEFAULT_ROLES

    def __post_init__(self):
        roles = tuple(self.roles)
        if not roles:
            raise ValueError("role set must be non-empty")
        if len(set(roles)) != len(roles):
            raise ValueError("roles must be unique")
        object.__setattr__(self, "roles", roles)

    def __iter__(self):
        return iter(self.roles)

    def __len__(self):
        return len(self.roles)


@dataclass(frozen=True)
class PromptSpec:
    task_description: str
    feature_universe: tuple[str, ...]
    pool_snapshot: tuple | None = None
    role: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "feature_universe", tuple(self.feature_universe))
        if not self.feature_universe:
            raise ValueError("feature universe must be non-empty")
        if self.pool_snapshot is not None:
            snap = tuple((tuple(names), float(tr), float(va)) for names, tr, va in self.pool_snapshot)
            known = set(self.feature_universe)
            for names, _, _ in snap:
                if unknown := set(names) - known:
                    raise ValueError(f"pool snapshot references unknown features {sorted(unknown)}")
            object.__setattr__(self, "pool_snapshot", snap)


def build_zero_shot_prompt(spec: PromptSpec) -> str:
    if spec.pool_snapshot is not None:
        raise ValueError("zero-shot prompts take no pool snapshot")
    role = spec.role or ZERO_SHOT_ROLE
    return (f"Imagine you are a {role}. I need you to recommend important features for "
            f"accurately {spec.task_description}. Consider the following features: "
            f"{', '.join(spec.feature_universe)}. Think step by step. Selected features:")


def format_accuracy_list(snapshot) -> str:
    """One line per pool entry, best validation accuracy first (stable on ties)."""
    ordered = sorted(snapshot, key=lambda e: -e[2])
    return "\n".join(
        f"- {', '.join(names)}: training accuracy {train:.3f}%, validation accuracy {val:.3f}%"
        for names, train, val in ordered)


def build_few_shot_prompt(spec: PromptSpec) -> str:
    if not spec.pool_snapshot:
        raise ValueError("few-shot prompts need a non-empty pool snapshot")
    if not spec.role:
        raise ValueError("few-shot prompts need a role")
    return (f"As a {spec.role}, recommend important features for {spec.task_description}. "
            f"Consider the following features: {', '.join(spec.feature_universe)}. "
            f"Here are the selected features and their corresponding classification "
            f"accuracy results:\n{format_accuracy_list(spec.pool_snapshot)}\n"
            f"Be innovative and think step by step. Features selected:")


# --------------------------------------------------------------------------
# response parsing

def _name_pattern(name: str) -> re.Pattern:
    parts = [re.escape(p) for p in re.split(r"[\s_]+", name.strip()) if p]
    body = r"[\s_]+".join(parts)
    return re.compile(rf"(?<![0-9A-Za-z]){body}(?![0-9A-Za-z])", re.IGNORECASE)


def parse_feature_set(response: str, feature_universe: Sequence[str]) -> FeatureSet:
    """Find which universe names a free-text response mentions.

    Names are matched case-insensitively on word boundaries, treating ``_``
    and whitespace alike. Longer names are matched first and their spans
    blanked, so ``glucose`` does not also fire inside ``avg_glucose_level``.
    """
    text = response or ""
    found = []
    order = sorted(range(len(feature_universe)), key=lambda i: (-len(feature_universe[i]), i))
    for i in order:
        pat = _name_pattern(feature_universe[i])
        if pat.search(text):
            found.append(i)
            text = pat.sub(lambda m: " " * len(m.group(0)), text)
    if not found:
        raise UnparseableResponse(f"no known feature named in response: {response[:200]!r}")
    return as_feature_set(found)


def render_feature_set(subset: Iterable[int], feature_universe: Sequence[str]) -> str:
    return ", ".join(feature_universe[i] for i in sorted(subset))


def scripted_next(script: Sequence[FeatureSet], call_index: int) -> FeatureSet:
    if not script:
        raise ValueError("script must be non-empty")
    return script[call_index % len(script)]


# --------------------------------------------------------------------------
# chat-completion client

@dataclass(frozen=True)
class LmEndpoint:
    base_url: str
    model_name: str
    temperature: float = 1.0
    top_p: float = 0.9
    max_retries: int = 3
    timeout: float = 60.0
    backoff: float = 1.0
    api_key_env: str = "ICE_SEARCH_API_KEY"

    def __post_init__(self):
        if not 0 <= self.top_p <= 1:
            raise ValueError("top_p must lie in [0, 1]")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    @property
    def url(self) -> str:
        return self.base_url.rstrip("/") + "/chat/completions"


def chat_request(endpoint: LmEndpoint, prompt: str) -> dict:
    return {
        "model": endpoint.model_name,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": endpoint.temperature,
        "top_p": endpoint.top_p,
    }


def complete(endpoint: LmEndpoint, prompt: str, seed: int = 0, *,
             client: httpx.Client | None = None, sleep=time.sleep,
             record: dict | None = None) -> str:
    """POST one chat-completion request and return the first choice's content.

    Transport failures and non-2xx statuses are retried ``max_retries`` times
    with exponential backoff; the jitter comes from ``seed`` so the schedule
    is reproducible. If ``record`` is given, the request body and the final
    raw response body are stored in it.
    """
    body = chat_request(endpoint, prompt)
    headers = {}
    if key := os.environ.get(endpoint.api_key_env):
        headers["Authorization"] = f"Bearer {key}"
    if record is not None:
        record["request"] = body
    rng = np.random.default_rng(seed)
    own_client = client is None
    client = client or httpx.Client(timeout=endpoint.timeout)
    last_error = None
    try:
        for attempt in range(endpoint.max_retries + 1):
            if attempt:
                delay = endpoint.backoff * 2 ** (attempt - 1) * (1 + 0.1 * rng.random())
                log.info("retrying %s in %.2fs (%s)", endpoint.url, delay, last_error)
                sleep(delay)
            try:
                resp = client.post(endpoint.url, json=body, headers=headers, timeout=endpoint.timeout)
            except httpx.HTTPError as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                continue
            if not 200 <= resp.status_code < 300:
                last_error = f"HTTP {resp.status_code}"
                continue
            if record is not None:
                record["response"] = resp.text
            try:
                content = resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise ProtocolError(f"malformed chat-completion body: {resp.text[:200]!r}") from exc
            if not isinstance(content, str):
                raise ProtocolError("message content is not text")
            return content
    finally:
        if own_client:
            client.close()
    raise OperatorUnavailable(f"{endpoint.url} unavailable after {endpoint.max_retries + 1} attempts: {last_error}")


# --------------------------------------------------------------------------
# operators

def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass(frozen=True)
class CallInfo:
    """Identifies one operator call.

    ``ordinal`` numbers the logical calls of a run (zero-shot draws first,
    then epoch by epoch, role by role); ``attempt`` counts re-prompts.
    """

    seed: int
    epoch: int
    role_index: int
    role: str
    ordinal: int
    attempt: int = 0

    @property
    def call_seed(self) -> int:
        return derive_seed(self.seed, self.epoch, self.role_index, self.attempt)

    def key(self) -> tuple:
        return (self.seed, self.ordinal, self.attempt)


@dataclass
class Exchange:
    text: str | None = None
    error: str | None = None
    request: dict | None = None
    response: str | None = None


class ScriptedOperator:
    """Answers call ``ordinal`` with ``script[ordinal % len(script)]`` rendered as names."""

    def __init__(self, script: Sequence[Iterable[int]], feature_names: Sequence[str]):
        self.feature_names = tuple(feature_names)
        self.script = [as_feature_set(s, len(self.feature_names)) for s in script]
        if not self.script:
            raise ValueError("script must be non-empty")

    @classmethod
    def from_names(cls, script: Sequence[Sequence], feature_names: Sequence[str]):
        index = {n: i for i, n in enumerate(feature_names)}
        return cls([[index[f] if isinstance(f, str) else f for f in s] for s in script], feature_names)

    def ask(self, prompt: str, call: CallInfo) -> Exchange:
        subset = scripted_next(self.script, call.ordinal)
        return Exchange(text=render_feature_set(subset, self.feature_names))


class EndpointOperator:
    def __init__(self, endpoint: LmEndpoint, client: httpx.Client | None = None, sleep=time.sleep):
        self.endpoint = endpoint
        self.client = client
        self.sleep = sleep

    def ask(self, prompt: str, call: CallInfo) -> Exchange:
        record: dict = {}
        try:
            text = complete(self.endpoint, prompt, call.call_seed, client=self.client,
                            sleep=self.sleep, record=record)
        except (OperatorUnavailable, ProtocolError) as exc:
            return Exchange(error=f"{type(exc).__name__}: {exc}", **record)
        return Exchange(text=text, **record)


class ReplayMismatch(RuntimeError):
    """A replayed run asked for a call the transcript does not hold."""


class ReplayOperator:
    """Plays back a recorded transcript; the prompts must match exactly."""

    def __init__(self, records: Iterable[dict]):
        self.records = {(r["seed"], r["ordinal"], r["attempt"]): r for r in records}

    @classmethod
    def from_file(cls, path) -> "ReplayOperator":
        with open(path) as fh:
            return cls(json.loads(line) for line in fh if line.strip())

    def ask(self, prompt: str, call: CallInfo) -> Exchange:
        rec = self.records.get(call.key())
        if rec is None:
            raise ReplayMismatch(f"transcript has no record for call {call.key()}")
        if rec["prompt"] != prompt:
            raise ReplayMismatch(f"prompt for call {call.key()} differs from the recording")
        return Exchange(text=rec.get("text"), error=rec.get("error"),
                        request=rec.get("request"), response=rec.get("response"))


class Transcript:
    """Thread-safe log of every operator call, written as JSON lines."""

    def __init__(self):
        self._records: list[dict] = []
        self._lock = threading.Lock()

    def add(self, call: CallInfo, prompt: str, exchange: Exchange, parsed=None) -> None:
        rec = {**asdict(call), "prompt": prompt, **asdict(exchange),
               "parsed": list(parsed) if parsed is not None else None}
        with self._lock:
            self._records.append(rec)

    @property
    def records(self) -> list[dict]:
        with self._lock:
            return sorted(self._records, key=lambda r: (r["seed"], r["ordinal"], r["attempt"]))

    def __len__(self):
        return len(self._records)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

