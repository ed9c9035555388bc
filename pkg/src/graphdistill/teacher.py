"""Everything between the engine and the teacher model: prompt rendering,
querying (HTTP or mock), response parsing, the on-disk answer cache, and the
rationale-alignment heads.

Two prompts per node, rendered from templates with {text}, {categories} and
{k} placeholders: one asking for the k best guesses with confidence scores
summing to 1, one asking for a step-by-step explanation.  Responses go
through a tolerant parser that folds case/punctuation when matching answers
to class names and renormalizes the confidence vector.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor, as_completed
from contextlib import nullcontext
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import (
    BudgetExhausted,
    DimMismatch,
    DimTooSmall,
    Diverged,
    EmptyText,
    TeacherResponseInvalid,
    TeacherUnavailable,
)
from .graph_store import TextGraph

DEFAULT_GUESSES_TEMPLATE = (
    "Text: {text}\n"
    "Task: For the following categories: {categories}, which category does this "
    "text belong to? Provide your {k} best guesses within the given categories: "
    "{categories} and a confidence score that each is correct (0 to 1). "
    "The sum of all confidence should be 1. Outputs must be in the given "
    'categories. For example: "answer": <your first answer>, '
    '"confidence": <confidence for first answer>, ...'
)

DEFAULT_RATIONALE_TEMPLATE = (
    "Text: {text}\n"
    "Task: For the following categories: {categories}, which category does this "
    "text belong to? Think step by step. Explain your decision in detail."
)


@dataclass(frozen=True)
class PromptConfig:
    class_names: tuple[str, ...]
    k_guesses: int = 0                        # 0 means min(3, C)
    guesses_template: str = DEFAULT_GUESSES_TEMPLATE
    rationale_template: str = DEFAULT_RATIONALE_TEMPLATE

    def __post_init__(self):
        k = self.k_guesses or min(3, len(self.class_names))
        object.__setattr__(self, "k_guesses", k)
        if not (1 <= self.k_guesses <= len(self.class_names)):
            raise ValueError(
                f"k_guesses must be in [1, {len(self.class_names)}], got {self.k_guesses}"
            )
        for name, tpl, needs_k in (
            ("guesses_template", self.guesses_template, True),
            ("rationale_template", self.rationale_template, False),
        ):
            required = ["{text}", "{categories}"] + (["{k}"] if needs_k else [])
            for ph in required:
                if ph not in tpl:
                    raise ValueError(f"{name} is missing the {ph} placeholder")


def render_prompts(cfg: PromptConfig, node_text: str) -> tuple[str, str]:
    """(guesses_prompt, rationale_prompt) for one node's text."""
    if not node_text or not node_text.strip():
        raise EmptyText("node has no text to prompt with")
    categories = ", ".join(cfg.class_names)
    guesses = cfg.guesses_template.format(
        text=node_text, categories=categories, k=cfg.k_guesses
    )
    rationale = cfg.rationale_template.format(text=node_text, categories=categories)
    return guesses, rationale


def prompt_hash(guesses_prompt: str, rationale_prompt: str) -> str:
    h = hashlib.sha256()
    h.update(guesses_prompt.encode())
    h.update(b"\x00")
    h.update(rationale_prompt.encode())
    return h.hexdigest()[:16]


def _fold(s: str) -> str:
    return re.sub(r"[^a-z0-9]+", " ", s.lower()).strip()


_PAIR_RE = re.compile(
    r'"?answer"?\s*[:=]\s*"?(?P<answer>[^",:{}]+?)"?\s*,\s*'
    r'"?confidence"?\s*[:=]\s*(?P<conf>[0-9]*\.?[0-9]+(?:[eE][+-]?[0-9]+)?)'
)


def parse_confidences(raw: str, class_names) -> tuple[int, np.ndarray]:
    """Extract (answer, confidences) from a guesses response.

    Answers are matched to class names case-insensitively with punctuation
    folding; unmatched answers are dropped, missing classes get 0, and the
    vector is renormalized to sum 1.  The first occurrence of a class wins.
    Raises TeacherResponseInvalid when nothing matches.
    """
    folded = {_fold(name): idx for idx, name in enumerate(class_names)}
    conf = np.zeros(len(class_names))
    seen: set[int] = set()

    pairs: list[tuple[str, float]] = []
    try:
        data = json.loads(raw)
        if isinstance(data, list):
            for item in data:
                if isinstance(item, dict) and "answer" in item and "confidence" in item:
                    pairs.append((str(item["answer"]), float(item["confidence"])))
        elif isinstance(data, dict) and "answer" in data and "confidence" in data:
            pairs.append((str(data["answer"]), float(data["confidence"])))
    except (json.JSONDecodeError, TypeError, ValueError):
        pass
    if not pairs:
        pairs = [(m.group("answer"), float(m.group("conf")))
                 for m in _PAIR_RE.finditer(raw)]

    for answer, c in pairs:
        idx = folded.get(_fold(answer))
        if idx is None or idx in seen:
            continue
        seen.add(idx)
        conf[idx] = max(c, 0.0)

    total = conf.sum()
    if not seen or total <= 0:
        raise TeacherResponseInvalid(
            f"no (answer, confidence) pair matched the class list: {raw[:200]!r}"
        )
    conf /= total
    return int(conf.argmax()), conf


def confidences_to_logits(confidences: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Teacher confidences are probabilities; the distillation softmax wants
    logits, so take logs (clamped so exact zeros stay finite).  At tau = 1
    the round trip reproduces the stated distribution."""
    return np.log(np.maximum(np.asarray(confidences, dtype=np.float64), eps))


@dataclass
class TeacherRecord:
    node_id: int
    answer: int
    confidences: np.ndarray
    rationale_text: str
    rationale_embedding: np.ndarray | None
    teacher_name: str
    prompt_hash: str
    timestamp: float

    def to_json(self) -> dict:
        return {
            "node_id": self.node_id,
            "prompt_hash": self.prompt_hash,
            "answer": self.answer,
            "confidences": [float(c) for c in self.confidences],
            "rationale_text": self.rationale_text,
            "rationale_embedding": (
                None if self.rationale_embedding is None
                else [float(v) for v in self.rationale_embedding]
            ),
            "teacher_name": self.teacher_name,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_json(cls, row: dict) -> "TeacherRecord":
        emb = row.get("rationale_embedding")
        return cls(
            node_id=int(row["node_id"]),
            answer=int(row["answer"]),
            confidences=np.asarray(row["confidences"], dtype=np.float64),
            rationale_text=row.get("rationale_text", ""),
            rationale_embedding=None if emb is None else np.asarray(emb, dtype=np.float64),
            teacher_name=row["teacher_name"],
            prompt_hash=row["prompt_hash"],
            timestamp=float(row.get("timestamp", 0.0)),
        )


class TeacherCache:
    """Append-only jsonl cache keyed by (teacher_name, node_id, prompt_hash)."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        self._records: dict[tuple[str, int, str], TeacherRecord] = {}
        if self.path is not None and self.path.is_file():
            for line in self.path.read_text().splitlines():
                if not line.strip():
                    continue
                rec = TeacherRecord.from_json(json.loads(line))
                self._records[(rec.teacher_name, rec.node_id, rec.prompt_hash)] = rec

    def get(self, teacher_name: str, node_id: int, phash: str) -> TeacherRecord | None:
        return self._records.get((teacher_name, node_id, phash))

    def put(self, rec: TeacherRecord) -> None:
        self._records[(rec.teacher_name, rec.node_id, rec.prompt_hash)] = rec
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(rec.to_json()) + "\n")

    def hydrate_rationales(self, embeddings: dict[int, np.ndarray]) -> int:
        """Fill missing rationale embeddings from the offline embed tool's
        output (in memory only; the jsonl stays append-only)."""
        filled = 0
        for rec in self._records.values():
            if rec.rationale_embedding is None and rec.node_id in embeddings:
                rec.rationale_embedding = embeddings[rec.node_id]
                filled += 1
        return filled

    def __len__(self) -> int:
        return len(self._records)


def load_rationale_embeddings(dir_path: str | Path) -> dict[int, np.ndarray]:
    """Read the exchange files the offline embed tool produces:
    rationale_embeddings.f32le rows addressed by index.json (node_id -> row)."""
    root = Path(dir_path)
    index_path = root / "index.json"
    blob_path = root / "rationale_embeddings.f32le"
    if not index_path.is_file() or not blob_path.is_file():
        return {}
    index = {int(k): int(v) for k, v in json.loads(index_path.read_text()).items()}
    blob = blob_path.read_bytes()
    if not index:
        return {}
    rows = max(index.values()) + 1
    if rows == 0 or len(blob) % (rows * 4) != 0:
        raise ValueError(
            f"{blob_path} has {len(blob)} bytes, not divisible into {rows} rows"
        )
    dim = len(blob) // (rows * 4)
    matrix = np.frombuffer(blob, dtype="<f4").astype(np.float64).reshape(rows, dim)
    return {node_id: matrix[row] for node_id, row in index.items()}


class TeacherClient:
    """Interface every teacher backend implements."""

    name: str = "teacher"

    def complete(self, prompt: str, node_id: int | None = None) -> str:
        raise NotImplementedError

    def rationale_embedding(self, node_id: int, rationale_text: str) -> np.ndarray | None:
        """Mock teachers embed inline; live teachers return None and the
        rationale goes to the pending file for the offline embed tool."""
        return None


class HttpTeacher(TeacherClient):
    """Generic chat-completion client: POST {"model", "messages", "temperature": 0}
    to a configurable URL, bearer token read from an environment variable."""

    def __init__(self, endpoint: str, model_name: str,
                 auth_env_var: str = "TEACHER_API_TOKEN", timeout: float = 60.0):
        import os
        self.endpoint = endpoint
        self.model_name = model_name
        self.token = os.environ.get(auth_env_var, "")
        self.timeout = timeout
        self.name = f"http:{model_name}"

    def complete(self, prompt: str, node_id: int | None = None) -> str:
        body = json.dumps({
            "model": self.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        }).encode()
        req = urllib.request.Request(
            self.endpoint, data=body,
            headers={"Content-Type": "application/json",
                     **({"Authorization": f"Bearer {self.token}"} if self.token else {})},
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode())
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
            raise TeacherUnavailable(f"teacher endpoint failed: {exc}") from exc
        try:
            choice = payload["choices"][0]
            return choice.get("message", {}).get("content") or choice["text"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TeacherResponseInvalid(f"unexpected response shape: {payload}") from exc


def _stable_rng(*parts) -> np.random.Generator:
    h = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return np.random.default_rng(int.from_bytes(h[:8], "little"))


def _class_prototypes(g: TextGraph) -> np.ndarray:
    """Per-class mean of the node embeddings over labeled nodes."""
    protos = np.zeros((g.num_classes, g.emb_dim))
    for c in range(g.num_classes):
        rows = [i for i in range(g.num_nodes) if g.labels[i] == c]
        if rows:
            protos[c] = g.embeddings[rows].mean(axis=0)
    return protos


def _format_guess_response(class_names, ranked: list[tuple[int, float]]) -> str:
    return ", ".join(
        f'"answer": "{class_names[c]}", "confidence": {conf:g}' for c, conf in ranked
    )


class OracleTeacher(TeacherClient):
    """Mock that always answers the ground-truth label with confidence 0.9
    (the rest spread evenly), and emits class-prototype rationale embeddings
    so the alignment head has something learnable."""

    def __init__(self, g: TextGraph, k_guesses: int | None = None, jitter: float = 0.1,
                 seed: int = 0):
        self.g = g
        self.k = k_guesses or min(3, g.num_classes)
        self.jitter = jitter
        self.seed = seed
        self.name = "mock:oracle"
        self._protos = _class_prototypes(g)

    def _answer_for(self, node_id: int) -> int:
        y = self.g.labels[node_id]
        if y is None:
            raise TeacherResponseInvalid(f"oracle mock needs a label for node {node_id}")
        return y

    def complete(self, prompt: str, node_id: int | None = None) -> str:
        if node_id is None:
            raise TeacherUnavailable("mock teachers need the node id")
        y = self._answer_for(node_id)
        if "confidence" in prompt:
            c = self.g.num_classes
            rest = 0.1 / (c - 1) if c > 1 else 0.0
            ranked = [(y, 0.9 if c > 1 else 1.0)]
            for off in range(1, self.k):
                ranked.append(((y + off) % c, rest))
            return _format_guess_response(self.g.class_names, ranked)
        name = self.g.class_names[y]
        return (
            f"The text centers on {name}. Step by step: its vocabulary and cited "
            f"context match {name} rather than the other categories, so the best "
            f"fit is {name}."
        )

    def rationale_embedding(self, node_id: int, rationale_text: str) -> np.ndarray:
        y = self._answer_for(node_id)
        noise = _stable_rng("oracle-emb", self.seed, node_id).standard_normal(self.g.emb_dim)
        return self._protos[y] + self.jitter * noise


class NoisyTeacher(TeacherClient):
    """Mock whose per-node correctness probability depends on the node's
    tercile in the ground-truth homophily-ratio ranking (tiebreak by node
    id), defaulting to 0.40 / 0.60 / 0.75 for lowest / middle / highest.
    Answers are fixed per (seed, node), so cache replays are stable."""

    def __init__(self, g: TextGraph, bucket_accuracies: tuple[float, float, float] = (0.40, 0.60, 0.75),
                 k_guesses: int | None = None, jitter: float = 0.1, seed: int = 0):
        from .graph_store import homophily_ratio
        self.g = g
        self.bucket_accuracies = bucket_accuracies
        self.k = k_guesses or min(3, g.num_classes)
        self.jitter = jitter
        self.seed = seed
        self.name = f"mock:noisy-{seed}"
        self._protos = _class_prototypes(g)
        hr = np.array([homophily_ratio(g, v, g.labels) for v in range(g.num_nodes)])
        # descending with id tiebreak, the same ordering the bucket analysis
        # uses, so bucket membership and tercile membership coincide exactly
        order = np.lexsort((np.arange(g.num_nodes), -hr))
        tercile = np.full(g.num_nodes, 0, dtype=np.int64)
        third = g.num_nodes // 3
        tercile[order[:third]] = 2
        tercile[order[third:2 * third]] = 1
        self._tercile = tercile

    def accuracy_at(self, node_id: int) -> float:
        return self.bucket_accuracies[self._tercile[node_id]]

    def _answer_for(self, node_id: int) -> int:
        y = self.g.labels[node_id]
        if y is None:
            raise TeacherResponseInvalid(f"noisy mock needs a label for node {node_id}")
        rng = _stable_rng("noisy", self.seed, node_id)
        if rng.random() < self.accuracy_at(node_id):
            return y
        wrong = rng.integers(0, self.g.num_classes - 1)
        return int(wrong if wrong < y else wrong + 1)

    def complete(self, prompt: str, node_id: int | None = None) -> str:
        if node_id is None:
            raise TeacherUnavailable("mock teachers need the node id")
        a = self._answer_for(node_id)
        if "confidence" in prompt:
            c = self.g.num_classes
            rest = 0.1 / (c - 1) if c > 1 else 0.0
            ranked = [(a, 0.9 if c > 1 else 1.0)]
            for off in range(1, self.k):
                ranked.append(((a + off) % c, rest))
            return _format_guess_response(self.g.class_names, ranked)
        name = self.g.class_names[a]
        return f"Step by step, the strongest signals point to {name}."

    def rationale_embedding(self, node_id: int, rationale_text: str) -> np.ndarray:
        a = self._answer_for(node_id)
        noise = _stable_rng("noisy-emb", self.seed, node_id).standard_normal(self.g.emb_dim)
        return self._protos[a] + self.jitter * noise


@dataclass
class QuerySession:
    """Shared state for a run's teacher traffic: cache, retry policy, the
    query budget, and the pending-rationales sink for live teachers.
    Cache writes and budget accounting are lock-serialized so independent
    queries can run concurrently."""

    client: TeacherClient
    prompt_cfg: PromptConfig
    cache: TeacherCache
    max_attempts: int = 3
    backoff: float = 0.5                      # seconds; doubles per retry
    sleep: Callable[[float], None] = time.sleep   # injectable for tests
    query_budget: int | None = None
    pending_path: Path | None = None
    max_in_flight: int = 4
    queries_issued: int = 0                   # cache misses this session

    def __post_init__(self):
        self._lock = threading.Lock()

    def query(self, node_id: int, node_text: str) -> TeacherRecord:
        return query_teacher(
            self.client, self.prompt_cfg, node_id, node_text, self.cache,
            max_attempts=self.max_attempts, backoff=self.backoff,
            sleep=self.sleep, session=self,
        )

    def query_many(self, items: list[tuple[int, str]]) -> dict[int, TeacherRecord]:
        """Query several nodes with at most max_in_flight in flight.
        Results are keyed by node id; the first failure propagates."""
        if self.max_in_flight <= 1 or len(items) <= 1:
            return {node_id: self.query(node_id, text) for node_id, text in items}
        out: dict[int, TeacherRecord] = {}
        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            futures = {pool.submit(self.query, node_id, text): node_id
                       for node_id, text in items}
            for future in as_completed(futures):
                out[futures[future]] = future.result()
        return out


def query_teacher(
    client: TeacherClient,
    cfg: PromptConfig,
    node_id: int,
    node_text: str,
    cache: TeacherCache,
    *,
    max_attempts: int = 3,
    backoff: float = 0.5,
    sleep=time.sleep,
    session: QuerySession | None = None,
) -> TeacherRecord:
    """Cached two-prompt teacher query with retries.

    Cache hits cost nothing.  Misses issue the guesses prompt and the
    rationale prompt, retrying transient failures and unparseable responses
    up to max_attempts with exponential backoff, then raise the last error.
    """
    guesses_prompt, rationale_prompt = render_prompts(cfg, node_text)
    phash = prompt_hash(guesses_prompt, rationale_prompt)
    lock = session._lock if session is not None else nullcontext()
    with lock:
        hit = cache.get(client.name, node_id, phash)
        if hit is not None:
            return hit
        if session is not None and session.query_budget is not None:
            if session.queries_issued >= session.query_budget:
                raise BudgetExhausted(
                    f"teacher query budget of {session.query_budget} exhausted"
                )

    last_error: Exception | None = None
    answer = conf = None
    for attempt in range(max_attempts):
        if attempt > 0:
            sleep(backoff * (2 ** (attempt - 1)))
        try:
            raw = client.complete(guesses_prompt, node_id=node_id)
            answer, conf = parse_confidences(raw, cfg.class_names)
            break
        except (TeacherResponseInvalid, TeacherUnavailable) as exc:
            last_error = exc
    else:
        raise last_error  # type: ignore[misc]

    for attempt in range(max_attempts):
        if attempt > 0:
            sleep(backoff * (2 ** (attempt - 1)))
        try:
            rationale_text = client.complete(rationale_prompt, node_id=node_id)
            break
        except TeacherUnavailable as exc:
            last_error = exc
    else:
        raise last_error  # type: ignore[misc]

    embedding = client.rationale_embedding(node_id, rationale_text)
    rec = TeacherRecord(
        node_id=node_id,
        answer=answer,
        confidences=conf,
        rationale_text=rationale_text,
        rationale_embedding=embedding,
        teacher_name=client.name,
        prompt_hash=phash,
        timestamp=time.time(),
    )
    with lock:
        cache.put(rec)
        if session is not None:
            session.queries_issued += 1
            if embedding is None and session.pending_path is not None:
                with session.pending_path.open("a") as fh:
                    fh.write(json.dumps(
                        {"node_id": node_id, "rationale_text": rationale_text}) + "\n")
    return rec


@dataclass
class AlignMlp:
    """One-hidden-layer head mapping a text-embedding-space vector to a
    C-dimensional pre-softmax vector comparable to the final GCN layer."""

    w_a: np.ndarray          # (d_emb, d_hidden)
    b_a: np.ndarray
    w_b: np.ndarray          # (d_hidden, C)
    b_b: np.ndarray
    trained_on: str = ""

    def __call__(self, vec: np.ndarray) -> np.ndarray:
        return align_rationale(self, vec)


def align_rationale(mlp: AlignMlp, vec: np.ndarray) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64)
    if v.shape[-1] != mlp.w_a.shape[0]:
        raise DimMismatch(
            f"vector dim {v.shape[-1]} does not match mlp input {mlp.w_a.shape[0]}"
        )
    h = np.maximum(v @ mlp.w_a + mlp.b_a, 0.0)
    return h @ mlp.w_b + mlp.b_b


def train_align_mlp(
    x_l: np.ndarray,
    y_l: np.ndarray,
    num_classes: int,
    d_hidden: int = 64,
    lr: float = 0.01,
    epochs: int = 200,
    weight_decay: float = 0.01,
    seed: int = 0,
    trained_on: str = "",
) -> AlignMlp:
    """Cross-entropy training of the alignment head on the labeled nodes'
    text embeddings.  Full-batch Adam, deterministic for a fixed seed.
    Weight decay matters: the head sees only n-shot * C points."""
    x = np.asarray(x_l, dtype=np.float64)
    y = np.asarray(y_l, dtype=np.int64)
    n, d = x.shape
    rng = np.random.default_rng(seed)

    def xavier(fi, fo):
        bound = np.sqrt(6.0 / (fi + fo))
        return rng.uniform(-bound, bound, size=(fi, fo))

    params = {
        "w_a": xavier(d, d_hidden), "b_a": np.zeros(d_hidden),
        "w_b": xavier(d_hidden, num_classes), "b_b": np.zeros(num_classes),
    }
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v2 = {k: np.zeros_like(v) for k, v in params.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8

    for t in range(1, epochs + 1):
        pre = x @ params["w_a"] + params["b_a"]
        h = np.maximum(pre, 0.0)
        logits = h @ params["w_b"] + params["b_b"]
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        z = e / e.sum(axis=1, keepdims=True)
        loss = -np.mean(np.log(np.maximum(z[np.arange(n), y], 1e-12)))
        if not np.isfinite(loss):
            raise Diverged(f"alignment head diverged at epoch {t}")
        dlogits = z.copy()
        dlogits[np.arange(n), y] -= 1.0
        dlogits /= n
        grads = {
            "w_b": h.T @ dlogits + weight_decay * params["w_b"],
            "b_b": dlogits.sum(axis=0),
        }
        dh = dlogits @ params["w_b"].T
        dpre = dh * (pre > 0.0)
        grads["w_a"] = x.T @ dpre + weight_decay * params["w_a"]
        grads["b_a"] = dpre.sum(axis=0)
        for k in params:
            m[k] = b1 * m[k] + (1 - b1) * grads[k]
            v2[k] = b2 * v2[k] + (1 - b2) * grads[k] ** 2
            params[k] -= lr * (m[k] / (1 - b1 ** t)) / (np.sqrt(v2[k] / (1 - b2 ** t)) + eps)

    return AlignMlp(params["w_a"], params["b_a"], params["w_b"], params["b_b"],
                    trained_on=trained_on)


def max_pool_align(vec: np.ndarray, num_classes: int) -> np.ndarray:
    """Ablation alignment: split the vector into C contiguous chunks (last
    chunk absorbs the remainder) and take each chunk's max."""
    v = np.asarray(vec, dtype=np.float64)
    d = v.shape[-1]
    if d < num_classes:
        raise DimTooSmall(f"vector dim {d} < num_classes {num_classes}")
    base = d // num_classes
    out = np.empty(num_classes)
    for c in range(num_classes):
        start = c * base
        end = (c + 1) * base if c < num_classes - 1 else d
        out[c] = v[start:end].max()
    return out
