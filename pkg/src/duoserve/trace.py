"""Expert activation traces: data model, JSONL files, synthesis, splits.

A trace is one token's per-layer expert selection path. Datasets are
immutable and validated against the model shape on construction. The
synthetic generator draws layer-0 selections from a base popularity
vector and later layers from a mixture of the previously selected
experts' affinity rows and a uniform floor, so generated corpora carry
the same popularity/affinity structure the statistics module estimates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig

PREFILL = "prefill"
DECODE = "decode"
_PHASES = (PREFILL, DECODE)


class TraceError(ValueError):
    """Raised for malformed trace files or invalid trace data."""


@dataclass(frozen=True)
class ActivationTrace:
    """One token's expert activation path across all layers."""

    request_id: int
    phase: str
    token_index: int
    path: tuple[tuple[int, ...], ...]

    def validate(self, L: int, M: int, k: int) -> None:
        if self.phase not in _PHASES:
            raise TraceError(f"request {self.request_id}: bad phase {self.phase!r}")
        if len(self.path) != L:
            raise TraceError(
                f"request {self.request_id} token {self.token_index}: "
                f"path has {len(self.path)} layers, expected {L}"
            )
        for layer, sel in enumerate(self.path):
            if len(sel) != k or len(set(sel)) != k:
                raise TraceError(
                    f"request {self.request_id} layer {layer}: selection {sel} "
                    f"must contain exactly {k} distinct experts"
                )
            for e in sel:
                if not 0 <= e < M:
                    raise TraceError(
                        f"request {self.request_id} layer {layer}: "
                        f"expert index {e} out of range [0, {M})"
                    )


class TraceDataset:
    """Ordered, validated collection of traces for one model shape.

    Equality compares model identity and trace content; provenance is
    bookkeeping metadata and deliberately excluded so file round-trips
    compare equal.
    """

    def __init__(self, model_name: str, L: int, M: int, k: int,
                 traces, provenance: dict | None = None):
        self.model_name = model_name
        self.L = L
        self.M = M
        self.k = k
        self.traces: tuple[ActivationTrace, ...] = tuple(traces)
        self.provenance = dict(provenance or {"kind": "recorded"})
        self._validate()

    def _validate(self) -> None:
        for t in self.traces:
            t.validate(self.L, self.M, self.k)
        for rid, toks in self.by_request().items():
            prefill_pos = [t.token_index for t in toks if t.phase == PREFILL]
            decode_pos = [t.token_index for t in toks if t.phase == DECODE]
            if prefill_pos and decode_pos and max(prefill_pos) >= min(decode_pos):
                raise TraceError(
                    f"request {rid}: prefill token positions must precede decode positions"
                )

    def __len__(self) -> int:
        return len(self.traces)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TraceDataset):
            return NotImplemented
        return (self.model_name, self.L, self.M, self.k, self.traces) == \
               (other.model_name, other.L, other.M, other.k, other.traces)

    def __hash__(self):
        return hash((self.model_name, self.L, self.M, self.k, self.traces))

    def by_request(self) -> dict[int, list[ActivationTrace]]:
        groups: dict[int, list[ActivationTrace]] = {}
        for t in self.traces:
            groups.setdefault(t.request_id, []).append(t)
        return groups

    def request_ids(self) -> list[int]:
        seen: dict[int, None] = {}
        for t in self.traces:
            seen.setdefault(t.request_id)
        return list(seen)

    def filter_phase(self, phase: str) -> "TraceDataset":
        if phase not in _PHASES:
            raise TraceError(f"bad phase {phase!r}")
        kept = [t for t in self.traces if t.phase == phase]
        prov = dict(self.provenance)
        prov["phase_filter"] = phase
        return TraceDataset(self.model_name, self.L, self.M, self.k, kept, prov)

    def subset(self, request_ids) -> "TraceDataset":
        wanted = set(request_ids)
        kept = [t for t in self.traces if t.request_id in wanted]
        return TraceDataset(self.model_name, self.L, self.M, self.k, kept,
                            dict(self.provenance))


@dataclass(frozen=True, eq=False)
class GeneratorParams:
    """Ground-truth parameters driving trace synthesis.

    base_popularity: (L, M) row-stochastic; only row 0 seeds the chain.
    base_affinity: (L-1, M, M) row-stochastic transition structure.
    alpha mixes affinity-driven sampling with a uniform floor.
    """

    base_popularity: np.ndarray
    base_affinity: np.ndarray
    alpha: float
    seed: int

    def __post_init__(self):
        pop = np.asarray(self.base_popularity, dtype=np.float64)
        aff = np.asarray(self.base_affinity, dtype=np.float64)
        object.__setattr__(self, "base_popularity", pop)
        object.__setattr__(self, "base_affinity", aff)
        if pop.ndim != 2:
            raise TraceError("base_popularity must be a (L, M) matrix")
        L, M = pop.shape
        if aff.shape != (L - 1, M, M):
            raise TraceError(
                f"base_affinity shape {aff.shape} does not match popularity ({L}, {M})"
            )
        if not 0.0 <= self.alpha <= 1.0:
            raise TraceError(f"alpha must be in [0, 1], got {self.alpha}")
        if (pop < 0).any() or (aff < 0).any():
            raise TraceError("probabilities must be non-negative")
        if np.abs(pop.sum(axis=1) - 1.0).max() > 1e-9:
            raise TraceError("each base_popularity row must sum to 1")
        if np.abs(aff.sum(axis=2) - 1.0).max() > 1e-9:
            raise TraceError("each base_affinity row must sum to 1")

    @property
    def L(self) -> int:
        return self.base_popularity.shape[0]

    @property
    def M(self) -> int:
        return self.base_popularity.shape[1]

    def mixed_row(self, layer_pair: int, experts) -> np.ndarray:
        """The exact next-layer distribution used when `experts` were selected."""
        rows = self.base_affinity[layer_pair][sorted(experts)]
        return self.alpha * rows.mean(axis=0) + (1.0 - self.alpha) / self.M


def sample_k_without_replacement(q: np.ndarray, k: int, rng: np.random.Generator) -> tuple[int, ...]:
    """Draw k distinct indices by sequential renormalized inverse-CDF draws."""
    q = np.array(q, dtype=np.float64)
    if int((q > 0).sum()) < k:
        raise TraceError(
            f"degenerate distribution: only {(q > 0).sum()} experts have positive mass, need {k}"
        )
    picked = []
    for _ in range(k):
        cum = np.cumsum(q)
        u = rng.random() * cum[-1]
        idx = int(np.searchsorted(cum, u, side="right"))
        # float roundoff can land on an exhausted index; move to the next live one
        while idx < len(q) and q[idx] <= 0.0:
            idx += 1
        if idx >= len(q):
            idx = int(np.flatnonzero(q > 0)[-1])
        picked.append(idx)
        q[idx] = 0.0
    return tuple(sorted(picked))


def _sample_path(params: GeneratorParams, k: int, rng: np.random.Generator) -> tuple[tuple[int, ...], ...]:
    path = [sample_k_without_replacement(params.base_popularity[0], k, rng)]
    M = params.M
    for layer in range(1, params.L):
        q = params.mixed_row(layer - 1, path[-1])
        path.append(sample_k_without_replacement(q, k, rng))
    return tuple(path)


def generate_traces(params: GeneratorParams, cfg: ModelConfig, n_requests: int,
                    decode_len: int, prefill_len: int) -> TraceDataset:
    """Synthesize a dataset of n_requests, each with prefill and decode tokens.

    Deterministic given params.seed; every request derives its own
    substream from (seed, request_id), so per-request generation order
    does not matter.
    """
    if params.L != cfg.num_layers or params.M != cfg.num_experts:
        raise TraceError(
            f"generator params shaped ({params.L}, {params.M}) do not match "
            f"config ({cfg.num_layers}, {cfg.num_experts})"
        )
    if n_requests < 1 or decode_len < 1 or prefill_len < 1:
        raise TraceError("n_requests, decode_len and prefill_len must all be >= 1")
    traces = []
    for rid in range(n_requests):
        rng = np.random.default_rng(np.random.SeedSequence((params.seed, rid)))
        for pos in range(prefill_len):
            traces.append(ActivationTrace(rid, PREFILL, pos,
                                          _sample_path(params, cfg.top_k, rng)))
        for pos in range(prefill_len, prefill_len + decode_len):
            traces.append(ActivationTrace(rid, DECODE, pos,
                                          _sample_path(params, cfg.top_k, rng)))
    provenance = {
        "kind": "synthetic",
        "alpha": params.alpha,
        "seed": params.seed,
        "n_requests": n_requests,
        "decode_len": decode_len,
        "prefill_len": prefill_len,
    }
    return TraceDataset(cfg.name, cfg.num_layers, cfg.num_experts, cfg.top_k,
                        traces, provenance)


def default_generator_params(L: int, M: int, alpha: float, seed: int) -> GeneratorParams:
    """Structured preset: mildly tilted popularity, concentrated affinity.

    Affinity row i at layer pair l puts 90% of its mass on two cyclic
    targets, so co-selected experts share one target and consecutive
    layers stay predictable without skewing marginal popularity.
    """
    idx = np.arange(M, dtype=np.float64)
    pop = np.empty((L, M))
    for l in range(L):
        w = 1.0 + 0.5 * (M - 1 - ((idx + l) % M)) / max(M - 1, 1)
        pop[l] = w / w.sum()
    aff = np.zeros((L - 1, M, M))
    spread = 0.1 if M > 2 else 0.0
    for l in range(L - 1):
        for i in range(M):
            t1 = (i + 1 + l) % M
            t2 = (i + 2 + l) % M
            row = np.full(M, spread / (M - 2)) if M > 2 else np.zeros(M)
            row[t1] = row[t2] = 0.0
            row[t1] += (1.0 - spread) / 2
            row[t2] += (1.0 - spread) / 2
            aff[l, i] = row / row.sum()
    return GeneratorParams(pop, aff, alpha, seed)


def chain_generator_params(L: int, M: int, seed: int) -> GeneratorParams:
    """Noiseless preset: one-hot affinity rows form a deterministic chain.

    With alpha = 1 the layer-(l+1) selection is the image of the
    layer-l selection under i -> (i + 1) mod M, so the whole path is a
    function of the layer-0 draw.
    """
    idx = np.arange(M, dtype=np.float64)
    w = 1.0 + 0.5 * (M - 1 - idx) / max(M - 1, 1)
    pop = np.tile(w / w.sum(), (L, 1))
    aff = np.zeros((L - 1, M, M))
    for l in range(L - 1):
        for i in range(M):
            aff[l, i, (i + 1) % M] = 1.0
    return GeneratorParams(pop, aff, 1.0, seed)


def _header_line(ds: TraceDataset) -> str:
    return json.dumps({"model": ds.model_name, "L": ds.L, "M": ds.M, "k": ds.k},
                      separators=(",", ":"))


def save_traces(ds: TraceDataset, path) -> None:
    """Write a dataset as JSONL: header line, then one trace per line.

    Output is byte-deterministic for a given dataset.
    """
    lines = [_header_line(ds)]
    for t in ds.traces:
        rec = {"req": t.request_id, "phase": t.phase, "pos": t.token_index,
               "path": [list(sel) for sel in t.path]}
        lines.append(json.dumps(rec, separators=(",", ":")))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_traces(path, cfg: ModelConfig) -> TraceDataset:
    """Load and validate a JSONL trace file against a model config."""
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as e:
        raise TraceError(f"cannot read trace file {path}: {e}") from e
    lines = raw.splitlines()
    if not lines:
        raise TraceError(f"{path}: empty file, missing header line")

    def parse(lineno: int, text: str) -> dict:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise TraceError(f"{path}:{lineno}: malformed JSON: {e.msg}") from e
        if not isinstance(doc, dict):
            raise TraceError(f"{path}:{lineno}: expected a JSON object")
        return doc

    header = parse(1, lines[0])
    for key in ("model", "L", "M", "k"):
        if key not in header:
            raise TraceError(f"{path}:1: header missing key {key!r}")
    if (header["L"], header["M"], header["k"]) != (cfg.num_layers, cfg.num_experts, cfg.top_k):
        raise TraceError(
            f"{path}:1: header shape (L={header['L']}, M={header['M']}, k={header['k']}) "
            f"does not match config {cfg.name} "
            f"(L={cfg.num_layers}, M={cfg.num_experts}, k={cfg.top_k})"
        )
    traces = []
    for lineno, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        rec = parse(lineno, text)
        try:
            trace = ActivationTrace(
                request_id=int(rec["req"]),
                phase=rec["phase"],
                token_index=int(rec["pos"]),
                path=tuple(tuple(int(e) for e in sel) for sel in rec["path"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise TraceError(f"{path}:{lineno}: bad trace record: {e}") from e
        try:
            trace.validate(cfg.num_layers, cfg.num_experts, cfg.top_k)
        except TraceError as e:
            raise TraceError(f"{path}:{lineno}: {e}") from e
        traces.append(trace)
    return TraceDataset(header["model"], cfg.num_layers, cfg.num_experts, cfg.top_k,
                        traces, {"kind": "recorded", "source": str(path)})


def split_dataset(ds: TraceDataset, train_fraction: float, seed: int
                  ) -> tuple[TraceDataset, TraceDataset]:
    """Partition by request id into disjoint train/test folds.

    The train request count is round-half-up of fraction * n_requests,
    clamped so both folds are non-empty. Deterministic given seed.
    """
    if not 0.0 < train_fraction < 1.0:
        raise TraceError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rids = ds.request_ids()
    if len(rids) < 2:
        raise TraceError(f"need at least 2 requests to split, have {len(rids)}")
    n_train = int(np.floor(train_fraction * len(rids) + 0.5))
    n_train = min(max(n_train, 1), len(rids) - 1)
    rng = np.random.default_rng(np.random.SeedSequence((seed, len(rids))))
    perm = rng.permutation(len(rids))
    train_ids = {rids[i] for i in perm[:n_train]}
    train = ds.subset(train_ids)
    test = ds.subset(set(rids) - train_ids)
    train.provenance["split"] = {"fold": "train", "fraction": train_fraction, "seed": seed}
    test.provenance["split"] = {"fold": "test", "fraction": train_fraction, "seed": seed}
    return train, test
