"""Next-layer expert prediction.

The predictor is a seven-layer fully connected network (six hidden
widths narrowing 2048 -> 64, then an output per expert) trained with a
multi-label binary cross-entropy objective. Inputs combine the token's
padded selection history, the target layer's popularity row, the pooled
affinity rows of the previously selected experts, and a normalized
layer position. Everything runs on CPU in float64; forward, backward
and the optimizer are implemented here so gradients can be verified
against finite differences and serialized models round-trip bitwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .stats import AffinityMatrix, PopularityMatrix
from .trace import ActivationTrace, TraceDataset

FULL_HIDDEN = (2048, 1024, 512, 256, 128, 64)
TEST_HIDDEN = (8, 8, 8, 8, 8, 8)

_BN_EPS = 1e-5
_BN_MOMENTUM = 0.1
_CLAMP_EPS = 1e-7


class PredictorError(ValueError):
    """Raised for invalid predictor inputs or model files."""


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, learning_rate: float, epoch: int, batch_index: int):
        self.learning_rate = learning_rate
        self.epoch = epoch
        self.batch_index = batch_index
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch_index} "
            f"(learning_rate={learning_rate})"
        )


# ---------------------------------------------------------------------------
# input construction


@dataclass(frozen=True, eq=False)
class StateVector:
    """Assembled predictor input for one (token, target layer) pair.

    history holds expert indices shifted by +1 with 0 as the pad
    sentinel; it is scaled by 1/M only when entering the network.
    """

    history: np.ndarray      # (L*k,) int64, zero-padded
    popularity: np.ndarray   # (M,) target-layer popularity row
    affinity: np.ndarray     # (M,) pooled, or (k*M,) concatenated
    layer_pos: float

    def as_features(self, M: int) -> np.ndarray:
        return np.concatenate([
            self.history.astype(np.float64) / M,
            self.popularity,
            self.affinity,
            np.array([self.layer_pos]),
        ])


def feature_length(L: int, M: int, k: int, affinity_mode: str = "pool") -> int:
    aff_len = M if affinity_mode == "pool" else k * M
    return L * k + M + aff_len + 1


def construct_input(trace: ActivationTrace, l: int, pop: PopularityMatrix,
                    aff: AffinityMatrix, affinity_mode: str = "pool") -> StateVector:
    """Build the state vector for predicting the layer-l selection.

    Layer 0 has no prediction (the runtime fetches after its gate), so
    l must be in [1, L).
    """
    L = len(trace.path)
    M = pop.values.shape[1]
    k = len(trace.path[0])
    if affinity_mode not in ("pool", "concat"):
        raise PredictorError(f"affinity_mode must be 'pool' or 'concat', got {affinity_mode!r}")
    if not 1 <= l < L:
        raise PredictorError(
            f"target layer must be in [1, {L}); layer 0 is fetched after the gate"
        )
    history = np.zeros(L * k, dtype=np.int64)
    flat = [e + 1 for sel in trace.path[:l] for e in sel]
    history[:len(flat)] = flat
    rows = aff.values[l - 1][list(trace.path[l - 1])]
    affinity = rows.mean(axis=0) if affinity_mode == "pool" else rows.reshape(-1)
    return StateVector(
        history=history,
        popularity=pop.values[l].copy(),
        affinity=affinity.copy(),
        layer_pos=l / (L - 1),
    )


def build_training_set(ds: TraceDataset, pop: PopularityMatrix, aff: AffinityMatrix,
                       affinity_mode: str = "pool") -> tuple[np.ndarray, np.ndarray]:
    """One sample per (trace, target layer l in [1, L)): features and multi-hot labels."""
    if len(ds.traces) == 0:
        raise PredictorError("cannot build a training set from an empty dataset")
    d = feature_length(ds.L, ds.M, ds.k, affinity_mode)
    n = len(ds.traces) * (ds.L - 1)
    X = np.empty((n, d))
    Y = np.zeros((n, ds.M))
    row = 0
    for trace in ds.traces:
        for l in range(1, ds.L):
            sv = construct_input(trace, l, pop, aff, affinity_mode)
            X[row] = sv.as_features(ds.M)
            Y[row, list(trace.path[l])] = 1.0
            row += 1
    return X, Y


# ---------------------------------------------------------------------------
# network


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class ExpertMLP:
    """Fully connected multi-label classifier over the experts of a layer.

    Six hidden layers (each linear -> batch norm -> ReLU -> dropout)
    followed by a linear output layer with sigmoid activations. Eval
    mode is deterministic: dropout is disabled and batch norm uses
    running statistics.
    """

    def __init__(self, input_dim: int, output_dim: int, hidden=FULL_HIDDEN,
                 dropout: float = 0.1, seed: int = 0, meta: dict | None = None):
        self.input_dim = int(input_dim)
        self.output_dim = int(output_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.dropout = float(dropout)
        self.seed = int(seed)
        self.meta = dict(meta or {})
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x4D4C50)))
        dims = [self.input_dim, *self.hidden, self.output_dim]
        self.W = [rng.normal(0.0, np.sqrt(2.0 / dims[i]), size=(dims[i], dims[i + 1]))
                  for i in range(len(dims) - 1)]
        self.b = [np.zeros(dims[i + 1]) for i in range(len(dims) - 1)]
        self.gamma = [np.ones(h) for h in self.hidden]
        self.beta = [np.zeros(h) for h in self.hidden]
        self.run_mean = [np.zeros(h) for h in self.hidden]
        self.run_var = [np.ones(h) for h in self.hidden]

    # -- parameter plumbing

    def parameters(self) -> list[np.ndarray]:
        params = []
        for i in range(len(self.W)):
            params.extend([self.W[i], self.b[i]])
            if i < len(self.hidden):
                params.extend([self.gamma[i], self.beta[i]])
        return params

    # -- forward / backward

    def _check_input(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        if single:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise PredictorError(
                f"input has shape {X.shape}, expected (*, {self.input_dim})"
            )
        return X, single

    def forward(self, X, train: bool = False, dropout_rng: np.random.Generator | None = None,
                update_running: bool = False):
        probs, _ = self._forward_full(X, train=train, dropout_rng=dropout_rng,
                                      update_running=update_running)
        return probs

    def _forward_full(self, X, train: bool, dropout_rng=None, update_running: bool = False):
        X, single = self._check_input(X)
        A = X
        caches = {"X": X, "layers": []}
        n_hidden = len(self.hidden)
        for i in range(n_hidden):
            Z = A @ self.W[i] + self.b[i]
            if train:
                mu = Z.mean(axis=0)
                var = Z.var(axis=0)
                if update_running:
                    n = Z.shape[0]
                    unbiased = var * n / (n - 1) if n > 1 else var
                    self.run_mean[i] = (1 - _BN_MOMENTUM) * self.run_mean[i] + _BN_MOMENTUM * mu
                    self.run_var[i] = (1 - _BN_MOMENTUM) * self.run_var[i] + _BN_MOMENTUM * unbiased
            else:
                mu = self.run_mean[i]
                var = self.run_var[i]
            inv_std = 1.0 / np.sqrt(var + _BN_EPS)
            zhat = (Z - mu) * inv_std
            H = self.gamma[i] * zhat + self.beta[i]
            R = np.maximum(H, 0.0)
            mask = None
            if train and self.dropout > 0.0 and dropout_rng is not None:
                mask = (dropout_rng.random(R.shape) >= self.dropout) / (1.0 - self.dropout)
                R = R * mask
            caches["layers"].append({
                "A_in": A, "zhat": zhat, "inv_std": inv_std, "H": H, "mask": mask,
                "train": train,
            })
            A = R
        Z_out = A @ self.W[-1] + self.b[-1]
        P = _sigmoid(Z_out)
        caches["A_last"] = A
        probs = P[0] if single else P
        return probs, caches

    def backward(self, caches: dict, Y: np.ndarray) -> list[np.ndarray]:
        """Gradients of mean-over-batch, sum-over-experts BCE, aligned with parameters()."""
        Y = np.asarray(Y, dtype=np.float64)
        A_last = caches["A_last"]
        B = A_last.shape[0]
        P = _sigmoid(A_last @ self.W[-1] + self.b[-1])
        dZ = (P - Y) / B
        grads_W = [None] * len(self.W)
        grads_b = [None] * len(self.b)
        grads_gamma = [None] * len(self.gamma)
        grads_beta = [None] * len(self.beta)
        grads_W[-1] = A_last.T @ dZ
        grads_b[-1] = dZ.sum(axis=0)
        dA = dZ @ self.W[-1].T
        for i in range(len(self.hidden) - 1, -1, -1):
            layer = caches["layers"][i]
            dR = dA
            if layer["mask"] is not None:
                dR = dR * layer["mask"]
            dH = dR * (layer["H"] > 0.0)
            zhat = layer["zhat"]
            grads_gamma[i] = (dH * zhat).sum(axis=0)
            grads_beta[i] = dH.sum(axis=0)
            dzhat = dH * self.gamma[i]
            inv_std = layer["inv_std"]
            if layer["train"]:
                n = zhat.shape[0]
                dZ_i = (inv_std / n) * (
                    n * dzhat - dzhat.sum(axis=0) - zhat * (dzhat * zhat).sum(axis=0)
                )
            else:
                dZ_i = dzhat * inv_std
            grads_W[i] = layer["A_in"].T @ dZ_i
            grads_b[i] = dZ_i.sum(axis=0)
            dA = dZ_i @ self.W[i].T
        grads = []
        for i in range(len(self.W)):
            grads.extend([grads_W[i], grads_b[i]])
            if i < len(self.hidden):
                grads.extend([grads_gamma[i], grads_beta[i]])
        return grads


def bce_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Binary cross-entropy summed over experts, averaged over the batch."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if probs.shape != labels.shape:
        raise PredictorError(f"shape mismatch: probs {probs.shape} vs labels {labels.shape}")
    p = np.clip(probs, _CLAMP_EPS, 1.0 - _CLAMP_EPS)
    per_sample = -(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p)).sum(axis=-1)
    return float(np.mean(per_sample))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainReport:
    epochs: int
    seed: int
    batch_size: int
    learning_rate: float
    n_samples: int
    epoch_losses: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "epochs": self.epochs,
            "seed": self.seed,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "n_samples": self.n_samples,
            "epoch_losses": self.epoch_losses,
        }


class _Adam:
    """Adaptive moment estimation over a fixed parameter list, in place."""

    def __init__(self, params: list[np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def train(ds_train: TraceDataset, pop: PopularityMatrix, aff: AffinityMatrix,
          epochs: int = 20, batch_size: int = 256, learning_rate: float = 1e-3,
          seed: int = 0, hidden=FULL_HIDDEN, dropout: float = 0.1,
          affinity_mode: str = "pool") -> tuple[ExpertMLP, TrainReport]:
    """Mini-batch Adam on the BCE objective; deterministic given the seed."""
    X, Y = build_training_set(ds_train, pop, aff, affinity_mode)
    meta = {"L": ds_train.L, "M": ds_train.M, "k": ds_train.k,
            "affinity_mode": affinity_mode}
    net = ExpertMLP(X.shape[1], ds_train.M, hidden=hidden, dropout=dropout,
                    seed=seed, meta=meta)
    report = TrainReport(epochs=epochs, seed=seed, batch_size=batch_size,
                         learning_rate=learning_rate, n_samples=X.shape[0])
    if epochs == 0:
        return net, report
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5452)))
    opt = _Adam(net.parameters(), learning_rate)
    n = X.shape[0]
    for epoch in range(epochs):
        perm = rng.permutation(n)
        total = 0.0
        for bi, start in enumerate(range(0, n, batch_size)):
            sel = perm[start:start + batch_size]
            probs, caches = net._forward_full(X[sel], train=True, dropout_rng=rng,
                                              update_running=True)
            loss = bce_loss(probs, Y[sel])
            if not np.isfinite(loss):
                raise TrainingDivergedError(learning_rate, epoch, bi)
            grads = net.backward(caches, Y[sel])
            opt.step(grads)
            total += loss * len(sel)
        report.epoch_losses.append(total / n)
    return net, report


def gradient_check(net: ExpertMLP, X: np.ndarray, Y: np.ndarray,
                   step: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs with dropout disabled and batch norm in training mode on the
    single fixed batch, so the loss is a smooth deterministic function
    of the parameters.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)

    def loss_at() -> float:
        probs = net.forward(X, train=True, dropout_rng=None, update_running=False)
        return bce_loss(probs, Y)

    _, caches = net._forward_full(X, train=True, dropout_rng=None, update_running=False)
    analytic = net.backward(caches, Y)
    worst = 0.0
    for p, g in zip(net.parameters(), analytic):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = loss_at()
            flat[j] = orig - step
            down = loss_at()
            flat[j] = orig
            numeric = (up - down) / (2.0 * step)
            denom = max(abs(gflat[j]), abs(numeric), 1.0)
            worst = max(worst, abs(gflat[j] - numeric) / denom)
    return worst


# ---------------------------------------------------------------------------
# prediction and evaluation


def predict_topk(net: ExpertMLP, state, k: int) -> tuple[int, ...]:
    """Indices of the k largest eval-mode outputs, ties to the lower index."""
    if isinstance(state, StateVector):
        state = state.as_features(net.output_dim)
    probs = net.forward(state, train=False)
    return topk_indices(probs, k)


def topk_indices(scores: np.ndarray, k: int) -> tuple[int, ...]:
    order = np.argsort(-np.asarray(scores), kind="stable")
    return tuple(sorted(int(i) for i in order[:k]))


class MLPPredictor:
    """Trained-network predictor bound to the statistics it was trained with."""

    name = "expert-mlp"

    def __init__(self, net: ExpertMLP, pop: PopularityMatrix, aff: AffinityMatrix):
        self.net = net
        self.pop = pop
        self.aff = aff
        self.affinity_mode = net.meta.get("affinity_mode", "pool")

    def predict(self, trace: ActivationTrace, l: int) -> tuple[int, ...]:
        sv = construct_input(trace, l, self.pop, self.aff, self.affinity_mode)
        k = self.net.meta.get("k", len(trace.path[0]))
        return predict_topk(self.net, sv.as_features(self.pop.values.shape[1]), k)


class OraclePredictor:
    """Returns the true selection; isolates scheduling gains from accuracy."""

    name = "oracle"

    def predict(self, trace: ActivationTrace, l: int) -> tuple[int, ...]:
        return tuple(trace.path[l])


class ComplementPredictor:
    """Adversarial stub: always predicts experts outside the true selection."""

    name = "complement"

    def __init__(self, M: int):
        self.M = M

    def predict(self, trace: ActivationTrace, l: int) -> tuple[int, ...]:
        true = set(trace.path[l])
        k = len(trace.path[l])
        wrong = [e for e in range(self.M) if e not in true]
        if len(wrong) < k:
            raise PredictorError(f"complement stub needs M >= 2k, have M={self.M}, k={k}")
        return tuple(wrong[:k])


class PopularityPredictor:
    """Baseline that always picks the top-k most popular experts of the layer."""

    name = "popularity-topk"

    def __init__(self, pop: PopularityMatrix, k: int):
        self.pop = pop
        self.k = k

    def predict(self, trace: ActivationTrace, l: int) -> tuple[int, ...]:
        return topk_indices(self.pop.values[l], self.k)


class PrecomputedPredictor:
    """Lookup table of predictions, built with one batched forward pass.

    Predictions depend only on trace content, never on simulated time,
    so they can be computed up front; this keeps simulator runs cheap.
    """

    name = "expert-mlp"

    def __init__(self, table: dict):
        self.table = table

    @classmethod
    def from_net(cls, net: ExpertMLP, ds: TraceDataset, pop: PopularityMatrix,
                 aff: AffinityMatrix) -> "PrecomputedPredictor":
        mode = net.meta.get("affinity_mode", "pool")
        keys = []
        rows = []
        for t in ds.traces:
            for l in range(1, ds.L):
                keys.append((t.request_id, t.token_index, l))
                rows.append(construct_input(t, l, pop, aff, mode).as_features(ds.M))
        table = {}
        if rows:
            probs = net.forward(np.stack(rows), train=False)
            for key, p in zip(keys, probs):
                table[key] = topk_indices(p, ds.k)
        return cls(table)

    def predict(self, trace: ActivationTrace, l: int) -> tuple[int, ...]:
        return self.table[(trace.request_id, trace.token_index, l)]


@dataclass
class HitRateReport:
    topk_hit_rate: float
    at_least_one_rate: float
    per_layer: list[dict]
    n_evaluated: int
    predictor: str = "expert-mlp"

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "predictor": self.predictor,
            "topk_hit_rate": self.topk_hit_rate,
            "at_least_one_rate": self.at_least_one_rate,
            "per_layer": self.per_layer,
            "n_evaluated": self.n_evaluated,
        }


def evaluate(predictor, ds_test: TraceDataset, pop: PopularityMatrix | None = None,
             aff: AffinityMatrix | None = None) -> HitRateReport:
    """Hit rates over every (trace, layer >= 1) pair of the test set.

    A top-k hit requires the predicted set to equal the true selection;
    an at-least-one hit requires a non-empty intersection. Accepts a
    bare ExpertMLP (with pop/aff) or any object with predict(trace, l).
    """
    if len(ds_test.traces) == 0:
        raise PredictorError("cannot evaluate on an empty test set")
    if isinstance(predictor, ExpertMLP):
        if pop is None or aff is None:
            raise PredictorError("evaluating a raw network needs popularity and affinity")
        predictor = MLPPredictor(predictor, pop, aff)
    if isinstance(predictor, MLPPredictor):
        lookup = PrecomputedPredictor.from_net(predictor.net, ds_test,
                                               predictor.pop, predictor.aff)
        name = predictor.name
        predictor = lookup
    else:
        name = getattr(predictor, "name", type(predictor).__name__)
    layer_hits = {l: [0, 0, 0] for l in range(1, ds_test.L)}  # topk, at_least_one, n
    for t in ds_test.traces:
        for l in range(1, ds_test.L):
            predicted = set(predictor.predict(t, l))
            true = set(t.path[l])
            cell = layer_hits[l]
            cell[0] += predicted == true
            cell[1] += bool(predicted & true)
            cell[2] += 1
    per_layer = [
        {"layer": l, "topk_hit_rate": c[0] / c[2], "at_least_one_rate": c[1] / c[2], "n": c[2]}
        for l, c in sorted(layer_hits.items())
    ]
    total = sum(c[2] for c in layer_hits.values())
    topk = sum(c[0] for c in layer_hits.values()) / total
    alo = sum(c[1] for c in layer_hits.values()) / total
    return HitRateReport(topk_hit_rate=topk, at_least_one_rate=alo,
                         per_layer=per_layer, n_evaluated=total, predictor=name)


# ---------------------------------------------------------------------------
# serialization


def _array_specs(net: ExpertMLP) -> list[tuple[str, np.ndarray]]:
    specs = []
    for i in range(len(net.W)):
        specs.append((f"W{i}", net.W[i]))
        specs.append((f"b{i}", net.b[i]))
    for i in range(len(net.hidden)):
        specs.append((f"gamma{i}", net.gamma[i]))
        specs.append((f"beta{i}", net.beta[i]))
        specs.append((f"run_mean{i}", net.run_mean[i]))
        specs.append((f"run_var{i}", net.run_var[i]))
    return specs


def save_model(net: ExpertMLP, path) -> None:
    """Write the versioned container: one JSON header line + raw float64 data."""
    specs = _array_specs(net)
    header = {
        "format": "duoserve-expertmlp",
        "version": 1,
        "input_dim": net.input_dim,
        "output_dim": net.output_dim,
        "hidden": list(net.hidden),
        "dropout": net.dropout,
        "seed": net.seed,
        "meta": net.meta,
        "arrays": [{"name": name, "shape": list(a.shape)} for name, a in specs],
    }
    with Path(path).open("wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for _, a in specs:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_model(path) -> ExpertMLP:
    path = Path(path)
    raw = path.read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise PredictorError(f"{path}: not a model container (missing header)")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise PredictorError(f"{path}: bad model header: {e}") from e
    if header.get("format") != "duoserve-expertmlp" or header.get("version") != 1:
        raise PredictorError(f"{path}: unsupported model format/version")
    net = ExpertMLP(header["input_dim"], header["output_dim"],
                    hidden=header["hidden"], dropout=header["dropout"],
                    seed=header.get("seed", 0), meta=header.get("meta", {}))
    offset = nl + 1
    arrays = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * 8
        if end > len(raw):
            raise PredictorError(f"{path}: truncated model data at array {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
    try:
        for i in range(len(net.W)):
            net.W[i] = arrays[f"W{i}"]
            net.b[i] = arrays[f"b{i}"]
        for i in range(len(net.hidden)):
            net.gamma[i] = arrays[f"gamma{i}"]
            net.beta[i] = arrays[f"beta{i}"]
            net.run_mean[i] = arrays[f"run_mean{i}"]
            net.run_var[i] = arrays[f"run_var{i}"]
    except KeyError as e:
        raise PredictorError(f"{path}: model container missing array {e}") from e
    return net
