"""Learned difficulty regressor: a 4-layer MLP trained from scratch.

The model maps a prompt embedding to the log of the target perplexity the
corresponding one-example prompt produces.  Training on the log keeps the
regression target in a sane numeric range (raw perplexities span many orders
of magnitude) and leaves every ranking unchanged, since log is monotone.

Architecture: input standardization, then three blocks of
(affine -> batch norm -> ReLU) with widths 256/128/64, then a final affine to
a scalar.  Batch norm uses batch statistics during training and running
statistics (momentum 0.1) at inference.  Optimization is Adam on the mean
squared error; everything is plain numpy and fully deterministic for a fixed
seed.

Model files are UTF-8 JSON documents (sorted keys, no whitespace) with a
``format_version`` field, explicit layer widths, flattened row-major weight
arrays, batch-norm statistics, the input standardization vectors, and the
training metadata, so any implementation can read them; see README for the
field-by-field layout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .backend import EmbeddingVector, ScoringBackend, parallel_map
from .dataset import CodingTask
from .errors import DomainError, TrainingError
from .metrics import target_perplexity
from .prompting import PromptTemplate, render_prompt

HIDDEN_WIDTHS = (256, 128, 64)
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
STD_FLOOR = 1e-8
FORMAT_VERSION = 1
FULL_BATCH_LIMIT = 1024


@dataclass(frozen=True)
class TrainingPair:
    """One (embedding -> log target perplexity) supervision pair."""

    task_id: str
    example_id: int
    embedding: EmbeddingVector
    target: float
    raw_target: float

    def __post_init__(self):
        if self.raw_target < 1.0:
            raise DomainError(f"raw_target must be >= 1, got {self.raw_target!r}")
        expected = math.log(self.raw_target)
        if abs(self.target - expected) > 1e-9 * max(1.0, abs(expected)):
            raise DomainError(
                f"target {self.target!r} is not ln(raw_target) ({expected!r})"
            )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int | None = None  # None: full batch up to FULL_BATCH_LIMIT rows
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise DomainError("learning_rate must be > 0")
        if self.epochs < 1:
            raise DomainError("epochs must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise DomainError("batch_size must be >= 1 when given")


class MlpModel:
    """Weights, batch-norm state, and input standardization of the regressor.

    ``hidden_widths`` defaults to the canonical (256, 128, 64); other widths
    are accepted so tests can hand-build tiny instances, but training always
    produces the canonical shape.
    """

    def __init__(
        self,
        input_dim: int,
        hidden_widths: Sequence[int] = HIDDEN_WIDTHS,
        *,
        rng: np.random.Generator | None = None,
        metadata: dict | None = None,
    ):
        if input_dim < 1:
            raise DomainError("input_dim must be >= 1")
        self.input_dim = int(input_dim)
        self.hidden_widths = tuple(int(w) for w in hidden_widths)
        self.metadata = dict(metadata or {})

        widths = [self.input_dim, *self.hidden_widths, 1]
        rng = rng or np.random.default_rng(0)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            # He initialization, suited to the ReLU blocks
            self.weights.append(rng.standard_normal((fan_out, fan_in)) * math.sqrt(2.0 / fan_in))
            self.biases.append(np.zeros(fan_out))
        self.bn_scale = [np.ones(w) for w in self.hidden_widths]
        self.bn_shift = [np.zeros(w) for w in self.hidden_widths]
        self.bn_mean = [np.zeros(w) for w in self.hidden_widths]
        self.bn_var = [np.ones(w) for w in self.hidden_widths]
        self.input_mean = np.zeros(self.input_dim)
        self.input_std = np.ones(self.input_dim)

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> list[np.ndarray]:
        """Trainable tensors in a fixed order (weights, biases, bn scale/shift)."""
        params: list[np.ndarray] = []
        for layer in range(len(self.weights)):
            params.append(self.weights[layer])
            params.append(self.biases[layer])
            if layer < len(self.hidden_widths):
                params.append(self.bn_scale[layer])
                params.append(self.bn_shift[layer])
        return params

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.input_mean) / self.input_std

    # -- inference ----------------------------------------------------------

    def forward_array(self, x: np.ndarray) -> np.ndarray:
        """Batched inference pass using running batch-norm statistics."""
        a = self.standardize(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        for layer in range(len(self.hidden_widths)):
            z = a @ self.weights[layer].T + self.biases[layer]
            z_hat = (z - self.bn_mean[layer]) / np.sqrt(self.bn_var[layer] + BN_EPS)
            a = np.maximum(self.bn_scale[layer] * z_hat + self.bn_shift[layer], 0.0)
        return (a @ self.weights[-1].T + self.biases[-1])[:, 0]

    def predict(self, embedding: EmbeddingVector) -> float:
        if len(embedding.values) != self.input_dim:
            raise DomainError(
                f"embedding dimension {len(embedding.values)} does not match "
                f"model input_dim {self.input_dim}"
            )
        return float(self.forward_array(embedding.as_array())[0])

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "output_dim": 1,
            "weights": [w.reshape(-1).tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "batchnorm": {
                "scale": [g.tolist() for g in self.bn_scale],
                "shift": [s.tolist() for s in self.bn_shift],
                "running_mean": [m.tolist() for m in self.bn_mean],
                "running_var": [v.tolist() for v in self.bn_var],
            },
            "standardization": {
                "mean": self.input_mean.tolist(),
                "std": self.input_std.tolist(),
            },
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MlpModel":
        if data.get("format_version") != FORMAT_VERSION:
            raise DomainError(f"unsupported model format_version {data.get('format_version')!r}")
        model = cls(data["input_dim"], data["hidden_widths"], metadata=data.get("metadata"))
        widths = [model.input_dim, *model.hidden_widths, 1]
        for layer, flat in enumerate(data["weights"]):
            model.weights[layer] = np.asarray(flat, dtype=np.float64).reshape(
                widths[layer + 1], widths[layer]
            )
        model.biases = [np.asarray(b, dtype=np.float64) for b in data["biases"]]
        bn = data["batchnorm"]
        model.bn_scale = [np.asarray(v, dtype=np.float64) for v in bn["scale"]]
        model.bn_shift = [np.asarray(v, dtype=np.float64) for v in bn["shift"]]
        model.bn_mean = [np.asarray(v, dtype=np.float64) for v in bn["running_mean"]]
        model.bn_var = [np.asarray(v, dtype=np.float64) for v in bn["running_var"]]
        model.input_mean = np.asarray(data["standardization"]["mean"], dtype=np.float64)
        model.input_std = np.asarray(data["standardization"]["std"], dtype=np.float64)
        return model

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n",
            encoding="utf-8",
        )
        return path

    @classmethod
    def load(cls, path) -> "MlpModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def copy_state(self) -> list[np.ndarray]:
        return [arr.copy() for arr in (*self.parameters(), *self.bn_mean, *self.bn_var)]

    def restore_state(self, state: Sequence[np.ndarray]) -> None:
        targets = [*self.parameters(), *self.bn_mean, *self.bn_var]
        for dst, src in zip(targets, state):
            dst[...] = src


def forward(model: MlpModel, embedding: EmbeddingVector) -> float:
    """Predicted log target perplexity for one embedding."""
    return model.predict(embedding)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _forward_train(model: MlpModel, x: np.ndarray, *, update_running: bool):
    """Training-mode forward pass (batch statistics); returns pred and caches."""
    a = x
    caches = []
    for layer in range(len(model.hidden_widths)):
        z = a @ model.weights[layer].T + model.biases[layer]
        mu = z.mean(axis=0)
        var = z.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        z_hat = (z - mu) * inv_std
        h = model.bn_scale[layer] * z_hat + model.bn_shift[layer]
        a_next = np.maximum(h, 0.0)
        if update_running:
            model.bn_mean[layer] *= 1.0 - BN_MOMENTUM
            model.bn_mean[layer] += BN_MOMENTUM * mu
            model.bn_var[layer] *= 1.0 - BN_MOMENTUM
            model.bn_var[layer] += BN_MOMENTUM * var
        caches.append((a, inv_std, z_hat, h))
        a = a_next
    pred = a @ model.weights[-1].T + model.biases[-1]
    return pred, caches, a


def _backward_train(model, x, y, pred, caches, last_a) -> list[np.ndarray]:
    """Gradients of the batch MSE w.r.t. parameters(), training-mode batch norm."""
    batch = x.shape[0]
    grads: dict[int, np.ndarray] = {}
    d_pred = 2.0 * (pred - y) / (batch * pred.shape[1])
    d_w_final = d_pred.T @ last_a
    d_b_final = d_pred.sum(axis=0)
    d_a = d_pred @ model.weights[-1]
    for layer in reversed(range(len(model.hidden_widths))):
        a_prev, inv_std, z_hat, h = caches[layer]
        d_h = d_a * (h > 0.0)
        d_scale = (d_h * z_hat).sum(axis=0)
        d_shift = d_h.sum(axis=0)
        d_z_hat = d_h * model.bn_scale[layer]
        # batch-norm backward through the batch mean and variance
        d_z = (
            inv_std
            / batch
            * (
                batch * d_z_hat
                - d_z_hat.sum(axis=0)
                - z_hat * (d_z_hat * z_hat).sum(axis=0)
            )
        )
        grads[4 * layer + 0] = d_z.T @ a_prev
        grads[4 * layer + 1] = d_z.sum(axis=0)
        grads[4 * layer + 2] = d_scale
        grads[4 * layer + 3] = d_shift
        d_a = d_z @ model.weights[layer]
    final = 4 * len(model.hidden_widths)
    grads[final] = d_w_final
    grads[final + 1] = d_b_final
    return [grads[i] for i in range(len(model.parameters()))]


def _pairs_to_arrays(pairs: Sequence[TrainingPair]) -> tuple[np.ndarray, np.ndarray]:
    dims = {len(p.embedding.values) for p in pairs}
    if len(dims) != 1:
        raise DomainError(f"embedding dimensions differ across pairs: {sorted(dims)}")
    x = np.asarray([p.embedding.values for p in pairs], dtype=np.float64)
    y = np.asarray([[p.target] for p in pairs], dtype=np.float64)
    return x, y


def train(
    pairs: Sequence[TrainingPair],
    config: TrainConfig | None = None,
    val_pairs: Sequence[TrainingPair] | None = None,
) -> MlpModel:
    """Fit the regressor by Adam on MSE; deterministic for a fixed seed.

    When ``val_pairs`` is given, validation MSE is recorded every epoch and
    the returned model is the best-validation checkpoint; otherwise it is the
    final state.  Loss curves live in ``model.metadata``.
    """
    config = config or TrainConfig()
    if len(pairs) < 2:
        raise DomainError("training needs at least 2 pairs")
    x_raw, y = _pairs_to_arrays(pairs)
    n_rows, dim = x_raw.shape

    rng = np.random.default_rng(config.seed)
    model = MlpModel(dim, rng=rng)
    model.input_mean = x_raw.mean(axis=0)
    model.input_std = np.maximum(x_raw.std(axis=0), STD_FLOOR)
    x = model.standardize(x_raw)

    x_val = y_val = None
    if val_pairs:
        xv_raw, y_val = _pairs_to_arrays(val_pairs)
        if xv_raw.shape[1] != dim:
            raise DomainError("validation pairs have a different embedding dimension")
        x_val = xv_raw
        y_val = y_val[:, 0]

    batch_size = config.batch_size or (n_rows if n_rows <= FULL_BATCH_LIMIT else 256)
    batch_size = min(batch_size, n_rows)

    params = model.parameters()
    m_state = [np.zeros_like(p) for p in params]
    v_state = [np.zeros_like(p) for p in params]
    step = 0
    train_curve: list[float] = []
    val_curve: list[float] = []
    best_val = math.inf
    best_state: list[np.ndarray] | None = None

    # overflow shows up as a non-finite loss, which is reported explicitly
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(config.epochs):
            order = np.arange(n_rows) if batch_size >= n_rows else rng.permutation(n_rows)
            epoch_sse = 0.0
            for start in range(0, n_rows, batch_size):
                idx = order[start : start + batch_size]
                pred, caches, last_a = _forward_train(model, x[idx], update_running=True)
                residual = pred - y[idx]
                loss = float(np.mean(residual**2))
                if not math.isfinite(loss):
                    raise TrainingError(f"non-finite training loss at epoch {epoch}")
                epoch_sse += loss * len(idx)
                grads = _backward_train(model, x[idx], y[idx], pred, caches, last_a)
                step += 1
                correction1 = 1.0 - config.beta1**step
                correction2 = 1.0 - config.beta2**step
                for p, g, m, v in zip(params, grads, m_state, v_state):
                    m *= config.beta1
                    m += (1.0 - config.beta1) * g
                    v *= config.beta2
                    v += (1.0 - config.beta2) * g * g
                    p -= config.learning_rate * (m / correction1) / (
                        np.sqrt(v / correction2) + config.eps
                    )
            train_curve.append(epoch_sse / n_rows)
            if x_val is not None:
                val_mse = float(np.mean((model.forward_array(x_val) - y_val) ** 2))
                val_curve.append(val_mse)
                if val_mse < best_val:
                    best_val = val_mse
                    best_state = model.copy_state()

    if best_state is not None:
        model.restore_state(best_state)
    model.metadata = {
        "seed": config.seed,
        "epochs": config.epochs,
        "learning_rate": config.learning_rate,
        "batch_size": batch_size,
        "n_train_pairs": n_rows,
        "train_mse": train_curve,
        "val_mse": val_curve,
        "best_val_mse": None if not val_curve else best_val,
    }
    return model


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


def _inference_loss(model: MlpModel, x_std: np.ndarray, target: float) -> float:
    a = x_std
    for layer in range(len(model.hidden_widths)):
        z = model.weights[layer] @ a + model.biases[layer]
        z_hat = (z - model.bn_mean[layer]) / np.sqrt(model.bn_var[layer] + BN_EPS)
        a = np.maximum(model.bn_scale[layer] * z_hat + model.bn_shift[layer], 0.0)
    pred = float((model.weights[-1] @ a + model.biases[-1])[0])
    return (pred - target) ** 2


def _inference_loss_grads(model: MlpModel, x_std: np.ndarray, target: float):
    activations = [x_std]
    pre_relu = []
    z_hats = []
    a = x_std
    for layer in range(len(model.hidden_widths)):
        z = model.weights[layer] @ a + model.biases[layer]
        z_hat = (z - model.bn_mean[layer]) / np.sqrt(model.bn_var[layer] + BN_EPS)
        h = model.bn_scale[layer] * z_hat + model.bn_shift[layer]
        a = np.maximum(h, 0.0)
        z_hats.append(z_hat)
        pre_relu.append(h)
        activations.append(a)
    pred = float((model.weights[-1] @ a + model.biases[-1])[0])
    loss = (pred - target) ** 2

    grads: dict[int, np.ndarray] = {}
    d_pred = 2.0 * (pred - target)
    final = 4 * len(model.hidden_widths)
    grads[final] = d_pred * activations[-1][None, :]
    grads[final + 1] = np.array([d_pred])
    d_a = d_pred * model.weights[-1][0]
    for layer in reversed(range(len(model.hidden_widths))):
        d_h = d_a * (pre_relu[layer] > 0.0)
        grads[4 * layer + 2] = d_h * z_hats[layer]
        grads[4 * layer + 3] = d_h.copy()
        d_z = d_h * model.bn_scale[layer] / np.sqrt(model.bn_var[layer] + BN_EPS)
        grads[4 * layer + 0] = np.outer(d_z, activations[layer])
        grads[4 * layer + 1] = d_z.copy()
        d_a = model.weights[layer].T @ d_z
    return loss, [grads[i] for i in range(len(model.parameters()))]


def gradient_check(
    model: MlpModel,
    pair: TrainingPair,
    *,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max discrepancy between analytic and central finite-difference gradients.

    The loss is the squared error of the model's (inference-mode) prediction
    on the pair.  The discrepancy is relative except near stationary points,
    where both gradients vanish and the absolute difference is reported.
    ``max_coords`` caps how many parameter coordinates are probed (a seeded
    sample covering every tensor); the default probes all of them, which is
    thorough but slow for the full-width architecture.
    """
    if len(pair.embedding.values) != model.input_dim:
        raise DomainError("embedding dimension does not match model input_dim")
    x_std = model.standardize(pair.embedding.as_array())
    _, analytic = _inference_loss_grads(model, x_std, pair.target)
    params = model.parameters()

    coords: list[tuple[int, int]] = []
    if max_coords is None:
        for t_idx, p in enumerate(params):
            coords.extend((t_idx, f_idx) for f_idx in range(p.size))
    else:
        rng = np.random.default_rng(seed)
        sizes = np.array([p.size for p in params])
        # every tensor contributes; leftover probes spread by size
        per_tensor = np.ones(len(params), dtype=int)
        remaining = max(max_coords - len(params), 0)
        extra = (remaining * sizes / sizes.sum()).astype(int)
        for t_idx, p in enumerate(params):
            k = min(int(per_tensor[t_idx] + extra[t_idx]), p.size)
            chosen = rng.choice(p.size, size=k, replace=False)
            coords.extend((t_idx, int(f_idx)) for f_idx in chosen)

    h = 1e-5
    worst = 0.0
    for t_idx, f_idx in coords:
        tensor = params[t_idx]
        original = tensor.flat[f_idx]
        tensor.flat[f_idx] = original + h
        loss_plus = _inference_loss(model, x_std, pair.target)
        tensor.flat[f_idx] = original - h
        loss_minus = _inference_loss(model, x_std, pair.target)
        tensor.flat[f_idx] = original
        numeric = (loss_plus - loss_minus) / (2.0 * h)
        exact = analytic[t_idx].flat[f_idx]
        scale = max(abs(numeric), abs(exact))
        error = abs(numeric - exact) if scale < 1e-6 else abs(numeric - exact) / scale
        worst = max(worst, error)
    return worst


# ---------------------------------------------------------------------------
# Dataset collection
# ---------------------------------------------------------------------------


def collect_pairs(
    train_tasks: Sequence[CodingTask],
    template: PromptTemplate,
    backend: ScoringBackend,
    *,
    max_workers: int = 1,
) -> list[TrainingPair]:
    """One supervision pair per (task, pool example).

    The embedding is taken from the one-example prompt and the label is the
    log target perplexity that prompt yields.  Backend failures propagate;
    with a response cache enabled, a re-run recomputes only the missing
    pairs, which makes the cache the de-facto resume checkpoint.
    """
    if not train_tasks:
        raise DomainError("collect_pairs needs at least one task")

    jobs = [(task, example) for task in train_tasks for example in task.pool]

    def build(job) -> TrainingPair:
        task, example = job
        prompt = render_prompt(template, task.nl_description, [example])
        embedding = backend.embed(prompt)
        score = target_perplexity(task, [example], template, backend)
        return TrainingPair(
            task_id=task.task_id,
            example_id=example.id,
            embedding=embedding,
            target=score.log_value,
            raw_target=score.value,
        )

    return parallel_map(build, jobs, max_workers)


def write_pairs(pairs: Sequence[TrainingPair], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(
                json.dumps(
                    {
                        "task_id": pair.task_id,
                        "example_id": pair.example_id,
                        "target": pair.target,
                        "raw_target": pair.raw_target,
                        "embedding": {
                            "values": list(pair.embedding.values),
                            "source_layer": pair.embedding.source_layer,
                            "source_token": pair.embedding.source_token,
                            "backend_id": pair.embedding.backend_id,
                        },
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    return path


def load_pairs(path) -> list[TrainingPair]:
    pairs = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            emb = record["embedding"]
            pairs.append(
                TrainingPair(
                    task_id=record["task_id"],
                    example_id=record["example_id"],
                    embedding=EmbeddingVector(
                        values=tuple(emb["values"]),
                        source_layer=emb["source_layer"],
                        source_token=emb["source_token"],
                        backend_id=emb["backend_id"],
                    ),
                    target=record["target"],
                    raw_target=record["raw_target"],
                )
            )
    return pairs
