"""Synthetic family of related classification tasks and a tiny tanh MLP.

Every task rotates a shared set of class anchor means::

    x = R_t @ mu_c + noise_sigma * eps,    R_t = expm(sum_k theta_tk * A_k)

where the ``A_k`` are skew-symmetric generators shared by the whole family.
The anchor task has ``theta = 0``. Source and target angles scatter
around a common shift, so every task departs from the anchor in a related
way while still differing from one another.

Seeds: the family seed drives the family parameters; each sampled batch
gets its own seed, so datasets are a pure function of (family, angles,
sample seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ValidationError
from .optim import OptimState, adamw_step, lr_schedule
from .tensor_store import TensorContainer

N_GENERATORS = 4
LAYERS = ("W1", "b1", "W2", "b2")


def rng_for(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True, eq=False)
class LabeledData:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if x.ndim != 2 or x.shape[0] != y.shape[0]:
            raise ValidationError(f"features {x.shape} and labels {y.shape} disagree")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.y.shape[0]

    def subset(self, idx) -> "LabeledData":
        return LabeledData(self.x[idx], self.y[idx])

    def features(self) -> "UnlabeledData":
        return UnlabeledData(self.x)

    def batches(self, size: int) -> list["LabeledData"]:
        return [self.subset(slice(i, i + size)) for i in range(0, len(self), size)]

    def to_container(self, model_id="dataset", metadata=None) -> TensorContainer:
        return TensorContainer.from_arrays(
            model_id, "dataset", {"features": self.x, "labels": self.y.astype(np.float64)}, metadata
        )

    @classmethod
    def from_container(cls, c: TensorContainer) -> "LabeledData":
        if c.role != "dataset":
            raise ValidationError(f"expected a dataset container, got role={c.role!r}")
        return cls(c["features"], c["labels"].astype(np.int64))


@dataclass(frozen=True, eq=False)
class UnlabeledData:
    """Features only; the type deliberately has no label field."""

    x: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.float64))

    def __len__(self):
        return self.x.shape[0]


# -- rotations ---------------------------------------------------------------


def expm_skew(a: np.ndarray) -> np.ndarray:
    """Matrix exponential by scaling and squaring around a truncated Taylor series.

    The argument is scaled to 1-norm <= 0.5 and the series is cut once a
    term drops below 1e-18, well inside the 1e-12 accuracy target after
    squaring back.
    """
    a = np.asarray(a, dtype=np.float64)
    norm = np.linalg.norm(a, 1)
    squarings = max(0, int(math.ceil(math.log2(norm / 0.5)))) if norm > 0.5 else 0
    x = a / (2.0**squarings)
    out = np.eye(a.shape[0])
    term = np.eye(a.shape[0])
    for k in range(1, 40):
        term = term @ x / k
        out = out + term
        if np.linalg.norm(term, 1) < 1e-18:
            break
    for _ in range(squarings):
        out = out @ out
    return out


@dataclass(frozen=True, eq=False)
class TaskFamily:
    anchor_means: np.ndarray  # C x d
    generators: np.ndarray  # 4 x d x d, skew-symmetric
    source_angles: np.ndarray  # N x 4
    target_angles: np.ndarray  # 4
    noise_sigma: float = 0.3
    hidden: int = 16
    seed: int = 0

    @property
    def input_dim(self) -> int:
        return self.anchor_means.shape[1]

    @property
    def classes(self) -> int:
        return self.anchor_means.shape[0]

    @property
    def n_sources(self) -> int:
        return self.source_angles.shape[0]

    def angles(self, task) -> np.ndarray:
        if isinstance(task, str):
            if task == "anchor":
                return np.zeros(N_GENERATORS)
            if task == "target":
                return self.target_angles
            raise ValidationError(f"unknown task {task!r}")
        if isinstance(task, (int, np.integer)):
            return self.source_angles[task]
        theta = np.asarray(task, dtype=np.float64)
        if theta.shape != (N_GENERATORS,):
            raise ValidationError(f"task angles must have length {N_GENERATORS}")
        return theta

    def rotation(self, task) -> np.ndarray:
        theta = self.angles(task)
        return expm_skew(np.tensordot(theta, self.generators, axes=1))

    def to_container(self) -> TensorContainer:
        arrays = {
            "anchor_means": self.anchor_means,
            "source_angles": self.source_angles,
            "target_angles": self.target_angles,
        }
        for k, g in enumerate(self.generators):
            arrays[f"generator::{k}"] = g
        meta = {"noise_sigma": repr(self.noise_sigma), "hidden": str(self.hidden), "seed": str(self.seed)}
        return TensorContainer.from_arrays(f"family-{self.seed}", "family", arrays, meta)

    @classmethod
    def from_container(cls, c: TensorContainer) -> "TaskFamily":
        if c.role != "family":
            raise ValidationError(f"expected a family container, got role={c.role!r}")
        gens = np.stack([c[f"generator::{k}"] for k in range(N_GENERATORS)])
        return cls(
            anchor_means=c["anchor_means"],
            generators=gens,
            source_angles=c["source_angles"],
            target_angles=c["target_angles"],
            noise_sigma=float(c.metadata["noise_sigma"]),
            hidden=int(c.metadata["hidden"]),
            seed=int(c.metadata["seed"]),
        )


def make_task_family(
    seed: int,
    input_dim: int = 32,
    classes: int = 8,
    hidden: int = 16,
    n_sources: int = 8,
    noise_sigma: float = 0.3,
    mean_scale: float = 1.0,
    shift: float = 2.0,
    jitter: float = 0.3,
) -> TaskFamily:
    """Draw a family. ``shift`` is the length of the common angle offset shared
    by all non-anchor tasks; ``jitter`` is the per-task spread around it."""
    rng = rng_for(seed)
    means = rng.standard_normal((classes, input_dim)) * mean_scale
    gens = []
    for _ in range(N_GENERATORS):
        g = rng.standard_normal((input_dim, input_dim)) / math.sqrt(input_dim)
        gens.append(0.5 * (g - g.T))
    direction = rng.standard_normal(N_GENERATORS)
    center = shift * direction / np.linalg.norm(direction)
    source = center + jitter * rng.standard_normal((n_sources, N_GENERATORS))
    target = center + jitter * rng.standard_normal(N_GENERATORS)
    return TaskFamily(means, np.stack(gens), source, target, float(noise_sigma), hidden, seed)


def sample_batch(family: TaskFamily, task, n: int, seed: int) -> LabeledData:
    if n < 1:
        raise ValidationError("n must be at least 1")
    rng = rng_for(seed)
    labels = rng.integers(0, family.classes, size=n)
    noise = rng.standard_normal((n, family.input_dim))
    rotated = family.anchor_means @ family.rotation(task).T
    return LabeledData(rotated[labels] + family.noise_sigma * noise, labels)


def kshot_support(dataset: LabeledData, k: int, seed: int, classes: int | None = None) -> LabeledData:
    """Exactly ``k`` examples per class, drawn without replacement."""
    if k < 1:
        raise ValidationError("k must be at least 1")
    classes = classes or int(dataset.y.max()) + 1
    rng = rng_for(seed)
    picked = []
    for c in range(classes):
        pool = np.flatnonzero(dataset.y == c)
        if pool.size < k:
            raise ValidationError(f"class {c} has {pool.size} examples, need {k}")
        picked.append(rng.choice(pool, size=k, replace=False))
    idx = np.sort(np.concatenate(picked))
    return dataset.subset(idx)


# -- model -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ToyModel:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def to_container(self, model_id="model", metadata=None) -> TensorContainer:
        return TensorContainer.from_arrays(model_id, "checkpoint", self.arrays(), metadata)

    @classmethod
    def from_arrays(cls, arrays) -> "ToyModel":
        return cls(*(np.asarray(arrays[k], dtype=np.float64) for k in LAYERS))

    @classmethod
    def from_container(cls, c: TensorContainer) -> "ToyModel":
        return cls.from_arrays(c)


def init_model(input_dim: int, hidden: int, classes: int, seed: int) -> ToyModel:
    rng = rng_for(seed)
    return ToyModel(
        rng.standard_normal((hidden, input_dim)) / math.sqrt(input_dim),
        np.zeros(hidden),
        rng.standard_normal((classes, hidden)) / math.sqrt(hidden),
        np.zeros(classes),
    )


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def forward(model: ToyModel, x: np.ndarray):
    """Logits plus the activations ``backward`` needs."""
    hidden = np.tanh(x @ model.W1.T + model.b1)
    logits = hidden @ model.W2.T + model.b2
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite activations in forward pass")
    return logits, (x, hidden)


def backward(model: ToyModel, cache, dlogits: np.ndarray):
    """Weight and bias gradients for an arbitrary upstream ``dL/dlogits``."""
    x, hidden = cache
    g_w2 = dlogits.T @ hidden
    g_b2 = dlogits.sum(axis=0)
    d_pre = (dlogits @ model.W2) * (1.0 - hidden * hidden)
    g_w1 = d_pre.T @ x
    g_b1 = d_pre.sum(axis=0)
    return {"W1": g_w1, "W2": g_w2}, {"b1": g_b1, "b2": g_b2}


def cross_entropy(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient in the logits."""
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -float(np.mean(logp[np.arange(n), y]))
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


def mlp_forward_backward(model: ToyModel, batch: LabeledData):
    if len(batch) == 0:
        raise ValidationError("empty batch")
    logits, cache = forward(model, batch.x)
    loss, dlogits = cross_entropy(logits, batch.y)
    weight_grads, bias_grads = backward(model, cache, dlogits)
    return loss, weight_grads, bias_grads


def predict(model: ToyModel, x: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lower class index
    return np.argmax(forward(model, x)[0], axis=1)


def accuracy(model: ToyModel, data: LabeledData) -> float:
    if len(data) == 0:
        raise ValidationError("empty dataset")
    return float(np.mean(predict(model, data.x) == data.y))


def finetune_full(
    theta_init: ToyModel,
    data: LabeledData,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
    warmup_epochs: int = 2,
    weight_decay: float = 0.0,
) -> ToyModel:
    """Train every weight and bias with AdamW and the warmup-cosine schedule."""
    if len(data) == 0:
        raise ValidationError("empty training data")
    params = theta_init.arrays()
    if epochs == 0:
        return ToyModel.from_arrays(params)
    rng = rng_for(seed)
    n = len(data)
    per_epoch = math.ceil(n / batch_size)
    total = epochs * per_epoch
    warmup = min(warmup_epochs * per_epoch, total - 1)
    state = OptimState(lr_max=lr, weight_decay=weight_decay, epochs=epochs, batch_size=batch_size)
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = data.subset(order[start : start + batch_size])
            _, wg, bg = mlp_forward_backward(ToyModel.from_arrays(params), batch)
            params, state = adamw_step(state, params, {**wg, **bg}, lr_schedule(step, total, warmup, lr))
            step += 1
    return ToyModel.from_arrays(params)
