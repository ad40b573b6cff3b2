"""Label-free test-time adaptation of the diagonal coefficients.

A FixMatch-style loop: the weak view of each input supplies a sharpened
pseudo-label, the strong view is trained toward it, and only confident
rows contribute. A small per-class set of the initial model's most
confident predictions is frozen as one-hot anchors and mixed into every
batch.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .adapt import as_vectors, check_sigmas, compose_toy, sigma_grads
from .coefficients import SigmaVector
from .errors import ValidationError
from .optim import OptimState, adamw_step, lr_schedule
from .spectral import SpectralBasis
from .taskgen import LabeledData, UnlabeledData, backward, forward, rng_for, softmax
from .tensor_store import TensorContainer

SHARPEN_MODES = ("temperature", "literal")


def gaussian_noise(sigma: float) -> Callable:
    def augment(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return x + sigma * rng.standard_normal(x.shape)

    return augment


@dataclass(frozen=True)
class TtaConfig:
    tau: float = 0.99
    temperature: float = 0.5
    batch_size: int = 64
    epochs: int = 10
    aug_noise_sigma: float = 0.1
    sharpen_mode: str = "temperature"
    lr_max: float = 1e-3
    warmup_epochs: int = 2
    weight_decay: float = 0.0
    augment: Callable | None = field(default=None, compare=False)

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ValidationError("tau must lie in (0, 1]")
        if self.temperature <= 0:
            raise ValidationError("temperature must be positive")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValidationError("batch_size must be an even number >= 2")
        if self.aug_noise_sigma < 0:
            raise ValidationError("aug_noise_sigma must be nonnegative")
        if self.sharpen_mode not in SHARPEN_MODES:
            raise ValidationError(f"sharpen_mode must be one of {SHARPEN_MODES}")

    def strong_view(self) -> Callable:
        return self.augment or gaussian_noise(self.aug_noise_sigma)


@dataclass(frozen=True, eq=False)
class TrustedSet:
    indices: np.ndarray
    one_hot_targets: Mapping[int, int]
    k_per_class: int

    def __len__(self):
        return len(self.indices)


@dataclass(frozen=True)
class TtaReport:
    losses: tuple[float, ...]
    masked_fracs: tuple[float, ...]
    n_trusted: int
    k_per_class: int
    steps_taken: int

    def json_lines(self) -> list[str]:
        lines = [
            json.dumps({"epoch": i, "loss": loss, "masked_frac": frac})
            for i, (loss, frac) in enumerate(zip(self.losses, self.masked_fracs))
        ]
        lines.append(
            json.dumps(
                {"summary": True, "n_trusted": self.n_trusted, "k_per_class": self.k_per_class, "steps": self.steps_taken}
            )
        )
        return lines


def trusted_per_class(n: int, c: int) -> int:
    return int(min(max(math.floor((n / c) / 10), 1), 100))


def mine_trusted(probs) -> TrustedSet:
    """Top-k most confident samples per class, k = clamp(floor(N/C/10), 1, 100).

    Candidates for class c are the samples whose argmax is c, so a sample
    can only be trusted for its own predicted class.
    """
    probs = np.asarray(probs, dtype=np.float64)
    n, c = probs.shape
    if n < c:
        raise ValidationError(f"need at least as many samples as classes, got N={n}, C={c}")
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6, rtol=0):
        raise ValidationError("probability rows must sum to 1")
    k = trusted_per_class(n, c)
    pred = np.argmax(probs, axis=1)
    picked = []
    for cls in range(c):
        pool = np.flatnonzero(pred == cls)
        order = np.argsort(-probs[pool, cls], kind="stable")
        picked.append(pool[order[:k]])
    idx = np.sort(np.concatenate(picked)).astype(np.int64)
    return TrustedSet(idx, {int(i): int(pred[i]) for i in idx}, k)


def sharpen(logits, temperature: float = 0.5, mode: str = "temperature") -> np.ndarray:
    """Temperature softmax ``softmax(z / T)``.

    ``mode="literal"`` instead scales ``softmax(z)`` by 0.5 and renormalizes,
    which returns the plain softmax unchanged.
    """
    z = np.asarray(logits, dtype=np.float64)
    if mode == "temperature":
        if temperature <= 0:
            raise ValidationError("temperature must be positive")
        return softmax(z / temperature)
    if mode == "literal":
        q = 0.5 * softmax(z)
        return q / q.sum(axis=-1, keepdims=True)
    raise ValidationError(f"unknown sharpen mode {mode!r}")


def _ufm(strong_logits, weak_logits, trusted_mask, trusted_targets, cfg: TtaConfig):
    strong = np.asarray(strong_logits, dtype=np.float64)
    weak = np.asarray(weak_logits, dtype=np.float64)
    trusted = np.asarray(trusted_mask, dtype=bool)
    if strong.shape != weak.shape or trusted.shape != (strong.shape[0],):
        raise ValidationError("strong logits, weak logits and trusted mask disagree in shape")
    q = sharpen(weak, cfg.temperature, cfg.sharpen_mode)
    rows = np.flatnonzero(trusted)
    if rows.size:
        q[rows] = 0.0
        q[rows, np.asarray(trusted_targets)[rows]] = 1.0
    mask = (q.max(axis=1) > cfg.tau) | trusted
    count = int(mask.sum())
    if count == 0:
        return 0.0, 0, np.zeros_like(strong)
    logp = strong - strong.max(axis=1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
    per_row = -(q * logp).sum(axis=1)
    loss = float(per_row[mask].sum() / count)
    grad = (np.exp(logp) - q) * mask[:, None] / count
    return loss, count, grad


def ufm_loss(strong_logits, weak_logits, trusted_mask, trusted_targets, cfg: TtaConfig | None = None):
    """Confidence-masked cross-entropy of strong-view logits against pseudo-labels.

    Returns ``(loss, masked_count)``; with nothing above threshold and no
    trusted rows the loss is exactly 0.
    """
    loss, count, _ = _ufm(strong_logits, weak_logits, trusted_mask, trusted_targets, cfg or TtaConfig())
    return loss, count


def _trusted_stream(trusted: np.ndarray, rng: np.random.Generator):
    while True:
        yield from trusted[rng.permutation(trusted.size)]


def tta_run(
    theta_0: TensorContainer,
    basis_set: Mapping[str, SpectralBasis],
    sigma_init,
    unlabeled,
    cfg: TtaConfig | None = None,
    seed: int = 0,
    trusted: TrustedSet | None = None,
    log=None,
) -> tuple[dict[str, SigmaVector], TtaReport]:
    cfg = cfg or TtaConfig()
    if isinstance(unlabeled, LabeledData):
        raise ValidationError("tta_run takes unlabeled features; pass dataset.features()")
    x_all = unlabeled.x if isinstance(unlabeled, UnlabeledData) else np.asarray(unlabeled, dtype=np.float64)
    if x_all.ndim != 2 or x_all.shape[0] == 0:
        raise ValidationError("unlabeled feature set is empty")

    base = theta_0.arrays()
    params = as_vectors(sigma_init)
    check_sigmas(basis_set, params)

    init_logits, _ = forward(compose_toy(base, basis_set, params), x_all)
    targets = np.argmax(init_logits, axis=1)
    if trusted is None:
        trusted = mine_trusted(softmax(init_logits))
    trusted_idx = np.asarray(trusted.indices, dtype=np.int64)
    is_trusted = np.zeros(x_all.shape[0], dtype=bool)
    is_trusted[trusted_idx] = True
    for i, c in trusted.one_hot_targets.items():
        targets[i] = c
    unl_idx = np.flatnonzero(~is_trusted)
    if unl_idx.size == 0:
        unl_idx = trusted_idx

    half = cfg.batch_size // 2
    per_epoch = math.ceil(unl_idx.size / half)
    total = cfg.epochs * per_epoch
    warmup = min(cfg.warmup_epochs * per_epoch, max(total - 1, 0))
    opt = OptimState(lr_max=cfg.lr_max, weight_decay=cfg.weight_decay, epochs=cfg.epochs, batch_size=cfg.batch_size)
    augment = cfg.strong_view()
    rng_unl, rng_trust, rng_aug = (rng_for(s) for s in np.random.SeedSequence(seed).spawn(3))
    stream = _trusted_stream(trusted_idx, rng_trust) if trusted_idx.size else None

    losses, fracs = [], []
    steps = 0
    for epoch in range(cfg.epochs):
        order = unl_idx[rng_unl.permutation(unl_idx.size)]
        loss_sum, rows_seen, rows_masked, batches = 0.0, 0, 0, 0
        for start in range(0, order.size, half):
            unl = order[start : start + half]
            tr = np.array([next(stream) for _ in range(half)], dtype=np.int64) if stream else np.empty(0, np.int64)
            idx = np.concatenate([unl, tr])
            x = x_all[idx]
            model = compose_toy(base, basis_set, params)
            weak_logits, _ = forward(model, x)
            strong_logits, cache = forward(model, augment(x, rng_aug))
            mask = np.zeros(idx.size, dtype=bool)
            mask[unl.size :] = True
            mask |= is_trusted[idx]
            loss, count, dlogits = _ufm(strong_logits, weak_logits, mask, targets[idx], cfg)
            lr = lr_schedule(steps, total, warmup, cfg.lr_max) if total else 0.0
            if count:
                wg, _ = backward(model, cache, dlogits)
                params, opt = adamw_step(opt, params, sigma_grads(wg, basis_set), lr)
            steps += 1
            loss_sum += loss
            rows_seen += idx.size
            rows_masked += count
            batches += 1
        losses.append(loss_sum / max(batches, 1))
        fracs.append(rows_masked / max(rows_seen, 1))
        if log is not None:
            log(json.dumps({"epoch": epoch, "loss": losses[-1], "masked_frac": fracs[-1]}))

    report = TtaReport(tuple(losses), tuple(fracs), int(trusted_idx.size), trusted.k_per_class, steps)
    return {k: SigmaVector(v, k, "trained") for k, v in params.items()}, report
