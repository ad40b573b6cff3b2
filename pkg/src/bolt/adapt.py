"""Sigma-only supervised adaptation.

The backbone ``theta_0`` and the spectral bases stay frozen; the only
trainable scalars are the per-layer diagonal coefficients. With
``W = W0 + U diag(s) V.T`` the chain rule gives
``dL/ds_j = u_j.T @ (dL/dW) @ v_j``, so the weight gradient of the toy MLP
is contracted against the basis after every backward pass.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .coefficients import SigmaVector
from .errors import ValidationError
from .optim import OptimState, adamw_step, lr_schedule
from .spectral import SpectralBasis
from .taskgen import LabeledData, ToyModel, accuracy, mlp_forward_backward, rng_for
from .tensor_store import TensorContainer

__all__ = [
    "OptimState",
    "TrainReport",
    "adamw_step",
    "compose_toy",
    "evaluate",
    "lr_schedule",
    "sigma_gradient",
    "train_sigma",
]


@dataclass(frozen=True)
class TrainReport:
    losses: tuple[float, ...]
    lrs: tuple[float, ...]
    final_accuracy: float
    sigma_param_count: int
    wall_time: float = field(default=0.0, compare=False)

    def json_lines(self) -> list[str]:
        lines = [
            json.dumps({"epoch": i, "loss": loss, "lr": lr})
            for i, (loss, lr) in enumerate(zip(self.losses, self.lrs))
        ]
        lines.append(
            json.dumps(
                {
                    "summary": True,
                    "epochs": len(self.losses),
                    "final_accuracy": self.final_accuracy,
                    "sigma_param_count": self.sigma_param_count,
                    "wall_time": self.wall_time,
                }
            )
        )
        return lines


def sigma_gradient(weight_grad, basis: SpectralBasis) -> np.ndarray:
    g = np.asarray(weight_grad, dtype=np.float64)
    if g.shape != basis.shape:
        raise ValidationError(f"{basis.layer_name}: gradient {g.shape} does not match basis {basis.shape}")
    return np.einsum("ij,ij->j", basis.u_orth, g @ basis.v_orth)


def as_vectors(sigma_set) -> dict[str, np.ndarray]:
    return {k: np.asarray(getattr(s, "s", s), dtype=np.float64).copy() for k, s in sigma_set.items()}


def compose_toy(base: Mapping[str, np.ndarray], bases: Mapping[str, SpectralBasis], sigmas) -> ToyModel:
    """Fast path of ``compose_model`` that returns a ``ToyModel`` directly."""
    arrays = dict(base)
    for name, b in bases.items():
        s = np.asarray(getattr(sigmas[name], "s", sigmas[name]))
        arrays[name] = base[name] + (b.u_orth * s) @ b.v_orth.T
    return ToyModel.from_arrays(arrays)


def sigma_grads(weight_grads: Mapping[str, np.ndarray], bases: Mapping[str, SpectralBasis]) -> dict[str, np.ndarray]:
    return {name: sigma_gradient(weight_grads[name], b) for name, b in bases.items()}


def check_sigmas(bases: Mapping[str, SpectralBasis], sigmas: Mapping[str, np.ndarray]) -> None:
    for name, b in bases.items():
        if name not in sigmas or sigmas[name].shape != (b.r,):
            raise ValidationError(f"{name}: initial coefficients do not match the rank-{b.r} basis")


def train_sigma(
    theta_0: TensorContainer,
    basis_set: Mapping[str, SpectralBasis],
    sigma_init,
    dataset: LabeledData,
    opt: OptimState | None = None,
    seed: int = 0,
    log=None,
) -> tuple[dict[str, SigmaVector], TrainReport]:
    """Minibatch cross-entropy descent on the diagonal coefficients only.

    Runs ``opt.epochs * ceil(N / opt.batch_size)`` AdamW steps with a
    per-step warmup of ``opt.warmup_epochs`` epochs followed by cosine decay.
    ``log``, if given, receives one JSON line per epoch.
    """
    opt = (opt or OptimState()).fresh()
    if len(dataset) == 0:
        raise ValidationError("empty training set")
    base = theta_0.arrays()
    params = as_vectors(sigma_init)
    check_sigmas(basis_set, params)
    n_params = int(sum(b.r for b in basis_set.values()))

    started = time.perf_counter()
    rng = rng_for(seed)
    n = len(dataset)
    per_epoch = math.ceil(n / opt.batch_size)
    total = opt.epochs * per_epoch
    warmup = min(opt.warmup_epochs * per_epoch, max(total - 1, 0))
    losses, lrs = [], []
    step = 0
    for epoch in range(opt.epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, opt.batch_size):
            batch = dataset.subset(order[start : start + opt.batch_size])
            model = compose_toy(base, basis_set, params)
            loss, wg, _ = mlp_forward_backward(model, batch)
            lr = lr_schedule(step, total, warmup, opt.lr_max)
            params, opt = adamw_step(opt, params, sigma_grads(wg, basis_set), lr)
            loss_sum += loss * len(batch)
            step += 1
        losses.append(loss_sum / n)
        lrs.append(lr)
        if log is not None:
            log(json.dumps({"epoch": epoch, "loss": losses[-1], "lr": lr}))

    final = accuracy(compose_toy(base, basis_set, params), dataset)
    report = TrainReport(tuple(losses), tuple(lrs), final, n_params, time.perf_counter() - started)
    return {k: SigmaVector(v, k, "trained") for k, v in params.items()}, report


def evaluate(theta: TensorContainer, dataset: LabeledData) -> float:
    """Fraction of argmax-correct predictions; logit ties go to the lower class index."""
    if len(dataset) == 0:
        raise ValidationError("empty evaluation set")
    return accuracy(ToyModel.from_container(theta), dataset)
