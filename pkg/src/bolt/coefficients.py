"""Diagonal coordinates in a fixed spectral basis.

A layer update ``M`` is represented by ``s = diag(U.T @ M @ V)``. Because
``U`` and ``V`` have orthonormal columns,

    ||M - U D V.T||^2 = ||M - U S V.T||^2 + ||S - D||^2

for every diagonal ``D``, so copying the diagonal of ``S`` is the exact
least-squares optimum and no solver is needed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ArchitectureError, ValidationError
from .spectral import SpectralBasis
from .tensor_store import TensorContainer

DEFAULT_ALPHA_GRID = (1.0, 3.0, 5.0, 7.0, 10.0)
ORIGINS = ("extracted", "pooled", "rescaled", "trained", "zero")


@dataclass(frozen=True, eq=False)
class ProjectionMatrix:
    s: np.ndarray
    layer_name: str = ""
    source_id: str = ""


@dataclass(frozen=True, eq=False)
class SigmaVector:
    s: np.ndarray
    layer_name: str = ""
    origin: str = "extracted"

    def __post_init__(self):
        s = np.array(self.s, dtype=np.float64, copy=True).reshape(-1)
        s.flags.writeable = False
        object.__setattr__(self, "s", s)
        if self.origin not in ORIGINS:
            raise ValidationError(f"unknown sigma origin {self.origin!r}")

    def __len__(self):
        return self.s.shape[0]


@dataclass(frozen=True)
class AlphaSweepResult:
    alpha_hat: float
    grid: tuple[float, ...]
    scores: tuple[float, ...]


def _vec(sigma) -> np.ndarray:
    return np.asarray(getattr(sigma, "s", sigma), dtype=np.float64)


def project(m, basis: SpectralBasis, source_id: str = "") -> ProjectionMatrix:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != basis.shape:
        raise ValidationError(f"{basis.layer_name}: matrix {m.shape} does not match basis {basis.shape}")
    return ProjectionMatrix(basis.u_orth.T @ m @ basis.v_orth, basis.layer_name, source_id)


def extract_diagonal(s: ProjectionMatrix) -> SigmaVector:
    mat = np.asarray(s.s)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValidationError(f"projection must be square, got {mat.shape}")
    return SigmaVector(np.diag(mat).copy(), s.layer_name, "extracted")


def diagonal_coefficients(m, basis: SpectralBasis) -> SigmaVector:
    """``diag(U.T @ M @ V)`` without forming the off-diagonal entries."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != basis.shape:
        raise ValidationError(f"{basis.layer_name}: matrix {m.shape} does not match basis {basis.shape}")
    return SigmaVector(np.einsum("ij,ij->j", basis.u_orth, m @ basis.v_orth), basis.layer_name)


def pool_diagonals(sigmas: Sequence[SigmaVector]) -> SigmaVector:
    if not sigmas:
        raise ValidationError("cannot pool an empty set of coefficient vectors")
    names = {s.layer_name for s in sigmas}
    lengths = {len(s) for s in sigmas}
    if len(names) != 1 or len(lengths) != 1:
        raise ValidationError(f"pooling needs one layer and one length, got {sorted(names)} / {sorted(lengths)}")
    total = np.zeros(lengths.pop())
    for s in sigmas:
        total = total + s.s
    return SigmaVector(total / len(sigmas), names.pop(), "pooled")


def pool_sigma_sets(per_source: Sequence[Mapping[str, SigmaVector]]) -> dict[str, SigmaVector]:
    layers = list(per_source[0])
    return {name: pool_diagonals([src[name] for src in per_source]) for name in layers}


def reconstruct_update(basis: SpectralBasis, sigma) -> np.ndarray:
    s = _vec(sigma)
    if s.shape != (basis.r,):
        raise ValidationError(f"{basis.layer_name}: {s.shape[0]} coefficients for a rank-{basis.r} basis")
    return (basis.u_orth * s) @ basis.v_orth.T


def compose_model(
    theta_0: TensorContainer,
    basis_set: Mapping[str, SpectralBasis],
    sigma_set: Mapping[str, object],
    model_id: str | None = None,
) -> TensorContainer:
    """``theta_0`` plus ``U diag(s) V.T`` on every covered layer; other entries copied."""
    missing = sorted(set(basis_set) - set(theta_0.names))
    if missing:
        raise ArchitectureError("basis layers absent from base checkpoint", missing)
    missing = sorted(set(basis_set) - set(sigma_set))
    if missing:
        raise ValidationError(f"no coefficients for layers {missing}")
    updates = {name: theta_0[name] + reconstruct_update(b, sigma_set[name]) for name, b in basis_set.items()}
    return theta_0.replace(updates, model_id=model_id or theta_0.model_id, metadata={})


def scale_sigmas(sigma_set: Mapping[str, SigmaVector], alpha: float, origin="rescaled") -> dict[str, SigmaVector]:
    return {name: SigmaVector(alpha * _vec(s), name, origin) for name, s in sigma_set.items()}


def alpha_sweep(
    theta_0: TensorContainer,
    basis_set: Mapping[str, SpectralBasis],
    s_pool_set: Mapping[str, SigmaVector],
    grid: Sequence[float] = DEFAULT_ALPHA_GRID,
    probe: Sequence = (),
    eval: Callable | None = None,
) -> AlphaSweepResult:
    """Pick the global scale for the pooled coefficients by probe accuracy.

    ``eval(theta, batch)`` scores one probe batch; grid scores are batch
    means. The highest score wins and ties go to the smallest alpha.
    """
    if len(grid) == 0:
        raise ValidationError("alpha grid is empty")
    if len(probe) == 0:
        raise ValidationError("probe batch list is empty")
    if eval is None:
        from .adapt import evaluate as eval
    scores = []
    for alpha in grid:
        theta = compose_model(theta_0, basis_set, scale_sigmas(s_pool_set, float(alpha)))
        scores.append(float(np.mean([eval(theta, batch) for batch in probe])))
    best = max(scores)
    alpha_hat = min(float(a) for a, sc in zip(grid, scores) if sc == best)
    return AlphaSweepResult(alpha_hat, tuple(float(a) for a in grid), tuple(scores))


def sigmas_to_container(sigma_set: Mapping[str, object], metadata=None, model_id="sigma") -> TensorContainer:
    arrays = {f"sigma::{name}": _vec(s) for name, s in sigma_set.items()}
    origins = {getattr(s, "origin", "trained") for s in sigma_set.values()}
    meta = {"origin": origins.pop() if len(origins) == 1 else "mixed"}
    meta.update(metadata or {})
    return TensorContainer.from_arrays(model_id, "sigma", arrays, meta)


def sigmas_from_container(c: TensorContainer) -> dict[str, SigmaVector]:
    if c.role != "sigma":
        raise ValidationError(f"expected a sigma container, got role={c.role!r}")
    origin = c.metadata.get("origin", "trained")
    if origin not in ORIGINS:
        origin = "trained"
    return {
        e.name.split("::", 1)[1]: SigmaVector(e.data, e.name.split("::", 1)[1], origin)
        for e in c.entries
        if e.name.startswith("sigma::")
    }


def zero_sigmas(basis_set: Mapping[str, SpectralBasis]) -> dict[str, SigmaVector]:
    return {name: SigmaVector(np.zeros(b.r), name, "zero") for name, b in basis_set.items()}
