"""Thin SVD, cross-task direction stacking and polar orthogonalization.

The offline basis builder: every source update ``M_i`` of a layer is
factored, its top singular directions are stacked side by side with those
of the other sources, and the stacks are replaced by their nearest
matrices with orthonormal columns (the polar factor ``Psi @ Phi.T``).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import DegenerateBasisError, NumericError, ValidationError
from .tensor_store import TaskVector, TensorContainer

log = logging.getLogger(__name__)

RANK_RTOL = 1e-10


@dataclass(frozen=True, eq=False)
class ThinSvd:
    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    @property
    def k(self) -> int:
        return self.sigma.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T


@dataclass(frozen=True, eq=False)
class StackedDirections:
    u_stack: np.ndarray
    v_stack: np.ndarray
    provenance: tuple[tuple[str, int], ...] = ()

    @property
    def r(self) -> int:
        return self.u_stack.shape[1]


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    u_orth: np.ndarray
    v_orth: np.ndarray
    effective_rank_u: int
    effective_rank_v: int
    layer_name: str = ""

    @property
    def r(self) -> int:
        return self.u_orth.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.u_orth.shape[0], self.v_orth.shape[0]

    def as_stack(self) -> StackedDirections:
        return StackedDirections(self.u_orth, self.v_orth, tuple(("basis", j) for j in range(self.r)))


def canonicalize_signs(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flip column pairs so the largest-magnitude entry of each ``u[:, j]`` is positive.

    The first index wins on magnitude ties.
    """
    u = np.array(u, dtype=np.float64, copy=True)
    v = np.array(v, dtype=np.float64, copy=True)
    if u.shape[1] == 0:
        return u, v
    lead = np.argmax(np.abs(u), axis=0)
    flip = u[lead, np.arange(u.shape[1])] < 0
    u[:, flip] *= -1.0
    v[:, flip] *= -1.0
    return u, v


def thin_svd(m, k: int | None = None) -> ThinSvd:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ValidationError(f"thin_svd needs a nonempty matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError("thin_svd: matrix has non-finite entries")
    full = min(m.shape)
    if k is not None and not 1 <= k <= full:
        raise ValidationError(f"requested k={k} outside 1..{full}")
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"thin_svd did not converge: {exc}") from exc
    # LAPACK already returns descending values; a stable sort pins the tie order.
    order = np.argsort(-s, kind="stable")
    if k is not None:
        order = order[:k]
    u, v = canonicalize_signs(u[:, order], vt.T[:, order])
    return ThinSvd(u=u, sigma=s[order].copy(), v=v)


def stack_directions(svds: Sequence[tuple[str, ThinSvd]], per_task_k: int) -> StackedDirections:
    if not svds:
        raise ValidationError("no source decompositions to stack")
    if per_task_k < 1:
        raise ValidationError("per_task_k must be positive")
    rows = {f.u.shape[0] for _, f in svds}
    cols = {f.v.shape[0] for _, f in svds}
    if len(rows) != 1 or len(cols) != 1:
        raise ValidationError(f"sources disagree on layer dimensions: rows {sorted(rows)}, cols {sorted(cols)}")
    us, vs, prov = [], [], []
    for source_id, f in svds:
        if per_task_k > f.k:
            raise ValidationError(f"{source_id}: per_task_k={per_task_k} exceeds available rank {f.k}")
        us.append(f.u[:, :per_task_k])
        vs.append(f.v[:, :per_task_k])
        prov.extend((source_id, j) for j in range(per_task_k))
    return StackedDirections(np.hstack(us), np.hstack(vs), tuple(prov))


def _polar(x: np.ndarray) -> tuple[np.ndarray, int]:
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    eff = int(np.sum(s > RANK_RTOL * s[0])) if s.size and s[0] > 0 else 0
    return u @ vt, eff


def orthogonalize(
    stack: StackedDirections,
    eps: float = 0.0,
    rank_cap: int | None = None,
    layer_name: str = "",
) -> SpectralBasis:
    """Replace both stacks by their polar factors.

    ``eps`` is the whitening regularizer; the polar factor is its
    ``eps -> 0`` limit, so the value is validated and kept only as
    provenance. With ``rank_cap`` the stacks are first reduced to the top
    ``rank_cap`` singular directions of the joint ``[u_stack; v_stack]``
    column space, which mixes u- and v-columns with the same weights and so
    keeps each u/v pair together.
    """
    if eps < 0:
        raise ValidationError("eps must be nonnegative")
    u_stack = np.asarray(stack.u_stack, dtype=np.float64)
    v_stack = np.asarray(stack.v_stack, dtype=np.float64)
    if u_stack.shape[1] != v_stack.shape[1]:
        raise ValidationError("u_stack and v_stack have different column counts")
    if not (np.all(np.isfinite(u_stack)) and np.all(np.isfinite(v_stack))):
        raise NumericError(f"{layer_name}: non-finite stacked directions")
    if not np.any(u_stack) or not np.any(v_stack):
        raise DegenerateBasisError(f"{layer_name}: all-zero direction stack")

    r = u_stack.shape[1]
    if rank_cap is not None:
        if rank_cap < 1:
            raise ValidationError("rank_cap must be positive")
        if rank_cap < r:
            mix = thin_svd(np.vstack([u_stack, v_stack]), rank_cap).v
            u_stack, v_stack = u_stack @ mix, v_stack @ mix
            r = rank_cap
    for side, x in (("u", u_stack), ("v", v_stack)):
        if r > x.shape[0]:
            raise ValidationError(
                f"{layer_name}: {r} directions cannot be orthonormal in {x.shape[0]} dimensions ({side} side); "
                "lower per_task_k or set rank_cap"
            )

    # No sign flip here: the polar factor is unique for full-rank stacks, and
    # the stacks themselves come from sign-canonical SVDs.
    u_orth, eff_u = _polar(u_stack)
    v_orth, eff_v = _polar(v_stack)
    if min(eff_u, eff_v) < r:
        log.warning("%s: stack is rank deficient (effective ranks u=%d v=%d, r=%d)", layer_name, eff_u, eff_v, r)
    return SpectralBasis(u_orth, v_orth, eff_u, eff_v, layer_name)


def build_bases(
    task_vectors: Sequence[TaskVector],
    per_task_k: int,
    eps: float = 1e-8,
    rank_cap: int | None = None,
    layers: Sequence[str] | None = None,
    fit_layer: bool = False,
) -> dict[str, SpectralBasis]:
    """One basis per matrix-shaped layer; 1-D entries (biases) are skipped.

    With ``fit_layer`` a layer too small for the request gets
    ``min(per_task_k, min(m, n))`` directions per source and its stack is
    capped at ``min(m, n)`` columns instead of raising.
    """
    if not task_vectors:
        raise ValidationError("need at least one task vector")
    first = task_vectors[0]
    if layers is None:
        layers = [name for name, arr in first.layers.items() if arr.ndim == 2]
    bases = {}
    for name in layers:
        k, cap = per_task_k, rank_cap
        if fit_layer:
            room = min(first.layers[name].shape)
            k = min(k, room)
            cap = min(cap or room, room)
        svds = [(tv.source_id, thin_svd(tv.layers[name], k)) for tv in task_vectors]
        stack = stack_directions(svds, k)
        bases[name] = orthogonalize(stack, eps, cap, layer_name=name)
    return bases


def bases_to_container(bases: Mapping[str, SpectralBasis], metadata=None, model_id="basis") -> TensorContainer:
    arrays = {}
    for name, b in bases.items():
        arrays[f"U_orth::{name}"] = b.u_orth
        arrays[f"V_orth::{name}"] = b.v_orth
    meta = {
        "r": json.dumps({n: b.r for n, b in bases.items()}),
        "effective_rank": json.dumps({n: [b.effective_rank_u, b.effective_rank_v] for n, b in bases.items()}),
    }
    meta.update(metadata or {})
    return TensorContainer.from_arrays(model_id, "basis", arrays, meta)


def bases_from_container(c: TensorContainer) -> dict[str, SpectralBasis]:
    if c.role != "basis":
        raise ValidationError(f"expected a basis container, got role={c.role!r}")
    eff = json.loads(c.metadata.get("effective_rank", "{}"))
    bases = {}
    for entry in c.entries:
        if not entry.name.startswith("U_orth::"):
            continue
        name = entry.name.split("::", 1)[1]
        u, v = entry.data, c[f"V_orth::{name}"]
        eu, ev = eff.get(name, [u.shape[1], u.shape[1]])
        bases[name] = SpectralBasis(u, v, int(eu), int(ev), name)
    return bases
