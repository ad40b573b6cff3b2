"""End-to-end compositions on the synthetic family.

These are the building blocks the CLI and the end-to-end tests share:
pretrain a base model on the anchor task, fine-tune one checkpoint per
source task, turn them into bases and pooled coefficients, then adapt to
the held-out target task.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .adapt import OptimState, evaluate, train_sigma
from .coefficients import (
    DEFAULT_ALPHA_GRID,
    AlphaSweepResult,
    SigmaVector,
    alpha_sweep,
    compose_model,
    diagonal_coefficients,
    pool_sigma_sets,
    scale_sigmas,
    zero_sigmas,
)
from .spectral import SpectralBasis, build_bases, canonicalize_signs
from .taskgen import (
    LabeledData,
    TaskFamily,
    ToyModel,
    finetune_full,
    init_model,
    kshot_support,
    make_task_family,
    rng_for,
    sample_batch,
)
from .tensor_store import TaskVector, TensorContainer, compute_task_vector


@dataclass(frozen=True)
class SourceRecipe:
    """How the source library is manufactured."""

    pretrain_n: int = 4000
    pretrain_epochs: int = 20
    pretrain_lr: float = 1e-2
    source_n: int = 1000
    source_epochs: int = 10
    source_lr: float = 5e-3
    target_pool_per_class: int = 40
    target_test_n: int = 2000


# Per-purpose sample seeds are derived from the family seed so one integer
# pins a whole experiment.
def _seed(family_seed: int, purpose: str, index: int = 0) -> int:
    tags = {"init": 1, "anchor": 2, "source": 3, "pool": 4, "test": 5, "pretrain": 6, "finetune": 7, "support": 8}
    return int(np.random.SeedSequence([family_seed, tags[purpose], index]).generate_state(1)[0])


@dataclass
class Library:
    family: TaskFamily
    base: TensorContainer
    sources: list[TensorContainer]
    target_pool: LabeledData
    target_test: LabeledData
    recipe: SourceRecipe = field(default_factory=SourceRecipe)


def generate_family(seed: int, n_sources: int = 8, **kwargs) -> TaskFamily:
    return make_task_family(seed, n_sources=n_sources, **kwargs)


def target_splits(family: TaskFamily, recipe: SourceRecipe = SourceRecipe()) -> tuple[LabeledData, LabeledData]:
    pool = sample_batch(family, "target", recipe.target_pool_per_class * family.classes * 2, _seed(family.seed, "pool"))
    test = sample_batch(family, "target", recipe.target_test_n, _seed(family.seed, "test"))
    return pool, test


def pretrain_base(family: TaskFamily, recipe: SourceRecipe = SourceRecipe()) -> TensorContainer:
    model = init_model(family.input_dim, family.hidden, family.classes, _seed(family.seed, "init"))
    data = sample_batch(family, "anchor", recipe.pretrain_n, _seed(family.seed, "anchor"))
    model = finetune_full(model, data, recipe.pretrain_epochs, recipe.pretrain_lr, _seed(family.seed, "pretrain"))
    return model.to_container("base", {"task": "anchor"})


def source_data(family: TaskFamily, index: int, recipe: SourceRecipe = SourceRecipe()) -> LabeledData:
    return sample_batch(family, index, recipe.source_n, _seed(family.seed, "source", index))


def finetune_source(
    family: TaskFamily, base: TensorContainer, index: int, recipe: SourceRecipe = SourceRecipe()
) -> TensorContainer:
    data = source_data(family, index, recipe)
    model = finetune_full(
        ToyModel.from_container(base),
        data,
        recipe.source_epochs,
        recipe.source_lr,
        _seed(family.seed, "finetune", index),
    )
    return model.to_container(f"src{index:02d}", {"task": str(index)})


def build_library(seed: int, n_sources: int = 8, recipe: SourceRecipe = SourceRecipe(), **family_kwargs) -> Library:
    family = generate_family(seed, n_sources, **family_kwargs)
    base = pretrain_base(family, recipe)
    sources = [finetune_source(family, base, i, recipe) for i in range(n_sources)]
    pool, test = target_splits(family, recipe)
    return Library(family, base, sources, pool, test, recipe)


def task_vectors(base: TensorContainer, sources: Sequence[TensorContainer]) -> list[TaskVector]:
    return [compute_task_vector(src, base, src.model_id) for src in sources]


def source_sigmas(tvs: Sequence[TaskVector], bases) -> list[dict[str, SigmaVector]]:
    return [
        {name: diagonal_coefficients(tv.layers[name], b) for name, b in bases.items()}
        for tv in tvs
    ]


def pooled_sigmas(tvs: Sequence[TaskVector], bases) -> dict[str, SigmaVector]:
    return pool_sigma_sets(source_sigmas(tvs, bases))


def probe_batches(support: LabeledData, count: int, batch_size: int, seed: int) -> list[LabeledData]:
    """The first ``count`` minibatches of one shuffled pass over the support set."""
    order = rng_for(seed).permutation(len(support))
    batches = support.subset(order).batches(batch_size)
    return batches[: max(1, count)]


def initialize(
    base: TensorContainer,
    bases,
    tvs: Sequence[TaskVector],
    support: LabeledData,
    grid: Sequence[float] = DEFAULT_ALPHA_GRID,
    n_probe: int = 4,
    batch_size: int = 32,
    seed: int = 0,
) -> tuple[dict[str, SigmaVector], AlphaSweepResult]:
    pooled = pooled_sigmas(tvs, bases)
    sweep = alpha_sweep(base, bases, pooled, grid, probe_batches(support, n_probe, batch_size, seed))
    return scale_sigmas(pooled, sweep.alpha_hat), sweep


def support_set(pool: LabeledData, shots: int, seed: int, classes: int) -> LabeledData:
    return kshot_support(pool, shots, _seed(seed, "support"), classes)


def random_bases(like, seed: int) -> dict[str, SpectralBasis]:
    """Random orthonormal bases with the same shapes and ranks, for controls."""
    rng = rng_for(seed)
    out = {}
    for name, b in like.items():
        m, n = b.shape
        u, _ = np.linalg.qr(rng.standard_normal((m, b.r)))
        v, _ = np.linalg.qr(rng.standard_normal((n, b.r)))
        u, v = canonicalize_signs(u, v)
        out[name] = SpectralBasis(u, v, b.r, b.r, name)
    return out


@dataclass(frozen=True)
class AdaptOutcome:
    base_acc: float
    init_acc: float
    adapted_acc: float
    zero_init_acc: float
    alpha_hat: float
    sigma: dict = field(compare=False, repr=False, default_factory=dict)


def adapt_on_target(
    lib: Library,
    per_task_k: int = 1,
    rank_cap: int | None = None,
    n_tasks: int | None = None,
    shots: int = 16,
    opt: OptimState = OptimState(),
    seed: int = 0,
    bases=None,
    with_zero_init: bool = True,
) -> AdaptOutcome:
    """Basis from the first ``n_tasks`` sources, pooled+alpha init, sigma-only training."""
    tvs = task_vectors(lib.base, lib.sources[: n_tasks or len(lib.sources)])
    if bases is None:
        bases = build_bases(tvs, per_task_k, rank_cap=rank_cap)
    support = support_set(lib.target_pool, shots, seed, lib.family.classes)
    init, sweep = initialize(lib.base, bases, tvs, support, batch_size=opt.batch_size, seed=seed)
    trained, _ = train_sigma(lib.base, bases, init, support, opt, seed)
    zero_acc = float("nan")
    if with_zero_init:
        zero_trained, _ = train_sigma(lib.base, bases, zero_sigmas(bases), support, opt, seed)
        zero_acc = evaluate(compose_model(lib.base, bases, zero_trained), lib.target_test)
    return AdaptOutcome(
        base_acc=evaluate(lib.base, lib.target_test),
        init_acc=evaluate(compose_model(lib.base, bases, init), lib.target_test),
        adapted_acc=evaluate(compose_model(lib.base, bases, trained), lib.target_test),
        zero_init_acc=zero_acc,
        alpha_hat=sweep.alpha_hat,
        sigma=trained,
    )


def full_finetune_on_target(lib: Library, shots: int = 16, opt: OptimState = OptimState(), seed: int = 0) -> float:
    support = support_set(lib.target_pool, shots, seed, lib.family.classes)
    model = finetune_full(
        ToyModel.from_container(lib.base),
        support,
        opt.epochs,
        opt.lr_max,
        seed,
        batch_size=opt.batch_size,
        warmup_epochs=opt.warmup_epochs,
        weight_decay=opt.weight_decay,
    )
    return evaluate(model.to_container(), lib.target_test)


ABLATION_HEADER = ("rank", "n_tasks", "seed", "init_acc", "adapted_acc", "zero_init_acc")


def ablation_cell(lib: Library, rank: int, n_tasks: int, seed: int, shots: int = 16, opt: OptimState = OptimState()):
    """One ablation cell. ``rank`` is the number of singular directions kept
    per source, so the layer basis holds ``rank * n_tasks`` directions,
    capped at what the layer can hold. Sources are a seeded random subset of
    the library.
    """
    if n_tasks > len(lib.sources):
        raise ValueError(f"library has {len(lib.sources)} sources, asked for {n_tasks}")
    pick = np.sort(rng_for(_seed(seed, "source", n_tasks)).permutation(len(lib.sources))[:n_tasks])
    sub = Library(lib.family, lib.base, [lib.sources[i] for i in pick], lib.target_pool, lib.target_test, lib.recipe)
    bases = build_bases(task_vectors(sub.base, sub.sources), rank, fit_layer=True)
    out = adapt_on_target(sub, bases=bases, shots=shots, opt=opt, seed=seed)
    return (rank, n_tasks, seed, out.init_acc, out.adapted_acc, out.zero_init_acc)


def ablation_rows(ranks, n_tasks_list, seeds, shots=16, opt=OptimState(), recipe=SourceRecipe()):
    """Rows in canonical (seed, rank, n_tasks) order."""
    rows = []
    for seed in seeds:
        lib = build_library(seed, max(n_tasks_list), recipe)
        for rank in ranks:
            for n in n_tasks_list:
                rows.append(ablation_cell(lib, rank, n, seed, shots, opt))
    return rows
