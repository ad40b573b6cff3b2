"""``bolt`` command line.

Every subcommand loads BTC-v1 containers, calls library functions and
writes containers back; one JSON record per run is appended to the results
log. Exit codes: 0 success, 1 validation error, 2 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import glob
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .adapt import OptimState, evaluate, train_sigma
from .coefficients import (
    DEFAULT_ALPHA_GRID,
    compose_model,
    sigmas_from_container,
    sigmas_to_container,
    zero_sigmas,
)
from .errors import BoltError, NumericError, ValidationError
from .spectral import bases_from_container, bases_to_container, build_bases
from .taskgen import LabeledData, TaskFamily, UnlabeledData
from .tensor_store import apply_task_arithmetic, load_container, save_container
from .tta import TtaConfig, tta_run


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _shots(text: str) -> int:
    k = int(text)
    if k not in (1, 2, 4, 8, 16):
        raise argparse.ArgumentTypeError("shots must be one of 1, 2, 4, 8, 16")
    return k


def _expand(patterns) -> list[str]:
    paths = []
    for p in patterns:
        hits = sorted(glob.glob(p)) if glob.has_magic(p) else [p]
        if not hits:
            raise ValidationError(f"no files match {p!r}")
        paths.extend(hits)
    return paths


def _load_sources(patterns):
    return [load_container(p) for p in _expand(patterns)]


def _write(container, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_container(container, path)


def _emit(lines):
    for line in lines:
        print(line)


def _opt(args) -> OptimState:
    return OptimState(
        lr_max=args.lr, epochs=args.epochs, batch_size=args.batch, warmup_epochs=args.warmup_epochs
    )


# -- subcommands ---------------------------------------------------------------


def cmd_gen(args):
    out = Path(args.out or "fam")
    family = pipeline.generate_family(
        args.seed, args.n_sources, shift=args.shift, jitter=args.jitter, noise_sigma=args.noise_sigma
    )
    recipe = pipeline.SourceRecipe()
    _write(family.to_container(), out / "family.btc")
    anchor = pipeline.sample_batch(family, "anchor", recipe.pretrain_n, pipeline._seed(args.seed, "anchor"))
    _write(anchor.to_container("anchor"), out / "data" / "anchor.btc")
    for i in range(family.n_sources):
        _write(pipeline.source_data(family, i, recipe).to_container(f"source_{i:02d}"), out / "data" / f"source_{i:02d}.btc")
    pool, test = pipeline.target_splits(family, recipe)
    _write(pool.to_container("target_pool"), out / "data" / "target_pool.btc")
    _write(test.to_container("target_test"), out / "data" / "target_test.btc")
    return {"n_sources": family.n_sources, "classes": family.classes, "input_dim": family.input_dim}


def _family_dir(args) -> Path:
    return Path(args.fam)


def cmd_pretrain(args):
    fam_dir = _family_dir(args)
    family = TaskFamily.from_container(load_container(fam_dir / "family.btc"))
    recipe = pipeline.SourceRecipe(pretrain_epochs=args.epochs, pretrain_lr=args.lr)
    base = pipeline.pretrain_base(family, recipe)
    _write(base, args.out or fam_dir / "base.btc")
    anchor = LabeledData.from_container(load_container(fam_dir / "data" / "anchor.btc"))
    return {"anchor_acc": evaluate(base, anchor)}


def cmd_finetune_sources(args):
    fam_dir = _family_dir(args)
    family = TaskFamily.from_container(load_container(fam_dir / "family.btc"))
    base = load_container(args.base or fam_dir / "base.btc")
    recipe = pipeline.SourceRecipe(source_epochs=args.epochs, source_lr=args.lr)
    out = Path(args.out or fam_dir)
    metrics = {}
    for i in range(family.n_sources):
        ckpt = pipeline.finetune_source(family, base, i, recipe)
        _write(ckpt, out / f"src{i:02d}.btc")
        data = LabeledData.from_container(load_container(fam_dir / "data" / f"source_{i:02d}.btc"))
        metrics[f"src{i:02d}_acc"] = evaluate(ckpt, data)
        metrics[f"src{i:02d}_base_acc"] = evaluate(base, data)
    return metrics


def cmd_build_basis(args):
    base = load_container(args.base)
    sources = _load_sources(args.sources)
    tvs = pipeline.task_vectors(base, sources)
    bases = build_bases(tvs, args.per_task_k, eps=args.eps, rank_cap=args.rank_cap)
    meta = {
        "eps": repr(args.eps),
        "per_task_k": str(args.per_task_k),
        "sources": ",".join(tv.source_id for tv in tvs),
    }
    _write(bases_to_container(bases, meta), args.out or "basis.btc")
    metrics = {}
    for name, b in bases.items():
        metrics[f"r_{name}"] = b.r
        metrics[f"effective_rank_u_{name}"] = b.effective_rank_u
        metrics[f"effective_rank_v_{name}"] = b.effective_rank_v
        if min(b.effective_rank_u, b.effective_rank_v) < b.r:
            print(f"warning: {name} basis is rank deficient", file=sys.stderr)
    return metrics


def _support(args):
    pool = LabeledData.from_container(load_container(args.data))
    classes = int(pool.y.max()) + 1
    return pipeline.support_set(pool, args.shots, args.seed, classes)


def cmd_init(args):
    base = load_container(args.base)
    bases = bases_from_container(load_container(args.basis))
    tvs = pipeline.task_vectors(base, _load_sources(args.sources))
    support = _support(args)
    sigmas, sweep = pipeline.initialize(
        base, bases, tvs, support, args.alpha_grid, args.probe_batches, args.batch, args.seed
    )
    meta = {
        "alpha_hat": repr(sweep.alpha_hat),
        "grid": ",".join(map(repr, sweep.grid)),
        "scores": ",".join(map(repr, sweep.scores)),
    }
    _write(sigmas_to_container(sigmas, meta), args.out or "sigma_init.btc")
    metrics = {"alpha_hat": sweep.alpha_hat}
    metrics.update({f"score_alpha_{a:g}": s for a, s in zip(sweep.grid, sweep.scores)})
    if args.test:
        test = LabeledData.from_container(load_container(args.test))
        metrics["base_acc"] = evaluate(base, test)
        metrics["init_acc"] = evaluate(compose_model(base, bases, sigmas), test)
    return metrics


def _initial_sigmas(args, bases):
    if args.sigma:
        return sigmas_from_container(load_container(args.sigma))
    return zero_sigmas(bases)


def cmd_adapt(args):
    base = load_container(args.base)
    bases = bases_from_container(load_container(args.basis))
    init = _initial_sigmas(args, bases)
    support = _support(args)
    sigmas, report = train_sigma(base, bases, init, support, _opt(args), args.seed)
    _emit(report.json_lines())
    _write(sigmas_to_container(sigmas, {"shots": str(args.shots)}), args.out or "sigma_adapted.btc")
    metrics = {"train_acc": report.final_accuracy, "sigma_param_count": report.sigma_param_count}
    if args.test:
        test = LabeledData.from_container(load_container(args.test))
        metrics["test_acc"] = evaluate(compose_model(base, bases, sigmas), test)
    return metrics


def cmd_tta(args):
    base = load_container(args.base)
    bases = bases_from_container(load_container(args.basis))
    init = _initial_sigmas(args, bases)
    features = UnlabeledData(load_container(args.data)["features"])
    cfg = TtaConfig(
        tau=args.tau,
        temperature=args.temperature,
        sharpen_mode=args.sharpen_mode,
        aug_noise_sigma=args.aug_sigma,
        epochs=args.epochs,
        batch_size=args.batch,
        lr_max=args.lr,
    )
    sigmas, report = tta_run(base, bases, init, features, cfg, args.seed)
    _emit(report.json_lines())
    _write(sigmas_to_container(sigmas, {"tau": repr(args.tau)}), args.out or "sigma_tta.btc")
    metrics = {"n_trusted": report.n_trusted, "k_per_class": report.k_per_class}
    if args.eval:
        labeled = LabeledData.from_container(load_container(args.eval))
        metrics["before_acc"] = evaluate(compose_model(base, bases, init), labeled)
        metrics["after_acc"] = evaluate(compose_model(base, bases, sigmas), labeled)
    return metrics


def cmd_merge(args):
    base = load_container(args.base)
    sources = _load_sources(args.sources)
    alphas = args.alphas if len(args.alphas) != 1 else args.alphas * len(sources)
    merged = apply_task_arithmetic(base, pipeline.task_vectors(base, sources), alphas)
    _write(merged, args.out or "merged.btc")
    metrics = {}
    if args.test:
        metrics["test_acc"] = evaluate(merged, LabeledData.from_container(load_container(args.test)))
    return metrics


def cmd_ablate(args):
    seeds = [args.seed + i for i in range(args.seeds)]
    opt = OptimState(epochs=args.epochs)
    rows = pipeline.ablation_rows(args.ranks, args.n_tasks, seeds, shots=args.shots, opt=opt)
    out = Path(args.out or "ablation.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(pipeline.ABLATION_HEADER)
        for row in rows:
            writer.writerow([row[0], row[1], row[2], *(repr(float(v)) for v in row[3:])])
    return {"rows": len(rows)}


def cmd_inspect(args):
    c = load_container(args.path)
    summary = {
        "format_version": c.format_version,
        "model_id": c.model_id,
        "role": c.role,
        "metadata": dict(c.metadata),
        "entries": [{"name": e.name, "shape": list(e.shape), "dtype": e.dtype} for e in c.entries],
    }
    print(json.dumps(summary, indent=2))
    return {"entries": len(c.entries)}


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    shared = _Parser(add_help=False)
    shared.add_argument("--seed", type=int, default=0)
    shared.add_argument("--out", default=None)
    shared.add_argument("--log", default="bolt-results.jsonl", help="results log (JSON lines, appended)")

    parser = _Parser(prog="bolt", description="Spectral-basis adaptation on a synthetic task family.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[shared], help=help_text)
        p.set_defaults(func=func)
        return p

    p = add("gen", cmd_gen, "generate a task family and its datasets")
    p.add_argument("--n-sources", type=int, default=8)
    p.add_argument("--shift", type=float, default=2.0)
    p.add_argument("--jitter", type=float, default=0.3)
    p.add_argument("--noise-sigma", type=float, default=0.3)

    p = add("pretrain", cmd_pretrain, "train the base model on the anchor task")
    p.add_argument("--fam", required=True, help="directory written by gen")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-2)

    p = add("finetune-sources", cmd_finetune_sources, "fully fine-tune one checkpoint per source task")
    p.add_argument("--fam", required=True)
    p.add_argument("--base", default=None)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=5e-3)

    p = add("build-basis", cmd_build_basis, "build orthogonal spectral bases from source checkpoints")
    p.add_argument("--sources", nargs="+", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--per-task-k", type=int, default=1)
    p.add_argument("--rank-cap", type=int, default=None)
    p.add_argument("--eps", type=float, default=1e-8)

    p = add("init", cmd_init, "pool source coefficients and pick the global scale")
    p.add_argument("--basis", required=True)
    p.add_argument("--sources", nargs="+", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--data", required=True, help="labeled target pool the support set is drawn from")
    p.add_argument("--test", default=None)
    p.add_argument("--shots", type=_shots, default=16)
    p.add_argument("--alpha-grid", type=_floats, default=list(DEFAULT_ALPHA_GRID))
    p.add_argument("--probe-batches", type=int, default=4)
    p.add_argument("--batch", type=int, default=32)

    p = add("adapt", cmd_adapt, "few-shot sigma-only training")
    p.add_argument("--basis", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--sigma", default=None, help="initial coefficients (zeros if omitted)")
    p.add_argument("--data", required=True)
    p.add_argument("--test", default=None)
    p.add_argument("--shots", type=_shots, default=16)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--warmup-epochs", type=int, default=2)

    p = add("tta", cmd_tta, "label-free test-time adaptation")
    p.add_argument("--basis", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--sigma", default=None)
    p.add_argument("--data", required=True, help="dataset container; only its features are read")
    p.add_argument("--eval", default=None, help="labeled set for before/after accuracy")
    p.add_argument("--tau", type=float, default=0.99)
    p.add_argument("--temperature", type=float, default=0.5)
    p.add_argument("--sharpen-mode", choices=("temperature", "literal"), default="temperature")
    p.add_argument("--aug-sigma", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)

    p = add("merge", cmd_merge, "task-arithmetic merge of source checkpoints")
    p.add_argument("--base", required=True)
    p.add_argument("--sources", nargs="+", required=True)
    p.add_argument("--alphas", type=_floats, required=True)
    p.add_argument("--test", default=None)

    p = add("ablate", cmd_ablate, "rank x source-count ablation grid (CSV)")
    p.add_argument("--ranks", type=_ints, default=[1, 2, 4, 8])
    p.add_argument("--n-tasks", type=_ints, default=[2, 4, 8])
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--shots", type=_shots, default=16)
    p.add_argument("--epochs", type=int, default=20)

    p = add("inspect", cmd_inspect, "print a container manifest")
    p.add_argument("path")
    return parser


def _record(args, metrics, code):
    config = {k: v for k, v in vars(args).items() if k not in ("func", "log")}
    record = {
        "command": args.command,
        "config": json.loads(json.dumps(config, default=str)),
        "metrics": {**metrics, "exit_code": code},
        "seed": args.seed,
        "timestamp": dt.datetime.now(dt.timezone.utc).isoformat(),
    }
    path = Path(args.log)
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        fh.write(json.dumps(record) + "\n")


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    metrics, code = {}, 0
    try:
        metrics = args.func(args) or {}
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        code = 2
    except (ValidationError, FileNotFoundError, ValueError, argparse.ArgumentTypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = 1
    except BoltError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = 1
    _record(args, metrics, code)
    return code


def run(argv) -> int:
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
