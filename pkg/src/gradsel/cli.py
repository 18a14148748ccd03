"""Command-line pipeline: gen | meta-train | cache | estimate | select | bench | report.

Each stage reads and writes declared artifacts inside a run directory. A flat
dotted-key config controls every default; any key can be overridden with a
flag of the same name. All randomness flows from named seeds in the config.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
from pathlib import Path

from . import bench, estimate as est, select as sel
from .linearize import build_cache, load_cache, save_cache
from .model import ModelConfig, Network
from .project import Projector
from .taskgen import gen_multitask_gaussian, gen_noisy_addition, load_corpus, save_corpus
from .trainer import (
    TrainConfig,
    load_checkpoint,
    meta_train,
    param_digest,
    save_checkpoint,
)

OUT_ENV_VAR = "GRADSEL_OUT"

DEFAULT_CONFIG: dict[str, object] = {
    "corpus.kind": "gaussian",
    "corpus.n": 20,
    "corpus.samples_per_task": 40,
    "corpus.dim": 10,
    "corpus.frac_helpful": 0.5,
    "corpus.rotation_deg": 135.0,
    "corpus.label_noise": 0.3,
    "corpus.n_clean": 10,
    "corpus.digits": 5,
    "corpus.target_samples": 0,
    "corpus.seed": 11,
    "model.hidden_dims": "320",
    "model.activation": "tanh",
    "model.init_scale": 0.5,
    "model.seed": 7,
    "train.step_size": 0.3,
    "train.batch_size": 32,
    "train.max_epochs": 300,
    "train.early_stop_patience": 30,
    "train.optimizer": "sgd",
    "train.restore_best": "true",
    "train.seed": 3,
    "finetune.step_size": 0.1,
    "finetune.batch_size": 4096,
    "finetune.max_epochs": 60,
    "finetune.early_stop_patience": 3,
    "finetune.optimizer": "sgd",
    "finetune.restore_best": "true",
    "finetune.seed": 4,
    "project.d": 100,
    "project.seed": 5,
    "estimate.ridge_lambda": 0.1,
    "estimate.max_iters": 100,
    "estimate.grad_tol": 1e-8,
    "estimate.method": "damped_newton",
    "select.method": "fs",
    "select.m": 1000,
    "select.alpha": 0.75,
    "select.fraction_grid": "0.05,0.1,0.15,0.2",
    "select.seed": 6,
    "select.evaluator": "estimator",
    "bench.rrss_distances": "0.0025,0.005,0.01,0.025",
    "bench.rrss_directions": 20,
    "bench.relerr_subsets": 30,
    "bench.seed": 9,
    "addition.hidden_dims": "256",
    "addition.activation": "relu",
    "addition.step_size": 0.001,
    "addition.epochs": 120,
    "addition.samples_per_group": 500,
    "addition.target_samples": 60,
    "addition.m": 300,
    "addition.alpha": 0.15,
}

ARTIFACTS = {
    "config": "config.txt",
    "corpus": "corpus.txt",
    "checkpoint": "checkpoint.bin",
    "cache": "cache.bin",
    "estimates": "estimates.csv",
    "selection": "selection.txt",
}


class StageError(RuntimeError):
    """A stage-level failure with a user-facing diagnostic."""


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise StageError(f"config line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def resolve_config(config_path: str | None, overrides: dict[str, str]) -> dict[str, str]:
    cfg = {k: str(v) for k, v in DEFAULT_CONFIG.items()}
    if config_path:
        try:
            text = Path(config_path).read_text()
        except OSError as e:
            raise StageError(f"cannot read config {config_path}: {e}") from e
        for k, v in parse_config_text(text).items():
            if k not in cfg:
                raise StageError(f"unknown config key {k!r}")
            cfg[k] = v
    for k, v in overrides.items():
        if k not in cfg:
            raise StageError(f"unknown config key {k!r}")
        cfg[k] = v
    return cfg


def config_text(cfg: dict[str, str]) -> str:
    return "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))


def config_digest(cfg: dict[str, str]) -> str:
    return hashlib.sha256(config_text(cfg).encode()).hexdigest()


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(s).split(",") if v != "")


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in str(s).split(",") if v != "")


def model_config(cfg: dict[str, str], input_dim: int, num_classes: int, num_positions: int) -> ModelConfig:
    return ModelConfig(
        input_dim=input_dim,
        hidden_dims=_ints(cfg["model.hidden_dims"]),
        activation=cfg["model.activation"],
        num_classes=num_classes,
        num_positions=num_positions,
        init_scale=float(cfg["model.init_scale"]),
        seed=int(cfg["model.seed"]),
    )


def _bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise StageError(f"expected a boolean, got {s!r}")


def train_config(cfg: dict[str, str], prefix: str) -> TrainConfig:
    return TrainConfig(
        step_size=float(cfg[f"{prefix}.step_size"]),
        batch_size=int(cfg[f"{prefix}.batch_size"]),
        max_epochs=int(cfg[f"{prefix}.max_epochs"]),
        early_stop_patience=int(cfg[f"{prefix}.early_stop_patience"]),
        seed=int(cfg[f"{prefix}.seed"]),
        optimizer=cfg[f"{prefix}.optimizer"],
        restore_best=_bool(cfg[f"{prefix}.restore_best"]),
    )


def solve_config(cfg: dict[str, str]) -> est.SolveConfig:
    return est.SolveConfig(
        ridge_lambda=float(cfg["estimate.ridge_lambda"]),
        max_iters=int(cfg["estimate.max_iters"]),
        grad_tol=float(cfg["estimate.grad_tol"]),
        method=cfg["estimate.method"],
    )


# ---------------------------------------------------------------------------
# Run directory plumbing
# ---------------------------------------------------------------------------


class RunDir:
    def __init__(self, root: Path):
        self.root = root

    def path(self, artifact: str) -> Path:
        return self.root / ARTIFACTS[artifact]

    def require(self, artifact: str, produced_by: str) -> Path:
        p = self.path(artifact)
        if not p.exists():
            raise StageError(
                f"missing {p.name}: run '{produced_by}' first"
            )
        return p

    def lock(self):
        return _Lock(self.root / ".lock")


class _Lock:
    def __init__(self, path: Path):
        self.path = path

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise StageError(
                f"run directory is locked by {self.path}; remove it if no other command is running"
            ) from None
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass


def _load_model_pieces(run: RunDir, cfg: dict[str, str]):
    corpus = load_corpus(run.require("corpus", "gen"))
    if corpus.meta.get("kind") == "addition":
        digits = int(corpus.meta["digits"])
        mc = ModelConfig(
            input_dim=corpus.input_dim,
            hidden_dims=_ints(cfg["addition.hidden_dims"]),
            activation=cfg["addition.activation"],
            num_classes=10,
            num_positions=digits,
            init_scale=float(cfg["model.init_scale"]),
            seed=int(cfg["model.seed"]),
        )
    else:
        mc = model_config(cfg, corpus.input_dim, num_classes=2, num_positions=1)
    return corpus, Network(mc)


def _meta_train_config(cfg: dict[str, str], corpus) -> TrainConfig:
    """Addition corpora need the fixed-epoch recipe: their combined-val
    minimum sits at the no-learning point, so early stopping cannot train
    them (the noisy groups' val labels are random)."""
    if corpus.meta.get("kind") == "addition":
        return TrainConfig(
            step_size=float(cfg["addition.step_size"]),
            batch_size=int(cfg["train.batch_size"]),
            max_epochs=int(cfg["addition.epochs"]),
            early_stop_patience=10**9,
            seed=int(cfg["train.seed"]),
            optimizer="adam",
            restore_best=False,
        )
    return train_config(cfg, "train")


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def _record_config(run: RunDir, cfg: dict[str, str]) -> None:
    """Keep config.txt in sync with the invocation that last wrote artifacts."""
    run.root.mkdir(parents=True, exist_ok=True)
    run.path("config").write_text(f"# digest {config_digest(cfg)}\n" + config_text(cfg))


def stage_gen(run: RunDir, cfg: dict[str, str]) -> None:
    kind = cfg["corpus.kind"]
    if kind == "gaussian":
        corpus = gen_multitask_gaussian(
            n=int(cfg["corpus.n"]),
            samples_per_task=int(cfg["corpus.samples_per_task"]),
            dim=int(cfg["corpus.dim"]),
            frac_helpful=float(cfg["corpus.frac_helpful"]),
            rotation_deg=float(cfg["corpus.rotation_deg"]),
            label_noise=float(cfg["corpus.label_noise"]),
            seed=int(cfg["corpus.seed"]),
        )
    elif kind == "addition":
        target_samples = int(cfg["corpus.target_samples"]) or None
        corpus = gen_noisy_addition(
            n_groups=int(cfg["corpus.n"]),
            n_clean=int(cfg["corpus.n_clean"]),
            digits=int(cfg["corpus.digits"]),
            samples_per_group=int(cfg["corpus.samples_per_task"]),
            seed=int(cfg["corpus.seed"]),
            target_samples=target_samples,
        )
    else:
        raise StageError(f"unknown corpus kind {kind!r}")
    _record_config(run, cfg)
    save_corpus(run.path("corpus"), corpus)
    print(f"gen: wrote {run.path('corpus')} ({corpus.n_tasks} tasks)")


def stage_meta_train(run: RunDir, cfg: dict[str, str]) -> None:
    corpus, net = _load_model_pieces(run, cfg)
    fit = meta_train(net, corpus, _meta_train_config(cfg, corpus))
    save_checkpoint(
        run.path("checkpoint"),
        fit.params,
        config_digest=config_digest(cfg),
        corpus_digest=corpus.digest(),
    )
    _record_config(run, cfg)
    print(
        f"meta-train: {fit.epochs_run} epochs, train loss {fit.final_train_loss:.4f}, "
        f"wrote {run.path('checkpoint')}"
    )


def stage_cache(run: RunDir, cfg: dict[str, str]) -> None:
    corpus, net = _load_model_pieces(run, cfg)
    theta, _, corpus_dig = load_checkpoint(run.require("checkpoint", "meta-train"))
    if corpus_dig != corpus.digest():
        raise StageError("checkpoint was trained on a different corpus; re-run meta-train")
    projector = Projector(p=net.param_count, d=int(cfg["project.d"]), seed=int(cfg["project.seed"]))
    cache = build_cache(net, theta, corpus, projector)
    save_cache(run.path("cache"), cache)
    _record_config(run, cfg)
    print(f"cache: {cache.n_entries} train entries, wrote {run.path('cache')}")


def _load_estimation_state(run: RunDir, cfg: dict[str, str]):
    corpus, net = _load_model_pieces(run, cfg)
    theta, _, corpus_dig = load_checkpoint(run.require("checkpoint", "meta-train"))
    if corpus_dig != corpus.digest():
        raise StageError("checkpoint was trained on a different corpus; re-run meta-train")
    cache = load_cache(run.require("cache", "cache"))
    if cache.theta_star_digest != param_digest(theta):
        raise StageError("cache does not match the checkpoint; re-run cache")
    projector = Projector(p=net.param_count, d=cache.d, seed=cache.projector_seed)
    return corpus, net, theta, cache, projector


def stage_estimate(run: RunDir, cfg: dict[str, str], subsets: list[str]) -> None:
    corpus, net, theta, cache, projector = _load_estimation_state(run, cfg)
    scfg = solve_config(cfg)
    parsed = []
    for spec in subsets:
        ids = frozenset(int(t) for t in spec.split(",") if t != "")
        bad = sorted(set(ids) - set(range(1, corpus.n_tasks + 1)))
        if bad:
            raise StageError(f"unknown task id {bad[0]} in subset {spec!r}")
        parsed.append(ids)
    if not parsed:
        raise StageError("estimate needs at least one --subset")
    results = [
        est.estimate_subset(net, theta, projector, cache, s, corpus.target.val, scfg)
        for s in parsed
    ]
    path = run.path("estimates")
    path.unlink(missing_ok=True)
    est.append_ledger(path, results)
    _record_config(run, cfg)
    for r in results:
        ids = ",".join(str(t) for t in sorted(r.subset)) or "-"
        print(f"estimate: f_hat({ids}) = {r.f_hat:.6f} [{r.solver_iters} iters]")


def stage_select(run: RunDir, cfg: dict[str, str]) -> None:
    corpus, net, theta, cache, projector = _load_estimation_state(run, cfg)
    scfg = solve_config(cfg)
    method = cfg["select.method"]
    if cfg["select.evaluator"] == "oracle":
        evaluator = sel.oracle_evaluator(net, theta, corpus, train_config(cfg, "finetune"))
    else:
        evaluator = sel.estimator_evaluator(net, theta, projector, cache, corpus.target.val, scfg)
    if method == "fs":
        report = sel.forward_select(evaluator, corpus.n_tasks)
    elif method == "re":
        report = sel.ensemble_select(
            evaluator,
            corpus.n_tasks,
            m=int(cfg["select.m"]),
            alpha_frac=float(cfg["select.alpha"]),
            seed=int(cfg["select.seed"]),
            grid=_floats(cfg["select.fraction_grid"]),
        )
    elif method in ("ds-fs", "ds-re"):
        report = sel.select_ds(
            net,
            theta,
            projector,
            cache,
            corpus,
            n_groups=int(cfg["corpus.n"]),
            downstream=method.split("-")[1],
            solve_cfg=scfg,
            seed=int(cfg["select.seed"]),
            m=int(cfg["select.m"]),
            alpha_frac=float(cfg["select.alpha"]),
        )
    else:
        raise StageError(f"unknown selection method {method!r}")
    sel.save_report(
        run.path("selection"),
        report,
        digests={"config": config_digest(cfg), "cache": cache.digest()},
    )
    _record_config(run, cfg)
    chosen = " ".join(str(t) for t in sorted(report.chosen)) or "-"
    print(f"select[{method}]: chose {{{chosen}}}, wrote {run.path('selection')}")


def stage_bench(run: RunDir, cfg: dict[str, str], experiments: list[str]) -> None:
    corpus, net, theta, cache, projector = _load_estimation_state(run, cfg)
    scfg = solve_config(cfg)
    ft_cfg = train_config(cfg, "finetune")
    reports = []
    for name in experiments:
        if name == "rrss":
            reports.append(
                bench.exp_rrss(
                    net,
                    theta,
                    corpus,
                    distances=list(_floats(cfg["bench.rrss_distances"])),
                    n_directions=int(cfg["bench.rrss_directions"]),
                    seed=int(cfg["bench.seed"]),
                )
            )
        elif name == "relerr":
            reports.append(
                bench.exp_relerr(
                    net, theta, projector, cache, corpus, ft_cfg, scfg,
                    m=int(cfg["bench.relerr_subsets"]),
                    seed=int(cfg["bench.seed"]),
                )
            )
        elif name == "speedup":
            reports.append(
                bench.exp_speedup(net, theta, projector, cache, corpus, ft_cfg, scfg)
            )
        elif name == "addition":
            digits = int(cfg["corpus.digits"])
            mc = ModelConfig(
                input_dim=2 * digits * 10,
                hidden_dims=_ints(cfg["addition.hidden_dims"]),
                activation=cfg["addition.activation"],
                num_classes=10,
                num_positions=digits,
                init_scale=float(cfg["model.init_scale"]),
                seed=int(cfg["model.seed"]),
            )
            add_tc = TrainConfig(
                step_size=float(cfg["addition.step_size"]),
                batch_size=int(cfg["train.batch_size"]),
                max_epochs=int(cfg["addition.epochs"]),
                early_stop_patience=10**9,
                seed=int(cfg["train.seed"]),
                optimizer="adam",
                restore_best=False,
            )
            reports.append(
                bench.exp_addition(
                    mc, add_tc, scfg,
                    n_groups=int(cfg["corpus.n"]),
                    n_clean=int(cfg["corpus.n_clean"]),
                    digits=digits,
                    samples_per_group=int(cfg["addition.samples_per_group"]),
                    target_samples=int(cfg["addition.target_samples"]),
                    d=int(cfg["project.d"]),
                    m=int(cfg["addition.m"]),
                    alpha_frac=float(cfg["addition.alpha"]),
                    seed=int(cfg["bench.seed"]),
                )
            )
        elif name == "structure":
            evaluator = sel.estimator_evaluator(net, theta, projector, cache, corpus.target.val, scfg)
            reports.append(bench.exp_structure(evaluator, corpus.n_tasks))
        else:
            raise StageError(f"unknown experiment {name!r}")
    out = run.root / "bench"
    out.mkdir(exist_ok=True)
    for r in reports:
        for table_name, lines in bench.report_to_csv_lines(r).items():
            (out / f"{table_name}.csv").write_text("\n".join(lines) + "\n")
    (out / "summary.txt").write_text(bench.summarize(reports))
    _record_config(run, cfg)
    print(f"bench: wrote {len(reports)} experiment(s) under {out}")


def stage_report(run: RunDir, cfg: dict[str, str]) -> None:
    pieces = []
    if run.path("selection").exists():
        report = sel.load_report(run.path("selection"))
        chosen = " ".join(str(t) for t in sorted(report.chosen)) or "-"
        pieces.append(f"selection[{report.method}]: chosen {{{chosen}}} budget {report.budget}")
    if run.path("estimates").exists():
        lines = run.path("estimates").read_text().strip().splitlines()
        pieces.append(f"estimates: {max(0, len(lines) - 1)} subsets in {run.path('estimates').name}")
    bench_summary = run.root / "bench" / "summary.txt"
    if bench_summary.exists():
        pieces.append(bench_summary.read_text().rstrip())
    if not pieces:
        raise StageError("nothing to report: run estimate, select, or bench first")
    out = run.root / "report"
    out.mkdir(exist_ok=True)
    text = "\n".join(pieces) + "\n"
    (out / "summary.txt").write_text(text)
    print(text, end="")


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    # shared options live in a parent parser with SUPPRESS defaults so they
    # can appear before or after the subcommand without clobbering each other
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--out", help=f"run directory (default ${OUT_ENV_VAR} or ./run)")
    common.add_argument("--config", help="config file of dotted 'key = value' lines")
    common.add_argument("--seed", type=int, help="override every *.seed key at once")
    for key, default in DEFAULT_CONFIG.items():
        common.add_argument(f"--{key}", metavar="V", help=f"(default {default})", dest=key)

    parser = argparse.ArgumentParser(
        prog="gradsel",
        description="estimate fine-tuning losses from cached gradients and select task subsets",
        parents=[common],
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", help="generate the corpus", parents=[common])
    sub.add_parser("meta-train", help="train the meta-initialization on all tasks", parents=[common])
    sub.add_parser("cache", help="cache per-sample margins and projected gradients", parents=[common])
    p_est = sub.add_parser("estimate", help="estimate fine-tuned losses for subsets", parents=[common])
    p_est.add_argument(
        "--subset",
        action="append",
        default=[],
        help="comma-separated task ids; repeatable",
    )
    sub.add_parser("select", help="run subset selection", parents=[common])
    p_bench = sub.add_parser("bench", help="run canned experiments", parents=[common])
    p_bench.add_argument(
        "--exp",
        action="append",
        default=[],
        help="rrss | relerr | speedup | addition | structure (repeatable; default rrss)",
    )
    sub.add_parser("report", help="summarize run artifacts", parents=[common])
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    overrides = {
        key: getattr(args, key)
        for key in DEFAULT_CONFIG
        if getattr(args, key, None) is not None
    }
    seed = getattr(args, "seed", None)
    if seed is not None:
        for key in DEFAULT_CONFIG:
            if key.endswith(".seed"):
                overrides.setdefault(key, str(seed))

    out_root = getattr(args, "out", None) or os.environ.get(OUT_ENV_VAR) or "run"
    run = RunDir(Path(out_root))

    try:
        cfg = resolve_config(getattr(args, "config", None), overrides)
        with run.lock():
            if args.command == "gen":
                stage_gen(run, cfg)
            elif args.command == "meta-train":
                stage_meta_train(run, cfg)
            elif args.command == "cache":
                stage_cache(run, cfg)
            elif args.command == "estimate":
                stage_estimate(run, cfg, args.subset)
            elif args.command == "select":
                stage_select(run, cfg)
            elif args.command == "bench":
                stage_bench(run, cfg, args.exp or ["rrss"])
            elif args.command == "report":
                stage_report(run, cfg)
    except StageError as e:
        print(f"gradsel {args.command}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
