"""Command-line entry point.

Subcommands: train, gradcheck, eval-losses, noise-sweep.
Exit codes: 0 success, 1 validation error, 2 numeric failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import checks as C
from . import data as D
from . import losses as L
from . import nn as N
from . import report
from . import tensor as T
from .config import ConfigError, ExperimentConfig, load_config
from .data import FormatError
from .losses import LossConfig, LossError
from .nn import BuildError, build_network
from .rng import substream
from .train import NoiseConfig, TrainConfig, TrainConfigError, run_experiment

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERIC = 2
EXIT_IO = 3

GRADCHECK_TOLERANCE = 1e-4


class NumericFailure(Exception):
    """A verification or training run failed numerically."""


def _load_data(cfg: ExperimentConfig):
    if cfg.dataset_kind == "synthetic":
        spec = cfg.synthetic
        # the dataset stream is tied to the run seed so --seed varies the data too
        spec = D.SyntheticSpec(**{**spec.__dict__, "seed": cfg.train.seed})
        train_ds, test_ds = D.generate_synthetic(spec)
    else:
        train_ds = D.load_dataset(cfg.clds_train)
        test_ds = D.load_dataset(cfg.clds_test)
        if train_ds.m != test_ds.m:
            raise ConfigError(
                f"train dataset has {train_ds.m} classes, test has {test_ds.m}"
            )
    return train_ds, test_ds


def _build_net(cfg: ExperimentConfig, train_ds: D.Dataset):
    m = train_ds.m
    input_shape = train_ds.images.shape[1:]
    linears = [s for s in cfg.arch if s.kind == "linear"]
    if linears[-1].units != m:
        raise ConfigError(
            f"arch.head: final linear has {linears[-1].units} units, dataset has {m} classes"
        )
    return build_network(cfg.arch, m, input_shape, cfg.train.seed, cfg.train.dtype)


def cmd_train(args) -> int:
    cfg = load_config(args.config, overrides=vars(args))
    train_ds, test_ds = _load_data(cfg)
    net = _build_net(cfg, train_ds)
    cfg.loss.validate(net)

    out_dir = Path(cfg.output_dir)
    metrics = run_experiment(
        net,
        train_ds.images,
        train_ds.labels,
        test_ds.images,
        test_ds.labels,
        cfg.train,
        cfg.loss,
        cfg.noise,
        log=None if args.quiet else print,
    )
    csv_path, json_path = D.write_metrics(out_dir, metrics, cfg.echo)
    fig_path = report.save_training_curves(metrics, out_dir / "curves.png")
    print(f"wrote {csv_path}, {json_path}, {fig_path}")
    print(f"wall_time_s {metrics.wall_time_s:.3f}")
    print(f"best_test_error {metrics.best_test_error:.6g}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config, overrides=vars(args))
    kinds = set(cfg.loss.active) or {"out", "mid", "pull_push", "kernel"}
    if cfg.dataset_kind == "synthetic":
        input_shape, m = cfg.input_shape, cfg.classes
    else:
        train_ds = D.load_dataset(cfg.clds_train)
        input_shape, m = train_ds.images.shape[1:], train_ds.m
    net = build_network(cfg.arch, m, input_shape, cfg.train.seed, np.float64)
    loss_cfg = cfg.loss
    if "out" in kinds:
        LossConfig(**{**loss_cfg.__dict__, "active": frozenset({"out"})}).validate(net)

    rng = substream(cfg.train.seed, 3000)
    x = rng.random((4,) + tuple(input_shape))
    labels = rng.integers(0, m, size=4)
    y = np.eye(m)[labels]

    if args.inject_fault:
        T.set_fault("matmul_grad")
    try:
        results = C.run_gradient_checks(net, x, y, loss_cfg, h=args.h, kinds=kinds)
    finally:
        T.set_fault(None)

    failed = False
    for r in results:
        status = "PASS" if r.max_rel_err <= GRADCHECK_TOLERANCE else "FAIL"
        print(f"{r.name:18s} max_rel_err {r.max_rel_err:.3e} {status}")
        if r.locality_violations:
            print(f"{r.name:18s} out-of-scope gradients: {', '.join(r.locality_violations)}")
            failed = True
        failed = failed or r.max_rel_err > GRADCHECK_TOLERANCE
    if failed:
        raise NumericFailure("gradient checks failed")
    print("all gradient checks passed")
    return EXIT_OK


def _parse_inputs(pairs: list[str]) -> dict[str, np.ndarray]:
    tensors = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--in expects name=path, got {pair!r}")
        name, path = pair.split("=", 1)
        tensors[name] = D.load_tensor(path)
    return tensors


def _collect_series(tensors: dict[str, np.ndarray], prefix: str) -> list[np.ndarray]:
    keys = sorted(k for k in tensors if k.startswith(prefix) and k[len(prefix):].isdigit())
    if not keys:
        raise ConfigError(f"need inputs named {prefix}1, {prefix}2, ... for this loss")
    return [tensors[k] for k in sorted(keys, key=lambda k: int(k[len(prefix):]))]


def cmd_eval_losses(args) -> int:
    tensors = _parse_inputs(args.inputs)
    name = args.loss
    if name == "j-hard":
        value = L.j_hard(tensors["y"], T.Tensor(tensors["z"]), args.T).item()
    elif name == "j-soft":
        value = L.j_soft(tensors["q"], T.Tensor(tensors["z"]), args.T).item()
    elif name == "l-out":
        zs = _collect_series(tensors, "z")
        branches = N.BranchSet(logits=[T.Tensor(z) for z in zs], masks=[], K=len(zs), n=1)
        cfg = LossConfig(active={"out"}, alpha_out=args.alpha_out, T=args.T)
        value = L.l_out(tensors["y"], branches, cfg).item()
    elif name == "l-mid":
        zs = [T.Tensor(z) for z in _collect_series(tensors, "z")]
        cfg = LossConfig(
            active={"mid"}, alpha_mid=args.alpha_mid, beta_mid=args.beta_mid, T=args.T
        )
        value = L.l_mid_layer(tensors["y"], zs, args.layer, cfg).item()
    elif name == "l-pull-push":
        s_feat = L.similarity_matrix(L.std_descriptor(T.Tensor(tensors["h"])))
        s_y = L.target_similarity(tensors["y"])
        s_x = L.input_similarity(tensors["x"])
        pull = L._frobenius(s_feat, s_y).item()
        push = L._frobenius(s_feat, s_x).item()
        value = args.alpha_pull * pull - args.alpha_push * push
    elif name == "l-kernel":
        cov = L.kernel_covariance(T.Tensor(tensors["w"])).data
        off = cov * (1.0 - np.eye(cov.shape[0]))
        value = float(np.sqrt((off ** 2).sum()))
    else:
        raise ConfigError(f"unknown loss {name!r}")
    print(f"{name} = {value:.12g}")
    return EXIT_OK


def cmd_noise_sweep(args) -> int:
    levels = [float(v) for v in args.levels.split(",") if v != ""]
    if not levels or any(not 0.0 <= l <= 1.0 for l in levels):
        raise ConfigError(f"levels must lie in [0, 1], got {levels}")
    seeds = [int(v) for v in args.seeds.split(",")] if args.seeds else [None]

    configs = []
    for path in args.configs:
        cfg = load_config(path, overrides={"epochs": args.epochs, "precision": args.precision})
        configs.append((Path(path).stem, cfg))

    out_dir = Path(args.out) if args.out else Path(configs[0][1].output_dir) / "noise_sweep"
    rows = []
    for variant, cfg in configs:
        for seed in seeds:
            run_seed = cfg.train.seed if seed is None else seed
            for level in levels:
                run_train = TrainConfig(**{**cfg.train.__dict__, "seed": run_seed})
                run_noise = NoiseConfig(level=level, reshuffle_per_epoch=cfg.noise.reshuffle_per_epoch)
                run_noise.validate()
                spec = D.SyntheticSpec(**{**cfg.synthetic.__dict__, "seed": run_seed}) \
                    if cfg.dataset_kind == "synthetic" else None
                if spec is not None:
                    train_ds, test_ds = D.generate_synthetic(spec)
                else:
                    train_ds = D.load_dataset(cfg.clds_train)
                    test_ds = D.load_dataset(cfg.clds_test)
                net = build_network(
                    cfg.arch, train_ds.m, train_ds.images.shape[1:], run_seed, run_train.dtype
                )
                cfg.loss.validate(net)
                metrics = run_experiment(
                    net, train_ds.images, train_ds.labels, test_ds.images, test_ds.labels,
                    run_train, cfg.loss, run_noise,
                )
                sub = out_dir / variant / f"level_{level:g}_seed_{run_seed}"
                echo = {**cfg.echo, "noise": {**cfg.echo["noise"], "level": level},
                        "train": {**cfg.echo["train"], "seed": run_seed}}
                D.write_metrics(sub, metrics, echo)
                rows.append(
                    {
                        "variant": variant,
                        "level": level,
                        "seed": run_seed,
                        "best_test_error": metrics.best_test_error,
                    }
                )
                print(
                    f"{variant} level {level:g} seed {run_seed}: "
                    f"best_test_error {metrics.best_test_error:.6g}"
                )

    out_dir.mkdir(parents=True, exist_ok=True)
    sweep_csv = out_dir / "sweep.csv"
    lines = ["variant,level,seed,best_test_error"]
    for r in rows:
        lines.append(f"{r['variant']},{r['level']:.6g},{r['seed']},{r['best_test_error']:.6g}")
    sweep_csv.write_text("\n".join(lines) + "\n")

    comparison_csv = out_dir / "comparison.csv"
    variants = [name for name, _ in configs]
    lines = ["level," + ",".join(variants)]
    for level in levels:
        cells = [f"{level:.6g}"]
        for variant in variants:
            errs = [r["best_test_error"] for r in rows
                    if r["variant"] == variant and r["level"] == level]
            cells.append(f"{sum(errs) / len(errs):.6g}")
        lines.append(",".join(cells))
    comparison_csv.write_text("\n".join(lines) + "\n")

    fig_path = report.save_sweep_figure(rows, out_dir / "sweep.png")
    print(f"wrote {sweep_csv}, {comparison_csv}, {fig_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="collabnn",
        description="Train a small CNN with collaborative objectives and verify its gradients.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one experiment from a JSON config")
    p_train.add_argument("config")
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--epochs", type=int, default=None)
    p_train.add_argument("--out", default=None)
    p_train.add_argument("--precision", type=int, choices=(32, 64), default=None)
    p_train.add_argument("--quiet", action="store_true")
    p_train.set_defaults(func=cmd_train)

    p_check = sub.add_parser("gradcheck", help="finite-difference and locality checks")
    p_check.add_argument("config")
    p_check.add_argument("--seed", type=int, default=None)
    p_check.add_argument("--epochs", type=int, default=None)
    p_check.add_argument("--out", default=None)
    p_check.add_argument("--precision", type=int, choices=(32, 64), default=None)
    p_check.add_argument("--h", type=float, default=1e-5, help="finite-difference step")
    p_check.add_argument(
        "--inject-fault", action="store_true",
        help="corrupt one backward rule; the checks must then fail (negative control)",
    )
    p_check.set_defaults(func=cmd_gradcheck)

    p_eval = sub.add_parser("eval-losses", help="print one loss value from tensor files")
    p_eval.add_argument(
        "--loss", required=True,
        choices=("j-hard", "j-soft", "l-out", "l-mid", "l-pull-push", "l-kernel"),
    )
    p_eval.add_argument("--in", dest="inputs", action="append", default=[],
                        metavar="NAME=PATH", help="named CLTS tensor input (repeatable)")
    p_eval.add_argument("--T", type=float, default=1.0)
    p_eval.add_argument("--alpha-out", type=float, default=0.5)
    p_eval.add_argument("--alpha-mid", type=float, default=0.05)
    p_eval.add_argument("--beta-mid", type=float, default=0.05)
    p_eval.add_argument("--alpha-pull", type=float, default=0.1)
    p_eval.add_argument("--alpha-push", type=float, default=0.1)
    p_eval.add_argument("--layer", type=int, default=1, help="layer index for l-mid")
    p_eval.set_defaults(func=cmd_eval_losses)

    p_sweep = sub.add_parser("noise-sweep", help="train across label-noise levels")
    p_sweep.add_argument("configs", nargs="+")
    p_sweep.add_argument("--levels", required=True, help="comma-separated fractions in [0,1]")
    p_sweep.add_argument("--seeds", default=None, help="comma-separated seeds (default: config seed)")
    p_sweep.add_argument("--out", default=None)
    p_sweep.add_argument("--epochs", type=int, default=None)
    p_sweep.add_argument("--precision", type=int, choices=(32, 64), default=None)
    p_sweep.set_defaults(func=cmd_noise_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TrainConfigError, BuildError, LossError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (T.TensorError, NumericFailure) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
