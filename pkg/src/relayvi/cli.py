"""Command-line driver.

Subcommands: train, infer, impute, probe, sweep, progression, ablate,
generate. Flags mirror the run configuration; ``--config FILE`` reads a
plain ``key = value`` file (# comments) whose entries are overridden by
explicit flags. ``--seed`` is mandatory everywhere reproducibility
matters, which is every subcommand.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import MaskedDataset, MissingSpec, apply_missing, export_csv, subsample
from .evaluate import (
    ablate_budget,
    ablate_groupings,
    eval_imputation,
    eval_test_loss,
    export_progression_pgm,
    progression_reconstructions,
    reconstruction_grid,
    supervised_probe,
    write_pgm,
)
from .harness import SweepSpec, aggregate, preset_sweep, resolve_dataset, run_sweep, run_units
from .models import load_encoder, load_mlp, save_encoder, save_mlp
from .optimize import TrainConfig, generate, infer_test_bank, infer_test_vae, train_rvi, train_vad, train_vae
from .posterior import load_bank, posterior_mean_values, save_bank
from .records import write_records

TRAINERS = {"rvi": train_rvi, "vad": train_vad, "vae": train_vae}

ARTIFICIAL_TEST_SEED_OFFSET = 1_000_003


def parse_arch(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split("x"))


def parse_int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(part) for part in text.split(","))


def parse_float_list(text: str) -> tuple[float, ...]:
    return tuple(float(part) for part in text.split(","))


def parse_arch_list(text: str) -> tuple[tuple[int, ...], ...]:
    return tuple(parse_arch(part) for part in text.split(","))


def read_config_file(path) -> dict[str, str]:
    """Plain key = value lines; # starts a comment."""
    values = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line without '=': {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def write_config_file(path, items: dict) -> None:
    with open(path, "w") as f:
        for key, value in items.items():
            f.write(f"{key} = {value}\n")


def add_dataset_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", choices=("artificial", "mnist", "fashion-mnist"), default="artificial")
    p.add_argument("--data-dir", default=None, help="IDX dataset root (default: $RVI_DATA_DIR)")
    p.add_argument("--artificial-n", type=int, default=10_000, help="rows generated for the artificial dataset")
    p.add_argument("--train-cap", type=int, default=10_000, help="max training rows (0 disables the cap)")


def add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", choices=("rvi", "vad", "vae"), default="rvi")
    p.add_argument("--arch", type=parse_arch, default=(64, 64), help="decoder hidden widths, e.g. 64x64")
    p.add_argument("--network-lr", type=float, default=1e-3)
    p.add_argument("--posterior-lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=250)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--missing", default="none", help="none | mcar:<rate> | boxes:<count>")
    p.add_argument("--group-sizes", type=parse_int_list, default=(25, 50, 100))
    p.add_argument("--budget-fraction", type=float, default=0.5)
    p.add_argument("--mode", choices=("topk", "cluster"), default="topk")
    p.add_argument("--latent", type=int, default=64)


def add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="key = value file; flags override its entries")
    p.add_argument("--seed", type=int, default=None, help="required for reproducibility")
    p.add_argument("--out", default="out", help="output directory")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="relayvi", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)
    sub = {}

    sub["train"] = subs.add_parser("train", help="train one model and write checkpoints + run CSV")
    add_train_flags(sub["train"])
    add_dataset_flags(sub["train"])

    sub["infer"] = subs.add_parser("infer", help="test-time inference with frozen model parameters")
    sub["infer"].add_argument("--from", dest="from_dir", required=True, help="train output directory")
    sub["infer"].add_argument("--steps", type=int, default=250)
    sub["infer"].add_argument("--posterior-lr", type=float, default=None, help="override the training value")
    sub["infer"].add_argument("--missing", default="none")
    sub["infer"].add_argument("--test-n", type=int, default=1000, help="test rows (artificial / capped IDX)")
    add_dataset_flags(sub["infer"])

    sub["impute"] = subs.add_parser("impute", help="imputation scoring on revealed missing entries")
    sub["impute"].add_argument("--from", dest="from_dir", required=True)
    sub["impute"].add_argument("--steps", type=int, default=250)
    sub["impute"].add_argument("--posterior-lr", type=float, default=None)
    sub["impute"].add_argument("--missing", default="mcar:0.5")
    sub["impute"].add_argument("--test-n", type=int, default=1000)
    add_dataset_flags(sub["impute"])

    sub["probe"] = subs.add_parser("probe", help="supervised probe over frozen posterior means")
    sub["probe"].add_argument("--from", dest="from_dir", required=True)
    sub["probe"].add_argument("--probe-epochs", type=int, default=250)
    sub["probe"].add_argument("--hidden", type=int, default=64)
    sub["probe"].add_argument("--probe-lr", type=float, default=1e-3)
    sub["probe"].add_argument("--holdout", type=float, default=0.2)
    sub["probe"].add_argument("--shuffle-labels", action="store_true", help="null control")
    add_dataset_flags(sub["probe"])

    sub["sweep"] = subs.add_parser("sweep", help="run a configuration grid and aggregate CSVs")
    sub["sweep"].add_argument("--preset", default=None, help="paper-6.1-scaled | paper-6.1-full | posterior-lr-study")
    sub["sweep"].add_argument("--methods", type=lambda s: tuple(s.split(",")), default=None)
    sub["sweep"].add_argument("--network-lrs", type=parse_float_list, default=None)
    sub["sweep"].add_argument("--posterior-lrs", type=parse_float_list, default=None)
    sub["sweep"].add_argument("--archs", type=parse_arch_list, default=None)
    sub["sweep"].add_argument("--missing-rates", type=parse_float_list, default=None)
    sub["sweep"].add_argument("--reps", type=int, default=None)
    sub["sweep"].add_argument("--epochs", type=int, default=None)
    sub["sweep"].add_argument("--batch-size", type=int, default=None)
    sub["sweep"].add_argument("--parallelism", type=int, default=1)
    sub["sweep"].add_argument("--group-sizes", type=parse_int_list, default=None)
    sub["sweep"].add_argument("--budget-fraction", type=float, default=None)
    sub["sweep"].add_argument("--mode", choices=("topk", "cluster"), default=None)
    sub["sweep"].add_argument("--latent", type=int, default=None)
    add_dataset_flags(sub["sweep"])

    sub["aggregate"] = subs.add_parser("aggregate", help="recompute summary/curves from run files")
    sub["aggregate"].add_argument("--run-dir", required=True)

    sub["progression"] = subs.add_parser("progression", help="per-group reconstruction stages as PGM + CSV")
    sub["progression"].add_argument("--from", dest="from_dir", required=True)
    sub["progression"].add_argument("--rows", type=int, default=16, help="datapoints in the grid")
    sub["progression"].add_argument("--steps", type=int, default=250)
    sub["progression"].add_argument("--missing", default="none")
    sub["progression"].add_argument("--test-n", type=int, default=256)
    add_dataset_flags(sub["progression"])

    sub["ablate"] = subs.add_parser("ablate", help="budget-fraction or grouping ablations")
    sub["ablate"].add_argument("--what", choices=("budget", "grouping"), required=True)
    sub["ablate"].add_argument("--fractions", type=parse_float_list, default=(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9))
    sub["ablate"].add_argument("--groupings", type=parse_arch_list, default=((25,), (25, 50), (25, 50, 100)))
    add_train_flags(sub["ablate"])
    add_dataset_flags(sub["ablate"])

    sub["generate"] = subs.add_parser("generate", help="decode prior samples from a trained decoder")
    sub["generate"].add_argument("--from", dest="from_dir", required=True)
    sub["generate"].add_argument("-n", "--n-samples", type=int, default=16)

    for p in sub.values():
        add_common_flags(p)
    return parser, sub


def apply_config_file(parser, sub, argv):
    """Pre-scan for the subcommand and --config, then install file values as defaults."""
    if not argv or argv[0] not in sub:
        return
    if "--config" in argv:
        path = argv[argv.index("--config") + 1]
    else:
        return
    values = read_config_file(path)
    target = sub[argv[0]]
    known = {action.dest for action in target._actions}
    unknown = set(values) - known
    if unknown:
        parser.error(f"unknown config keys: {sorted(unknown)}")
    typed = {}
    for action in target._actions:
        if action.dest in values:
            raw = values[action.dest]
            if action.type is not None:
                typed[action.dest] = action.type(raw)
            elif isinstance(action.const, bool) or isinstance(action.default, bool):
                typed[action.dest] = raw.lower() in ("1", "true", "yes")
            else:
                typed[action.dest] = raw
    target.set_defaults(**typed)


def require_seed(parser, args):
    if getattr(args, "seed", None) is None:
        parser.error("--seed is required")


def load_train_dataset(args, seed: int):
    ds = resolve_dataset(args.dataset, "train", args.data_dir, seed, args.artificial_n)
    if args.train_cap and ds.n > args.train_cap:
        ds = subsample(ds, args.train_cap, seed=seed)
    return ds


def load_test_dataset(args, seed: int, n: int | None = None):
    if args.dataset == "artificial":
        ds = resolve_dataset(args.dataset, "test", args.data_dir, seed + ARTIFICIAL_TEST_SEED_OFFSET, n or args.artificial_n)
    else:
        ds = resolve_dataset(args.dataset, "test", args.data_dir, seed)
    if n and ds.n > n:
        ds = subsample(ds, n, seed=seed)
    return ds


def config_from_args(args) -> TrainConfig:
    return TrainConfig(
        method=args.method,
        dataset=args.dataset,
        decoder_arch=tuple(args.arch),
        network_lr=args.network_lr,
        posterior_lr=args.posterior_lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        missing=MissingSpec.parse(args.missing, seed=args.seed),
        group_sizes=tuple(args.group_sizes),
        budget_fraction=args.budget_fraction,
        mode=args.mode,
        latent_dim=args.latent,
    )


def save_train_config(out: Path, cfg: TrainConfig, args) -> None:
    write_config_file(
        out / "config.txt",
        {
            "method": cfg.method,
            "dataset": cfg.dataset,
            "arch": "x".join(str(a) for a in cfg.decoder_arch),
            "network_lr": repr(cfg.network_lr),
            "posterior_lr": repr(cfg.posterior_lr),
            "epochs": cfg.epochs,
            "batch_size": cfg.batch_size,
            "seed": cfg.seed,
            "missing": cfg.missing.describe(),
            "group_sizes": ",".join(str(k) for k in cfg.group_sizes),
            "budget_fraction": repr(cfg.budget_fraction),
            "mode": cfg.mode,
            "latent": cfg.latent_dim,
            "data_dir": args.data_dir or "",
            "artificial_n": args.artificial_n,
            "train_cap": args.train_cap,
        },
    )


def load_train_config(from_dir: Path) -> TrainConfig:
    values = read_config_file(from_dir / "config.txt")
    return TrainConfig(
        method=values["method"],
        dataset=values["dataset"],
        decoder_arch=parse_arch(values["arch"]),
        network_lr=float(values["network_lr"]),
        posterior_lr=float(values["posterior_lr"]),
        epochs=int(values["epochs"]),
        batch_size=int(values["batch_size"]),
        seed=int(values["seed"]),
        missing=MissingSpec.parse(values["missing"], seed=int(values["seed"])),
        group_sizes=parse_int_list(values["group_sizes"]),
        budget_fraction=float(values["budget_fraction"]),
        mode=values["mode"],
        latent_dim=int(values["latent"]),
    )


def load_artifacts(from_dir: str):
    from_dir = Path(from_dir)
    cfg = load_train_config(from_dir)
    decoder = load_mlp(from_dir / "decoder.rvim")
    if cfg.method == "vae":
        return cfg, decoder, load_encoder(from_dir / "encoder.rvim")
    return cfg, decoder, load_bank(from_dir / "bank.rvib")


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = config_from_args(args)
    ds = load_train_dataset(args, args.seed)
    ds = apply_missing(ds, cfg.missing)
    model, second, records = TRAINERS[cfg.method](ds, cfg)
    save_mlp(out / "decoder.rvim", model)
    if cfg.method == "vae":
        save_encoder(out / "encoder.rvim", second)
    else:
        save_bank(out / "bank.rvib", second)
    write_records(out / "train_records.csv", records)
    save_train_config(out, cfg, args)
    if records:
        final = records[-1]
        print(f"run {final.run_id}: final train metric {final.train_metric:.6f} over {cfg.epochs} epochs")
    return 0


def _prepare_test(args, cfg: TrainConfig):
    test_ds = load_test_dataset(args, args.seed, n=args.test_n)
    missing = MissingSpec.parse(args.missing, seed=args.seed)
    return apply_missing(test_ds, missing), missing


def cmd_infer(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg, decoder, second = load_artifacts(args.from_dir)
    cfg = replace(cfg, seed=args.seed)
    test_ds, _ = _prepare_test(args, cfg)
    if cfg.method == "vae":
        (mu, _sigma), records = infer_test_vae(decoder, second, test_ds, cfg)
        metric = records[-1].test_metric
    else:
        lr = args.posterior_lr
        test_bank, records = infer_test_bank(decoder, second, test_ds, cfg, args.steps, posterior_lr=lr)
        save_bank(out / "test_bank.rvib", test_bank)
        metric = records[-1].test_metric if records else float("nan")
    write_records(out / "infer_records.csv", records)
    print(f"test metric (observed entries): {metric:.6f}")
    return 0


def cmd_impute(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg, decoder, second = load_artifacts(args.from_dir)
    cfg = replace(cfg, seed=args.seed)
    if args.posterior_lr is not None:
        cfg = replace(cfg, posterior_lr=args.posterior_lr)
    test_ds, missing = _prepare_test(args, cfg)
    if missing.kind == "none":
        raise ValueError("imputation needs a nonzero --missing pattern")
    if cfg.method == "vae":
        raise ValueError("imputation via the amortized baseline is scored through infer")
    train_args_ds = load_train_dataset(args, cfg.seed)
    score, baseline, test_bank = eval_imputation(decoder, second, test_ds, cfg, args.steps, train_ds=train_args_ds)
    save_bank(out / "test_bank.rvib", test_bank)
    with open(out / "imputation.csv", "w") as f:
        f.write("metric,value\n")
        f.write(f"imputation_loss,{score!r}\n")
        f.write(f"mean_imputation_baseline,{baseline!r}\n")
    print(f"imputation loss {score:.6f} (mean-imputation baseline {baseline:.6f})")
    return 0


def cmd_probe(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg, decoder, second = load_artifacts(args.from_dir)
    if cfg.method == "vae":
        raise ValueError("probe expects a posterior bank; train rvi or vad first")
    ds = load_train_dataset(args, cfg.seed)
    if ds.labels is None:
        raise ValueError(f"dataset {args.dataset!r} has no labels to probe")
    if ds.n != second.n:
        raise ValueError(f"bank holds {second.n} rows but dataset has {ds.n}")
    features = posterior_mean_values(second, np.arange(second.n))
    labels = ds.labels
    if args.shuffle_labels:
        labels = np.random.default_rng(args.seed).permutation(labels)
    results = supervised_probe(
        features,
        labels,
        seed=args.seed,
        epochs=args.probe_epochs,
        hidden=args.hidden,
        lr=args.probe_lr,
        holdout_fraction=args.holdout,
        missing_rate=cfg.missing.rate,
        method=cfg.method,
    )
    with open(out / "probe.csv", "w") as f:
        f.write("epoch,loss,accuracy,missing_rate,method,seed\n")
        for r in results:
            f.write(f"{r.epoch},{r.loss!r},{r.accuracy!r},{r.missing_rate!r},{r.method},{r.seed}\n")
    print(f"probe accuracy (held out): {results[-1].accuracy:.4f}")
    return 0


def cmd_sweep(args) -> int:
    overrides = {}
    mapping = {
        "methods": "methods",
        "network_lrs": "network_lrs",
        "posterior_lrs": "posterior_lrs",
        "archs": "archs",
        "missing_rates": "missing_rates",
        "reps": "repetitions",
        "epochs": "epochs",
        "batch_size": "batch_size",
        "group_sizes": "group_sizes",
        "budget_fraction": "budget_fraction",
        "mode": "mode",
        "latent": "latent_dim",
    }
    for flag, field_name in mapping.items():
        value = getattr(args, flag)
        if value is not None:
            overrides[field_name] = value
    overrides.update(
        dataset=args.dataset,
        out_dir=args.out,
        parallelism=args.parallelism,
        base_seed=args.seed,
        train_cap=args.train_cap,
        artificial_n=args.artificial_n,
        data_dir=args.data_dir,
    )
    if args.preset:
        spec = preset_sweep(args.preset, **overrides)
    else:
        spec = SweepSpec(**overrides)
    ok = run_sweep(spec)
    n_units = sum(1 for _ in run_units(spec))
    print(f"sweep finished: {n_units} runs, {'all ok' if ok else 'with failures'}; outputs in {args.out}")
    return 0 if ok else 1


def cmd_aggregate(args) -> int:
    aggregate(args.run_dir)
    print(f"wrote {args.run_dir}/summary.csv and {args.run_dir}/curves.csv")
    return 0


def cmd_progression(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg, decoder, bank = load_artifacts(args.from_dir)
    cfg = replace(cfg, seed=args.seed)
    test_ds, _ = _prepare_test(args, cfg)
    test_bank, _ = infer_test_bank(decoder, bank, test_ds, cfg, args.steps)
    rows = np.arange(min(args.rows, test_ds.n))
    stages = progression_reconstructions(test_bank, decoder, test_ds, np.arange(test_ds.n))
    shown = [s.recon[rows] for s in stages]
    if test_ds.d == 784:
        export_progression_pgm(out / "progression.pgm", stages)
        write_pgm(out / "progression_rows.pgm", reconstruction_grid(shown))
    with open(out / "progression.csv", "w") as f:
        f.write("stage,median_metric\n")
        for s in stages:
            f.write(f"{s.label},{s.median_metric!r}\n")
    print(" -> ".join(f"{s.label}={s.median_metric:.4f}" for s in stages))
    return 0


def cmd_ablate(args) -> int:
    out = Path(args.out)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    cfg = config_from_args(args)
    ds = load_train_dataset(args, args.seed)
    ds = apply_missing(ds, cfg.missing)
    if args.what == "budget":
        results = ablate_budget(ds, args.fractions, cfg)
        for fraction, records in results.items():
            write_records(out / "runs" / f"budget_{fraction:g}.csv", records)
        print(f"budget ablation: {len(results)} fractions written to {out}/runs")
    else:
        results = ablate_groupings(ds, args.groupings, cfg)
        for key, (records, recon, metric) in results.items():
            write_records(out / "runs" / f"grouping_{key}.csv", records)
            if ds.d == 784:
                write_pgm(out / f"grouping_{key}.pgm", reconstruction_grid([recon[:16]]))
        print(
            "grouping ablation: "
            + ", ".join(f"{key}: final metric {metric:.4f}" for key, (_, _, metric) in results.items())
        )
    aggregate(out)
    return 0


def cmd_generate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg, decoder, _second = load_artifacts(args.from_dir)
    samples = generate(decoder, args.n_samples, args.seed)
    export_csv(MaskedDataset(x=samples, mask=np.ones_like(samples)), out / "samples.csv")
    if samples.shape[1] == 784:
        write_pgm(out / "samples.pgm", reconstruction_grid([samples]))
    print(f"wrote {args.n_samples} samples to {out}/samples.csv")
    return 0


COMMANDS = {
    "train": cmd_train,
    "infer": cmd_infer,
    "impute": cmd_impute,
    "probe": cmd_probe,
    "sweep": cmd_sweep,
    "aggregate": cmd_aggregate,
    "progression": cmd_progression,
    "ablate": cmd_ablate,
    "generate": cmd_generate,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser, sub = build_parser()
    apply_config_file(parser, sub, argv)
    args = parser.parse_args(argv)
    if args.command != "aggregate":
        require_seed(parser, args)
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
