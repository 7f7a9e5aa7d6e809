"""Command-line surface: gen, train, eval, swap, sample, spectrum, identify.

Exit codes: 0 success, 2 configuration/validation error, 3 numeric failure
(with a spectrum dump path when one is available).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from . import koopman, metrics, model, persist, runconfig, synthdata
from .container import Container, read_container, write_container
from .errors import (ConfigError, IntegrityError, NumericError, ParseError,
                     PreconditionError, ShapeError, StateError)


def _load_dataset(path: str):
    return persist.dataset_from_container(read_container(path))


def _load_checkpoint(path: str):
    return persist.checkpoint_from_container(read_container(path))


def cmd_gen(args) -> int:
    rc = runconfig.load_run_config(args.config)
    gen_cfg = rc.generator
    if args.dataset:
        if args.dataset != gen_cfg.dataset:
            gen_cfg = runconfig.generator_config_from_meta(
                dict(runconfig.generator_config_to_meta(gen_cfg), dataset=args.dataset))
    train, test = synthdata.generate(gen_cfg)
    write_container(args.out, persist.dataset_to_container(train, test, gen_cfg))
    print(f"wrote dataset {args.out}: {train.b} train / {test.b} test sequences")
    return 0


def cmd_train(args) -> int:
    rc = runconfig.load_run_config(args.config)
    train_batch, _, gen_cfg = _load_dataset(args.data)
    model_cfg = rc.model
    if runconfig.derived_m(gen_cfg) != model_cfg.m:
        raise ConfigError(
            f"model.m={model_cfg.m} does not match dataset observation dim "
            f"{runconfig.derived_m(gen_cfg)}")
    ckpt = model.train(model_cfg, train_batch.frames, progress=args.progress)
    write_container(args.out, persist.checkpoint_to_container(ckpt))
    if args.log:
        with open(args.log, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "L", "L_rec", "L_pred", "L_stat", "L_dyn"])
            for rec in ckpt.loss_history:
                writer.writerow([rec["epoch"], rec["L"], rec["L_rec"],
                                 rec["L_pred"], rec["L_stat"], rec["L_dyn"]])
    print(f"wrote checkpoint {args.out} ({ckpt.step} steps)")
    return 0


def cmd_eval(args) -> int:
    ckpt = _load_checkpoint(args.ckpt)
    train_batch, test_batch, gen_cfg = _load_dataset(args.data)
    protocol = args.protocol
    eer_factor = args.eer_factor or (
        "speaker" if gen_cfg.dataset == "oscillators" else "color")
    judge = metrics.train_judge(train_batch)
    gen = metrics.eval_generation_metrics(
        ckpt, test_batch, judge, protocol,
        epochs=args.sample_epochs, seed=args.seed)
    eer = metrics.eval_eer(ckpt, test_batch, eer_factor)
    report = {
        "acc": gen["acc"], "is": gen["is"],
        "h_y_given_x": gen["h_y_given_x"], "h_y": gen["h_y"],
        "eer_static": eer["eer_static"], "eer_dynamic": eer["eer_dynamic"],
        "mean": gen["mean"], "std": gen["std"],
    }
    with open(args.json, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote metrics {args.json}")
    return 0


def _named_subspaces(ckpt, train_batch, batch, names: list[str]):
    """Resolve factor names to conjugate-closed index sets on `batch`'s spectrum."""
    latent, spectrum = metrics.batch_spectrum(ckpt, batch)
    part = koopman.partition_spectrum(spectrum, ckpt.config.k_s, ckpt.config.selection)
    resolved: dict[str, tuple[int, ...]] = {}
    judge = None
    for name in names:
        if name == "static":
            resolved[name] = part.i_stat
        elif name == "dynamic":
            resolved[name] = part.i_dyn
        else:
            if judge is None:
                judge = metrics.train_judge(train_batch)
            idx = metrics.identify_factor_subspace(ckpt, batch, judge, name)
            if idx is None:
                raise ConfigError(f"factor {name!r} could not be identified")
            resolved[name] = idx
    return latent, spectrum, resolved


def cmd_swap(args) -> int:
    ckpt = _load_checkpoint(args.ckpt)
    train_batch, test_batch, _ = _load_dataset(args.data)
    names = [f.strip() for f in args.factors.split(",") if f.strip()]
    if not names:
        raise ConfigError("--factors needs at least one factor name")
    latent, spectrum, resolved = _named_subspaces(ckpt, train_batch, test_batch, names)
    indices = tuple(sorted(set().union(*[set(v) for v in resolved.values()])))
    coeffs = koopman.project(latent, spectrum)
    swapped = koopman.swap_factors(coeffs, args.src, args.tgt, indices, spectrum)
    decoded = model.decode_eval(ckpt, koopman.reconstruct(swapped, spectrum))
    out = Container(kind="dataset", meta={
        "generator": {}, "seed": ckpt.seed, "value_range": test_batch.value_range,
        "factor_roles": {}, "factor_arity": {}, "factors": [], "aux": [],
        "swap": {"src": args.src, "tgt": args.tgt, "factors": names,
                 "indices": [int(i) for i in indices]},
    }, arrays={"train_frames": decoded[:0], "test_frames": decoded})
    write_container(args.out, out)
    print(f"wrote swapped sequences {args.out} (indices {list(indices)})")
    return 0


def cmd_sample(args) -> int:
    ckpt = _load_checkpoint(args.ckpt)
    _, test_batch, _ = _load_dataset(args.data)
    latent, spectrum = metrics.batch_spectrum(ckpt, test_batch)
    part = koopman.partition_spectrum(spectrum, ckpt.config.k_s, ckpt.config.selection)
    indices = part.i_stat if args.subspace == "static" else part.i_dyn
    coeffs = koopman.project(latent, spectrum)
    sampled = koopman.sample_convex(coeffs, indices, seed=args.seed, spectrum=spectrum)
    decoded = model.decode_eval(ckpt, koopman.reconstruct(sampled, spectrum))
    out = Container(kind="dataset", meta={
        "generator": {}, "seed": args.seed, "value_range": test_batch.value_range,
        "factor_roles": {}, "factor_arity": {}, "factors": [], "aux": [],
        "sample": {"subspace": args.subspace, "indices": [int(i) for i in indices]},
    }, arrays={"train_frames": decoded[:0], "test_frames": decoded})
    write_container(args.out, out)
    print(f"wrote sampled sequences {args.out}")
    return 0


def cmd_spectrum(args) -> int:
    ckpt = _load_checkpoint(args.ckpt)
    _, test_batch, _ = _load_dataset(args.data)
    _, spectrum = metrics.batch_spectrum(ckpt, test_batch)
    part = koopman.partition_spectrum(spectrum, ckpt.config.k_s, ckpt.config.selection)
    stat = set(part.i_stat)
    with open(args.csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "re", "im", "modulus", "dist_to_one", "partition"])
        for i, lam in enumerate(spectrum.values):
            writer.writerow([i, lam.real, lam.imag, abs(lam), abs(lam - 1.0),
                             "static" if i in stat else "dynamic"])
    print(f"wrote spectrum {args.csv}")
    return 0


def cmd_identify(args) -> int:
    ckpt = _load_checkpoint(args.ckpt)
    train_batch, test_batch, _ = _load_dataset(args.data)
    judge = metrics.train_judge(train_batch)
    idx = metrics.identify_factor_subspace(ckpt, test_batch, judge, args.factor,
                                           seed=args.seed)
    report = {"factor": args.factor,
              "identified": idx is not None,
              "indices": None if idx is None else [int(i) for i in idx]}
    with open(args.json, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote subspace {args.json}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skd",
        description="Structured Koopman autoencoder for multifactor "
                    "sequential disentanglement")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset container")
    p.add_argument("--dataset", choices=["toy-sprites", "oscillators"], default=None)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None, help="per-epoch loss CSV")
    p.add_argument("--progress", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="disentanglement metrics on the test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--protocol", default="fix-dynamic-sample-static",
                   choices=["fix-dynamic-sample-static", "fix-static-sample-dynamic"])
    p.add_argument("--json", required=True)
    p.add_argument("--sample-epochs", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eer-factor", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("swap", help="swap factor coefficients between two samples")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--src", type=int, required=True)
    p.add_argument("--tgt", type=int, required=True)
    p.add_argument("--factors", required=True,
                   help="comma-separated: factor names, 'static', or 'dynamic'")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_swap)

    p = sub.add_parser("sample", help="convex-hull sampling on a subspace")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--subspace", choices=["static", "dynamic"], required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("spectrum", help="export the eigenvalue table as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--csv", required=True)
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("identify", help="search for a named factor's subspace")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--factor", required=True)
    p.add_argument("--json", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_identify)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParseError, PreconditionError, ShapeError, StateError,
            FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (NumericError, IntegrityError) as e:
        dump = "skd_spectrum_dump.txt"
        with open(dump, "w", encoding="utf-8") as fh:
            fh.write(str(e) + "\n")
        print(f"numeric failure: {e} (diagnostics: {dump})", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
