"""Command-line entry point.

Subcommands: gen (dataset), attack (perturbation synthesis), eval (apply a
saved perturbation), gradcheck (finite-difference gradient audit).

Exit codes: 0 success, 2 invalid arguments/config, 3 I/O failure,
4 degenerate dataset or failed numerical audit, 5 artifact hash mismatch.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, datagen, tensor_io
from .attack import (EPS_L2_DEFAULT, EPS_LINF_DEFAULT, PATCH_AREA_DEFAULT,
                     AttackConfig, Perturbation, evaluate_metrics, run_attack)
from .core import patch_side_for_area, square_patch_mask
from .datagen import DatasetParams
from .encoder import (build_encoder, default_toy_encoder, encode_batch,
                      encoder_hash, gradcheck, load_encoder, save_encoder)
from .errors import (DegenerateDatasetError, IntegrityError,
                     InvalidArgumentError, UapkitError)
from .rng import Lcg

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DEGENERATE = 4
EXIT_HASH_MISMATCH = 5

GRADCHECK_THRESHOLD = 1e-6


def _threads_from(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("UAP_THREADS")
    if env is not None and env.isdigit() and int(env) > 0:
        return int(env)
    return os.cpu_count() or 1


def _load_encoder_arg(path: str | None):
    if path is None:
        return default_toy_encoder()
    return load_encoder(path)


def _emit_report(report: dict, out_path: Path | None):
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if out_path is not None:
        out_path.write_text(text)


# -- gen ---------------------------------------------------------------------


def cmd_gen(args) -> int:
    params = DatasetParams(
        n_images=args.n_images, texts_per_image=args.texts_per_image,
        image_shape=tuple(args.image_shape), embed_dim=args.embed_dim,
        class_count=args.class_count, noise_level=args.noise_level,
        seed=args.seed, decoder_scale=args.decoder_scale,
        decoder_rank=args.decoder_rank)
    enc = _load_encoder_arg(args.encoder)
    out = Path(args.out)
    manifest_path = datagen.generate(params, enc, out)
    if args.encoder is None:
        save_encoder(enc, out / "encoder.json")
    manifest = json.loads(manifest_path.read_text())
    print(json.dumps({
        "manifest": str(manifest_path),
        "dataset_hash": datagen.dataset_hash(manifest_path),
        "encoder_hash": manifest["encoder_hash"],
        "sha256": manifest["sha256"],
    }, indent=2, sort_keys=True))
    return EXIT_OK


# -- attack ------------------------------------------------------------------


def _mask_for(args, image_shape):
    side = args.mask_side
    if side is None:
        side = patch_side_for_area(image_shape, PATCH_AREA_DEFAULT)
    return side, square_patch_mask(image_shape, side, tuple(args.mask_offset))


def _config_from(args, image_shape) -> tuple[AttackConfig, dict]:
    mask_meta = {}
    if args.mode == "patch":
        if args.norm is not None or args.epsilon is not None:
            raise InvalidArgumentError("--norm/--epsilon are global-mode flags")
        side, mask = _mask_for(args, image_shape)
        mask_meta = {"side": side, "offset": list(args.mask_offset)}
        cfg = AttackConfig(
            k=args.k, eta=args.eta, epochs=args.epochs,
            max_inner_iters=args.max_inner_iters, batch_size=args.batch_size,
            mode="patch", mask=mask, seed=args.seed, shuffle=args.shuffle)
    else:
        if args.norm is None:
            raise InvalidArgumentError("global mode requires --norm")
        epsilon = args.epsilon
        if epsilon is None:
            epsilon = EPS_L2_DEFAULT if args.norm == "l2" else EPS_LINF_DEFAULT
        cfg = AttackConfig(
            k=args.k, eta=args.eta, epochs=args.epochs,
            max_inner_iters=args.max_inner_iters, batch_size=args.batch_size,
            mode="global", norm=args.norm, epsilon=epsilon,
            seed=args.seed, shuffle=args.shuffle)
    return cfg, mask_meta


def _metrics_pair(enc, ds, pert, k_list, threads) -> tuple[dict, dict]:
    """Clean and adversarial metrics over identical query sets.

    The two evaluations are independent, so they map onto a small worker
    pool; results are keyed, making the reduction order-independent.
    """
    with concurrent.futures.ThreadPoolExecutor(max_workers=min(threads, 2)) as pool:
        clean_f = pool.submit(evaluate_metrics, enc, ds, None, k_list)
        adv_f = pool.submit(evaluate_metrics, enc, ds, pert, k_list)
        return clean_f.result(), adv_f.result()


def cmd_attack(args) -> int:
    enc = _load_encoder_arg(args.encoder)
    ds = datagen.load(args.dataset)
    if ds.encoder_hash and ds.encoder_hash != encoder_hash(enc):
        raise IntegrityError("dataset was generated against a different encoder")
    # re-verify the clean-retrieval floor on the loaded pairing
    datagen._floor_check(ds, encode_batch(enc, ds.images))

    cfg, mask_meta = _config_from(args, ds.params.image_shape)
    threads = _threads_from(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    start = time.monotonic()
    pert, trace = run_attack(enc, ds, cfg, args.strategy,
                             enc_hash=encoder_hash(enc), ds_hash=ds.dataset_hash)
    clean, adv = _metrics_pair(enc, ds, pert, tuple(args.k_list), threads)
    elapsed = time.monotonic() - start

    delta_path = out / "delta.uapt"
    tensor_io.write_tensor(delta_path, pert.delta)
    sidecar = {
        "format": "uapkit-perturbation-v1",
        "delta_file": "delta.uapt",
        "delta_sha256": tensor_io.sha256_file(delta_path),
        "mode": cfg.mode,
        "strategy": args.strategy,
        "config": cfg.to_json_dict(),
        "encoder_hash": encoder_hash(enc),
        "dataset_hash": ds.dataset_hash,
        "library_version": __version__,
    }
    if cfg.mode == "patch":
        sidecar["mask"] = mask_meta
    else:
        sidecar["norm"] = cfg.norm
        sidecar["epsilon"] = cfg.epsilon
    (out / "delta.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    (out / "trace.json").write_text(json.dumps({
        "summary": trace.summary(),
        "epoch_metrics": trace.epoch_metrics,
        "commits": [{"epoch": c.epoch, "norm_l2": c.norm_l2, "norm_linf": c.norm_linf}
                    for c in trace.commits],
    }, indent=2, sort_keys=True))

    report = {
        "schema": "uapkit-report-v1",
        "command": "attack",
        "strategy": args.strategy,
        "config": cfg.to_json_dict(),
        "seeds": {"attack": cfg.seed, "dataset": ds.params.seed, "encoder": enc.seed},
        "hashes": {"encoder": encoder_hash(enc), "dataset": ds.dataset_hash,
                   "config": pert.provenance["config_hash"]},
        "clean": clean,
        "adversarial": adv,
        "trace_summary": trace.summary(),
        "threads": threads,
        "wall_clock_seconds": elapsed,
        "library_version": __version__,
    }
    _emit_report(report, out / "report.json")
    return EXIT_OK


# -- eval --------------------------------------------------------------------


def _load_perturbation(sidecar_path: Path, image_shape) -> tuple[Perturbation, dict]:
    sidecar = json.loads(sidecar_path.read_text())
    delta_path = sidecar_path.parent / sidecar["delta_file"]
    if tensor_io.sha256_file(delta_path) != sidecar["delta_sha256"]:
        raise IntegrityError(f"{delta_path}: hash mismatch against sidecar")
    delta = tensor_io.read_tensor(delta_path)
    if sidecar["mode"] == "patch":
        mask = square_patch_mask(image_shape, sidecar["mask"]["side"],
                                 tuple(sidecar["mask"]["offset"]))
        pert = Perturbation(delta=delta, mode="patch", mask=mask)
    else:
        pert = Perturbation(delta=delta, mode="global",
                            norm=sidecar["norm"], epsilon=sidecar["epsilon"])
    return pert, sidecar


def cmd_eval(args) -> int:
    enc = _load_encoder_arg(args.encoder)
    ds = datagen.load(args.dataset)
    pert, sidecar = _load_perturbation(Path(args.perturbation), ds.params.image_shape)

    mismatch = {
        "encoder": sidecar.get("encoder_hash") not in ("", encoder_hash(enc)),
        "dataset": sidecar.get("dataset_hash") not in ("", ds.dataset_hash),
    }
    if any(mismatch.values()) and not args.allow_mismatch:
        names = ", ".join(k for k, v in mismatch.items() if v)
        print(f"error: perturbation sidecar does not match the given {names} "
              "(pass --allow-mismatch for cross-artifact evaluation)",
              file=sys.stderr)
        return EXIT_HASH_MISMATCH

    threads = _threads_from(args)
    start = time.monotonic()
    clean, adv = _metrics_pair(enc, ds, pert, tuple(args.k_list), threads)
    elapsed = time.monotonic() - start

    report = {
        "schema": "uapkit-report-v1",
        "command": "eval",
        "strategy": sidecar.get("strategy", ""),
        "config": sidecar.get("config", {}),
        "seeds": {"dataset": ds.params.seed, "encoder": enc.seed},
        "hashes": {"encoder": encoder_hash(enc), "dataset": ds.dataset_hash,
                   "perturbation": sidecar["delta_sha256"]},
        "cross_artifact": mismatch,
        "clean": clean,
        "adversarial": adv,
        "threads": threads,
        "wall_clock_seconds": elapsed,
        "library_version": __version__,
    }
    _emit_report(report, Path(args.out) if args.out else None)
    return EXIT_OK


# -- gradcheck ---------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    enc = _load_encoder_arg(args.encoder)
    rng = Lcg(args.seed)
    worst = 0.0
    for trial in range(args.trials):
        image = np.array(rng.fill_uniform(enc.n_inputs, 0.0, 1.0)).reshape(enc.input_shape)
        t = np.array(rng.fill_gaussian(enc.embed_dim))
        t = t / np.linalg.norm(t)
        err = gradcheck(enc, image, t, step=args.step, seed=args.seed + trial)
        worst = max(worst, err)
    passed = worst < GRADCHECK_THRESHOLD
    print(json.dumps({
        "command": "gradcheck",
        "trials": args.trials,
        "step": args.step,
        "max_relative_error": worst,
        "threshold": GRADCHECK_THRESHOLD,
        "passed": passed,
    }, indent=2, sort_keys=True))
    return EXIT_OK if passed else EXIT_DEGENERATE


# -- argument parsing --------------------------------------------------------


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad integer list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uapkit",
                                description="Universal adversarial perturbations "
                                            "against cross-modal retrieval.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--encoder", help="encoder manifest (default: built-in toy mlp)")
    g.add_argument("--n-images", type=int, default=200)
    g.add_argument("--texts-per-image", type=int, default=5)
    g.add_argument("--image-shape", type=int, nargs=3, default=[3, 32, 32],
                   metavar=("C", "H", "W"))
    g.add_argument("--embed-dim", type=int, default=64)
    g.add_argument("--class-count", type=int, default=10)
    g.add_argument("--noise-level", type=float, default=0.1)
    g.add_argument("--decoder-scale", type=float, default=0.15)
    g.add_argument("--decoder-rank", type=int, default=8)
    g.add_argument("--seed", type=int, default=7)
    g.set_defaults(func=cmd_gen)

    a = sub.add_parser("attack", help="synthesize a universal perturbation")
    a.add_argument("--strategy", choices=("tra", "ira", "tira"), required=True)
    a.add_argument("--mode", choices=("patch", "global"), default="patch")
    a.add_argument("--k", type=int, default=10)
    a.add_argument("--eta", type=float, default=0.02)
    a.add_argument("--epochs", type=int, default=10)
    a.add_argument("--batch-size", type=int, default=16)
    a.add_argument("--max-inner-iters", type=int, default=50)
    a.add_argument("--mask-side", type=int, help="patch side (default: 3%% area)")
    a.add_argument("--mask-offset", type=int, nargs=2, default=[0, 0],
                   metavar=("DY", "DX"), help="offset from the bottom-right corner")
    a.add_argument("--norm", choices=("l2", "linf"))
    a.add_argument("--epsilon", type=float)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--shuffle", action="store_true")
    a.add_argument("--encoder")
    a.add_argument("--dataset", required=True, help="dataset manifest path")
    a.add_argument("--out", required=True)
    a.add_argument("--k-list", type=_int_list, default=[1, 5, 10])
    a.add_argument("--threads", type=int)
    a.set_defaults(func=cmd_attack)

    e = sub.add_parser("eval", help="evaluate a saved perturbation")
    e.add_argument("--perturbation", required=True, help="sidecar JSON path")
    e.add_argument("--dataset", required=True)
    e.add_argument("--encoder")
    e.add_argument("--k-list", type=_int_list, default=[1, 5, 10])
    e.add_argument("--allow-mismatch", action="store_true")
    e.add_argument("--out")
    e.add_argument("--threads", type=int)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    c.add_argument("--encoder")
    c.add_argument("--trials", type=int, default=20)
    c.add_argument("--step", type=float, default=1e-5)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DegenerateDatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except IntegrityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_HASH_MISMATCH
    except (InvalidArgumentError, UapkitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
