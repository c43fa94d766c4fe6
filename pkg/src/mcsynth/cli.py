"""Command-line entry points: ``mcsynth <command> [flags]``.

Exit codes: 0 success, 2 usage, 3 file or format problem, 4 numerical failure.
Every training flag mirrors a key of the ``key = value`` config file; flags win.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .config import TrainConfig, dump_config, load_config
from .diffusion import NonFiniteError, build_schedule
from .experiments import ARMS, bench_sampling, bench_table, parse_suite, results_table, run_suite
from .metrics import evaluate
from .phantoms import (
    MIN_SIZE,
    ROLES,
    SPLITS,
    DatasetError,
    DatasetManifest,
    denormalize,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from .training import (
    load_ae,
    load_state,
    make_state,
    pretrain_ae,
    save_ae,
    save_state,
    synthesize,
    to_tensors,
    train,
    write_history_csv,
)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("mcsynth")


class UsageError(Exception):
    pass


# --- helpers -----------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in (bool, "bool"):
            p.add_argument(flag, dest=f.name, action="store_const", const=True, default=None)
        else:
            typ = {"int": int, "float": float}.get(f.type if isinstance(f.type, str) else f.type.__name__, str)
            p.add_argument(flag, dest=f.name, type=typ, default=None)


def _config_from(args) -> TrainConfig:
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(TrainConfig)}
    try:
        return load_config(args.config, **overrides)
    except ValueError as e:
        raise UsageError(str(e)) from e


def _split_arg(name: str) -> str:
    if name not in SPLITS:
        raise argparse.ArgumentTypeError(f"unknown split {name!r}; choose from {', '.join(SPLITS)}")
    return name


def _positive(text: str) -> int:
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {v}")
    return v


def _steps_list(text: str) -> list[int]:
    try:
        steps = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated step counts, got {text!r}")
    if not steps or min(steps) <= 0:
        raise argparse.ArgumentTypeError("step counts must be positive")
    return steps


def _load_generator(path: Path):
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_state(path)


def write_blob(path: Path, arr: np.ndarray) -> None:
    """Float32 little-endian blob with a ``.json`` sidecar holding the shape."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(arr.tobytes())
    path.with_suffix(".json").write_text(json.dumps({"dtype": "<f4", "shape": list(arr.shape)}) + "\n")


def read_blob(path: Path) -> np.ndarray:
    meta_path = path.with_suffix(".json")
    if not path.exists() or not meta_path.exists():
        raise FileNotFoundError(f"blob or sidecar missing: {path}")
    shape = json.loads(meta_path.read_text())["shape"]
    raw = path.read_bytes()
    if len(raw) != 4 * int(np.prod(shape)):
        raise DatasetError(f"{path}: {len(raw)} bytes does not match shape {shape}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def save_grid(path: Path, conditions: np.ndarray, truth: np.ndarray, pred: np.ndarray, error_gain: float = 4.0):
    """One row per sample: condition panels | truth | synthesis | |error| * gain."""
    from PIL import Image

    rows = []
    for c, t, p in zip(conditions, truth, pred):
        err = np.clip(np.abs(p[0] - t[0]) * error_gain, 0, 1)
        rows.append(np.concatenate([*c, t[0], p[0], err], axis=1))
    img = np.clip(np.concatenate(rows, axis=0), 0, 1)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((img * 255 + 0.5).astype(np.uint8)).save(path)


def metrics_tables(label: str, m) -> tuple[str, str]:
    psnr = f"{m.psnr_db:.2f}±{m.psnr_std:.2f}"
    ssim = f"{m.ssim:.4f}±{m.ssim_std:.4f}"
    csv = "split,n,psnr_db,psnr_std,ssim,ssim_std\n" + f"{label},{len(m.per_image)},{m.psnr_db:.6g},{m.psnr_std:.6g},{m.ssim:.6g},{m.ssim_std:.6g}\n"
    w = max(len(label), 5)
    text = f"{'split':<{w}}  {'n':>4}  {'PSNR (dB)':>14}  {'SSIM':>16}\n{label:<{w}}  {len(m.per_image):>4}  {psnr:>14}  {ssim:>16}\n"
    return csv, text


# --- commands -------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.size < MIN_SIZE:
        raise UsageError(f"--size {args.size} is too small; phantoms need at least {MIN_SIZE} pixels")
    m = DatasetManifest(args.n_train, args.n_val, args.n_test, image_size=args.size, seed=args.seed,
                        role=args.role, lesions=args.lesions, noise_level=args.noise)
    save_dataset(args.out, generate_dataset(m))
    print(f"wrote {sum(getattr(m, 'n_' + s) for s in SPLITS)} stacks to {args.out}")
    return EXIT_OK


def cmd_train_ae(args) -> int:
    cfg = _config_from(args)
    data = load_dataset(args.data_dir)
    res = pretrain_ae(data.target("train"), cfg, data.target("val"))
    args.out.mkdir(parents=True, exist_ok=True)
    save_ae(args.out / "ae.bin", res, cfg)
    print(f"autoencoder: final L1 {res.losses[-1]:.5f}, val PSNR {res.psnr_db:.2f} dB -> {args.out / 'ae.bin'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config_from(args)
    data = load_dataset(args.data_dir)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.cfg").write_text(dump_config(cfg))
    ae = load_ae(args.ae).model if args.ae else None
    res = train(data, cfg, out_dir=args.out, ae=ae, resume=args.resume)
    save_state(args.out / "ckpt_last.bin", res.state)
    write_history_csv(args.out / "metrics.csv", res.history)
    last = res.history[-1] if res.history else {}
    print(f"trained {res.state.step} steps in {res.seconds:.0f}s; last epoch: "
          + " ".join(f"{k}={v:.4g}" for k, v in last.items() if isinstance(v, float)))
    return EXIT_OK


def _synth_arrays(args):
    state = _load_generator(args.ckpt)
    data = load_dataset(args.data_dir)
    arr = data.split(args.split)
    if args.limit:
        arr = arr[:args.limit]
    cfg = state.config
    _, y = to_tensors(arr, cfg.single_contrast)
    sched = build_schedule(cfg.T, cfg.beta_min, cfg.beta_max)
    pred = synthesize(state.g, y, sched, args.seed, args.z_mode or cfg.z_mode)
    return arr, np.clip(denormalize(pred.numpy()), 0, 1)


def cmd_synth(args) -> int:
    arr, pred = _synth_arrays(args)
    args.out.mkdir(parents=True, exist_ok=True)
    write_blob(args.out / f"synth_{args.split}.f32", pred)
    if args.grid_rows:
        n = min(args.grid_rows, len(pred))
        save_grid(args.out / f"grid_{args.split}.png", arr[:n, 1:], arr[:n, :1], pred[:n])
    print(f"synthesized {len(pred)} images -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.pred is None and args.ckpt is None:
        raise UsageError("eval needs --ckpt or --pred")
    data = load_dataset(args.data_dir)
    truth = data.target(args.split)
    if args.pred is not None:
        pred = read_blob(args.pred)
        if pred.shape != truth.shape:
            raise DatasetError(f"prediction shape {pred.shape} does not match split {args.split!r} {truth.shape}")
    else:
        args.limit = 0
        _, pred = _synth_arrays(args)
    m = evaluate(pred, truth)
    csv, text = metrics_tables(args.split, m)
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / f"metrics_{args.split}.csv").write_text(csv)
        (args.out / f"metrics_{args.split}.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    try:
        arms = parse_suite(args.suite)
        roles = [r.strip() for r in args.roles.split(",") if r.strip()]
        bad = [r for r in roles if r not in ROLES]
        if bad or not roles:
            raise ValueError(f"unknown role(s) {bad}; choose from {sorted(ROLES)}")
    except ValueError as e:
        raise UsageError(str(e)) from e
    cfg = _config_from(args)
    manifest_kw = {"n_train": args.n_train, "n_val": args.n_val, "n_test": args.n_test, "image_size": cfg.image_size,
                   "seed": args.data_seed}
    results = run_suite(arms, roles, cfg, manifest_kw, cache_dir=args.cache_dir)
    csv, text = results_table(results)
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "ablation.csv").write_text(csv)
        (args.out / "ablation.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.ckpt is None and not args.untrained:
        raise UsageError("bench needs --ckpt (or --untrained for timing with fresh weights)")
    if args.ckpt is not None:
        state = _load_generator(args.ckpt)
    else:
        state = make_state(_config_from(args), 2, None)
    cfg, seed = state.gen_config, state.config.seed
    gen = torch.Generator().manual_seed(seed)
    y = torch.rand(args.n, cfg.in_channels_cond, cfg.image_size, cfg.image_size, generator=gen) * 2 - 1
    rows = bench_sampling(state.g, y, args.steps_compare, state.config.beta_min, state.config.beta_max, seed)
    table = bench_table(rows)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(table)
    print(table, end="")
    return EXIT_OK


# --- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mcsynth", description="Multi-contrast conditioned adversarial diffusion on phantoms")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic phantom dataset")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--n-train", type=int, default=2000)
    g.add_argument("--n-val", type=int, default=200)
    g.add_argument("--n-test", type=int, default=200)
    g.add_argument("--role", choices=sorted(ROLES), default="c3", help="target contrast")
    g.add_argument("--lesions", action=argparse.BooleanOptionalAction, default=True)
    g.add_argument("--noise", type=float, default=0.02)
    g.set_defaults(func=cmd_gen_data)

    a = sub.add_parser("train-ae", help="pretrain the attention autoencoder")
    a.add_argument("--data-dir", type=Path, required=True)
    a.add_argument("--out", type=Path, required=True)
    _add_config_flags(a)
    a.set_defaults(func=cmd_train_ae)

    t = sub.add_parser("train", help="adversarial diffusion training")
    t.add_argument("--data-dir", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--resume", type=Path)
    t.add_argument("--ae", type=Path, help="pretrained autoencoder checkpoint")
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    for name, func, help_ in (("synth", cmd_synth, "synthesize target images"),
                              ("eval", cmd_eval, "PSNR/SSIM mean±std over a split")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--data-dir", type=Path, required=True)
        s.add_argument("--split", type=_split_arg, default="test")
        s.add_argument("--ckpt", type=Path, required=(name == "synth"))
        s.add_argument("--seed", type=int, default=1234)
        s.add_argument("--z-mode", choices=("fresh", "fixed", "zero"))
        s.add_argument("--out", type=Path, required=(name == "synth"))
        if name == "synth":
            s.add_argument("--limit", type=int, default=0)
            s.add_argument("--grid-rows", type=int, default=8)
        else:
            s.add_argument("--pred", type=Path, help="float blob written by synth")
        s.set_defaults(func=func)

    b = sub.add_parser("ablate", help="shared-seed ablation suite")
    b.add_argument("--suite", default=",".join(ARMS))
    b.add_argument("--roles", default="c3")
    b.add_argument("--n-train", type=int, default=512)
    b.add_argument("--n-val", type=int, default=64)
    b.add_argument("--n-test", type=int, default=64)
    b.add_argument("--data-seed", type=int, default=0)
    b.add_argument("--cache-dir", type=Path)
    b.add_argument("--out", type=Path)
    _add_config_flags(b)
    b.set_defaults(func=cmd_ablate)

    c = sub.add_parser("bench", help="sampling wall-clock vs step count")
    c.add_argument("--ckpt", type=Path)
    c.add_argument("--untrained", action="store_true")
    c.add_argument("--steps-compare", type=_steps_list, default=[4, 100])
    c.add_argument("--n", type=_positive, default=20)
    c.add_argument("--out", type=Path)
    _add_config_flags(c)
    c.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"mcsynth {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, DatasetError, checkpoint.CheckpointError, KeyError) as e:
        print(f"mcsynth {args.command}: error: {e}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteError, FloatingPointError) as e:
        print(f"mcsynth {args.command}: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
