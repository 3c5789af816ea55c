"""Command-line entry point: ``msca <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure (including failed
gradient checks).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from . import diffcore as dc
from .attention import bench_attention, export_attention
from .diffcore import Tensor, grad_check
from .diffcore.suite import run_suite
from .imageio import read_image, read_label_grid, write_gray, write_image
from .manip import (
    Exemplar,
    extrapolate,
    interpolate_styles,
    joint_attention,
    spatial_interpolate,
    style_swap_grid,
)
from .metrics import TASKS, parse_results, run_task
from .params import map_tensors
from .pyramid import LabelMap
from .selfsup import TrainConfig, gen_dataset, load_dataset, pretrain_msca, save_dataset, train
from .selfsup.train import load_generator
from .synthesis import GeneratorParams, ModelConfig, generator_forward

log = logging.getLogger("msca")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so ``main`` owns the exit code."""

    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


# ---------------------------------------------------------------- helpers

def _config(args) -> TrainConfig:
    base = TrainConfig.desk() if args.desk else TrainConfig()
    try:
        if args.config:
            return TrainConfig.from_file(args.config, args.set, base)
        return TrainConfig.from_text("", args.set, base)
    except ValueError as e:
        raise UsageError(str(e)) from e


def _generator(path: str, dtype: str) -> GeneratorParams:
    params = load_generator(path)
    return params.astype(np.float64) if dtype == "float64" else params


def _label(path: str, classes: int) -> LabelMap:
    return LabelMap(read_label_grid(path), classes)


def _exemplar(image: str, label: str, params: GeneratorParams) -> Exemplar:
    return Exemplar(read_image(image, params.dtype), _label(label, params.config.classes))


def _out_path(path: str) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def generator_grad_check(seed: int = 0, size: int = 8, max_entries: int = 6, tol: float = 1e-5):
    """Finite-difference check of the whole generator on a tiny 64-bit model."""
    rng = np.random.default_rng(seed)
    with dc.precision(np.float64):
        # two levels keep the coarsest map at 2x2, where instance statistics exist
        p = GeneratorParams.init(ModelConfig.tiny(classes=3, levels=2), seed=seed, dtype=np.float64)
        c1 = LabelMap(rng.integers(0, 3, (size, size)), 3)
        c2 = LabelMap(rng.integers(0, 3, (size, size)), 3)
        x2 = Tensor(rng.uniform(-1, 1, (3, size, size)))
        r = Tensor(rng.normal(size=(3, size, size)))
        names = list(p.trainable())

        def f(x, *weights):
            lookup = dict(zip(names, weights))
            q = map_tensors(p, lambda n, t: lookup.get(n, t))
            return dc.sum(dc.mul(generator_forward(c1, x, c2, q)[0], r))

        theta = [x2] + [p.named()[n] for n in names]
        return grad_check(f, theta, eps=1e-3, tol=tol, max_entries=max_entries, seed=seed,
                          stencil=4, avoid_kinks=True)


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args) -> int:
    scenes = gen_dataset(args.n, args.classes, args.extent, seed=args.seed)
    save_dataset(args.out, scenes)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    data = load_dataset(args.data, cfg.classes, cfg.np_dtype)

    def report(rec):
        if rec.step % args.log_every == 0:
            print(" ".join(rec.lines()[0].split()[:4]), f"total={rec.total:.4f}", flush=True)

    result = train(data, cfg, seed=args.seed, out_dir=args.out, resume=args.resume, on_step=report)
    print(f"trained {result.state.step} steps; final checkpoint {Path(args.out) / 'final.bin'}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    data = load_dataset(args.data, cfg.classes, cfg.np_dtype)
    params = GeneratorParams.init(cfg.model_config(), seed=args.seed, dtype=cfg.np_dtype)
    params, losses = pretrain_msca(data, params, cfg, seed=args.seed, steps=args.steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    (out / "pretrain.log").write_text("".join(f"step={i} loss={v!r}\n" for i, v in enumerate(losses)))
    checkpoint.save(out / "pretrained.bin", params.named())
    print(f"pretrained {len(losses)} steps; wrote {out / 'pretrained.bin'}")
    return EXIT_OK


def cmd_synth(args) -> int:
    params = _generator(args.checkpoint, args.dtype)
    ex = _exemplar(args.exemplar, args.exemplar_label, params)
    c1 = _label(args.label, params.config.classes)
    out, packs = generator_forward(c1, Tensor(ex.image, dtype=params.dtype), ex.label, params)
    write_image(_out_path(args.out), out.data)
    if args.dump_attention:
        export_attention(packs, args.dump_attention)
    return EXIT_OK


def cmd_interpolate(args) -> int:
    params = _generator(args.checkpoint, args.dtype)
    c1 = _label(args.label, params.config.classes)
    ex2 = _exemplar(args.exemplar, args.exemplar_label, params)
    ex3 = _exemplar(args.exemplar2, args.exemplar2_label, params)
    if args.weight_map:
        w = read_label_grid(args.weight_map).astype(np.float64) / 255.0
        out = spatial_interpolate(c1, ex2, ex3, w, params)
    else:
        out = interpolate_styles(c1, ex2, ex3, args.a, params)
    write_image(_out_path(args.out), out.data)
    if args.dump_attention and args.weight_map is None:
        d = Path(args.dump_attention)
        d.mkdir(parents=True, exist_ok=True)
        for s, alpha in enumerate(joint_attention(c1, ex2, ex3, args.a, params)):
            for k in range(alpha.shape[0]):
                write_gray(d / f"joint_alpha_s{s}_k{k}.png", alpha.data[k])
    return EXIT_OK


def cmd_extrapolate(args) -> int:
    params = _generator(args.checkpoint, args.dtype)
    center = _exemplar(args.center, args.center_label, params)
    glob = _label(args.global_label, params.config.classes)
    result = extrapolate(center, glob, params, seed=args.seed, n_random=args.sites)
    write_image(_out_path(args.out), result.image)
    if args.dump_attention:
        d = Path(args.dump_attention)
        d.mkdir(parents=True, exist_ok=True)
        write_gray(d / "blend_weight.png", result.weight)
        x = Tensor(center.image, dtype=params.dtype)
        for i, (top, left) in enumerate(result.sites):
            c1 = glob.crop(top, left, result.patch, result.patch)
            export_attention(generator_forward(c1, x, center.label, params)[1], d, prefix=f"site{i}_")
    return EXIT_OK


def cmd_swap(args) -> int:
    params = _generator(args.checkpoint, args.dtype)
    scenes = load_dataset(args.scenes, params.config.classes, params.dtype)
    grid, _ = style_swap_grid([Exemplar(s.image, s.label) for s in scenes], params)
    write_image(_out_path(args.out), grid)
    if args.dump_attention:
        for i, r in enumerate(scenes):
            for j, c in enumerate(scenes):
                packs = generator_forward(r.label, Tensor(c.image, dtype=params.dtype), c.label, params)[1]
                export_attention(packs, args.dump_attention, prefix=f"r{i}_c{j}_")
    return EXIT_OK


def cmd_eval(args) -> int:
    params = _generator(args.checkpoint, args.dtype)
    scenes = load_dataset(args.data, params.config.classes, params.dtype)
    tasks = TASKS if args.task == "both" else (args.task,)
    out = _out_path(args.out) if args.out else None
    for task in tasks:
        result = run_task(task, scenes, params)
        text = result.to_text()
        if out is not None:
            with open(out, "a") as fh:
                fh.write(text)
        summ = result.summary()
        print(f"{task}: n={len(result.ids)} psnr_mean={summ['psnr_mean']:.3f} "
              f"psnr_median={summ['psnr_median']:.3f} style_mean={summ['style_mean']:.4g}")
    if out is not None:
        parse_results(out.read_text())   # the file must stay parseable after appending
    return EXIT_OK


def cmd_bench(args) -> int:
    report = bench_attention(tuple(args.sides), k=args.k, repetitions=args.repetitions, seed=args.seed)
    text = "\n".join(report.lines()) + "\n"
    print(text, end="")
    if args.out:
        _out_path(args.out).write_text(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ok = True
    for res in run_suite(tol=args.tol, seed=args.seed):
        print(res.line())
        ok &= res.report.passed
    if not args.skip_generator:
        rep = generator_grad_check(seed=args.seed, tol=args.tol)
        print(f"generator 8x8 max_rel_error={rep.max_rel_error:.3e} {'ok' if rep.passed else 'FAIL'}")
        ok &= rep.passed
    print("all passed" if ok else "gradient check FAILED")
    return EXIT_OK if ok else EXIT_RUNTIME


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random draw")
    common.add_argument("-v", "--verbose", action="store_true")

    model = _Parser(add_help=False)
    model.add_argument("--checkpoint", required=True, help="training or generator checkpoint")
    model.add_argument("--dtype", choices=("float32", "float64"), default="float32",
                       help="evaluation precision")
    model.add_argument("--dump-attention", metavar="DIR", help="also write attention maps here")

    config = _Parser(add_help=False)
    config.add_argument("--config", help="key = value training config file")
    config.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    config.add_argument("--desk", action="store_true",
                        help="start from the desk-scale schedule instead of the full one")
    config.add_argument("--data", required=True, help="directory of <name>.png + <name>_label.png")
    config.add_argument("--out", required=True, help="output directory")

    p = _Parser(prog="msca", description="Example-guided scene synthesis with masked attention.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("gen-data", parents=[common], help="write synthetic scenes")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--extent", type=int, default=64)
    s.add_argument("--classes", type=int, default=8)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", parents=[common, config], help="cross/self-reconstruction training")
    s.add_argument("--resume", help="training checkpoint to continue from")
    s.add_argument("--log-every", type=int, default=10)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("pretrain", parents=[common, config], help="pretrain pyramid and attention")
    s.add_argument("--steps", type=int, help="default: pretrain_epochs x dataset size")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("synth", parents=[common, model], help="synthesize one image")
    s.add_argument("--label", required=True)
    s.add_argument("--exemplar", required=True)
    s.add_argument("--exemplar-label", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("interpolate", parents=[common, model], help="blend two exemplar styles")
    s.add_argument("--label", required=True)
    s.add_argument("--exemplar", required=True)
    s.add_argument("--exemplar-label", required=True)
    s.add_argument("--exemplar2", required=True)
    s.add_argument("--exemplar2-label", required=True)
    how = s.add_mutually_exclusive_group(required=True)
    how.add_argument("--a", type=float, help="global factor; 1 keeps only the first exemplar")
    how.add_argument("--weight-map", help="grayscale PNG, white selects the first exemplar")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_interpolate)

    s = sub.add_parser("extrapolate", parents=[common, model], help="grow a centre crop to 2x")
    s.add_argument("--center", required=True)
    s.add_argument("--center-label", required=True)
    s.add_argument("--global-label", required=True)
    s.add_argument("--sites", type=int, default=10, help="random patch sites besides the corners")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extrapolate)

    s = sub.add_parser("swap", parents=[common, model], help="n x n style-swap grid")
    s.add_argument("--scenes", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_swap)

    s = sub.add_parser("eval", parents=[common, model], help="duplicating / mirroring evaluation")
    s.add_argument("--data", required=True)
    s.add_argument("--task", choices=TASKS + ("both",), default="both")
    s.add_argument("--out", help="results file (appended to)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", parents=[common], help="attention cost scaling")
    s.add_argument("--sides", type=int, nargs="+", default=[16, 32, 64])
    s.add_argument("--k", type=int, default=16)
    s.add_argument("--repetitions", type=int, default=3)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    s.add_argument("--tol", type=float, default=1e-5)
    s.add_argument("--skip-generator", action="store_true")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "msca: error: a subcommand is required")
        if args.command == "interpolate" and args.a is not None and not 0.0 <= args.a <= 1.0:
            raise UsageError("--a must lie in [0, 1]")
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as e:
        print(str(e).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:          # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    except Exception as e:           # noqa: BLE001 - every runtime failure maps to exit 2
        log.debug("failure", exc_info=True)
        print(f"msca: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
