"""sparseformer command line: gen, train, eval, viz, bench, gradcheck.

Options can also come from ``--config PATH`` (``key=value`` lines using the
option names with underscores); explicit flags win over the file. Set
``SPARSEFORMER_LOG`` (e.g. ``DEBUG``) to change log verbosity.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io as sio
from .bench import BENCH_HEADER, bench_attention, fit_exponent
from .gradcheck import run_suites
from .model import ModelConfig
from .scenes import SceneConfig, dataset_stats, generate_scene, scene_seed
from .training import TrainConfig, evaluate, format_eval_csv, load_checkpoint, train
from .viz import render_viz

log = logging.getLogger("sparseformer")

# SceneConfig fields exposed under a shorter gen flag
_GEN_ALIASES = {"landmark_density": "density"}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_dataclass_flags(parser, cls, skip=(), rename=None):
    rename = rename or {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        flag = rename.get(f.name, f.name)
        kind = type(f.default)
        if kind is bool:
            parser.add_argument(_flag(flag), dest=f.name, default=None,
                                type=lambda s: s.lower() in ("1", "true", "yes"),
                                metavar="BOOL", help=f"default {f.default}")
        elif kind is tuple:
            parser.add_argument(_flag(flag), dest=f.name, default=None, metavar="LIST",
                                help=f"comma-separated, default {','.join(map(str, f.default))}")
        else:
            parser.add_argument(_flag(flag), dest=f.name, default=None, type=kind,
                                help=f"default {f.default}")


def _collect(args, file_cfg: dict[str, str], cls, rename=None) -> dict[str, str]:
    """String values for ``cls`` fields: config file first, then explicit flags."""
    rename = rename or {}
    out = {}
    for f in dataclasses.fields(cls):
        key = rename.get(f.name, f.name)
        if key in file_cfg:
            out[f.name] = file_cfg[key]
        elif f.name in file_cfg:
            out[f.name] = file_cfg[f.name]
        val = getattr(args, f.name, None)
        if val is not None:
            out[f.name] = ",".join(map(str, val)) if isinstance(val, (list, tuple)) else str(val)
    return out


def _file_config(args) -> dict[str, str]:
    if getattr(args, "config", None) is None:
        return {}
    path = Path(args.config)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return sio.parse_kv(path.read_text())


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def cmd_gen(args) -> int:
    file_cfg = _file_config(args)
    cfg = SceneConfig.from_dict(_collect(args, file_cfg, SceneConfig, _GEN_ALIASES))
    n = args.scenes if args.scenes is not None else int(file_cfg.get("scenes", 1))
    seed = args.seed if args.seed is not None else int(file_cfg.get("seed", 0))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names, scenes = [], []
    for i in range(n):
        scene = generate_scene(cfg, scene_seed(seed, i))
        name = f"scene_{i:05d}.spfs"
        sio.write_scene(out / name, scene)
        names.append(name)
        scenes.append(scene)
    sio.write_manifest(out, cfg, names, seed)
    print(dataset_stats(scenes, d_max=cfg.d_max).format())
    return 0


def cmd_train(args) -> int:
    file_cfg = _file_config(args)
    tc = TrainConfig.from_dict(_collect(args, file_cfg, TrainConfig))
    mc = ModelConfig.from_dict(_collect(args, file_cfg, ModelConfig))
    seed = args.seed if args.seed is not None else int(file_cfg.get("seed", 0))
    data = args.data or file_cfg.get("data")
    out = args.out or file_cfg.get("out")
    if not data or not out:
        raise ValueError("train needs --data and --out")
    state = train(data, out, tc, mc, seed, resume=args.resume, stop_at=args.stop_at)
    print(f"trained to iteration {state.iteration}; checkpoint {Path(out) / 'last.spfc'}")
    return 0


def cmd_eval(args) -> int:
    rows = evaluate(args.checkpoint, args.data, _int_list(args.n_landmarks),
                    _float_list(args.outlier_rates), seed=args.seed or 0, split=args.split)
    text = format_eval_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_viz(args) -> int:
    state = load_checkpoint(args.checkpoint)
    scene = sio.read_scene(args.scene)
    files = render_viz(state.params, state.model_cfg, scene, args.out)
    for name, path in files.items():
        print(f"{name}={path}")
    return 0


def cmd_bench(args) -> int:
    heights = _int_list(args.heights)
    widths = _int_list(args.widths) if args.widths else None
    counts = _int_list(args.n_landmarks)
    rows = bench_attention(heights, counts, repeats=args.repeats, widths=widths, seed=args.seed or 0)
    lines = [",".join(BENCH_HEADER)] + [r.csv() for r in rows]
    for n in counts:
        if len({r.hw for r in rows if r.n_landmarks == n}) >= 3:
            lines.append(f"# n_landmarks={n} exponent={fit_exponent(rows, n):.4f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    reports = run_suites(args.module, seed=args.seed or 0)
    for r in reports:
        print(r.line())
    return 0 if all(r.passed for r in reports) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparseformer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key=value file; flags override it")
        p.add_argument("--seed", type=int, default=None)
        p.set_defaults(func=func)
        return p

    p = add("gen", cmd_gen, "generate a synthetic scene dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=None)
    _add_dataclass_flags(p, SceneConfig, rename=_GEN_ALIASES)

    p = add("train", cmd_train, "train a model on a dataset")
    p.add_argument("--data", help="dataset directory or manifest")
    p.add_argument("--out", help="output directory for log.csv and checkpoints")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--stop-at", type=int, default=None, help="stop early at this iteration")
    _add_dataclass_flags(p, TrainConfig)
    _add_dataclass_flags(p, ModelConfig)

    p = add("eval", cmd_eval, "evaluate a checkpoint over landmark counts and outlier rates")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n-landmarks", default="2,32,200")
    p.add_argument("--outlier-rates", default="0")
    p.add_argument("--split", default="val", choices=["val", "all"])
    p.add_argument("--out", help="also write the CSV report here")

    p = add("viz", cmd_viz, "write attention max/entropy/argmax maps for one scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)

    p = add("bench", cmd_bench, "time the attention path across resolutions")
    p.add_argument("--heights", default="64,128,256")
    p.add_argument("--widths", default=None, help="defaults to the heights (square maps)")
    p.add_argument("--n-landmarks", default="256")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", help="also write the CSV here")

    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient suites")
    p.add_argument("--module", default="all", choices=["all", "tensor", "sparseformer", "model"])
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SPARSEFORMER_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # one-line diagnostic per the CLI contract
        log.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
