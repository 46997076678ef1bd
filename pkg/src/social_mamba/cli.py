"""Command-line entry point: generate / train / eval / ablate / bench / plot.

Settings come from an optional YAML or JSON file (sections ``synth``, ``model``,
``train``, ``bench`` and a top-level ``seed``); command-line flags override the
file.  One ``--seed`` drives scene generation, weight init and shuffling.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import MISSING, fields
from pathlib import Path

import yaml

from .bench import run_scaling_benchmark, write_bench_csv
from .errors import SocialMambaError
from .io import read_scenes, write_scenes
from .model import BLOCKS, DECODERS, FUSIONS, ModelConfig, SocialMamba
from .synth import SynthConfig, generate_synthetic
from .training import (TrainConfig, evaluate, fit, load_checkpoint, save_checkpoint, split_train_val,
                       write_eval_csv, write_loss_csv)

log = logging.getLogger("social_mamba")

_CHOICES = {"block": BLOCKS, "fusion": FUSIONS, "decoder": DECODERS}
# exposed through dedicated flags instead
_SKIP = {"seed", "use_ego", "use_goal"}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_dataclass_flags(parser: argparse.ArgumentParser, cls, prefix: str):
    group = parser.add_argument_group(f"{prefix} settings")
    for f in fields(cls):
        if f.name in _SKIP:
            continue
        default = None if f.default is MISSING else f.default
        kw = {"default": None, "dest": f"{prefix}.{f.name}"}
        if isinstance(default, tuple):
            kw.update(nargs=len(default), type=type(default[0]), metavar="X")
        elif f.name in _CHOICES:
            kw.update(choices=_CHOICES[f.name])
        elif isinstance(default, (int, float, str)) and not isinstance(default, bool):
            kw["type"] = type(default)
        else:
            kw["type"] = float if "float" in str(f.type) else int
        group.add_argument(_flag(f.name), help=f"default: {default}", **kw)


def _add_ablation_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--no-ego", dest="model.use_ego", action="store_const", const=False, default=None,
                        help="drop the egocentric stream")
    parser.add_argument("--no-goal", dest="model.use_goal", action="store_const", const=False, default=None,
                        help="drop the goal stream")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="social-mamba", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML or JSON settings file")
        sp.add_argument("--seed", type=int, default=None, help="single seed for all randomness (default 0)")

    g = sub.add_parser("generate", help="write a synthetic scene file")
    common(g)
    g.add_argument("--out", required=True)
    _add_dataclass_flags(g, SynthConfig, "synth")

    for name, text in (("train", "train a model on a scene file"),
                       ("ablate", "train an ablated variant and evaluate it on the held-out split")):
        t = sub.add_parser(name, help=text)
        common(t)
        t.add_argument("--scenes", required=True)
        t.add_argument("--out-dir", default="." if name == "train" else "ablation")
        _add_ablation_flags(t)
        _add_dataclass_flags(t, ModelConfig, "model")
        _add_dataclass_flags(t, TrainConfig, "train")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a scene file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--scenes", required=True)
    e.add_argument("--csv", help="per-scene CSV output path")

    b = sub.add_parser("bench", help="Mamba vs attention scaling over agent counts")
    common(b)
    b.add_argument("--out", default="bench.csv")
    b.add_argument("--agent-counts", dest="bench.agent_counts", type=int, nargs="+", default=None)
    b.add_argument("--reps", dest="bench.reps", type=int, default=None)
    b.add_argument("--d-model", dest="bench.d_model", type=int, default=None)
    b.add_argument("--d-state", dest="bench.d_state", type=int, default=None)
    b.add_argument("--n-heads", dest="bench.n_heads", type=int, default=None)

    pl = sub.add_parser("plot", help="render a loss or benchmark CSV as a PNG")
    pl.add_argument("--csv", required=True)
    pl.add_argument("--out", required=True)
    return p


def load_settings(path: str | None) -> dict:
    if not path:
        return {}
    data = yaml.safe_load(Path(path).read_text())
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: settings file must hold a mapping")
    return data


def resolve(args: argparse.Namespace, section: str) -> dict:
    """File section overlaid with the flags given for it; the seed goes everywhere."""
    settings = load_settings(getattr(args, "config", None))
    merged = dict(settings.get(section) or {})
    for key, value in vars(args).items():
        if key.startswith(section + ".") and value is not None:
            merged[key.split(".", 1)[1]] = value
    seed = args.seed if getattr(args, "seed", None) is not None else settings.get("seed")
    if seed is not None:
        merged["seed"] = int(seed)
    return merged


def _from_dict(cls, d: dict):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} settings: {', '.join(unknown)}")
    return cls(**d)


def cmd_generate(args) -> int:
    config = _from_dict(SynthConfig, resolve(args, "synth"))
    scenes = generate_synthetic(config)
    write_scenes(args.out, scenes)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def _train(args):
    scenes = read_scenes(args.scenes)
    model_config = _from_dict(ModelConfig, resolve(args, "model"))
    train_config = _from_dict(TrainConfig, resolve(args, "train"))
    train, val = split_train_val(scenes, train_config.val_fraction, train_config.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = SocialMamba(model_config)
    result = fit(model, train, train_config, val_scenes=val, checkpoint_path=str(out / "checkpoint.json"))
    save_checkpoint(str(out / "checkpoint.json"), model, {"epochs": train_config.epochs})
    write_loss_csv(str(out / "loss.csv"), result.history)
    return model, val, out


def cmd_train(args) -> int:
    _, _, out = _train(args)
    print(f"checkpoint: {out / 'checkpoint.json'}\nloss curve: {out / 'loss.csv'}")
    return 0


def _print_report(report, label: str = ""):
    print(f"{label}minADE_{report.k}={report.min_ade:.4f} minFDE_{report.k}={report.min_fde:.4f} "
          f"scenes={len(report.scene_ids)}")


def cmd_ablate(args) -> int:
    model, val, out = _train(args)
    if not val:
        raise ValueError("ablate needs a non-empty validation split (val_fraction > 0)")
    report = evaluate(model, val)
    write_eval_csv(str(out / "eval.csv"), report)
    c = model.config
    label = f"streams={'+'.join(c.streams)} block={c.block} fusion={c.fusion} decoder={c.decoder} "
    _print_report(report, label)
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    scenes = read_scenes(args.scenes)
    report = evaluate(model, scenes)
    _print_report(report)
    if args.csv:
        write_eval_csv(args.csv, report)
    return 0


def cmd_bench(args) -> int:
    kw = resolve(args, "bench")
    result = run_scaling_benchmark(**kw)
    write_bench_csv(args.out, result)
    for block, slope in result.slopes.items():
        print(f"{block}: log-log slope {slope:.3f}")
    return 0


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(args.csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{args.csv}: no data rows")
    fig, ax = plt.subplots(figsize=(6, 4))
    if "train_loss" in rows[0]:
        epochs = [int(r["epoch"]) for r in rows]
        ax.plot(epochs, [float(r["train_loss"]) for r in rows], label="train loss (m^2)")
        ax.plot(epochs, [float(r["val_min_ade"]) for r in rows], label="val minADE (m)")
        ax.set_xlabel("epoch")
    elif "median_ms" in rows[0]:
        for block in dict.fromkeys(r["block"] for r in rows):
            sel = [r for r in rows if r["block"] == block]
            ax.loglog([int(r["N"]) for r in sel], [float(r["median_ms"]) for r in sel], "o-",
                      label=f"{block} (slope {float(sel[0]['slope']):.2f})")
        ax.set_xlabel("sequence length N")
        ax.set_ylabel("median ms")
    else:
        raise ValueError(f"{args.csv}: neither a loss nor a benchmark CSV")
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=100)
    plt.close(fig)
    print(f"wrote {args.out}")
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "bench": cmd_bench, "plot": cmd_plot}


def cli_dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (SocialMambaError, ValueError, OSError, json.JSONDecodeError, yaml.YAMLError) as e:
        print(f"social-mamba {args.command}: error: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
