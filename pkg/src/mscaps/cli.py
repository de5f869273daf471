"""Command-line entry point: ``mscaps <command> [flags]``.

Every flag can also come from a ``--config`` key=value file (keys are flag
names without the leading dashes; ``-`` and ``_`` are interchangeable). Flags
given on the command line override the file.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .experiments import ablation, patch_sweep, plateau_summary, results_csv, variant_ordering
from .formats import FormatError, load_model, read_config, read_mask, read_pgm, save_model, write_mask, write_pgm
from .gradcheck import run_suite
from .loss import MarginParams
from .metrics import evaluate
from .model import VARIANTS, NetConfig
from .pipeline import (
    PATCH_RANGE,
    ScenePair,
    TrainConfig,
    classify_image,
    log_ratio,
    log_ratio_di,
    normalize_di,
    select_samples,
    synth_scene,
    train,
)
from .rng import make_rng

log = logging.getLogger("mscaps")


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class Opt:
    flag: str
    type: Callable[[str], Any] = str
    default: Any = None
    help: str = ""
    choices: tuple | None = None
    required: bool = False

    @property
    def dest(self) -> str:
        return self.flag.lstrip("-").replace("-", "_")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _patch(text: str) -> int:
    r = int(text)
    if r % 2 == 0 or not PATCH_RANGE[0] <= r <= PATCH_RANGE[1]:
        raise argparse.ArgumentTypeError(f"patch size must be odd and within {PATCH_RANGE[0]}..{PATCH_RANGE[1]}, got {r}")
    return r


def _patch_list(text: str) -> list[int]:
    return [_patch(str(x)) for x in _int_list(text)]


SEED = Opt("--seed", int, 0, "seed for every random stream")
THREADS = Opt("--threads", int, None, "classification worker threads (env MSCAPS_THREADS)")
TRAINING = [
    Opt("--patch", _patch, 9, "patch size r (odd, 5..17)"),
    Opt("--samples", int, 1000, "number of training pixels"),
    Opt("--variant", str, "full", "network variant", VARIANTS),
    Opt("--epochs", int, 50),
    Opt("--batch-size", int, 64),
    Opt("--lr", float, 1e-3),
    Opt("--routing-iterations", int, 3),
    Opt("--route-grad", str, "final_only", "gradient path through routing", ("final_only", "full")),
    Opt("--weight-range", float, 0.5, "capsule transforms drawn from U(-x, x)"),
    Opt("--balanced", _bool, True, "draw changed/unchanged samples 50/50"),
    Opt("--log-eps", float, 1.0, "offset inside the log ratio"),
]

COMMANDS: dict[str, tuple[str, list[Opt]]] = {
    "synth": (
        "write a synthetic speckled scene (t1.pgm, t2.pgm, gt.pgm, manifest.txt)",
        [
            Opt("--out", str, None, "output directory", required=True),
            Opt("--size", int, 128),
            Opt("--regions", int, 4),
            Opt("--looks", float, 4.0),
            Opt("--contrast", float, 3.0),
            SEED,
        ],
    ),
    "train": (
        "train a model on a scene and write it with a loss trace CSV",
        [
            Opt("--t1", str, None, required=True),
            Opt("--t2", str, None, required=True),
            Opt("--gt", str, None, required=True),
            Opt("--out", str, None, "model file", required=True),
            Opt("--trace", str, None, "loss trace CSV (default: <out>.trace.csv)"),
            SEED,
            *TRAINING,
        ],
    ),
    "predict": (
        "classify every pixel of a scene into a change map",
        [
            Opt("--model", str, None, required=True),
            Opt("--t1", str, None, required=True),
            Opt("--t2", str, None, required=True),
            Opt("--out", str, None, "change map PGM", required=True),
            Opt("--di-range", str, "image", "normalize the DI by this image's range or the training range", ("image", "model")),
            THREADS,
        ],
    ),
    "evaluate": (
        "score a change map against ground truth",
        [
            Opt("--pred", str, None, required=True),
            Opt("--gt", str, None, required=True),
            Opt("--out", str, None, "report path (key=value); JSON goes to <out>.json", required=True),
        ],
    ),
    "ablate": (
        "train and score all four variants per seed",
        [
            Opt("--scene", str, None, "directory with t1.pgm, t2.pgm, gt.pgm", required=True),
            Opt("--seeds", _int_list, [0], "comma-separated seeds"),
            Opt("--out", str, None, "CSV table", required=True),
            THREADS,
            *[o for o in TRAINING if o.flag != "--variant"],
        ],
    ),
    "patchsweep": (
        "train and score one variant over a range of patch sizes",
        [
            Opt("--scene", str, None, "directory with t1.pgm, t2.pgm, gt.pgm", required=True),
            Opt("--patches", _patch_list, list(range(5, 18, 2)), "comma-separated odd patch sizes"),
            Opt("--out", str, None, "CSV table", required=True),
            SEED,
            THREADS,
            *[o for o in TRAINING if o.flag != "--patch"],
        ],
    ),
    "gradcheck": (
        "finite-difference check of every op and the full network",
        [
            SEED,
            Opt("--seeds", int, 1, "number of consecutive seeds starting at --seed"),
            Opt("--tolerance", float, 1e-4, "relative error bound for ops (network: 10x)"),
        ],
    ),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mscaps", description="Multiscale capsule network SAR change detection.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (help_text, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key=value file supplying any of the flags below")
        for o in opts:
            extra = f" (default: {o.default})" if o.default is not None else ""
            p.add_argument(o.flag, type=o.type, choices=o.choices, default=argparse.SUPPRESS, help=o.help + extra)
    return parser


def resolve(command: str, ns: argparse.Namespace) -> dict[str, Any]:
    """Defaults, then config file, then command-line flags."""
    opts = {o.dest: o for o in COMMANDS[command][1]}
    values = {d: o.default for d, o in opts.items()}
    if getattr(ns, "config", None):
        try:
            config = read_config(ns.config)
        except (OSError, FormatError) as exc:
            raise UsageError(f"cannot read config {ns.config}: {exc}") from exc
        for key, raw in config.items():
            dest = key.replace("-", "_")
            if dest not in opts:
                raise UsageError(f"unknown config key {key!r} for {command}")
            o = opts[dest]
            try:
                value = o.type(raw)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config key {key}: {exc}") from exc
            if o.choices and value not in o.choices:
                raise UsageError(f"config key {key}: {value!r} not one of {', '.join(o.choices)}")
            values[dest] = value
    for dest in opts:
        if hasattr(ns, dest):
            values[dest] = getattr(ns, dest)
    missing = [opts[d].flag for d, v in values.items() if opts[d].required and v is None]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join(missing)}")
    return values


def _threads(value: int | None) -> int:
    if value is not None:
        return max(1, value)
    env = os.environ.get("MSCAPS_THREADS")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        raise UsageError(f"MSCAPS_THREADS must be an integer, got {env!r}") from None


def _net_config(a: dict[str, Any], variant: str | None = None, patch: int | None = None) -> NetConfig:
    return NetConfig(
        variant=variant or a["variant"],
        patch=patch or a["patch"],
        routing_iterations=a["routing_iterations"],
        route_grad=a["route_grad"],
        weight_range=a["weight_range"],
    )


def _train_config(a: dict[str, Any], seed: int) -> TrainConfig:
    return TrainConfig(epochs=a["epochs"], batch_size=a["batch_size"], lr=a["lr"], seed=seed, margin=MarginParams())


def _load_scene(t1: str, t2: str, gt: str | None = None) -> ScenePair:
    i1, i2 = read_pgm(t1), read_pgm(t2)
    if i1.shape != i2.shape:
        raise ValueError(f"image sizes differ: {t1} is {i1.shape}, {t2} is {i2.shape}")
    mask = None
    if gt is not None:
        mask = read_mask(gt)
        if mask.shape != i1.shape:
            raise ValueError(f"ground truth {gt} is {mask.shape}, images are {i1.shape}")
    return ScenePair(i1, i2, mask)


def _scene_dir(path: str) -> ScenePair:
    d = Path(path)
    files = [d / "t1.pgm", d / "t2.pgm", d / "gt.pgm"]
    missing = [str(f) for f in files if not f.is_file()]
    if missing:
        raise FileNotFoundError(f"scene files missing: {', '.join(missing)}")
    return _load_scene(*map(str, files))


def cmd_synth(a: dict[str, Any]) -> int:
    out = Path(a["out"])
    out.mkdir(parents=True, exist_ok=True)
    scene = synth_scene(a["size"], a["regions"], a["looks"], a["contrast"], a["seed"])
    write_pgm(out / "t1.pgm", scene.t1, 255)
    write_pgm(out / "t2.pgm", scene.t2, 255)
    write_mask(out / "gt.pgm", scene.gt)
    manifest = {k: a[k] for k in ("size", "regions", "looks", "contrast", "seed")}
    manifest["changed_pixels"] = int(scene.gt.sum())
    manifest["created"] = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    (out / "manifest.txt").write_text("".join(f"{k}={v}\n" for k, v in manifest.items()))
    print(f"wrote {out}/t1.pgm t2.pgm gt.pgm ({scene.gt.sum()} changed pixels)")
    return 0


def cmd_train(a: dict[str, Any]) -> int:
    scene = _load_scene(a["t1"], a["t2"], a["gt"])
    di = log_ratio_di(scene, a["log_eps"])
    net = _net_config(a)
    samples = select_samples(di, scene.gt, a["samples"], net.patch, a["balanced"], make_rng(a["seed"], "sample"))
    model, trace = train(samples, net, _train_config(a, a["seed"]), di)
    model.extra.update({"log_eps": repr(a["log_eps"]), "samples": str(a["samples"])})
    out = Path(a["out"])
    save_model(out, model)
    trace_path = Path(a["trace"]) if a["trace"] else out.with_suffix(".trace.csv")
    with trace_path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "loss", "train_acc"])
        writer.writerows([s.epoch, f"{s.loss:.8f}", f"{s.train_acc:.6f}"] for s in trace)
    final = f"; final loss {trace[-1].loss:.5f}, train acc {trace[-1].train_acc:.4f}" if trace else ""
    print(f"wrote {out} and {trace_path} ({len(trace)} epochs{final})")
    return 0


def cmd_predict(a: dict[str, Any]) -> int:
    model = load_model(a["model"])
    scene = _load_scene(a["t1"], a["t2"])
    eps = float(model.extra.get("log_eps", 1.0))
    raw = log_ratio(scene.t1, scene.t2, eps)
    di = normalize_di(raw, model.di_lo, model.di_hi) if a["di_range"] == "model" else normalize_di(raw)
    change = classify_image(model, di, _threads(a["threads"]))
    write_mask(a["out"], change)
    print(f"wrote {a['out']} ({int(change.sum())} of {change.size} pixels changed)")
    return 0


def cmd_evaluate(a: dict[str, Any]) -> int:
    pred_raw, gt_raw = read_pgm(a["pred"]), read_pgm(a["gt"])
    for name, img in (("prediction", pred_raw), ("ground truth", gt_raw)):
        if not np.isin(img, (0, 1, 255)).all():
            raise ValueError(f"{name} map must contain only 0 and 255")
    report = evaluate((pred_raw > 0).astype(int), (gt_raw > 0).astype(int))
    report.write(a["out"])
    sys.stdout.write(report.to_text())
    return 0


def cmd_ablate(a: dict[str, Any]) -> int:
    scene = _scene_dir(a["scene"])
    results = ablation(
        scene, a["seeds"], _net_config(a, variant="full"), _train_config(a, 0), a["samples"], _threads(a["threads"])
    )
    Path(a["out"]).write_text(results_csv(results))
    order = variant_ordering(results)
    print("mean PCC by variant: " + ", ".join(f"{v}={p:.2f}" for v, p in order))
    print("ordering (best first): " + " > ".join(v for v, _ in order))
    return 0


def cmd_patchsweep(a: dict[str, Any]) -> int:
    scene = _scene_dir(a["scene"])
    results = patch_sweep(
        scene, a["patches"], a["seed"], _net_config(a, patch=9), _train_config(a, a["seed"]), a["samples"], _threads(a["threads"])
    )
    Path(a["out"]).write_text(results_csv(results))
    for r in results:
        print(f"r={r.patch:2d} PCC={r.report.pcc:.2f} KC={r.report.kc:.2f}")
    print(plateau_summary(results))
    return 0


def cmd_gradcheck(a: dict[str, Any]) -> int:
    failed = 0
    for seed in range(a["seed"], a["seed"] + a["seeds"]):
        for result in run_suite(seed, a["tolerance"]):
            print(f"seed={seed} {result.line()}")
            failed += not result.passed
    print("gradcheck: " + ("all passed" if not failed else f"{failed} check(s) failed"))
    return 0 if not failed else 1


HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "patchsweep": cmd_patchsweep,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = resolve(ns.command, ns)
        return HANDLERS[ns.command](args)
    except UsageError as exc:
        parser.exit(2, f"mscaps {ns.command}: error: {exc}\n")
    except (OSError, ValueError, ArithmeticError, FormatError) as exc:
        print(f"mscaps {ns.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
