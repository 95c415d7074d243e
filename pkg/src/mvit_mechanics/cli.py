"""``mvit-mechanics`` command line: trace, cost, verify and bench.

Exit status is 0 on success, 1 when ``verify`` finds a failing property and
2 for unusable arguments or configurations.
"""

import argparse
import csv
import io
import json
import math
import sys

from . import bench, verify
from .attention import FAULTS, SpecError
from .cost import count_flops
from .model import TASKS, VARIANTS, ModelConfig, build_variant, parse_input, shape_trace
from .model.config import ATTN_OVERRIDES
from .tensor import DimensionError

RELPOS_CHOICES = ("none", "abs", "joint", "decomposed")
TRACE_SCHEMA = "mvit_mechanics.shape_trace"
TRACE_COLUMNS = ("stage", "block", "kind", "grid", "channels", "heads", "L_q", "L_k", "window")
BENCH_COLUMNS = ("kind", "tokens", "L_k", "trials", "median_s", "tokens_per_s", "score_bytes",
                 "score_bytes_per_token")

# flag name -> default when neither the flag nor --config supplies it
DEFAULTS = {"variant": "T", "task": "classify", "input": None, "seed": 0, "out": None, "format": "json",
            "relpos": None, "attn": None, "kv_stride": None, "mac_weight": 1, "quick": False, "trials": 5}


class UsageError(Exception):
    pass


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    # defaults are None so that explicit flags can be told apart from --config values
    common.add_argument("--variant", choices=tuple(VARIANTS), default=None)
    common.add_argument("--task", choices=TASKS, default=None)
    common.add_argument("--input", default=None, help="H, HxW, or HxWxT for video")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None, help="write here instead of stdout")
    common.add_argument("--format", choices=("json", "csv"), default=None)
    common.add_argument("--relpos", choices=RELPOS_CHOICES, default=None)
    common.add_argument("--attn", choices=ATTN_OVERRIDES, default=None)
    common.add_argument("--kv-stride", dest="kv_stride", type=int, default=None)
    common.add_argument("--config", default=None, help="JSON run settings or a saved model config")

    parser = argparse.ArgumentParser(prog="mvit-mechanics", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("trace", parents=[common], help="per-block shape table")
    p = sub.add_parser("cost", parents=[common], help="parameter and FLOP report")
    p.add_argument("--mac-weight", dest="mac_weight", type=int, choices=(1, 2), default=None,
                   help="FLOPs per multiply-accumulate (default 1)")
    p = sub.add_parser("verify", parents=[common], help="run the self-check suite")
    p.add_argument("--quick", action="store_true", default=None, help="small cases only (L <= 64)")
    p.add_argument("--inject-fault", dest="inject_fault", choices=FAULTS, default=None, help=argparse.SUPPRESS)
    p = sub.add_parser("bench", parents=[common], help="time attention kinds on one token grid")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--kernels", action="store_true", help="also compare numba and numpy kernels")
    return parser


def _load_config_file(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    if "schema" in doc:
        return {"model": ModelConfig.from_dict(doc)}
    settings = {k.replace("-", "_"): v for k, v in doc.items()}
    if isinstance(settings.get("model"), dict):
        settings["model"] = ModelConfig.from_dict(settings["model"])
    unknown = set(settings) - set(DEFAULTS) - {"model"}
    if unknown:
        raise UsageError(f"unknown keys in {path}: {sorted(unknown)}")
    return settings


def resolve(args):
    """Merge defaults < --config file < explicit flags into one settings dict."""
    settings = dict(DEFAULTS)
    from_file = _load_config_file(args.config) if args.config else {}
    settings.update(from_file)
    explicit = {k: v for k, v in vars(args).items() if k in DEFAULTS and v is not None}
    settings.update(explicit)
    structural = {"variant", "task", "relpos", "attn", "kv_stride"}
    if "model" in settings and structural & set(explicit):
        # a flag that changes the architecture replaces the saved model
        settings.pop("model")
    settings["inject_fault"] = getattr(args, "inject_fault", None)
    settings["kernels"] = getattr(args, "kernels", False)
    return settings


def build_config(settings):
    model = settings.get("model")
    if model is not None:
        if settings["input"] is not None:
            model = model.with_(input_shape=parse_input(settings["input"], model.task))
        return model
    task = settings["task"]
    shape = parse_input(settings["input"], task) if settings["input"] is not None else None
    return build_variant(settings["variant"], task=task, input_shape=shape, attn=settings["attn"],
                         kv_stride=settings["kv_stride"], relpos=settings["relpos"])


def _grid_text(grid):
    return "x".join(str(g) for g in grid)


def _csv(columns, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([row[c] for c in columns])
    return buf.getvalue()


def _json(doc):
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def cmd_trace(settings):
    config = build_config(settings)
    rows = shape_trace(config)
    if settings["format"] == "csv":
        flat = [dict(r, grid=_grid_text(r["grid"]),
                     window=_grid_text(r["stage_window"]) if r["stage_window"] else "") for r in rows]
        return _csv(TRACE_COLUMNS, flat), 0
    doc = {"schema": TRACE_SCHEMA, "version": 1,
           "meta": {"variant": config.name, "task": config.task, "input_shape": list(config.input_shape),
                    "stage_grids": [list(g) for g in config.stage_grids()],
                    "stage_windows": [list(s.window) if s.window else None for s in config.stages]},
           "blocks": rows}
    return _json(doc), 0


def cmd_cost(settings):
    report = count_flops(build_config(settings), mac_weight=settings["mac_weight"])
    return (report.to_csv() if settings["format"] == "csv" else report.to_json()), 0


def cmd_verify(settings):
    quick, seed, fault = bool(settings["quick"]), settings["seed"], settings["inject_fault"]
    results = verify.run_suite(quick=quick, seed=seed, fault=fault)
    for r in results:
        status = "ok  " if r.passed else "FAIL"
        print(f"{status} {r.name}: max error {r.max_error:.3e} (threshold {r.threshold:g}, {r.cases} cases)",
              file=sys.stderr)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"failing properties: {', '.join(failed)}", file=sys.stderr)
    if settings["format"] == "csv":
        cols = ("name", "cases", "max_error", "threshold", "passed")
        text = _csv(cols, [{c: getattr(r, c) for c in cols} for r in results])
    else:
        text = verify.report_json(results, quick, seed, fault)
    return text, 1 if failed else 0


def cmd_bench(settings):
    # a token grid, not an image: "56" is a 56x56 grid, "8x14x14" a 3-d one
    grid = tuple(int(p) for p in str(settings["input"] or "56").lower().split("x"))
    grid = grid * 2 if len(grid) == 1 else grid
    if len(grid) not in (2, 3) or min(grid) < 1:
        raise UsageError(f"bench grid must have 2 or 3 positive extents, got {settings['input']}")
    kv = settings["kv_stride"] if settings["kv_stride"] is not None else 4
    kinds = (settings["attn"],) if settings["attn"] else bench.BENCH_KINDS
    rows = bench.bench_attention(grid, kinds=kinds, trials=settings["trials"], seed=settings["seed"],
                                 kv_stride=kv)
    if settings["format"] == "csv":
        out = _csv(BENCH_COLUMNS, [vars(r) for r in rows])
    else:
        doc = bench.report_dict(rows, grid, settings["seed"])
        if settings["kernels"]:
            doc["kernels"] = bench.bench_kernels(grid if math.prod(grid) > 1 else (56, 56), seed=settings["seed"])
        out = _json(doc)
    return out, 0


COMMANDS = {"trace": cmd_trace, "cost": cmd_cost, "verify": cmd_verify, "bench": cmd_bench}


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        settings = resolve(args)
        text, status = COMMANDS[args.command](settings)
    except (UsageError, SpecError, DimensionError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if settings["out"]:
        with open(settings["out"], "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return status


if __name__ == "__main__":
    sys.exit(main())
