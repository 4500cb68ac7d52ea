"""Command-line driver: generate, identify, eval-openloop, track, demo.

Exit codes: 0 ok, 1 usage/config error, 2 numerical failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, bilinear, container, edmd, mpc, pipeline, plant
from .config import ConfigError, RunConfig, load_config
from .qpsolver import NotPositiveDefiniteError

log = logging.getLogger("kbmpc")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3

DATASET_FILE = "dataset.kbds"
MODEL_FILE = "model.kbmd"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


@dataclass
class Context:
    cfg: RunConfig
    out: Path
    threads: int

    @property
    def config_hash(self) -> str:
        return self.cfg.digest()

    def stamp(self) -> dict:
        return {"tool": "kbmpc", "version": __version__, "config_hash": self.config_hash}

    def comment(self) -> str:
        return f"kbmpc {__version__} config {self.config_hash}"

    def path(self, name: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out / name

    def write_json(self, name: str, obj: dict) -> Path:
        p = self.path(name)
        doc = dict(self.stamp(), **obj)
        p.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return p

    def write_csv(self, name: str, header, rows) -> Path:
        buf = io.StringIO()
        buf.write(f"# {self.comment()}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
        p = self.path(name)
        p.write_text(buf.getvalue(), encoding="utf-8")
        return p


# --------------------------------------------------------------------------
# commands

def cmd_generate(ctx: Context, args=None) -> edmd.Dataset:
    t0 = time.perf_counter()
    ds = edmd.generate_dataset(pipeline.data_config(ctx.cfg), ctx.threads)
    path = ctx.path(DATASET_FILE)
    edmd.save_dataset(ds, path, ctx.stamp())
    log.info("wrote %s (%d transitions, %.1f s)", path, ds.n_transitions, time.perf_counter() - t0)
    return ds


def cmd_identify(ctx: Context, args=None, ds: edmd.Dataset | None = None):
    if ds is None:
        ds = edmd.load_dataset(getattr(args, "dataset", None) or ctx.out / DATASET_FILE)
    basis = pipeline.make_basis(ctx.cfg)
    model = pipeline.identify(ctx.cfg, ds, basis, ctx.threads)
    edmd.save_model(model, ctx.path(MODEL_FILE), ctx.stamp())
    ctx.write_json("basis_manifest.json", {
        "rho": ctx.cfg.lifting.rho, "raw_count": basis.raw_count, "N": basis.N,
        "manifest_hash": basis.manifest_hash, "observables": basis.manifest()})
    report = pipeline.validation_report(ctx.cfg, model, ctx.threads)
    report.update(N=model.N, rho=ctx.cfg.lifting.rho, n_transitions=ds.n_transitions)
    ctx.write_json("validation.json", report)
    log.info("model N=%d, validation e_x0y0=%.3g", model.N, report["multi_step"]["e_x0y0"])
    return model, report


def _load_model(ctx: Context, path=None) -> edmd.BilinearModel:
    basis = pipeline.make_basis(ctx.cfg)
    model = edmd.load_model(path or ctx.out / MODEL_FILE, basis)
    if not np.isclose(model.Ts, ctx.cfg.data.Ts, rtol=1e-12, atol=0.0):
        raise ConfigError(f"model Ts={model.Ts} does not match config Ts={ctx.cfg.data.Ts}")
    return model


def cmd_eval_openloop(ctx: Context, args=None, model=None) -> pipeline.OpenLoopResult:
    model = model or _load_model(ctx, getattr(args, "model", None))
    variants = tuple(getattr(args, "variants", None) or bilinear.VARIANTS)
    for v in variants:
        if v not in bilinear.VARIANTS:
            raise UsageError(f"unknown variant {v!r}; choose from {', '.join(bilinear.VARIANTS)}")
    res = pipeline.evaluate_openloop(ctx.cfg, model, ctx.threads, variants)
    ctx.write_csv("openloop_table.csv", ("variant",) + bilinear.CHANNELS,
                  [[v] + [res.table[v][c] for c in bilinear.CHANNELS] for v in variants])
    rows = []
    for v in variants:
        for k, e in enumerate(res.curves[v]):
            rows.extend([v, c, float(e[j]), k] for j, c in enumerate(bilinear.CHANNELS))
    ctx.write_csv("openloop_curves.csv", ("variant", "channel", "mean_error", "horizon_step"), rows)

    idx = getattr(args, "rollout", None)
    if idx is not None:
        if not 0 <= idx < len(res.X0):
            raise UsageError(f"--rollout must lie in [0, {len(res.X0) - 1}]")
        p = ctx.cfg.plant.params()
        truth = bilinear.truth_batch(res.X0[idx:idx + 1], res.controls[idx:idx + 1], p,
                                     res.mu[idx:idx + 1], ctx.cfg.data.kappa, ctx.cfg.data.Ts)[0]
        rows = [["TRUTH", k] + list(map(float, y)) for k, y in enumerate(truth)]
        for v in variants:
            pred = bilinear.predict(v, res.X0[idx], res.controls[idx], model, p, ctx.cfg.data.Ts)
            rows.extend([v, k] + list(map(float, y)) for k, y in enumerate(pred))
        ctx.write_csv(f"openloop_rollout_{idx}.csv", ("variant", "step") + plant.OUTPUT_NAMES, rows)
    return res


def cmd_track(ctx: Context, args=None, model=None) -> dict:
    choice = getattr(args, "controller", None)
    names = ctx.cfg.track.controllers if choice in (None, "both") else (choice,)
    if "kbmpc" in names and model is None:
        model = _load_model(ctx, getattr(args, "model", None))
    ref_arg = getattr(args, "reference", None)
    if ref_arg:
        ctx.cfg.track.reference = ref_arg
    reference, ref_name = pipeline.load_reference(ctx.cfg)
    plant.save_reference_csv(reference, ctx.path("reference.csv"), ctx.comment())
    summaries = {}
    for name in names:
        lg = pipeline.run_tracking(ctx.cfg, name, model, reference)
        mpc.save_tracking_csv(lg, ctx.path(f"tracking_{name}.csv"), ctx.comment(), ctx.cfg.timing)
        s = pipeline.tracking_summary(ctx.cfg, lg)
        s.update(reference=ref_name, mu=ctx.cfg.track.mu, kappa=ctx.cfg.track.kappa)
        ctx.write_json(f"summary_{name}.json", s)
        if ctx.cfg.timing:
            ctx.write_json(f"timing_{name}.json", pipeline.timing_summary(lg))
        summaries[name] = s
        log.info("%s: e_x1y1=%.4f m, mean cost %.4g", name, s["mean_errors"]["e_x1y1"], s["mean_cost"])
    if {"kbmpc", "lmpc"} <= set(summaries):
        ctx.write_json("comparison.json", pipeline.compare(summaries))
    return summaries


def cmd_demo(ctx: Context, args=None) -> dict:
    """Full desk-scale pipeline; summary.json holds only reproducible numbers."""
    ctx.write_json("config.json", {"config": ctx.cfg.to_dict()})
    ds = cmd_generate(ctx)
    model, report = cmd_identify(ctx, ds=ds)
    ol = cmd_eval_openloop(ctx, model=model)
    tracks = cmd_track(ctx, model=model)
    summary = {
        "dataset": {"n_transitions": ds.n_transitions, "sha256_prefix": _file_digest(ctx.out / DATASET_FILE)},
        "model": {"N": model.N, "basis_manifest_hash": model.basis_hash},
        "validation": report,
        "openloop": ol.table,
        "tracking": tracks,
    }
    if {"kbmpc", "lmpc"} <= set(tracks):
        summary["comparison"] = pipeline.compare(tracks)
    ctx.write_json("summary.json", summary)
    return summary


def _file_digest(path) -> str:
    import hashlib
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


# --------------------------------------------------------------------------
# argument parsing

def _globals_parser(suppress: bool) -> argparse.ArgumentParser:
    d = argparse.SUPPRESS if suppress else None
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", default=d, help="JSON run configuration")
    p.add_argument("--seed", type=int, metavar="U64", default=d, help="override the root seed")
    p.add_argument("--out", metavar="DIR", default=d, help="output directory (default: out)")
    p.add_argument("--threads", type=int, metavar="N", default=d,
                   help="worker threads for data generation and batch evaluation")
    p.add_argument("-v", "--verbose", action="store_true", default=d or False)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kbmpc", parents=[_globals_parser(False)],
                     description="Koopman bilinear MPC pipeline for a tractor-trailer.")
    parser.add_argument("--version", action="version", version=f"kbmpc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    g = [_globals_parser(True)]
    sub.add_parser("generate", parents=g, help="simulate the training dataset")
    p = sub.add_parser("identify", parents=g, help="build the lifting basis and fit the model")
    p.add_argument("--dataset", metavar="PATH", help=f"dataset file (default: OUT/{DATASET_FILE})")
    p = sub.add_parser("eval-openloop", parents=g, help="compare predictors on random rollouts")
    p.add_argument("--model", metavar="PATH", help=f"model file (default: OUT/{MODEL_FILE})")
    p.add_argument("--variant", dest="variants", action="append", metavar="NAME",
                   help=f"restrict to a variant ({', '.join(bilinear.VARIANTS)}); repeatable")
    p.add_argument("--rollout", type=int, metavar="INDEX",
                   help="also write per-step outputs of one rollout")
    p = sub.add_parser("track", parents=g, help="closed-loop tracking on a reference")
    p.add_argument("--model", metavar="PATH", help=f"model file (default: OUT/{MODEL_FILE})")
    p.add_argument("--reference", metavar="NAME|CSV",
                   help=f"profile ({', '.join(plant.PROFILES)}) or reference CSV")
    p.add_argument("--controller", choices=("kbmpc", "lmpc", "both"), default="both")
    sub.add_parser("demo", parents=g, help="run the whole pipeline")
    return parser


COMMANDS = {"generate": cmd_generate, "identify": cmd_identify,
            "eval-openloop": cmd_eval_openloop, "track": cmd_track, "demo": cmd_demo}


def make_context(args) -> Context:
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg.seed = args.seed
    threads = args.threads if args.threads is not None else (os.cpu_count() or 1)
    if threads < 1:
        raise ConfigError("--threads must be at least 1")
    return Context(cfg, Path(args.out or "out"), threads)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        ctx = make_context(args)
        COMMANDS[args.command](ctx, args)
    except (UsageError, ConfigError) as exc:
        print(f"kbmpc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, container.ContainerError, edmd.ModelMismatchError) as exc:
        print(f"kbmpc: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (np.linalg.LinAlgError, NotPositiveDefiniteError, FloatingPointError, ValueError) as exc:
        print(f"kbmpc: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
