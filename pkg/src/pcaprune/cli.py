"""Command-line driver. Each stage reads the previous stage's checkpoint.

Exit codes: 0 ok, 2 config, 3 format, 4 numeric, 5 verification failed.
Failures print one line ``error code=<n> kind=<Class> msg=<text>`` on stderr.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import checkpoint as ckio
from . import reporting
from .calibration import CalibrationFeatures, collect
from .config import RunConfig, load_config
from .errors import ConfigError, FormatError, PruneError, VerificationError
from .fusing import fuse, fused_forward, size_report
from .model import forward, forward_projected, init_model, train_toy
from .model.training import accuracy
from .projection import (
    ProjectedModel,
    build_projections,
    complexity_estimate,
    inject,
    max_relative_deviation,
)
from .pruning import binarize, expected_retained, train_masks

log = logging.getLogger("pcaprune")

EXACT_TOL = 1e-6
VERIFY_INPUTS = 128


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="key=value run configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--t", "--target", dest="t", type=float, help="target sparsity")
    p.add_argument("--group-size", dest="group_size", type=int)
    p.add_argument("--arch", choices=("postln", "rmsnorm"))
    p.add_argument("--out", type=Path)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pcaprune", description="PCA-projection structured pruning")
    sub = parser.add_subparsers(dest="command", required=True)
    specs = {
        "gen-toy": ("initialise a toy model", []),
        "train": ("train a toy model on the majority task", ["model"]),
        "calibrate": ("collect calibration features", ["model"]),
        "project": ("fit and inject PCA projections", ["model"]),
        "prune": ("train masks and binarize them at the target sparsity", ["model"]),
        "fuse": ("fold masks and projections into a compressed model", ["model"]),
        "verify": ("check projection exactness or fuse equivalence", ["model"]),
        "report": ("spectrum, per-layer dimension and head tables", ["model"]),
        "bench": ("projection cost scaling and fused size/speed", ["model"]),
    }
    for name, (help_text, positional) in specs.items():
        p = sub.add_parser(name, help=help_text)
        for pos in positional:
            p.add_argument(pos, type=Path)
        if name == "verify":
            p.add_argument("--fused", type=Path, help="fused checkpoint to compare against")
        _common(p)
    return parser


def _run_config(args, ckpt=None) -> RunConfig:
    cfg = load_config(args.config, seed=args.seed, target_sparsity=args.t,
                      group_size=args.group_size, arch=args.arch)
    if ckpt is not None:
        mc = ckpt.config
        if args.arch is not None and args.arch != mc.arch:
            raise ConfigError(f"--arch {args.arch} does not match the checkpoint ({mc.arch})")
        cfg = cfg.replace(arch=mc.arch, n_layers=mc.n_layers, d=mc.d, n_heads=mc.n_heads,
                          d_f=mc.d_f, vocab_size=mc.vocab_size, seq_len=mc.max_seq_len)
        cfg.validate()
    return cfg


def _need_out(args) -> Path:
    if args.out is None:
        raise ConfigError(f"{args.command} needs --out")
    return args.out


def _emit(text: str):
    sys.stdout.write(text)
    if not text.endswith("\n"):
        sys.stdout.write("\n")


# stages ------------------------------------------------------------------------------------

def cmd_gen_toy(args):
    cfg = _run_config(args)
    model = init_model(cfg.model_config())
    ckio.write(_need_out(args), ckio.model_checkpoint(model))
    _emit(f"wrote {args.out} arch={cfg.arch} layers={cfg.n_layers} d={cfg.d}")


def cmd_train(args):
    ck = ckio.read(args.model)
    cfg = _run_config(args, ck)
    task = cfg.task()
    x, y = task.sample(cfg.train_size, "train")
    model, hist = train_toy(ckio.model_from(ck), x, y, steps=cfg.train_steps, lr=cfg.train_lr, seed=cfg.seed)
    xt, yt = task.sample(cfg.test_size, "test")
    acc = accuracy(forward(model, xt), yt)
    ckio.write(_need_out(args), ckio.model_checkpoint(model))
    first, last = (hist[0], hist[-1]) if hist else (float("nan"), float("nan"))
    _emit(f"wrote {args.out} loss {first:.4f} -> {last:.4f} test_acc={acc:.4f}")


def cmd_calibrate(args):
    ck = ckio.read(args.model)
    cfg = _run_config(args, ck)
    model = ckio.model_from(ck)
    feats = collect(model, cfg.task().sample(cfg.calib_size, "calib")[0], cfg.tokens, seed=cfg.seed)
    ckio.write(_need_out(args), ckio.model_checkpoint(model, extra=feats.to_records()))
    _emit(f"wrote {args.out} T={feats.T} matrices={len(feats.mats)}")


def _features(ck) -> CalibrationFeatures:
    recs = ck.prefixed("feat.")
    if not recs:
        raise FormatError("checkpoint has no calibration features (run calibrate first)", 0)
    return CalibrationFeatures.from_records(ck.config.arch, recs)


def cmd_project(args):
    ck = ckio.read(args.model)
    cfg = _run_config(args, ck)
    model = ckio.model_from(ck)
    pm = inject(model, _features(ck), cfg.group_size)
    ckio.write(_need_out(args), ckio.model_checkpoint(model, pm.projections))
    xt = cfg.task().sample(VERIFY_INPUTS, "test")[0]
    dev = max_relative_deviation(forward_projected(model, pm.projections, None, xt), forward(model, xt))
    _emit(f"wrote {args.out} projections={len(pm.projections.tensors)} max_rel_dev={dev:.3e}")


def _projected(ck):
    model = ckio.model_from(ck)
    proj = ckio.projections_from(ck)
    if proj is None:
        raise FormatError("checkpoint has no projections (run project first)", 0)
    return ProjectedModel(model, proj)


def cmd_prune(args):
    ck = ckio.read(args.model)
    cfg = _run_config(args, ck)
    pm = _projected(ck)
    x, y = cfg.task().sample(cfg.train_size, "train")
    t = cfg.target_sparsity
    res = train_masks(pm, x, y, t, cfg.schedule())
    masks = binarize(res.masks, t, pm.config)
    rep = expected_retained(masks, pm.config)
    ckio.write(_need_out(args), ckio.model_checkpoint(res.projected.model, res.projected.projections, masks))
    _emit(f"wrote {args.out} target={t} soft_s_hat={res.s_hat:.4f} s_hat={rep.s_hat:.4f} "
          f"retained={int(round(rep.retained))}/{rep.total}")


def _pruned(ck):
    pm = _projected(ck)
    masks = ckio.masks_from(ck)
    if masks is None:
        raise FormatError("checkpoint has no masks (run prune first)", 0)
    return pm, masks


def cmd_fuse(args):
    ck = ckio.read(args.model)
    _run_config(args, ck)
    pm, masks = _pruned(ck)
    fused = fuse(pm, masks)
    ckio.write(_need_out(args), ckio.fused_checkpoint(fused))
    rep = size_report(fused)
    _emit(f"wrote {args.out} params={rep['total']}/{rep['dense']} residual_matrices={rep['n_residual_matrices']}")


def cmd_verify(args):
    ck = ckio.read(args.model)
    cfg = _run_config(args, ck)
    xt = cfg.task().sample(VERIFY_INPUTS, "test")[0]
    pm = _projected(ck)
    masks = ckio.masks_from(ck)
    if masks is None:
        what = "projection"
        dev = max_relative_deviation(forward_projected(pm.model, pm.projections, None, xt), forward(pm.model, xt))
    else:
        what = "fuse"
        fused = fuse(pm, masks) if args.fused is None else ckio.fused_from(ckio.read(args.fused))
        dev = max_relative_deviation(fused_forward(fused, xt),
                                     forward_projected(pm.model, pm.projections, masks, xt))
        rep = expected_retained(masks, pm.config)
        if fused.param_count() != int(round(rep.retained)):
            raise VerificationError(
                f"fused parameter count {fused.param_count()} != expected {rep.retained:.1f}")
    ok = dev < EXACT_TOL
    _emit(f"verify {what}: max_rel_dev={dev:.3e} threshold={EXACT_TOL:.0e} status={'ok' if ok else 'FAIL'}")
    if not ok:
        raise VerificationError(f"{what} deviation {dev:.3e} exceeds {EXACT_TOL:.0e}")


def cmd_report(args):
    ck = ckio.read(args.model)
    tables = {}
    if ck.magic == ckio.FUSED_MAGIC:
        fused = ckio.fused_from(ck)
        tables["dims"] = reporting.fused_dims_table(fused)
        tables["size"] = [size_report(fused)]
    else:
        if ck.prefixed("feat."):
            tables["spectrum"] = reporting.spectrum_table(_features(ck))
        masks = ckio.masks_from(ck)
        if masks is not None:
            tables["dims"] = reporting.mask_dims_table(masks, ck.config)
            tables["heads"] = reporting.head_table(masks, ck.config)
            rep = expected_retained(masks, ck.config)
            tables["sparsity"] = [{"s_hat": rep.s_hat, "retained": rep.retained, "total": rep.total}]
    if not tables:
        raise FormatError("nothing to report: checkpoint has no features, masks or fused weights", 0)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
    for name, rows in tables.items():
        _emit(reporting.to_text(rows, f"[{name}]"))
        if args.out is not None:
            (args.out / f"{name}.csv").write_text(reporting.to_csv(rows))


def cmd_bench(args):
    ck = ckio.read(args.model)
    cfg = _run_config(args, ck)
    pm, masks = _pruned(ck)
    model = pm.model
    calib = cfg.task().sample(cfg.calib_size, "calib")[0]
    rows = []
    total = calib.size
    for mult in (1, 2, 4, 8):
        T = min(mult * cfg.d, total)
        t0 = time.perf_counter()
        feats = collect(model, calib, T, seed=cfg.seed)
        build_projections(model, feats, cfg.group_size)
        sec = time.perf_counter() - t0
        est = complexity_estimate(cfg.n_layers, cfg.d, T)
        rows.append({"T": T, "seconds": sec, "n_d2_T": est, "ns_per_unit": 1e9 * sec / est})
        if T == total:
            break
    fused = fuse(pm, masks)
    xt = cfg.task().sample(64, "test")[0]
    size = size_report(fused, model, xt)
    _emit(reporting.to_text(rows, "[projection cost]"))
    _emit(reporting.to_text([size], "[size]"))
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "bench_cost.csv").write_text(reporting.to_csv(rows))
        (args.out / "bench_size.csv").write_text(reporting.to_csv([size]))


COMMANDS = {
    "gen-toy": cmd_gen_toy, "train": cmd_train, "calibrate": cmd_calibrate, "project": cmd_project,
    "prune": cmd_prune, "fuse": cmd_fuse, "verify": cmd_verify, "report": cmd_report, "bench": cmd_bench,
}


def _threads():
    raw = os.environ.get("SP3_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"SP3_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"SP3_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=_threads()):
            COMMANDS[args.command](args)
    except PruneError as exc:
        msg = " ".join(str(exc).split())
        print(f"error code={exc.exit_code} kind={type(exc).__name__} msg={msg}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
