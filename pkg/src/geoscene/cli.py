"""``geoscene`` command line.

Exit codes: 0 success, 1 usage, 2 data or format error, 3 numeric failure.
``GEOSCENE_LOG`` (error, info, debug) sets the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import traceback
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError, GeosceneError, UsageError

log = logging.getLogger("geoscene")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _echo(name: str, config: dict, seed) -> None:
    print(f"# {name} seed={seed}")
    print("# config " + json.dumps(config, sort_keys=True, default=str))
    sys.stdout.flush()


def _version_text() -> str:
    return (f"geoscene {__version__} (python {platform.python_version()}, "
            f"numpy {np.__version__}, {platform.system().lower()}-{platform.machine()})")


# -- subcommands -------------------------------------------------------------------
def cmd_gen_data(args) -> int:
    from .dataset import generate_dataset
    from .scenegen import PairConfig

    cfg = PairConfig(height=args.size, width=args.size, patch=args.patch,
                     n_matches=args.matches, kernel_radius=args.kernel_r,
                     kernel_sigma=args.kernel_sigma)
    cfg.validate()
    _echo("gen-data", {"out": args.out, "count": args.count, "workers": args.workers,
                       **asdict(cfg)}, args.seed)
    manifest = generate_dataset(args.out, args.seed, args.count, cfg, force=args.force,
                                workers=args.workers)
    print(f"wrote {len(manifest['samples'])} samples to {args.out}")
    return 0


def cmd_build_masks(args) -> int:
    from .correspondence import build_masks, gaussian_kernel, read_matches, write_mask

    if args.h % args.patch or args.w % args.patch:
        raise UsageError(f"--h {args.h} / --w {args.w} not divisible by --patch {args.patch}")
    _echo("build-masks", {"matches": args.matches, "h": args.h, "w": args.w,
                          "patch": args.patch, "kernel_r": args.kernel_r,
                          "kernel_sigma": args.kernel_sigma, "out": args.out}, None)
    matches = read_matches(args.matches, bounds=(args.h, args.w))
    if matches.count == 0:
        print(f"warning: {args.matches} holds no matches; masks are all zero", file=sys.stderr)
    m0, m1 = build_masks(matches, args.h, args.w, args.patch,
                         gaussian_kernel(args.kernel_r, args.kernel_sigma))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_mask(out / "mask0.gamk", m0)
    write_mask(out / "mask1.gamk", m1)
    print(f"N_m={matches.count} max0={float(m0.max()):.6g} max1={float(m1.max()):.6g} "
          f"nonzero0={int(np.count_nonzero(m0))} nonzero1={int(np.count_nonzero(m1))}")
    return 0


_TRAIN_FLAGS = ("seed", "dataset", "steps", "batch_size", "lr", "lam", "out_dir")


def cmd_train(args) -> int:
    from .trainer import TrainConfig, read_config_file, train

    values = read_config_file(args.config) if args.config else {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    for name in _TRAIN_FLAGS:
        v = getattr(args, name)
        if v is not None:
            values[name] = v
    config = TrainConfig.from_mapping(values)
    config.validate()
    _echo("train", config.to_dict(), config.seed)

    def progress(step, losses, agree):
        a = "nan" if agree is None else f"{agree:.4f}"
        log.info("step %d total %.5f l_diff %.5f l_attn %.5f agreement %s",
                 step, losses.total, losses.l_diff, losses.l_attn, a)

    result = train(config, resume=args.resume, progress=progress)
    print(f"metrics: {result.metrics_path}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _load_request_inputs(args):
    from .scenegen import EntitySpec, _png_read, read_sample

    sample = None
    if args.sample:
        sample = read_sample(args.sample)
        return sample.reference_image, sample.entity, sample
    if not (args.reference and args.condition):
        raise UsageError("give --sample DIR or both --reference PNG and --condition JSON")
    cond = json.loads(Path(args.condition).read_text(encoding="utf-8"))
    try:
        entity = EntitySpec(cond["shape"], cond["color"], cond["relation"], int(cond["anchor"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{args.condition}: bad condition ({exc})") from None
    return _png_read(args.reference), entity, sample


def cmd_sample(args) -> int:
    from .sampler import SampleRequest, generate, write_png

    reference, entity, _ = _load_request_inputs(args)
    req = SampleRequest(args.checkpoint, reference, entity, steps=args.steps, seed=args.seed,
                        stochastic=args.stochastic)
    _echo("sample", {"checkpoint": args.checkpoint, "steps": args.steps,
                     "stochastic": args.stochastic, "entity": asdict(entity),
                     "out": args.out, "id": args.id}, args.seed)
    result = generate(req)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{args.id}_gen.png"
    write_png(path, result.image)
    print(f"wrote {path}")
    return 0


def cmd_inspect_attn(args) -> int:
    from .sampler import SampleRequest, export_attention
    from .scenegen import read_sample

    sample = read_sample(args.sample)
    req = SampleRequest(args.checkpoint, sample.reference_image, sample.entity, seed=args.seed)
    _echo("inspect-attn", {"checkpoint": args.checkpoint, "sample": args.sample,
                           "t": args.t, "out": args.out, "id": args.id}, args.seed)
    g0, g1, _, _ = export_attention(req, sample, args.out, args.id, t=args.t)
    from .evalkit import agreement_or_none
    for v, g, m in ((0, g0, sample.masks[0]), (1, g1, sample.masks[1])):
        r = agreement_or_none(g, m)
        print(f"view {v}: agreement {'undefined' if r is None else f'{r:.4f}'}")
    out = Path(args.out)
    print(f"wrote {out / (args.id + '_attn0.pgm')} and {out / (args.id + '_attn1.pgm')}")
    return 0


def _vote_report(args):
    from .evalkit import aggregate_votes, human_preferences, pairwise_accuracy, read_scores, \
        read_votes

    votes = read_votes(args.votes)
    summary = aggregate_votes(votes, args.alpha)
    accuracy = {}
    if getattr(args, "scores", None):
        prefs = human_preferences(votes)
        for spec in args.scores:
            name, _, path = spec.rpartition("=")
            name = name or Path(path).stem
            accuracy[name] = pairwise_accuracy(read_scores(path), prefs)
    return summary, accuracy


def _print_votes(summary, accuracy) -> None:
    for m, p in summary.percentages.items():
        print(f"{m}: {p:.2f}%")
    print(f"valid pairs: {summary.valid_pairs}, skipped pairs: {summary.skipped_pairs}")
    for name, acc in accuracy.items():
        print(f"pairwise accuracy [{name}]: {acc:.2f}")


def cmd_votes(args) -> int:
    from .evalkit import AgreementReport

    _echo("votes", {"votes": args.votes, "alpha": args.alpha}, None)
    summary, accuracy = _vote_report(args)
    _print_votes(summary, accuracy)
    if args.report:
        AgreementReport(summary.percentages, accuracy, summary.valid_pairs,
                        summary.skipped_pairs).write(args.report, args.csv)
    return 0


def _eval_model(args) -> dict:
    from .dataset import load_dataset
    from .evalkit import relation_accuracy, scene_error
    from .sampler import SampleRequest, generate
    from .trainer import evaluate_attention, model_from_checkpoint

    model = model_from_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset)
    n = len(ds) if args.limit is None else min(args.limit, len(ds))
    idx = np.arange(n)
    out = {"attn_agreement": evaluate_attention(model, ds, args.seed, indices=idx)}
    if args.generate:
        psnr, rel, fail = [], 0, 0
        for i in range(min(args.generate, n)):
            s = ds.sample(i)
            img = generate(SampleRequest(model, s.reference_image, s.entity, steps=args.steps,
                                         seed=args.seed + i)).image
            psnr.append(scene_error(img, s.target_image, s.footprint))
            r = relation_accuracy(img, s.entity, s.scene)
            rel += int(r is True)
            fail += int(r is None)
        out.update(scene_psnr=float(np.mean(psnr)), relation_accuracy=100.0 * rel / len(psnr),
                   detection_failures=fail, generated=len(psnr))
    return out


def cmd_eval(args) -> int:
    from .evalkit import AgreementReport

    if not args.votes and not args.checkpoint:
        raise UsageError("eval needs --votes and/or --checkpoint with --dataset")
    if args.checkpoint and not args.dataset:
        raise UsageError("--checkpoint needs --dataset")
    _echo("eval", {k: v for k, v in vars(args).items() if k != "func"}, args.seed)
    report = {}
    if args.votes:
        summary, accuracy = _vote_report(args)
        _print_votes(summary, accuracy)
        rep = AgreementReport(summary.percentages, accuracy, summary.valid_pairs,
                              summary.skipped_pairs)
        report.update(json.loads(rep.to_json()))
        if args.csv:
            rep.write(os.devnull, args.csv)
    if args.checkpoint:
        model_report = _eval_model(args)
        for k, v in model_report.items():
            print(f"{k}: {v:.4f}" if isinstance(v, float) else f"{k}: {v}")
        report["model"] = model_report
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    return 0


# -- parser ------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="geoscene", description="Geometry-supervised scene-consistent "
                                             "generation toolkit.")
    p.add_argument("--version", action="version", version=_version_text())
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="generate a synthetic paired dataset")
    g.add_argument("--seed", type=int, default=0, help="dataset seed (default 0)")
    g.add_argument("--count", type=int, required=True, help="number of pairs")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--size", type=int, default=64, help="image side in pixels (default 64)")
    g.add_argument("--patch", type=int, default=8, help="patch size (default 8)")
    g.add_argument("--matches", type=int, default=48, help="matches per pair (default 48)")
    g.add_argument("--kernel-r", type=int, default=3, help="splat kernel radius (default 3)")
    g.add_argument("--kernel-sigma", type=float, default=1.5,
                   help="splat kernel sigma (default 1.5)")
    g.add_argument("--workers", type=int, default=1, help="generator processes (default 1)")
    g.add_argument("--force", action="store_true", help="write into a non-empty directory")
    g.set_defaults(func=cmd_gen_data)

    b = sub.add_parser("build-masks", help="splat a match file into token-grid masks")
    b.add_argument("--matches", required=True, help="JSON-lines file of x0,y0,x1,y1")
    b.add_argument("--h", type=int, default=64, help="image height (default 64)")
    b.add_argument("--w", type=int, default=64, help="image width (default 64)")
    b.add_argument("--patch", type=int, default=8, help="patch size (default 8)")
    b.add_argument("--kernel-r", type=int, default=3, help="splat kernel radius (default 3)")
    b.add_argument("--kernel-sigma", type=float, default=1.5,
                   help="splat kernel sigma (default 1.5)")
    b.add_argument("--out", required=True, help="directory for mask0.gamk and mask1.gamk")
    b.set_defaults(func=cmd_build_masks)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    t.add_argument("--seed", type=int, help="override seed")
    t.add_argument("--dataset", help="override dataset directory")
    t.add_argument("--steps", type=int, help="override step count")
    t.add_argument("--batch-size", type=int, help="override batch size")
    t.add_argument("--lr", type=float, help="override learning rate")
    t.add_argument("--lam", type=float, help="override attention loss weight")
    t.add_argument("--out-dir", help="override output directory")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate an image from a reference and condition")
    s.add_argument("--checkpoint", required=True, help="trained checkpoint")
    s.add_argument("--sample", help="dataset sample directory supplying reference and condition")
    s.add_argument("--reference", help="reference PNG (instead of --sample)")
    s.add_argument("--condition", help="condition JSON (instead of --sample)")
    s.add_argument("--steps", type=int, default=28, help="denoising steps (default 28)")
    s.add_argument("--seed", type=int, default=0, help="noise seed (default 0)")
    s.add_argument("--stochastic", action="store_true", help="use the ancestral update rule")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--id", default="sample", help="output file prefix (default sample)")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="vote aggregation, metric agreement and model metrics")
    e.add_argument("--votes", help="votes CSV pair_id,annotator_id,method,selected")
    e.add_argument("--scores", action="append", metavar="[NAME=]CSV",
                   help="metric scores CSV pair_id,method,score (repeatable)")
    e.add_argument("--alpha", type=float, default=0.8, help="vote temperature (default 0.8)")
    e.add_argument("--checkpoint", help="checkpoint to score on --dataset")
    e.add_argument("--dataset", help="held-out dataset directory")
    e.add_argument("--limit", type=int, help="score only the first N pairs")
    e.add_argument("--generate", type=int, default=0,
                   help="also sample N pairs and report masked PSNR and relation accuracy")
    e.add_argument("--steps", type=int, default=28, help="denoising steps (default 28)")
    e.add_argument("--seed", type=int, default=0, help="evaluation seed (default 0)")
    e.add_argument("--report", help="write a JSON report here")
    e.add_argument("--csv", help="write a CSV summary of the vote report here")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect-attn", help="export cross-view attention heatmaps")
    i.add_argument("--checkpoint", required=True, help="trained checkpoint")
    i.add_argument("--sample", required=True, help="dataset sample directory")
    i.add_argument("--t", type=int, help="timestep for the noisy target (default T/2)")
    i.add_argument("--seed", type=int, default=0, help="noise seed (default 0)")
    i.add_argument("--out", required=True, help="output directory")
    i.add_argument("--id", default="sample", help="output file prefix (default sample)")
    i.set_defaults(func=cmd_inspect_attn)

    v = sub.add_parser("votes", help="aggregate annotator votes into preference percentages")
    v.add_argument("--votes", required=True, help="votes CSV pair_id,annotator_id,method,selected")
    v.add_argument("--alpha", type=float, default=0.8, help="vote temperature (default 0.8)")
    v.add_argument("--report", help="write a JSON report here")
    v.add_argument("--csv", help="write a CSV summary here")
    v.set_defaults(func=cmd_votes)
    return p


def _setup_logging() -> None:
    level = os.environ.get("GEOSCENE_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _origin(exc: BaseException) -> str:
    tb = exc.__traceback__
    name = "geoscene"
    while tb is not None:
        mod = tb.tb_frame.f_globals.get("__name__", "")
        if mod.startswith("geoscene."):
            name = mod
        tb = tb.tb_next
    return name


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except GeosceneError as exc:
        print(f"error: {_origin(exc)}: {exc}", file=sys.stderr)
        log.debug("".join(traceback.format_exception(exc)))
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
