"""Command line entry point: ``lcd <subcommand> [--config FILE] [--seed N] [--out DIR]``.

Step subcommands share one run directory laid out as::

    <out>/world/<style>/           simulate: canvas, captures, manifest
    <out>/synth/<style>/           synth: generation-0 synthetic pairs
    <out>/loops/<style>/           train / update / retrain: kb, detector, filter, ledger
    <out>/loops/<style>/deploy/<g> deploy: detections and harvested samples
"""
import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import compositor, evaluator, imaging, lifecycle, simworld
from .config import dump_config, load_config
from .errors import InvalidConfigError, LCDError

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3

log = logging.getLogger("lifelong_cd")


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", help="output root (LCD_OUT takes precedence)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. detector.iterations=500")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="lcd", description="Lifelong small-object change detection.")
    sub = p.add_subparsers(dest="command", required=True)

    def styled(name, text):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--style", default=None, help="workspace style (default: first configured)")
        return sp

    styled("simulate", "render a workspace and its group captures")
    styled("synth", "build the generation-0 synthetic dataset")
    styled("train", "train the generation-0 detector")
    sp = styled("deploy", "run the detector over a capture and harvest detections")
    sp.add_argument("--group", default=None, help="capture to deploy on (default: first train group)")
    sp = styled("update", "ingest harvested detections, filter priors, snapshot a generation")
    sp.add_argument("--no-filter", action="store_true", help="skip the realism filter")
    styled("retrain", "retrain the detector with the encoder frozen")
    sp = styled("eval", "evaluate the current detector on a capture")
    sp.add_argument("--group", default=None, help="capture to evaluate on (default: first test group)")
    sub.add_parser("bench", parents=[common], help="full benchmark over every style and assignment")
    sp = sub.add_parser("report", parents=[common], help="rebuild report.md from metrics.csv")
    sp.add_argument("--metrics", default=None, help="metrics.csv (default: <out>/metrics.csv)")
    return p


def _config(args):
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    out = os.environ.get("LCD_OUT") or args.out
    if out:
        overrides.append(f"out={out}")
    return load_config(args.config, overrides)


def _style(cfg, args):
    style = args.style or cfg.styles[0]
    if style not in simworld.STYLES:
        raise InvalidConfigError(f"unknown style {style!r}; choose from {', '.join(simworld.STYLES)}")
    return style


def _capture(cfg, out, style, group):
    path = out / "world" / style
    if (path / "captures" / group).exists():
        return simworld.load_capture(path, group, cfg.world.jitter)
    return lifecycle.build_world(cfg, style).captures[group]


def cmd_simulate(cfg, args, out):
    style = _style(cfg, args)
    world = lifecycle.build_world(cfg, style)
    root = out / "world" / style
    simworld.save_workspace(root, world.workspace)
    for g, cap in world.captures.items():
        simworld.save_capture(root, g, cap)
    manifest = {"style": style, "seed": cfg.seed, "workspace_seed": world.workspace.seed,
                "jitter": cfg.world.jitter, "frame_offsets": world.traversal.offsets(),
                "placements": {g: simworld.placements_to_json(p) for g, p in world.placements.items()}}
    simworld.write_manifest(root, manifest)
    print(f"wrote {root}")


def cmd_synth(cfg, args, out):
    style = _style(cfg, args)
    world = lifecycle.build_world(cfg, style)
    c = cfg.compositor
    data = compositor.synthesize_dataset(world.backgrounds, world.generic, c.n_samples,
                                         tuple(c.objects_per_image), tuple(c.scale_range),
                                         lifecycle.derive_seed(cfg.seed, style, "synth"), 0, c.alpha_threshold)
    compositor.save_samples(out / "synth" / style, data, {"style": style, "seed": cfg.seed})
    print(f"wrote {len(data)} samples to {out / 'synth' / style}")


def _loop_dir(out, style):
    return out / "loops" / style


def cmd_train(cfg, args, out):
    style = _style(cfg, args)
    world = lifecycle.build_world(cfg, style)
    loop = lifecycle.LifelongLoop(cfg, name=f"{simworld.STYLE_CODES[style]}/cli")
    loop.run_generation0(world.backgrounds, world.generic)
    loop.save(_loop_dir(out, style))
    print(f"generation 0 trained; state in {_loop_dir(out, style)}")


def cmd_deploy(cfg, args, out):
    style = _style(cfg, args)
    group = args.group or cfg.assignments[0][0]
    loop = lifecycle.LifelongLoop.load(cfg, _loop_dir(out, style))
    gen = loop.kb.current_index
    result = loop.deploy(_capture(cfg, out, style, group), frame_prefix=f"{group}-g{gen}-")
    lifecycle.save_deploy(_loop_dir(out, style) / "deploy" / str(gen), result)
    loop.save(_loop_dir(out, style))
    print(f"{len(result.detections)} detections in {len(result.harvested)} frames")


def cmd_update(cfg, args, out):
    style = _style(cfg, args)
    loop = lifecycle.LifelongLoop.load(cfg, _loop_dir(out, style))
    deployed = lifecycle.load_deploy(_loop_dir(out, style) / "deploy" / str(loop.kb.current_index))
    rec = loop.prior_update(deployed, use_filter=not args.no_filter and cfg.filter.enabled)
    loop.save(_loop_dir(out, style))
    ev = loop.ledger.events[-1].outputs
    print(f"generation {rec.index}: {ev['accepted']} priors added, {len(ev['removed_generic'])} generic removed")


def cmd_retrain(cfg, args, out):
    style = _style(cfg, args)
    loop = lifecycle.LifelongLoop.load(cfg, _loop_dir(out, style))
    loop.retrain()
    loop.save(_loop_dir(out, style))
    audit = loop.checksum_audit[-1]
    same = audit["before"]["encoder"] == audit["after"]["encoder"]
    print(f"retrained generation {audit['generation']}; encoder unchanged: {same}")


def cmd_eval(cfg, args, out):
    style = _style(cfg, args)
    group = args.group or cfg.assignments[0][1]
    loop = lifecycle.LifelongLoop.load(cfg, _loop_dir(out, style))
    d = cfg.detector
    agg, _ = lifecycle.evaluate(loop.model, _capture(cfg, out, style, group), d.threshold, d.min_area,
                                run_id=cfg.hash(), method_tag=f"gen{loop.kb.current_index}",
                                workspace=simworld.STYLE_CODES[style], group=group)
    path = _loop_dir(out, style) / "metrics.csv"
    evaluator.write_metrics_csv(path, [agg])
    print(f"P={agg.precision:.4f} R={agg.recall:.4f} F={agg.f_score:.4f} -> {path}")


def cmd_bench(cfg, args, out):
    def progress(cell, recs):
        print(cell, " ".join(f"{r.method_tag}={100 * r.f_score:.1f}" for r in recs), flush=True)

    result = lifecycle.run_benchmark(cfg, out, progress=progress)
    if result.report is not None:
        print(result.report.to_markdown("Change detection F-scores"))
    if result.failures:
        print(json.dumps(result.failures, indent=1), file=sys.stderr)


def cmd_report(cfg, args, out):
    path = Path(args.metrics) if args.metrics else out / "metrics.csv"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run bench first")
    records = evaluator.read_metrics_csv(path)
    report = lifecycle.make_report(records, {}, list(dict.fromkeys(r.method_tag for r in records)))
    if report is None:
        raise LCDError("report needs at least two methods")
    text = report.to_markdown("Change detection F-scores")
    imaging.atomic_write_text(path.parent / "report.md", text)
    evaluator.plot_report(report, path.parent / "report_plots")
    print(text)


COMMANDS = {
    "simulate": cmd_simulate, "synth": cmd_synth, "train": cmd_train, "deploy": cmd_deploy,
    "update": cmd_update, "retrain": cmd_retrain, "eval": cmd_eval, "bench": cmd_bench,
    "report": cmd_report,
}


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = _config(args)
    except InvalidConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.out)
    try:
        if args.command not in ("report",):
            out.mkdir(parents=True, exist_ok=True)
            imaging.atomic_write_text(out / "config.yaml", dump_config(cfg))
        COMMANDS[args.command](cfg, args, out)
    except InvalidConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LCDError, OSError, ValueError) as exc:
        print(f"data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
