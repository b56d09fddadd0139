"""Command-line entry point: ``dlif <subcommand> ...``.

Exit status is 0 on success, 1 on usage or configuration errors and 2 on
runtime failures (including a failing gradient check).
"""
from __future__ import annotations

import argparse
import logging
import subprocess
import sys
from pathlib import Path

from dlif.config import ConfigError, TrainConfig, parse_overrides, read_kv_file, resolve_config
from dlif.stylecross import FLOW_NAMES, StylePlan

log = logging.getLogger("dlif")

ABLATION_AXES = ("sc_flow", "contrast", "components")


class UsageError(Exception):
    pass


def ablation_cells(axis: str) -> list[tuple[str, dict[str, str]]]:
    """Named override sets for one ablation axis."""
    if axis == "sc_flow":
        cells = []
        for name in FLOW_NAMES:
            plan = StylePlan.parse(name)
            cells.append((name, {"sc_levels": ",".join(plan.active_levels), "sc_mode": plan.mode}))
        return cells
    if axis == "contrast":
        return [("aaic", {"contrast": "aaic"}), ("binary", {"contrast": "binary"}),
                ("triplet", {"contrast": "triplet"}), ("none", {"contrast": "none"})]
    if axis == "components":
        return [
            ("baseline", {"sc_levels": "none", "cwsa": "false", "contrast": "binary", "use_v": "false"}),
            ("no_sc", {"sc_levels": "none"}),
            ("no_cwsa", {"cwsa": "false"}),
            ("no_aaic", {"contrast": "binary"}),
            ("no_ortho", {"lambda_ortho_u": "0", "lambda_ortho_v": "0"}),
            ("no_v", {"use_v": "false"}),
            ("full", {}),
        ]
    raise UsageError(f"unknown ablation axis {axis!r}; choose from {', '.join(ABLATION_AXES)}")


def _echo(config: TrainConfig, out_dir: Path | None) -> None:
    text = config.to_text()
    sys.stdout.write(text)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.txt").write_text(text)


def cmd_gen_data(args) -> int:
    from dlif.synthdata import DatasetSpec, factor_report, generate_dataset
    values = read_kv_file(args.spec) if args.spec else {}
    values.update(parse_overrides(args.set))
    try:
        spec = DatasetSpec.from_mapping(values)
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    rows = generate_dataset(spec, args.out)
    rep = factor_report(rows)
    print(f"wrote {len(rows)} samples to {args.out}")
    print(f"identities {rep['n_identities']} independent_by_count {rep['independent_by_count']} "
          f"mutual_information {rep['mutual_information']:.3g}")
    return 0


def cmd_train(args) -> int:
    from dlif.trainer import run_training
    config = resolve_config(args.config, parse_overrides(args.set))
    out = Path(args.out)
    _echo(config, out)
    result = run_training(config, args.source or None, args.target, out, resume=args.resume)
    print(f"best epoch {result.best_epoch} AUC {result.best_auc:.4f} HTER {result.best_hter:.4f}")
    return 0


def cmd_eval(args) -> int:
    from dlif.metrics import hter, roc_auc
    from dlif.synthdata import load_dataset
    from dlif.trainer import load_checkpoint, liveness_scores
    models, _, state, config = load_checkpoint(args.checkpoint)
    manifest = Path(args.manifest)
    data = load_dataset(manifest.parent, manifest)
    scores = liveness_scores(models, data.images, config)
    threshold = float(state["threshold"]) if args.threshold is None else args.threshold
    auc = roc_auc(scores, data.liveness)
    err = hter(scores, data.liveness, threshold)
    text = f"AUC = {auc!r}\nHTER = {err!r}\nthreshold = {threshold!r}\nn = {len(data)}\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_export(args) -> int:
    from dlif.metrics import export_embeddings
    from dlif.synthdata import load_dataset, resize_images
    from dlif.trainer import extract_features, load_checkpoint
    models, _, _, config = load_checkpoint(args.checkpoint)
    manifest = Path(args.manifest)
    data = load_dataset(manifest.parent, manifest)
    encoder = models.U if args.space == "u" else models.V
    if encoder is None:
        raise UsageError("checkpoint has no identity encoder")
    feats = extract_features(encoder, resize_images(data.images, config.input_size))
    export_embeddings(feats, data.identity, data.liveness, data.domain, args.out)
    print(f"wrote {len(data)} rows to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from dlif.checks import run_all_checks
    results = run_all_checks(seed=args.seed)
    failed = 0
    for name, report in results:
        status = "ok" if report.passed else "FAIL"
        failed += not report.passed
        print(f"{status:4s} {name:28s} max_rel_error {report.max_rel_error:.2e}")
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 2 if failed else 0


def _cell_argv(args, name: str, overrides: dict[str, str]) -> list[str]:
    argv = [sys.executable, "-m", "dlif.cli", "train", "--out", str(Path(args.out) / name)]
    if args.config:
        argv += ["--config", args.config]
    if args.source:
        argv += ["--source", args.source]
    if args.target:
        argv += ["--target", args.target]
    for item in list(args.set) + [f"{k}={v}" for k, v in overrides.items()]:
        argv += ["--set", item]
    return argv


def cmd_ablate(args) -> int:
    cells = ablation_cells(args.axis)
    # validate every cell before running any of them
    for _, overrides in cells:
        resolve_config(args.config, {**parse_overrides(args.set), **overrides})
    if args.parallel > 1:
        running, status = [], 0
        for name, overrides in cells:
            running.append(subprocess.Popen(_cell_argv(args, name, overrides), stdout=subprocess.DEVNULL))
            if len(running) >= args.parallel:
                status |= running.pop(0).wait()
        for proc in running:
            status |= proc.wait()
        return 2 if status else 0
    from dlif.trainer import run_training
    for name, overrides in cells:
        config = resolve_config(args.config, {**parse_overrides(args.set), **overrides})
        out = Path(args.out) / name
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(config.to_text())
        result = run_training(config, args.source or None, args.target, out)
        print(f"{name:10s} best epoch {result.best_epoch} AUC {result.best_auc:.4f} HTER {result.best_hter:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dlif", description="Disentangled liveness/identity feature training.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--spec", help="dataset spec (key = value)")
    g.add_argument("--out", required=True)
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    g.set_defaults(func=cmd_gen_data)

    def data_args(q):
        q.add_argument("--config")
        q.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        q.add_argument("--source", help="source data directory (overrides source_dir)")
        q.add_argument("--target", help="target data directory (overrides target_dir)")
        q.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train the four networks")
    data_args(t)
    t.add_argument("--resume", action="store_true", help="continue from OUT/last if present")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a manifest with a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out")
    e.add_argument("--threshold", type=float, help="default: the checkpoint's calibrated threshold")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-embeddings", help="write feature CSV for a manifest")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--manifest", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--space", choices=("u", "v"), default="u")
    x.set_defaults(func=cmd_export)

    c = sub.add_parser("gradcheck", help="finite-difference check of every primitive and loss")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="run an ablation grid, one output directory per cell")
    data_args(a)
    a.add_argument("--axis", required=True, choices=ABLATION_AXES)
    a.add_argument("--parallel", type=int, default=1, metavar="N", help="run up to N cells as subprocesses")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, ArithmeticError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
