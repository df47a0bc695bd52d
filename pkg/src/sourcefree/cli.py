"""Command-line entry point: ``sourcefree <command> --config run.yaml [--set key=value ...]``.

Commands: gen-synthetic, synth-negatives, procure, adapt, eval, grid, beta-sweep.
Exit codes: 0 ok, 1 unexpected, 2 configuration, 3 data, 4 divergence or
frozen-parameter violation. Failures print one JSON record on stderr and,
once the output directory is known, write ``error.json`` there.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from sourcefree import checkpoint as ck
from sourcefree import pipeline
from sourcefree.compositor import read_negative_dataset, write_negative_dataset
from sourcefree.config import ExperimentConfig, dump_config, load_config, peek_output_dir
from sourcefree.data import ImageFolder, class_index, to_tensor
from sourcefree.errors import ConfigurationError, DataError, SourceFreeError
from sourcefree.evaluation import (
    UNKNOWN,
    category_gap_grid,
    confusion_table,
    one_shot_recognition,
    ssm_histogram,
    write_report,
)
from sourcefree.labels import make_label_space, read_manifest, write_manifest
from sourcefree.plotting import plot_grid, plot_ssm_histogram, plot_sweep, plot_trace
from sourcefree.procurement import LOSS_NAMES
from sourcefree.synthetic import generate_synthetic_task

log = logging.getLogger("sourcefree")

PROCUREMENT_CKPT = "procurement.ckpt"
ADAPTED_CKPT = "adapted.ckpt"
LABEL_MANIFEST = "labels.json"


def _setup_logging(out: Path, command: str) -> logging.Handler:
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / f"{command}.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    return handler


def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ConfigurationError(f"{what} not found: {path}")
    return path


# commands


def cmd_gen_synthetic(cfg: ExperimentConfig, args) -> int:
    ids = [c for c in list(cfg.labels.source) + list(cfg.labels.target)]
    if not all(isinstance(c, int) for c in ids):
        raise ConfigurationError("gen-synthetic needs integer class ids in labels.source/labels.target")
    if max(ids) >= cfg.synthetic.num_classes:
        raise ConfigurationError(f"class id {max(ids)} outside a {cfg.synthetic.num_classes}-class synthetic universe")
    src, tgt = generate_synthetic_task(cfg.synthetic, cfg.labels.source, cfg.labels.target, cfg.seed, cfg.out / "_synthetic")
    # generated under a scratch root, then moved to the configured locations
    for tmp, dest in ((src, cfg.path("source")), (tgt, cfg.path("target"))):
        dest.parent.mkdir(parents=True, exist_ok=True)
        if dest.exists():
            shutil.rmtree(dest)
        tmp.rename(dest)
    (cfg.out / "_synthetic").rmdir()
    log.info("wrote source corpus %s and target corpus %s", cfg.path("source"), cfg.path("target"))
    return 0


def _load_source(cfg: ExperimentConfig):
    folder = ImageFolder(_require(cfg.path("source"), "source corpus"), "source")
    names = cfg.source_names
    on_disk = folder.class_names()
    missing = [n for n in names if n not in on_disk]
    if missing:
        raise DataError(f"source classes without a directory under {folder.root}: {missing}")
    images, labels, ids = folder.load_labeled(class_index(names))
    return names, images, labels, ids


def cmd_synth_negatives(cfg: ExperimentConfig, args) -> int:
    names, images, labels, ids = _load_source(cfg)
    table, samples = pipeline.make_negatives(images, labels, len(names), cfg, ids)
    root = cfg.path("negatives")
    if root.exists():
        shutil.rmtree(root)
    write_negative_dataset(root, samples)
    write_manifest(cfg.out / LABEL_MANIFEST, names, table, cfg.negatives.seed, cfg.target_names)
    log.info("wrote %d composites in %d negative classes to %s", len(samples), table.num_negative, root)
    return 0


def cmd_procure(cfg: ExperimentConfig, args) -> int:
    names, images, labels, _ = _load_source(cfg)
    table, negatives = None, None
    if cfg.procurement.negative_mode == "composite":
        manifest = read_manifest(_require(cfg.out / LABEL_MANIFEST, "label manifest (run synth-negatives first)"))
        if manifest["source_classes"] != names:
            raise DataError("label manifest source classes differ from the configured source labels")
        table = manifest["table"]
        negatives = read_negative_dataset(_require(cfg.path("negatives"), "negative dataset"))
    t0 = time.perf_counter()

    def on_step(step, name, value):
        log.info("procure step=%d loss=%s value=%.6f wall=%.3f", step, name, value, time.perf_counter() - t0)

    ckpt, trace = pipeline.procure(cfg, images, labels, negatives, table, names, on_step)
    out = Path(args.output) if args.output else cfg.out / PROCUREMENT_CKPT
    ck.save_checkpoint(ckpt, out)
    pre = [r for r in trace if r["loss"] == "pretrain"]
    main = [r for r in trace if r["loss"] in LOSS_NAMES]
    header = ["step", "loss", "value", "wall"]
    _write_csv(cfg.out / "pretrain_trace.csv", header, [[r[k] for k in header] for r in pre])
    _write_csv(cfg.out / "procurement_trace.csv", header, [[r[k] for k in header] for r in main])
    plot_trace(main, cfg.out / "procurement_trace.png")
    log.info("checkpoint written to %s", out)
    return 0


def cmd_adapt(cfg: ExperimentConfig, args) -> int:
    src = Path(args.checkpoint) if args.checkpoint else cfg.out / PROCUREMENT_CKPT
    ckpt = ck.load_checkpoint(_require(src, "checkpoint"))
    # the adapter gets images only; labels stay on disk
    target = ImageFolder(_require(cfg.path("target"), "target corpus"), "target").load_images()

    def on_step(step, row):
        for name in ("d1", "d2", "d"):
            log.info("adapt step=%d loss=%s value=%.6f wall=%.3f", step, name, row[name], row["wall"])

    adapted, trace, _ = pipeline.adapt(ckpt, target, cfg, on_step)
    out = Path(args.output) if args.output else cfg.out / ADAPTED_CKPT
    ck.save_checkpoint(adapted, out)
    header = ["step", "d1", "d2", "d", "wall"]
    _write_csv(cfg.out / "adaptation_trace.csv", header, [[r[k] for k in header] for r in trace])
    plot_trace(trace, cfg.out / "adaptation_trace.png", keys=["d1", "d2", "d"])
    log.info("frozen: OK")
    log.info("adapted checkpoint written to %s", out)
    return 0


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    path = Path(args.checkpoint) if args.checkpoint else cfg.out / ADAPTED_CKPT
    ckpt = ck.load_checkpoint(_require(path, "checkpoint"))
    names = list(ckpt.source_classes)
    index = class_index(names, cfg.target_names)
    ls = make_label_space(range(len(names)), [index[n] for n in cfg.target_names])
    images, labels, ids = ImageFolder(_require(cfg.path("target"), "target corpus"), "target").load_labeled(
        {n: index[n] for n in cfg.target_names}
    )
    dm = ck.deployment_model(ckpt, beta=cfg.adaptation.beta)
    out = Path(args.report_dir) if args.report_dir else cfg.out / "eval"
    out.mkdir(parents=True, exist_ok=True)

    records, report = pipeline.score(dm, images, labels, ls, ids, dm=dm)
    _, base = pipeline.score(dm.source, images, labels, ls, ids)
    write_report(report, out, "metrics")
    write_report(base, out, "metrics_unadapted")

    def label(c):
        return c if c == UNKNOWN else (list(index)[c])

    rows, cols, table = confusion_table(records, ls)
    _write_csv(out / "confusion.csv", ["true\\predicted"] + [label(c) for c in cols],
               [[label(r)] + list(map(int, table[k])) for k, r in enumerate(rows)])
    _write_csv(out / "predictions.csv", ["sample", "true", "predicted", "w", "w_prime"],
               [[r.sample_id, label(r.true_label), label(r.predicted), f"{r.ssm[0]:.6f}", f"{r.ssm[1]:.6f}"] for r in records])

    private = np.isin(labels, ls.target_private)
    w = np.asarray([r.ssm[0] for r in records])
    pops = {"target-shared": w[~private]}
    if private.any():
        pops["target-private"] = w[private]
    hist = ssm_histogram(pops, bins=cfg.eval.ssm_bins)
    _write_csv(out / "ssm_hist.csv", ["bin_low", "bin_high"] + list(hist.counts),
               [[f"{hist.edges[b]:.6f}", f"{hist.edges[b + 1]:.6f}"] + [int(hist.counts[k][b]) for k in hist.counts]
                for b in range(len(hist.edges) - 1)])
    plot_ssm_histogram(hist, out / "ssm_hist.png")

    if cfg.eval.one_shot:
        shared = [c for c in ls.shared if (labels == c).sum() > 1]
        first = [int(np.flatnonzero(labels == c)[0]) for c in shared]
        rest = np.flatnonzero(np.isin(labels, shared) & ~np.isin(np.arange(len(labels)), first))
        acc = one_shot_recognition(dm, to_tensor(images[first]), labels[first], to_tensor(images[rest]), labels[rest])
        (out / "one_shot.json").write_text(json.dumps({"accuracy": acc, "classes": len(shared)}) + "\n", encoding="utf-8")
    log.info("T_avg %.4f (unadapted %.4f) T_unk %s", report.t_avg, base.t_avg,
             "n/a" if report.t_unk is None else f"{report.t_unk:.4f}")
    return 0


def cmd_grid(cfg: ExperimentConfig, args) -> int:
    g = cfg.grid
    if cfg.synthetic.num_classes < g.universe:
        raise ConfigurationError(f"grid universe {g.universe} exceeds synthetic.num_classes {cfg.synthetic.num_classes}")
    out = cfg.out / "grid"

    def runner(ls, seed):
        log.info("grid cell: %d source-private, %d target-private", len(ls.source_private), len(ls.target_private))
        return pipeline.run_synthetic_experiment(cfg, ls, seed).adapted

    result = category_gap_grid(g.universe, g.source_private, g.target_private, runner, cfg.seed, out)
    rows = result.to_rows()
    _write_csv(out / "grid.csv", rows[0], rows[1:])
    plot_grid(result, out / "heatmap.png")
    log.info("grid written to %s", out / "grid.csv")
    return 0


def cmd_beta_sweep(cfg: ExperimentConfig, args) -> int:
    ids = list(cfg.labels.source) + list(cfg.labels.target)
    if not all(isinstance(c, int) for c in ids):
        raise ConfigurationError("beta-sweep runs on the synthetic task and needs integer class ids")
    ls = make_label_space(cfg.labels.source, cfg.labels.target)
    rows = []
    for beta in args.betas:
        c = replace(cfg, adaptation=replace(cfg.adaptation, beta=beta))
        res = pipeline.run_synthetic_experiment(c, ls)
        t_unk = res.adapted.t_unk
        rows.append([beta, f"{res.unadapted.t_avg:.6f}", f"{res.adapted.t_avg:.6f}", "" if t_unk is None else f"{t_unk:.6f}"])
        log.info("beta=%g T_avg %.4f", beta, res.adapted.t_avg)
    out = cfg.out / "beta_sweep"
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "beta_sweep.csv", ["beta", "t_avg_unadapted", "t_avg", "t_unk"], rows)
    plot_sweep([r[0] for r in rows], [float(r[2]) for r in rows], out / "beta_sweep.png", "beta", "T_avg")
    return 0


COMMANDS = {
    "gen-synthetic": (cmd_gen_synthetic, "render source and target corpora for the synthetic task"),
    "synth-negatives": (cmd_synth_negatives, "composite negative source classes from the source corpus"),
    "procure": (cmd_procure, "train the source model with negatives and class priors"),
    "adapt": (cmd_adapt, "adapt Ft on the unlabeled target corpus"),
    "eval": (cmd_eval, "score a checkpoint on the labeled target corpus"),
    "grid": (cmd_grid, "category-gap grid on the synthetic universe"),
    "beta-sweep": (cmd_beta_sweep, "adapted accuracy across entropy weights on the synthetic task"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sourcefree", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("-c", "--config", help="YAML experiment config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. --set adaptation.beta=0.5")
        if name in ("procure", "adapt"):
            p.add_argument("-o", "--output", help="checkpoint to write")
        if name in ("adapt", "eval"):
            p.add_argument("--checkpoint", help="checkpoint to read")
        if name == "adapt":
            p.add_argument("--beta", type=float, help="weight of the entropy term")
            p.add_argument("--iterations", type=int)
        if name == "beta-sweep":
            p.add_argument("--betas", type=float, nargs="+", default=[0.0, 0.05, 0.1, 0.5, 1.0])
        if name == "eval":
            p.add_argument("--report-dir", help="directory for metrics and plots (default <output_dir>/eval)")
    return parser


def _error_record(exc: BaseException, command: str) -> dict:
    rec = {
        "command": command,
        "error": getattr(exc, "kind", type(exc).__name__),
        "type": type(exc).__name__,
        "message": str(exc),
        "exit_code": getattr(exc, "exit_code", 1),
    }
    for attr in ("step", "loss_name"):
        if getattr(exc, attr, None) is not None:
            rec[attr] = getattr(exc, attr)
    return rec


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.overrides)
    if getattr(args, "beta", None) is not None:
        overrides.append(f"adaptation.beta={args.beta}")
    if getattr(args, "iterations", None) is not None:
        overrides.append(f"adaptation.iterations={args.iterations}")
    cfg = None
    handler = None
    try:
        cfg = load_config(args.config, overrides)
        handler = _setup_logging(cfg.out, args.command)
        dump_config(cfg, cfg.out / f"{args.command}.config.yaml")
        torch.manual_seed(cfg.seed)
        fn, _ = COMMANDS[args.command]
        code = fn(cfg, args)
        err = cfg.out / "error.json"
        if err.exists():
            err.unlink()
        return code
    except (SourceFreeError, OSError) as exc:
        code = getattr(exc, "exit_code", 1)
        rec = _error_record(exc, args.command)
        print(json.dumps(rec, sort_keys=True), file=sys.stderr)
        out = cfg.out if cfg is not None else peek_output_dir(args.config, overrides)
        if out is not None:
            try:
                out.mkdir(parents=True, exist_ok=True)
                (out / "error.json").write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n", encoding="utf-8")
            except OSError:
                pass
        log.error("%s: %s", rec["error"], rec["message"])
        return code
    finally:
        if handler is not None:
            logging.getLogger().removeHandler(handler)
            handler.close()


if __name__ == "__main__":
    sys.exit(main())
