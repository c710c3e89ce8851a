"""Batch command-line interface.

One binary with subcommands covering the whole pipeline: analyze attention,
validate and distill traces, generate synthetic data, train and evaluate the
detector, run condensation, and execute the end-to-end crop planner.

Conventions:
  * exit 0 on success, 1 on validation/runtime failure, 2 on usage or input
    format errors; errors go to stderr with an ``E:<code>:`` prefix
  * every run takes ``--out-dir`` and holds a lock file there for its duration
  * all randomness flows from the config seed (overridable via ``--seed``)
  * every artifact embeds {config_hash, seed, tool_version}; rerunning a
    subcommand with the same triple reproduces identical artifact bytes
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import boxes as bx
from . import condense as cd
from . import detector as det
from . import io as cio
from . import metrics as mt
from . import plots
from . import synth
from . import trace as tr


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


def _subset(samples, split: str):
    if split == "all":
        return list(samples)
    picked = [s for s in samples if s.split == split]
    if not picked:
        raise ValueError(f"no samples in split {split!r}")
    return picked


def _attention_samples(samples):
    missing = [s.sample_id for s in samples if s.attention is None]
    if missing:
        raise cio.FormatError(
            f"dataset has no attention tensors for {len(missing)} samples "
            f"(generate with --with-attention)")
    return samples


# -- attn ------------------------------------------------------------------------------


def _cmd_attn_stats(cfg, args) -> int:
    samples, _ = cio.load_dataset(args.data)
    samples = _attention_samples(_subset(samples, args.split))
    curves, rows = [], []
    for s in samples:
        region = mt.box_to_region(s.box, s.attention.grid)
        curve = mt.layer_concentrations(s.attention, region)
        curves.append(curve)
        rows.extend({"id": s.sample_id, "layer": i, "concentration": float(v)}
                    for i, v in enumerate(curve))
    curves = np.asarray(curves)
    mean_curve = curves.mean(axis=0)
    out = Path(args.out_dir)
    cio.write_jsonl(out / "stats.jsonl", rows)
    _write_json(out / "stats.json", {
        "meta": cio.artifact_meta(cfg), "n": len(samples),
        "mean_concentration": [float(v) for v in mean_curve],
        "argmax_layer": int(np.argmax(mean_curve))})
    plots.save_figure(plots.concentration_curves(curves), out / "stats.png")
    print(f"attn stats: {len(samples)} samples, "
          f"peak mean concentration at layer {int(np.argmax(mean_curve))}")
    return 0


def _cmd_attn_peak_hist(cfg, args) -> int:
    samples, _ = cio.load_dataset(args.data)
    samples = _attention_samples(_subset(samples, args.split))
    layer_count = samples[0].attention.n_layers
    counts = np.zeros(layer_count, dtype=int)
    for s in samples:
        region = mt.box_to_region(s.box, s.attention.grid)
        counts[mt.peak_layer(s.attention, region)] += 1
    hist = counts / counts.sum()
    out = Path(args.out_dir)
    cio.write_jsonl(out / "peak_hist.jsonl",
                    [{"layer": i, "count": int(c), "fraction": float(f)}
                     for i, (c, f) in enumerate(zip(counts, hist))])
    _write_json(out / "peak_hist.json", {
        "meta": cio.artifact_meta(cfg), "n": len(samples),
        "hist": [float(v) for v in hist],
        "modal_layer": int(np.argmax(counts)),
        "modal_share": float(hist.max())})
    plots.save_figure(plots.peak_hist_figure(hist, int(np.argmax(counts))),
                      out / "peak_hist.png")
    print(f"peak hist: modal layer {int(np.argmax(counts))} "
          f"share {hist.max():.3f} over {len(samples)} samples")
    return 0


# -- trace -----------------------------------------------------------------------------


def _row_validator(row, flag: str):
    name = row.get("validator") if flag == "auto" else flag
    if name not in tr.VALIDATORS:
        raise cio.FormatError(
            f"row {row.get('id')!r}: unknown validator {name!r} "
            f"(use --validator or a 'validator' field)")
    return tr.VALIDATORS[name]


def _cmd_trace_validate(cfg, args) -> int:
    rows = cio.read_jsonl(args.corpus)
    out = Path(args.out_dir)
    results, reports, parse_errors = [], [], 0
    for row in rows:
        validator = _row_validator(row, args.validator)
        try:
            t = tr.parse_trace(row["response"])
        except tr.ParseError as exc:
            parse_errors += 1
            results.append({"id": row.get("id"), "verdict": "parse_error",
                            "error": str(exc)})
            continue
        rep = validator(t, row.get("guidance", ""))
        reports.append(rep)
        results.append({"id": row.get("id"), "verdict": rep.verdict,
                        "rules": sorted(set(rep.rule_ids())),
                        "violations": rep.to_json_dict()["violations"]})
    summary = tr.summarize_reports(reports)
    summary.update(meta=cio.artifact_meta(cfg), parse_errors=parse_errors,
                   failed=summary["total"] - summary["passed"])
    summary["total"] += parse_errors
    cio.write_jsonl(out / "results.jsonl", results)
    _write_json(out / "summary.json", summary)
    print(f"trace validate: {summary['passed']} passed, "
          f"{summary['failed']} failed, {parse_errors} parse errors")
    return 0 if summary["passed"] == summary["total"] else 1


def _cmd_trace_pairs(cfg, args) -> int:
    rows = cio.read_jsonl(args.corpus)
    out = Path(args.out_dir)
    pairs, skipped = [], 0
    for row in rows:
        validator = _row_validator(row, args.validator)
        try:
            t = tr.parse_trace(row["response"])
        except tr.ParseError:
            skipped += 1
            continue
        if not validator(t, row.get("guidance", "")).passed:
            skipped += 1
            continue
        markers = tr.count_sot_markers(row.get("guidance", ""))
        if not markers:
            # guidance proposed no regions; the dataset-provided boxes label
            # the focus spans in order
            markers = [tr.SotMarker(tuple(b), (i, i + 1))
                       for i, b in enumerate(row.get("boxes", []))]
        try:
            emitted = tr.emit_training_pairs(t, markers,
                                             tuple(row["image_size"]),
                                             trace_id=str(row.get("id", "")))
        except ValueError:
            skipped += 1
            continue
        pairs.extend(p.to_json_dict() for p in emitted)
    cio.write_jsonl(out / "pairs.jsonl", pairs)
    _write_json(out / "pairs_summary.json", {
        "meta": cio.artifact_meta(cfg), "traces": len(rows),
        "pairs": len(pairs), "skipped_traces": skipped})
    print(f"trace pairs: {len(pairs)} pairs from {len(rows)} traces "
          f"({skipped} skipped)")
    return 0


# -- synth -----------------------------------------------------------------------------


def _cmd_synth_gen(cfg, args) -> int:
    samples = synth.gen_dataset(args.n, cfg.seed, cfg.synth,
                                with_attention=args.with_attention)
    out = Path(args.out_dir)
    cio.save_dataset(out, samples, meta=cio.artifact_meta(cfg))
    panels = [(s.heatmap, {"gt": s.box}, f"sample {s.sample_id}")
              for s in samples[:8]]
    plots.save_figure(plots.montage_figure(panels), out / "preview.png")
    n_attn = sum(1 for s in samples if s.attention is not None)
    print(f"synth gen: {len(samples)} samples -> {out} "
          f"({n_attn} with attention tensors)")
    return 0


# -- detector --------------------------------------------------------------------------


def _cmd_detector_train(cfg, args) -> int:
    samples, _ = cio.load_dataset(args.data)
    train_samples = _subset(samples, "train")
    hyper = cfg.detector.hyper()
    out = Path(args.out_dir)
    meta = cio.artifact_meta(cfg)

    state = None
    if args.resume:
        state, _ = cio.load_checkpoint(args.resume)

    def on_checkpoint(st):
        cio.save_checkpoint(out / f"checkpoint_step{st.step}.ckpt", st, meta)

    state, log = det.train(train_samples, hyper, seed=cfg.seed, state=state,
                           on_checkpoint=on_checkpoint)
    cio.save_checkpoint(out / "checkpoint.ckpt", state, meta)
    cio.write_metrics_csv(out / "metrics.csv", log)
    if log:
        plots.save_figure(plots.training_curve_figure(log),
                          out / "training_curve.png")
    _write_json(out / "train_report.json", {
        "meta": meta, "steps": state.step, "n_train": len(train_samples),
        "running_losses": state.running_losses})
    print(f"detector train: {state.step} steps on {len(train_samples)} samples, "
          f"running total loss {state.running_losses.get('total', float('nan')):.4f}")
    return 0


def _cmd_detector_eval(cfg, args) -> int:
    state, _ = cio.load_checkpoint(args.checkpoint)
    samples, _ = cio.load_dataset(args.data)
    picked = _subset(samples, args.split)
    report = det.evaluate(state.params, picked, tau=cfg.tau)
    out = Path(args.out_dir)
    cio.write_eval_csv(out / "eval.csv", report)
    _write_json(out / "eval.json", {
        "meta": cio.artifact_meta(cfg), "n": report.n,
        "split": args.split, "mean_iou": report.mean_iou,
        "median_iou": report.median_iou, "mean_giou": report.mean_giou,
        "grounding_error_rate": report.grounding_error_rate,
        "tau": report.tau})
    plots.save_figure(
        plots.iou_hist_figure([r["iou"] for r in report.per_sample], cfg.tau),
        out / "iou_hist.png")
    panels = []
    for s, r in list(zip(picked, report.per_sample))[:8]:
        panels.append((s.heatmap,
                       {"gt": s.box, "pred": bx.BoxNorm(*r["pred"])},
                       f"id {r['id']} iou {r['iou']:.2f}"))
    plots.save_figure(plots.montage_figure(panels), out / "eval_montage.png")
    print(f"detector eval: mean IoU {report.mean_iou:.4f} on {report.n} "
          f"{args.split} samples (grounding-error rate "
          f"{report.grounding_error_rate:.3f} at tau={report.tau})")
    return 0


def _cmd_detector_gradcheck(cfg, args) -> int:
    report = det.gradcheck_detector(seed=cfg.seed, sample_count=args.samples,
                                    head_only=args.head_only)
    out = Path(args.out_dir)
    _write_json(out / "gradcheck.json", {
        "meta": cio.artifact_meta(cfg), "passed": report.passed,
        "max_rel_err": report.max_rel_err, "checked": report.checked,
        "skipped": report.skipped, "tolerance": report.tolerance,
        "per_param": report.per_param,
        "worst": None if report.worst is None else {
            "param": report.worst.param, "index": report.worst.index,
            "analytic": report.worst.analytic, "numeric": report.worst.numeric,
            "rel_err": report.worst.rel_err}})
    print(report.summary())
    return 0 if report.passed else 1


# -- condense --------------------------------------------------------------------------


def _cmd_condense_select_layer(cfg, args) -> int:
    samples, _ = cio.load_dataset(args.data)
    samples = _attention_samples(_subset(samples, args.split))[:args.limit]
    tensors = [s.attention for s in samples]
    regions = [mt.box_to_region(s.box, s.attention.grid) for s in samples]
    designated = cd.select_designated_layer(tensors, regions)
    curves = np.asarray([mt.layer_concentrations(t, r)
                         for t, r in zip(tensors, regions)])
    out = Path(args.out_dir)
    _write_json(out / "designated.json", {
        "meta": cio.artifact_meta(cfg), "designated_layer": designated,
        "n": len(samples),
        "mean_concentration": [float(v) for v in curves.mean(axis=0)]})
    plots.save_figure(plots.concentration_curves(curves, designated),
                      out / "designated.png")
    print(f"condense select-layer: layer {designated} over {len(samples)} samples")
    return 0


def _condense_report_artifacts(out: Path, report_dict: dict) -> None:
    layer_rows = [{"layer": i, "baseline": b, "post": p}
                  for i, (b, p) in enumerate(zip(report_dict["baseline_hist"],
                                                 report_dict["post_hist"]))]
    cio.write_jsonl(out / "hists.jsonl", layer_rows)
    plots.save_figure(
        plots.condense_hists_figure(report_dict["baseline_hist"],
                                    report_dict["post_hist"],
                                    report_dict["designated_layer"]),
        out / "condense_hists.png")
    if report_dict.get("heldout_lac"):
        plots.save_figure(
            plots.lac_curve_figure(report_dict["heldout_lac"],
                                   report_dict.get("epoch_len", 1)),
            out / "lac_curve.png")


def _cmd_condense_train(cfg, args) -> int:
    model = cd.MockAttnModel(seed=cfg.seed)
    train_boxes = cd.sample_lab_boxes(cfg.condense.train_n, seed=cfg.seed)
    heldout = cd.sample_lab_boxes(cfg.condense.eval_n, seed=cfg.seed + 1)
    designated = cfg.condense.designated_layer
    if designated is None:
        probe = heldout[:min(200, len(heldout))]
        tensors = [model.emit(b) for b in probe]
        regions = [mt.box_to_region(b, model.grid) for b in probe]
        designated = cd.select_designated_layer(tensors, regions)
    hyper = cd.CondenseHyper(steps=cfg.condense.steps,
                             batch_size=cfg.condense.batch_size,
                             lr=cfg.condense.lr,
                             epoch_len=cfg.condense.epoch_len)
    report = cd.train_condense(model, train_boxes, designated,
                               mt.LossWeights(alpha=cfg.alpha), hyper,
                               seed=cfg.seed, heldout_boxes=heldout)
    out = Path(args.out_dir)
    report_dict = dict(report.to_json_dict(), meta=cio.artifact_meta(cfg),
                       epoch_len=hyper.epoch_len)
    _write_json(out / "condense_report.json", report_dict)
    _condense_report_artifacts(out, report_dict)
    print(f"condense train: designated layer {designated}, share "
          f"{report.baseline_share:.3f} -> {report.post_share:.3f} "
          f"after {report.steps} steps (alpha={report.alpha})")
    return 0


def _cmd_condense_report(cfg, args) -> int:
    with open(args.report, encoding="utf-8") as f:
        report_dict = json.load(f)
    for key in ("baseline_hist", "post_hist", "designated_layer"):
        if key not in report_dict:
            raise cio.FormatError(f"report file missing {key!r}")
    out = Path(args.out_dir)
    _condense_report_artifacts(out, report_dict)
    print(f"condense report: rendered artifacts for designated layer "
          f"{report_dict['designated_layer']} -> {out}")
    return 0


# -- pipeline --------------------------------------------------------------------------


def _cmd_pipeline_run(cfg, args) -> int:
    state, _ = cio.load_checkpoint(args.checkpoint)
    if args.data:
        samples, _ = cio.load_dataset(args.data)
        try:
            sample = next(s for s in samples if s.sample_id == args.index)
        except StopIteration:
            raise ValueError(f"no sample with id {args.index} in {args.data}")
    else:
        sample = synth.gen_sample(cfg.seed, args.index, cfg.synth,
                                  with_attention=True)
    designated = cfg.condense.designated_layer
    if designated is None:
        designated = cfg.synth.modal_layer
    if sample.attention is not None:
        heat = mt.aggregate_heatmap(sample.attention, designated)
    else:
        heat = sample.heatmap  # dataset stored only the aggregated map
    _, pred = det.predict_box(state.params, heat)
    iou = bx.iou(pred, sample.box)
    crop = bx.crop_zoom(pred, tuple(args.image_size))
    out = Path(args.out_dir)
    _write_json(out / "pipeline_report.json", {
        "meta": cio.artifact_meta(cfg), "sample_id": sample.sample_id,
        "designated_layer": designated,
        "pred_box": list(pred.as_tuple()), "gt_box": list(sample.box.as_tuple()),
        "iou": iou, "giou": bx.giou(pred, sample.box),
        "grounding_error": bool(iou < cfg.tau),
        "crop": crop.to_json_dict()})
    plots.save_figure(
        plots.heatmap_overlay_figure(heat, {"gt": sample.box, "pred": pred},
                                     f"layer {designated}, IoU {iou:.3f}"),
        out / "pipeline_overlay.png")
    print(f"pipeline run: sample {sample.sample_id} layer {designated} "
          f"IoU {iou:.4f}, crop {crop.rect_px} -> zoom {crop.scale_factor:.2f}x")
    return 0


# -- parser ----------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"E:usage: {message}\n")
        raise SystemExit(2)


def _build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file (or $CFT_CONFIG)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VAL",
                        help="override a config value, e.g. detector.steps=200")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out-dir", required=True,
                        help="artifact directory (locked while running)")

    p = _Parser(prog="cft", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    attn = sub.add_parser("attn", help="attention analytics").add_subparsers(
        dest="subcommand", required=True, parser_class=_Parser)
    sp = attn.add_parser("stats", parents=[common],
                         help="per-layer concentration curves")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--split", default="all",
                    choices=["all", "train", "val", "test"])
    sp.set_defaults(func=_cmd_attn_stats)
    sp = attn.add_parser("peak-hist", parents=[common],
                         help="peak-layer histogram")
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="all",
                    choices=["all", "train", "val", "test"])
    sp.set_defaults(func=_cmd_attn_peak_hist)

    trace = sub.add_parser("trace", help="trace validation and distillation") \
        .add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    sp = trace.add_parser("validate", parents=[common],
                          help="validate a trace corpus")
    sp.add_argument("--corpus", required=True, help="corpus JSONL")
    sp.add_argument("--validator", default="auto",
                    choices=["auto", "vgr", "singlepass", "recrop"])
    sp.set_defaults(func=_cmd_trace_validate)
    sp = trace.add_parser("pairs", parents=[common],
                          help="emit training pairs from passing traces")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--validator", default="auto",
                    choices=["auto", "vgr", "singlepass", "recrop"])
    sp.set_defaults(func=_cmd_trace_pairs)

    sg = sub.add_parser("synth", help="synthetic data").add_subparsers(
        dest="subcommand", required=True, parser_class=_Parser)
    sp = sg.add_parser("gen", parents=[common], help="generate a dataset")
    sp.add_argument("--n", type=int, required=True, help="sample count")
    sp.add_argument("--with-attention", action="store_true",
                    help="also write full attention tensors")
    sp.set_defaults(func=_cmd_synth_gen)

    d = sub.add_parser("detector", help="heatmap-to-box detector") \
        .add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    sp = d.add_parser("train", parents=[common], help="train on a dataset")
    sp.add_argument("--data", required=True)
    sp.add_argument("--resume", help="checkpoint to resume from")
    sp.set_defaults(func=_cmd_detector_train)
    sp = d.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test",
                    choices=["all", "train", "val", "test"])
    sp.set_defaults(func=_cmd_detector_eval)
    sp = d.add_parser("gradcheck", parents=[common],
                      help="finite-difference gradient check")
    sp.add_argument("--samples", type=int, default=200,
                    help="coordinates sampled per parameter")
    sp.add_argument("--head-only", action="store_true",
                    help="check only the head parameters")
    sp.set_defaults(func=_cmd_detector_gradcheck)

    c = sub.add_parser("condense", help="attention condensation") \
        .add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    sp = c.add_parser("select-layer", parents=[common],
                      help="pick the designated layer from a dataset")
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="all",
                    choices=["all", "train", "val", "test"])
    sp.add_argument("--limit", type=int, default=200,
                    help="max samples to scan")
    sp.set_defaults(func=_cmd_condense_select_layer)
    sp = c.add_parser("train", parents=[common],
                      help="condensation training on the mock model")
    sp.set_defaults(func=_cmd_condense_train)
    sp = c.add_parser("report", parents=[common],
                      help="render figures and tables from a saved report")
    sp.add_argument("--report", required=True, help="condense_report.json")
    sp.set_defaults(func=_cmd_condense_report)

    pl = sub.add_parser("pipeline", help="end-to-end run").add_subparsers(
        dest="subcommand", required=True, parser_class=_Parser)
    sp = pl.add_parser("run", parents=[common],
                       help="tensor -> heatmap -> box -> crop plan")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", help="dataset directory (default: synthesize)")
    sp.add_argument("--index", type=int, default=0, help="sample id")
    sp.add_argument("--image-size", type=int, nargs=2, default=(1024, 1024),
                    metavar=("W", "H"))
    sp.set_defaults(func=_cmd_pipeline_run)
    return p


def _effective_config(args) -> cio.RunConfig:
    cfg = cio.load_config(args.config)
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return cio.apply_overrides(cfg, overrides)


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _effective_config(args)
    except (cio.FormatError, FileNotFoundError) as exc:
        print(f"E:config: {exc}", file=sys.stderr)
        return 2
    try:
        with cio.locked_out_dir(args.out_dir):
            return args.func(cfg, args)
    except cio.OutDirLocked as exc:
        print(f"E:lock: {exc}", file=sys.stderr)
        return 1
    except (det.TrainingDiverged, cd.CondenseDiverged) as exc:
        print(f"E:train: {exc}", file=sys.stderr)
        return 1
    except cio.FormatError as exc:
        print(f"E:data: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"E:io: {exc}", file=sys.stderr)
        return 2
    except (tr.ParseError, tr.MarkerError) as exc:
        print(f"E:validate: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"E:runtime: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())