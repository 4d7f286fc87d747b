"""Pipeline driver: synthesize, train, evaluate, attribute.

Heavy imports happen inside the subcommand handlers so that `--threads`
can pin the BLAS thread pools before numpy first loads. All artifacts are
pure functions of their inputs (seeded, no timestamps), so rerunning a
command over the same inputs rewrites byte-identical files.

`EXTREMECAST_LOG` sets the log level (DEBUG, INFO, ...); logs go to
stderr and never into artifacts.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import pathlib
import sys

THREAD_VARS = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
               "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")

# per-cube optimizer steps (accum 1) converge within 4 epochs on
# desk-sized datasets; the recurrent variants need a cooler rate than
# the feedforward ablation to stay stable at that step count
TRAIN_DEFAULTS = {"epochs": 4, "accum": 1,
                  "lr": {"convlstm": 0.0125, "lstm": 0.0125, "conv": 0.02}}

log = logging.getLogger("extremecast")


def _peek_threads(argv) -> int | None:
    for i, tok in enumerate(argv):
        if tok == "--threads" and i + 1 < len(argv):
            return int(argv[i + 1])
        if tok.startswith("--threads="):
            return int(tok.split("=", 1)[1])
    return None


def pin_threads(n: int):
    for var in THREAD_VARS:
        os.environ[var] = str(n)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="extremecast",
        description="Next-step surface forecasting on synthetic "
                    "minicubes: data generation, training, evaluation, "
                    "and gradient attribution.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--out", required=out_required,
                        help="output directory")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
        sp.add_argument("--threads", type=int, default=None,
                        help="BLAS thread count (1 = reference mode)")

    def data_source(sp):
        sp.add_argument("--manifest", default=None,
                        help="dataset manifest file")
        sp.add_argument("--data", default=None,
                        help="dataset directory holding manifest.json")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--config", default=None,
                    help="JSON file of generator settings")
    common(sp)

    sp = sub.add_parser("train", help="train one model variant")
    data_source(sp)
    sp.add_argument("--config", default=None,
                    help="JSON file: variant, model, optim, epochs")
    common(sp)

    sp = sub.add_parser("eval", help="score checkpoints against baselines")
    data_source(sp)
    sp.add_argument("--ckpt", nargs="+", required=True,
                    help="checkpoint directories")
    sp.add_argument("--filter", default=None,
                    choices=["all", "extremes", "non_extremes"],
                    help="restrict the report to one event filter")
    common(sp)

    sp = sub.add_parser("attr", help="event vs counterfactual attribution")
    data_source(sp)
    sp.add_argument("--ckpt", required=True, help="checkpoint directory")
    sp.add_argument("--steps", type=int, default=9,
                    help="integration steps along the baseline path")
    sp.add_argument("--event", type=int, default=None,
                    help="event id (default: most frequent in test split)")
    common(sp)
    return p


def _load_json(path) -> dict:
    if path is None:
        return {}
    p = pathlib.Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    return json.loads(p.read_text())


def _manifest_path(args) -> pathlib.Path:
    if args.manifest:
        path = pathlib.Path(args.manifest)
    elif args.data:
        path = pathlib.Path(args.data) / "manifest.json"
    else:
        raise ValueError("pass --manifest or --data")
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    return path


def _write_json(path, payload):
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def cmd_synth(args) -> int:
    from . import synth

    payload = _load_json(args.config)
    if args.seed is not None:
        payload["seed"] = args.seed
    cfg = synth.SyntheticConfig.from_dict(payload)
    manifest = synth.build_dataset(cfg, args.out, log=log)
    print(f"wrote {len(manifest.cubes)} cubes under {args.out}")
    return 0


def cmd_train(args) -> int:
    from . import model as md
    from . import training as tr
    from . import svgplot

    payload = _load_json(args.config)
    variant = payload.get("variant", "convlstm")
    model_cfg = md.desk_config(variant)
    if payload.get("model"):
        model_cfg = dataclasses.replace(model_cfg, **payload["model"])
    optim_kw = {"lr": TRAIN_DEFAULTS["lr"][model_cfg.variant],
                "accum": TRAIN_DEFAULTS["accum"]}
    optim_kw.update(payload.get("optim", {}))
    optim_cfg = tr.OptimConfig(**optim_kw)
    epochs = int(payload.get("epochs", TRAIN_DEFAULTS["epochs"]))
    seed = args.seed if args.seed is not None else payload.get("seed", 42)

    manifest = _manifest_path(args)
    from . import store

    dataset = store.load_manifest(manifest)
    items = tr.load_training_items(manifest, "train")
    log.info("training %s on %d cubes, %d epochs", model_cfg.variant,
             len(items), epochs)
    mdl = md.Model.initialized(model_cfg, seed)
    history = tr.train_model(mdl, items, optim_cfg, epochs=epochs,
                             seed=seed, out_dir=args.out, log=log)

    out = pathlib.Path(args.out)
    # identify the dataset by content, not path, so the artifact is
    # byte-stable across relocations of the same data
    _write_json(out / "train_config.json", {
        "variant": model_cfg.variant, "model": model_cfg.to_dict(),
        "optim": dataclasses.asdict(optim_cfg), "epochs": epochs,
        "seed": seed, "n_params": md.count_params(model_cfg),
        "dataset": {"seed": dataset.seed, "n_cubes": len(dataset.cubes)},
    })
    means = history["epoch_means"]
    (out / "loss_curve.svg").write_text(svgplot.line_chart(
        [{"name": model_cfg.variant, "y": means,
          "x": list(range(1, len(means) + 1))}],
        title="mean training loss per epoch", xlabel="epoch",
        ylabel="loss"))
    print(f"final checkpoint: {out / 'final'}  "
          f"(last epoch mean loss {means[-1]:.6f})")
    return 0


def _load_checkpoints(paths) -> dict:
    from . import model as md

    models = {}
    for path in paths:
        mdl = md.Model.load(path)
        name = mdl.cfg.variant
        if name in models:
            name = f"{name}_{pathlib.Path(path).name}"
        if name in models:
            raise ValueError(f"duplicate checkpoint name {name!r}")
        models[name] = mdl
    return models


def cmd_eval(args) -> int:
    from . import evaluation as ev

    manifest = _manifest_path(args)
    models = _load_checkpoints(args.ckpt)
    filters = (args.filter,) if args.filter else ev.FILTERS
    rows = ev.evaluate_dataset(manifest, models, splits=("test",),
                               filters=filters, log=log)
    ev.write_report(rows, args.out)
    for row in rows:
        if row["filter"] == "all":
            print(f"{row['model']:>12}  L1 {row['l1']:.5f}  "
                  f"R2 {row['r2']:.4f}  NNSE {row['nnse']:.4f}")
    print(f"report: {pathlib.Path(args.out) / 'metrics.csv'}")
    return 0


def _attr_channel_names() -> dict:
    from . import features as ft

    return {"x_st": ft.xst_channel_names(), "x_s": ft.xs_channel_names(),
            "x_t": ft.xt_channel_names()}


def _write_channel_tables(out, names, tables):
    for group, channel_names in names.items():
        path = out / f"global_{group}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["channel", "name", "period", "mean",
                             "stderr"])
            for period in ("event", "counterfactual"):
                table = tables[group][period]
                for i, name in enumerate(channel_names):
                    writer.writerow([
                        i, name, period,
                        f"{table['mean'][i]:.10g}",
                        f"{table['stderr'][i]:.10g}"])


def cmd_attr(args) -> int:
    import numpy as np

    from . import attribution as at
    from . import binio
    from . import model as md
    from . import svgplot

    manifest = _manifest_path(args)
    mdl = md.Model.load(args.ckpt)
    cfg = at.AttributionConfig(n_steps=args.steps)
    event_id = args.event
    if event_id is None:
        event_id = at.most_frequent_event(manifest)
        log.info("defaulting to event %d", event_id)

    out = pathlib.Path(args.out)
    tensor_dir = out / "tensors"
    tensor_dir.mkdir(parents=True, exist_ok=True)
    time_series = {"event": [], "counterfactual": []}

    def on_result(cube_id, kind, result):
        for name, arr in result.attr.items():
            binio.write_tensor(
                tensor_dir / f"{cube_id}_{kind}_{name}.bin",
                arr.astype(np.float32))
        time_series[kind].append(result.attr["x_t"])

    study = at.event_counterfactual(mdl, manifest, event_id, cfg,
                                    log=log, on_result=on_result)

    names = _attr_channel_names()
    _write_channel_tables(out, names, study["tables"])
    _write_json(out / "attr_summary.json", {
        "event_id": study["event_id"], "n_steps": cfg.n_steps,
        "baseline": "zeros", "cubes": study["cubes"],
        "per_cube": study["per_cube"],
        "output": "pooled kndvi over selected steps",
    })

    for group, channel_names in names.items():
        series = []
        for period, color in (("event", svgplot.PALETTE[0]),
                              ("counterfactual", svgplot.PALETTE[1])):
            table = study["tables"][group][period]
            series.append({"name": period, "color": color,
                           "values": list(table["mean"]),
                           "errors": list(table["stderr"])})
        (out / f"bars_{group}.svg").write_text(svgplot.bar_chart(
            channel_names, series,
            title=f"attribution by channel ({group})",
            ylabel="summed attribution"))

    mean_xt = np.mean(np.stack(time_series["event"]), axis=0)
    top = np.argsort(-np.abs(mean_xt.sum(axis=1)))[:4]
    (out / "lines_x_t.svg").write_text(svgplot.line_chart(
        [{"name": names["x_t"][c], "y": list(mean_xt[c])}
         for c in top],
        title="event attribution through time (cube mean)",
        xlabel="step", ylabel="attribution"))

    ev_top = at.top_channels(study["tables"]["x_t"]["event"],
                             names["x_t"])
    cf_top = at.top_channels(study["tables"]["x_t"]["counterfactual"],
                             names["x_t"])
    print(f"event {event_id}: {len(study['cubes'])} cubes")
    print(f"top event channels:          {', '.join(ev_top)}")
    print(f"top counterfactual channels: {', '.join(cf_top)}")
    return 0


HANDLERS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "attr": cmd_attr}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    threads = _peek_threads(argv)
    if threads is not None:
        if threads < 1:
            print("error: --threads must be at least 1", file=sys.stderr)
            return 1
        pin_threads(threads)

    level = os.environ.get("EXTREMECAST_LOG", "WARNING").upper()
    logging.basicConfig(
        stream=sys.stderr, level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s")

    args = build_parser().parse_args(argv)
    try:
        return HANDLERS[args.command](args)
    except Exception as exc:  # actionable one-liner, code 1
        if log.isEnabledFor(logging.DEBUG):
            log.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
