"""Command-line pipeline: train-baseline -> assign/search -> qat -> eval."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path


from . import data_store as ds
from .assign import BitAssignment, ZetaTable, assign_bits
from .lic_core import LAMBDAS, build_model
from .metrics import (RDCurve, bd_rate, bit_distribution_report, evaluate_model, plot_rd_curves,
                      write_rd_csv)
from .model_size import BITS_PER_MB, model_size_report
from .quantizer import QuantizedModel, attach_quantizers
from .search import search_bits
from .train import TrainConfig, TrainingDiverged, history_to_csv, qat_finetune, train_baseline

log = logging.getLogger("licmpq")

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_NOT_CONVERGED = 3
EXIT_DIVERGED = 4


class BadInput(Exception):
    pass


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=str)
        f.write("\n")


def _record(run_dir: Path, command: str, args, cfg: dict, outputs: list):
    manifest = run_dir / "manifest.json"
    entries = json.loads(manifest.read_text())["runs"] if manifest.exists() else []
    entries.append({
        "command": command,
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "config": cfg,
        "outputs": [str(o) for o in outputs],
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
    })
    _write_json(manifest, {"runs": entries})


def _load(path):
    if not Path(path).exists():
        raise BadInput(f"checkpoint {path} not found")
    return ds.load_checkpoint(path)


def _float_model(model):
    """The float network underneath a (possibly quantized) model."""
    if isinstance(model, QuantizedModel):
        raise BadInput("expected a full-precision checkpoint, got a quantized one")
    return model


def _calib(args, cfg):
    calib_set = ds.select_calibration(args.calib_dir, cfg["data"]["calib_count"], args.seed)
    return calib_set, calib_set.tensor(cfg["data"]["calib_crop"])


def _zeta_table(model, calib_set, calib, run_dir: Path) -> ZetaTable:
    table = ZetaTable(model, calib, calib_set.content_hash)
    cache = run_dir / "zeta_cache" / table.cache_name()
    if cache.exists():
        print(f"reusing zeta cache {cache} ({table.load_csv(cache)} entries)")
    return table


def _save_zeta(table: ZetaTable, run_dir: Path) -> Path:
    cache = run_dir / "zeta_cache" / table.cache_name()
    cache.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(cache)
    return cache


# ---------------------------------------------------------------------------


def cmd_make_data(args, cfg):
    paths = ds.make_toy_dataset(args.out, args.count, args.size, args.seed, args.kind)
    print(f"wrote {len(paths)} images to {args.out}")
    return EXIT_OK


def cmd_train_baseline(args, cfg):
    run = Path(args.out)
    run.mkdir(parents=True, exist_ok=True)
    mcfg, tcfg = cfg["model"], cfg["train"]
    init = None
    if args.init:
        if args.all_qualities:
            raise BadInput("--init trains a single quality level; drop --all-qualities")
        init = _float_model(_load(args.init)[0])
        if args.quality is None:
            mcfg["quality_index"] = init.config.get("quality_index", mcfg["quality_index"])
    qualities = range(len(LAMBDAS)) if args.all_qualities else [mcfg["quality_index"]]
    data = ds.ImageFolder(args.train_dir)
    outputs = []
    for q in qualities:
        ckpt = run / f"baseline_q{q}.ckpt"
        start = 0
        if args.resume and ckpt.exists():
            model, _ = ds.load_checkpoint(ckpt)
            header, _ = ds.read_checkpoint(ckpt)
            start = header["extra"].get("epoch", -1) + 1
            log.info("resuming quality %d from epoch %d", q, start)
        else:
            if init is not None:
                model = init
                model.config["quality_index"] = q
            else:
                model = build_model(mcfg["variant"], mcfg["widths"], q, tcfg["seed"],
                                    mcfg.get("strides"))
            model.lmbda = float(mcfg["lambdas"][q])
            model.config["lambda"] = model.lmbda
        config = TrainConfig(epochs=tcfg["epochs"], batch_size=tcfg["batch_size"],
                             lr_weights=tcfg["lr"], seed=tcfg["seed"],
                             crop_size=tcfg["crop_size"], schedule=tcfg["schedule"],
                             crops_per_image=tcfg["crops_per_image"])

        def save(epoch, m, rec, ckpt=ckpt, q=q):
            ds.save_checkpoint(ckpt, m, {"epoch": epoch, "label": "float", "config": cfg})
            print(f"q={q} epoch {epoch:4d}  bpp {rec['rate_bpp']:.4f}  "
                  f"mse {rec['distortion']:.2f}  loss {rec['loss']:.4f}", flush=True)

        try:
            _, history = train_baseline(model, data, config, start_epoch=start, on_epoch=save)
        except TrainingDiverged as exc:
            print(f"training diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        history_to_csv(history, run / f"loss_q{q}.csv")
        outputs += [ckpt, run / f"loss_q{q}.csv"]
    _record(run, "train-baseline", args, cfg, outputs)
    return EXIT_OK


def cmd_assign(args, cfg):
    run = Path(args.out)
    run.mkdir(parents=True, exist_ok=True)
    model = _float_model(_load(args.checkpoint)[0])
    calib_set, calib = _calib(args, cfg)
    table = _zeta_table(model, calib_set, calib, run)
    table.fill(args.bmax, args.jobs)
    print(f"sensitivity evaluations this run: {table.evaluations}")
    a = assign_bits(model, calib, args.beta, range(2, args.bmax + 1), table=table)
    out = a.to_dict()
    out.update({"config": cfg, "calibration": calib_set.to_dict()})
    _write_json(run / "assignment.json", out)
    table.to_csv(run / "zeta.csv")
    cache = _save_zeta(table, run)
    print(json.dumps(a.bits))
    _record(run, "assign", args, cfg, [run / "assignment.json", run / "zeta.csv", cache])
    return EXIT_OK


def cmd_search(args, cfg):
    run = Path(args.out)
    run.mkdir(parents=True, exist_ok=True)
    model = _float_model(_load(args.checkpoint)[0])
    calib_set, calib = _calib(args, cfg)
    table = _zeta_table(model, calib_set, calib, run)
    result = search_bits(model, calib, args.cr_target, args.mode, args.beta_init, args.bmax,
                         args.max_iterations, args.step, table=table, fresh=args.fresh)
    _save_zeta(table, run)
    result.trace_to_csv(run / "trace.csv")
    trace = result.to_dict()
    trace["config"] = cfg
    _write_json(run / "trace.json", trace)
    print(f"{'iter':>5} {'beta':>12} {'alpha_beta':>12} {'cr':>8}")
    for it, beta, alpha, cr in result.trace_rows():
        print(f"{it:5d} {beta:12.6g} {alpha:12.6g} {cr:8.4f}")
    print(f"mode={result.mode} converged={result.converged} iterations={result.iterations}")
    outputs = [run / "trace.csv", run / "trace.json"]
    if result.assignment is not None:
        out = result.assignment.to_dict()
        out.update({"config": cfg, "cr": result.state.cr, "converged": result.converged})
        _write_json(run / "assignment.json", out)
        outputs.append(run / "assignment.json")
    if not result.converged:
        _record(run, "search", args, cfg, outputs)
        return EXIT_NOT_CONVERGED
    if args.then_qat:
        if not args.data_dir:
            raise BadInput("--then-qat needs --data-dir")
        code = _qat(model, result.assignment, args, cfg, run, outputs)
        _record(run, "search", args, cfg, outputs)
        return code
    _record(run, "search", args, cfg, outputs)
    return EXIT_OK


def _qat(model, assignment, args, cfg, run: Path, outputs: list) -> int:
    qcfg = cfg["qat"]
    data = ds.ImageFolder(args.data_dir)
    qmodel = attach_quantizers(model, assignment, qcfg["activation_bits"], leak=qcfg["leak"])
    config = TrainConfig.qat_defaults(
        epochs=qcfg["epochs"], batch_size=qcfg["batch_size"], lr_weights=qcfg["lr_weights"],
        lr_quant=qcfg["lr_quant"], seed=qcfg["seed"], crop_size=qcfg["crop_size"],
        schedule=qcfg["schedule"], crops_per_image=qcfg["crops_per_image"])
    print(f"qat: epochs={config.epochs} lr_weights={config.lr_weights:g} "
          f"lr_quant={config.lr_quant:g} activation_bits={qcfg['activation_bits']}")
    try:
        trained, history = qat_finetune(qmodel, data, config)
    except TrainingDiverged as exc:
        print(f"QAT diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    label = args.label or ("fpq-8" if set(assignment.bits) == {8} else "fmpq")
    ckpt = run / "quantized.ckpt"
    ds.save_checkpoint(ckpt, trained, {"label": label, "config": cfg,
                                       "assignment": assignment.to_dict()})
    history_to_csv(history, run / "qat_loss.csv")
    outputs += [ckpt, run / "qat_loss.csv"]
    return EXIT_OK


def cmd_qat(args, cfg):
    run = Path(args.out)
    run.mkdir(parents=True, exist_ok=True)
    model = _float_model(_load(args.checkpoint)[0])
    if not Path(args.assignment).exists():
        raise BadInput(f"assignment {args.assignment} not found")
    assignment = BitAssignment.load(args.assignment)
    if len(assignment) != len(model.layers):
        raise BadInput(f"assignment has {len(assignment)} entries, model {len(model.layers)}")
    outputs = []
    code = _qat(model, assignment, args, cfg, run, outputs)
    _record(run, "qat", args, cfg, outputs)
    return code


def _label(path) -> str:
    header, _ = ds.read_checkpoint(path)
    label = header.get("extra", {}).get("label")
    if label:
        return label
    q = header.get("quantizer_state")
    if q is None:
        return "float"
    return "fpq-8" if set(q["bits"]) == {8} else "fmpq"


def cmd_eval(args, cfg):
    run = Path(args.out)
    run.mkdir(parents=True, exist_ok=True)
    folder = ds.ImageFolder(args.image_dir)
    rows, groups, sizes = [], {}, {}
    for path in args.checkpoints:
        model, qstate = _load(path)
        bpp, db, _ = evaluate_model(model, folder)
        label = _label(path)
        q = model.config.get("quality_index")
        rows.append({"label": label, "quality": q, "lambda": model.lmbda, "bpp": bpp, "psnr": db})
        groups.setdefault(label, []).append((bpp, db))
        bits = qstate["bits"] if qstate else [8] * len(model.layers)
        sizes.setdefault(label, []).append(
            model_size_report(model, bits).total_mb if qstate else
            sum(p.numel() for p in model.parameters()) * 32 / BITS_PER_MB)
        print(f"{label:>10} q={q} bpp={bpp:.4f} psnr={db:.3f}")
    write_rd_csv(run / "rd.csv", rows)
    outputs = [run / "rd.csv"]
    curves = {k: RDCurve(v, k) for k, v in groups.items() if len(v) >= 2}
    summary = []
    if args.reference in curves:
        ref = curves[args.reference]
        for label, curve in curves.items():
            summary.append({"method": label, "dataset": str(args.image_dir),
                            "bd_rate_percent": bd_rate(ref, curve, args.bd_method),
                            "model_size_mb": sum(sizes[label]) / len(sizes[label]),
                            "qualities_used": sorted({r["quality"] for r in rows
                                                      if r["label"] == label})})
        _write_json(run / "bd_rate.json", {"reference": args.reference, "results": summary,
                                           "config": cfg})
        outputs.append(run / "bd_rate.json")
        print(f"{'method':>10} {'BD-rate (%)':>12} {'size (MB)':>10}")
        for s in summary:
            print(f"{s['method']:>10} {s['bd_rate_percent']:12.3f} {s['model_size_mb']:10.4f}")
    elif curves:
        log.warning("reference %r has fewer than two points; BD-rate skipped", args.reference)
    if curves:
        plot_rd_curves(list(curves.values()), run / "rd.png")
        outputs.append(run / "rd.png")
    if args.assignments:
        assignments = {}
        for p in args.assignments:
            d = json.loads(Path(p).read_text())
            q = d.get("config", {}).get("model", {}).get("quality_index", len(assignments))
            while q in assignments:
                q += 1
            assignments[q] = BitAssignment.from_dict(d)
        report = bit_distribution_report(assignments, run / "bits.png", run / "bits.csv")
        _write_json(run / "bits.json", report)
        outputs += [run / "bits.png", run / "bits.csv", run / "bits.json"]
        print(f"mean main-path bits {report['mean_main_bits']}, "
              f"hyper-path {report['mean_hyper_bits']}, main >= hyper: {report['main_ge_hyper']}")
    _record(run, "eval", args, cfg, outputs)
    return EXIT_OK


def cmd_size(args, cfg):
    model, qstate = _load(args.checkpoint)
    if args.assignment:
        bits = BitAssignment.load(args.assignment).bits
    elif qstate:
        bits = qstate["bits"]
    else:
        bits = [8] * len(model.layers)
    rep = model_size_report(model, bits)
    print(f"{'method':>10} {'BD-rate (%)':>12} {'size (MB)':>10} {'CR':>6}")
    label = "fpq-8" if set(bits) == {8} else "fmpq"
    print(f"{label:>10} {'-':>12} {rep.total_mb:10.4f} {rep.cr_vs_8bit:6.3f}")
    if args.json:
        print(rep.to_json())
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="licmpq", description=__doc__)
    p.add_argument("--config", help="JSON config file (defaults are used for missing keys)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-data", help="write a synthetic/photographic toy image set")
    s.add_argument("out")
    s.add_argument("--count", type=int, default=64)
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--kind", choices=["mixed", "synthetic", "photo"], default="mixed")
    s.set_defaults(func=cmd_make_data)

    def crop_flags(s):
        s.add_argument("--crop-size", type=int, help="random training crop side in pixels")
        s.add_argument("--crops-per-image", type=int)

    s = sub.add_parser("train-baseline", help="train full-precision baselines")
    s.add_argument("--train-dir", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--quality", type=int)
    s.add_argument("--all-qualities", action="store_true", help="train all six quality levels")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--resume", action="store_true")
    s.add_argument("--init", help="start from the weights of this float checkpoint")
    crop_flags(s)
    s.set_defaults(func=cmd_train_baseline)

    def calib_flags(s):
        s.add_argument("checkpoint")
        s.add_argument("--calib-dir", required=True)
        s.add_argument("--calib-count", type=int)
        s.add_argument("--seed", type=int, default=0, help="calibration selection seed")
        s.add_argument("--bmax", type=int)
        s.add_argument("--out", required=True)
        s.add_argument("--jobs", type=int, default=1)

    s = sub.add_parser("assign", help="per-layer bit assignment at a fixed tolerance")
    calib_flags(s)
    s.add_argument("--beta", type=float)
    s.set_defaults(func=cmd_assign)

    def qat_flags(s):
        s.add_argument("--epochs", type=int)
        s.add_argument("--lr-weights", type=float)
        s.add_argument("--lr-quant", type=float)
        s.add_argument("--activation-bits", type=int)
        s.add_argument("--label")
        crop_flags(s)

    s = sub.add_parser("search", help="search beta for a target compression ratio")
    calib_flags(s)
    s.add_argument("--cr-target", type=float)
    s.add_argument("--beta-init", type=float)
    s.add_argument("--mode", choices=["adaptive", "exhaustive"])
    s.add_argument("--max-iterations", type=int)
    s.add_argument("--step", type=float)
    s.add_argument("--fresh", action="store_true", help="re-evaluate sensitivities every step")
    s.add_argument("--then-qat", action="store_true")
    s.add_argument("--data-dir")
    qat_flags(s)
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("qat", help="quantization-aware fine-tuning")
    s.add_argument("checkpoint")
    s.add_argument("assignment")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--out", required=True)
    qat_flags(s)
    s.set_defaults(func=cmd_qat)

    s = sub.add_parser("eval", help="RD points, BD-rate and plots")
    s.add_argument("checkpoints", nargs="+")
    s.add_argument("--image-dir", required=True)
    s.add_argument("--reference", default="float")
    s.add_argument("--out", required=True)
    s.add_argument("--bd-method", choices=["cubic", "pchip"])
    s.add_argument("--assignments", nargs="*", help="assignment JSONs for the bit-width plot")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("size", help="model size accounting")
    s.add_argument("checkpoint")
    s.add_argument("--assignment")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_size)
    return p


def _apply_overrides(args, cfg: dict) -> dict:
    """Copy explicitly given flags into the config so outputs record what ran."""
    def put(section, key, value):
        if value is not None:
            cfg[section][key] = value

    g = lambda name: getattr(args, name, None)
    put("model", "quality_index", g("quality"))
    if args.command == "train-baseline":
        put("train", "epochs", g("epochs"))
        put("train", "lr", g("lr"))
        put("train", "seed", g("seed"))
        put("train", "crop_size", g("crop_size"))
        put("train", "crops_per_image", g("crops_per_image"))
    put("data", "calib_count", g("calib_count"))
    put("assign", "beta", g("beta"))
    put("assign", "b_max", g("bmax"))
    put("search", "cr_target", g("cr_target"))
    put("search", "beta_init", g("beta_init"))
    put("search", "mode", g("mode"))
    put("search", "max_iterations", g("max_iterations"))
    put("search", "exhaustive_step", g("step"))
    if args.command in ("qat", "search"):
        put("qat", "epochs", g("epochs"))
        put("qat", "lr_weights", g("lr_weights"))
        put("qat", "lr_quant", g("lr_quant"))
        put("qat", "activation_bits", g("activation_bits"))
        put("qat", "crop_size", g("crop_size"))
        put("qat", "crops_per_image", g("crops_per_image"))
    put("eval", "bd_rate_fit", g("bd_method"))
    # resolved values flow back into args for the command bodies
    for name, (section, key) in {
        "beta": ("assign", "beta"), "bmax": ("assign", "b_max"),
        "cr_target": ("search", "cr_target"), "beta_init": ("search", "beta_init"),
        "mode": ("search", "mode"), "max_iterations": ("search", "max_iterations"),
        "step": ("search", "exhaustive_step"), "bd_method": ("eval", "bd_rate_fit"),
    }.items():
        if hasattr(args, name):
            setattr(args, name, cfg[section][key])
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _apply_overrides(args, ds.load_config(args.config))
        if args.command == "search" and args.mode == "adaptive" and args.max_iterations is None:
            args.max_iterations = 100
        return args.func(args, cfg)
    except (BadInput, ds.CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
