"""Command-line interface.

Commands: train, eval, convert, calibrate, sweep, profile, budget.
Exit codes: 0 success, 1 usage error, 2 contract/validation failure,
3 numeric divergence. Output directories are guarded by an advisory
file lock so two processes never write the same run directory at once.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import yaml
from filelock import FileLock

from . import analysis, io, report
from .config import DatasetConfig, RunConfig, load_config
from .errors import BitflexError, ContractError, TrainingDiverged
from .model import AdaptiveModel, QuantConfig, get_architecture
from .quant import QuantScheme, downshift_codes, weight_decode
from .train import (
    TrainPlan,
    calibrate_bn,
    evaluate,
    pretrain_fp,
    train_individual,
    train_joint,
    train_progressive,
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _parse_bits(text: str) -> list[int]:
    try:
        bits = [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise _UsageError(f"expected a comma-separated bit list, got {text!r}") from None
    if not bits:
        raise _UsageError("bit list is empty")
    return bits


def _lock(directory: Path) -> FileLock:
    directory.mkdir(parents=True, exist_ok=True)
    return FileLock(str(directory / ".bitflex.lock"))


def _default_dataset_for(model: AdaptiveModel) -> DatasetConfig:
    _, H, _ = model.arch.input_shape
    return DatasetConfig(image_size=H, classes=model.arch.layers[-1].out_dim)


def _dataset(args, model: AdaptiveModel | None = None):
    if getattr(args, "config", None):
        return load_config(args.config).dataset.load()
    if model is None:
        raise _UsageError("--config is required here")
    return _default_dataset_for(model).load()


# ---------------------------------------------------------------------------
# train


def _build_model(cfg: RunConfig) -> AdaptiveModel:
    bn_mode, clip_mode = cfg.modes
    qc = QuantConfig(scheme=cfg.scheme, bit_widths=cfg.bits, active=cfg.bits[0],
                     bn_mode=bn_mode, clip_mode=clip_mode, alpha_init=cfg.alpha_init)
    return AdaptiveModel(get_architecture(cfg.arch), qc, seed=cfg.seed)


def _pretrained_state(cfg: RunConfig, data, outdir: Path, records: list[dict]):
    """Full-precision init: from cfg.init_from if given, else a fresh
    clamped-weight pretraining run (skipped when pretrain_epochs == 0)."""
    if cfg.init_from:
        return io.load_model(cfg.init_from).state_dict()
    if cfg.pretrain_epochs == 0:
        return None
    x_train, y_train, x_test, y_test = data
    qc = QuantConfig(scheme=QuantScheme.ORIGINAL, bit_widths=cfg.bits, active=cfg.bits[0],
                     bn_mode="shared", clip_mode="shared", alpha_init=cfg.alpha_init)
    fp_model = AdaptiveModel(get_architecture(cfg.arch), qc, seed=cfg.seed)
    plan = TrainPlan(epochs=cfg.pretrain_epochs, batch_size=cfg.plan.batch_size,
                     base_lr=cfg.plan.base_lr, weight_decay=cfg.plan.weight_decay,
                     momentum=cfg.plan.momentum,
                     warmup_epochs=min(cfg.plan.warmup_epochs, cfg.pretrain_epochs),
                     seed=cfg.plan.seed)
    records += pretrain_fp(fp_model, x_train, y_train, plan, eval_data=(x_test, y_test))
    io.save_model(fp_model, outdir / "pretrain.bfx")
    return fp_model.state_dict()


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    outdir = Path(args.output_dir or cfg.output_dir)
    data = cfg.dataset.load()
    x_train, y_train, x_test, y_test = data
    eval_data = (x_test, y_test)

    with _lock(outdir):
        records: list[dict] = []
        state = _pretrained_state(cfg, data, outdir, records)
        model = _build_model(cfg)
        if state is not None:
            model.load_state_dict(state, broadcast_shared=True)

        if cfg.regime == "individual":
            records += train_individual(model, cfg.train_bit, x_train, y_train,
                                        cfg.plan, eval_data=eval_data)
            report_bits = [cfg.train_bit]
        elif cfg.regime in ("joint-vanilla", "joint-scl"):
            records += train_joint(model, cfg.bits, x_train, y_train,
                                   cfg.plan, eval_data=eval_data)
            report_bits = list(cfg.bits)
        else:
            direction = "ascending" if cfg.regime.endswith("asc") else "descending"
            recs, checkpoints = train_progressive(model, cfg.bits, direction,
                                                  x_train, y_train, cfg.plan,
                                                  eval_data=eval_data)
            records += recs
            for k, ckpt in checkpoints.items():
                phase = AdaptiveModel(model.arch, model.config, seed=0)
                phase.load_state_dict(ckpt)
                io.save_model(phase, outdir / f"model_phase{k}.bfx")
            report_bits = list(cfg.bits)

        io.save_model(model, outdir / "model.bfx")
        report.write_metrics_log(outdir / "metrics.jsonl", records)
        report.fig_training([r for r in records if r["regime"] != "pretrain-fp"],
                            outdir / "training_curves.png")
        (outdir / "config_used.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))

        print(f"run complete: {cfg.regime} on {cfg.arch} "
              f"({cfg.scheme.value}, bits {list(cfg.bits)})")
        for k in report_bits:
            acc = evaluate(model, k, x_test, y_test)
            print(f"k={k}: top1={acc:.2f}%")
        print(f"artifacts in {outdir}")
    return 0


# ---------------------------------------------------------------------------
# eval / convert / calibrate


def cmd_eval(args) -> int:
    model = io.load_model(args.model)
    bits = _parse_bits(args.bits) if args.bits else list(model.config.bit_widths)
    _, _, x_test, y_test = _dataset(args, model)
    for k in bits:
        acc = evaluate(model, k, x_test, y_test, batch_size=args.batch_size)
        print(f"k={k}: top1={acc:.2f}%")
    return 0


def convert_to_bits(model: AdaptiveModel, k: int) -> AdaptiveModel:
    """Rewrite a modified-scheme adaptive model to max bit-width k by
    right-shifting its stored integer codes (exact, no retraining)."""
    cfg = model.config
    if cfg.scheme is not QuantScheme.MODIFIED:
        raise ContractError("conversion requires the modified scheme; an original-scheme "
                            "model must keep its full-precision master weights")
    if k > cfg.max_bits:
        raise ContractError(f"target bit-width {k} above stored maximum {cfg.max_bits}")
    if k not in cfg.bit_widths:
        raise ContractError(f"target bit-width {k} not registered {list(cfg.bit_widths)}; "
                            "batch-norm sets exist only for registered bit-widths")
    new_cfg = QuantConfig(scheme=cfg.scheme,
                          bit_widths=tuple(b for b in cfg.bit_widths if b <= k),
                          active=k, bn_mode=cfg.bn_mode, clip_mode=cfg.clip_mode,
                          first_last_weight_bits=cfg.first_last_weight_bits,
                          input_bits=cfg.input_bits, alpha_init=cfg.alpha_init)
    out = AdaptiveModel(model.arch, new_cfg, seed=0)
    out.load_state_dict(model.state_dict())
    codes = model.export_max_bit_codes()
    for idx, spec in enumerate(model.arch.layers):
        c, stored = codes[spec.name]
        keep = (cfg.first_last_weight_bits
                if model.arch.role(idx) in ("first", "last") else new_cfg.max_bits)
        if keep < stored:
            c = downshift_codes(c, stored, keep)
        out.weights[idx].data[...] = weight_decode(c, keep).reshape(spec.weight_shape)
    return out


def cmd_convert(args) -> int:
    src = Path(args.model)
    model = io.load_model(src)
    converted = convert_to_bits(model, args.to)
    dst = Path(args.output) if args.output else src.with_name(f"{src.stem}.to{args.to}.bfx")
    with _lock(dst.parent):
        io.save_model(converted, dst)
    old, new = src.stat().st_size, dst.stat().st_size
    print(f"converted {src} ({old} B) -> {dst} ({new} B), ratio {new / old:.3f}")
    return 0


def cmd_calibrate(args) -> int:
    src = Path(args.model)
    model = io.load_model(src)
    x_train, _, x_test, y_test = _dataset(args, model)
    calibrate_bn(model, args.bits, x_train, batch_size=args.batch_size,
                 max_batches=args.batches)
    dst = Path(args.output) if args.output else src.with_name(f"{src.stem}.calibrated.bfx")
    with _lock(dst.parent):
        io.save_model(model, dst)
    acc = evaluate(model, args.bits, x_test, y_test)
    print(f"calibrated {src} at k={args.bits} -> {dst}")
    print(f"k={args.bits}: top1={acc:.2f}%")
    return 0


# ---------------------------------------------------------------------------
# sweep / profile / budget


def cmd_sweep(args) -> int:
    outdir = Path(args.output_dir)
    grid = analysis.default_alpha_grid(args.points, args.alpha_min, args.alpha_max)
    result = analysis.clipping_error_sweep(_parse_bits(args.bits), alphas=grid,
                                           n=args.neurons, trials=args.trials,
                                           seed=args.seed, scheme=args.scheme)
    with _lock(outdir):
        rows = [(k, f"{a:.6g}", f"{e:.6g}") for k, a, e in result.rows]
        report.write_csv(outdir / "sweep.csv", report.SWEEP_HEADER, rows)
        report.fig_sweep(result, outdir / "sweep.png")
    for k in sorted(result.argmin):
        print(f"k={k}: argmin alpha={result.argmin[k]:.4f}")
    print(f"wrote {outdir / 'sweep.csv'} and {outdir / 'sweep.png'}")
    return 0


def cmd_profile(args) -> int:
    model = io.load_model(args.model)
    outdir = Path(args.output_dir)
    with _lock(outdir):
        if args.kind == "clip":
            rows = analysis.clipping_profile(model)
            report.write_csv(outdir / "clip_profile.csv", report.CLIP_PROFILE_HEADER,
                             [(l, k, f"{a:.6g}") for l, k, a in rows])
            report.fig_clip_profile(rows, outdir / "clip_profile.png")
            print(f"wrote {outdir / 'clip_profile.csv'} and {outdir / 'clip_profile.png'}")
        else:
            _, _, x_test, _ = _dataset(args, model)
            probe = x_test[: args.probe_size]
            bits = _parse_bits(args.bits) if args.bits else list(model.config.bit_widths)
            rows = []
            for k in bits:
                rows += analysis.variance_profile(model, k, probe)
            report.write_csv(outdir / "variance_profile.csv", report.VARIANCE_PROFILE_HEADER,
                             [(l, k, f"{w:.6g}", f"{a:.6g}") for l, k, w, a in rows])
            report.fig_variance_profile(rows, outdir / "variance_profile.png")
            print(f"wrote {outdir / 'variance_profile.csv'} and "
                  f"{outdir / 'variance_profile.png'}")
    return 0


def _resolve_manifest(name: str) -> analysis.MacManifest:
    if name in analysis.BUNDLED_MANIFESTS or Path(name).exists():
        return analysis.load_manifest(name)
    try:
        return analysis.manifest_from_arch(get_architecture(name))
    except BitflexError:
        raise ContractError(
            f"manifest {name!r} is neither bundled, a file, nor a known architecture"
        ) from None


def cmd_budget(args) -> int:
    manifest = _resolve_manifest(args.manifest)
    bits = _parse_bits(args.bits)
    print(f"manifest {manifest.name}: {manifest.total_macs:,} MACs, "
          f"{manifest.weight_params:,} weight parameters")
    csv_rows = []
    for k in bits:
        ops = analysis.bitops(manifest, k)
        size = analysis.model_size(manifest, [k], args.scheme)
        print(f"k={k}: BitOPs {analysis.format_bitops(ops)}, "
              f"size {size.mib:.2f} MiB ({size.total_bytes:,} B)")
        csv_rows.append((k, ops, size.weight_bytes, size.total_bytes, f"{size.mib:.4f}"))
    if args.adaptive or args.scl:
        size = analysis.model_size(manifest, bits, args.scheme, scl=args.scl)
        stored = "float32 masters" if size.fp_master else f"{max(bits)}-bit codes"
        print(f"adaptive {list(size.bits)} ({args.scheme}, {stored}): "
              f"size {size.mib:.2f} MiB ({size.total_bytes:,} B)")
        if args.scl:
            print(f"switchable clipping-level overhead: "
                  f"{1000.0 * size.scl_overhead_ratio:.4f} per mille")
    if args.output_dir:
        outdir = Path(args.output_dir)
        with _lock(outdir):
            report.write_csv(outdir / "budget.csv", report.BUDGET_HEADER, csv_rows)
            report.fig_budget(csv_rows, outdir / "budget.png")
        print(f"wrote {outdir / 'budget.csv'} and {outdir / 'budget.png'}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    p = _Parser(prog="bitflex",
                description="Quantized neural networks with switchable bit-widths.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run a training regime from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--output-dir", default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-bit accuracy of a saved model")
    e.add_argument("--model", required=True)
    e.add_argument("--bits", default=None, help="comma-separated, default: all registered")
    e.add_argument("--config", default=None, help="config supplying the dataset")
    e.add_argument("--batch-size", type=int, default=256)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("convert", help="rewrite a modified-scheme file to a lower bit-width")
    c.add_argument("--model", required=True)
    c.add_argument("--to", type=int, required=True)
    c.add_argument("--output", default=None)
    c.set_defaults(func=cmd_convert)

    b = sub.add_parser("calibrate", help="recompute batch-norm statistics at a bit-width")
    b.add_argument("--model", required=True)
    b.add_argument("--bits", type=int, required=True)
    b.add_argument("--config", default=None)
    b.add_argument("--output", default=None)
    b.add_argument("--batches", type=int, default=50)
    b.add_argument("--batch-size", type=int, default=128)
    b.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("sweep", help="Monte-Carlo clipping-error sweep")
    s.add_argument("--output-dir", required=True)
    s.add_argument("--bits", default="2,4,8")
    s.add_argument("--points", type=int, default=60)
    s.add_argument("--alpha-min", type=float, default=0.02)
    s.add_argument("--alpha-max", type=float, default=4.0)
    s.add_argument("--trials", type=int, default=100000)
    s.add_argument("--neurons", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--scheme", choices=["original", "modified"], default="original")
    s.set_defaults(func=cmd_sweep)

    f = sub.add_parser("profile", help="clipping-level or variance profile of a model")
    f.add_argument("--model", required=True)
    f.add_argument("--kind", choices=["clip", "variance"], default="clip")
    f.add_argument("--output-dir", required=True)
    f.add_argument("--bits", default=None, help="variance profile bit-widths")
    f.add_argument("--config", default=None)
    f.add_argument("--probe-size", type=int, default=512)
    f.set_defaults(func=cmd_profile)

    g = sub.add_parser("budget", help="BitOPs and storage accounting from a MAC manifest")
    g.add_argument("--manifest", required=True)
    g.add_argument("--bits", default="8,6,5,4")
    g.add_argument("--scheme", choices=["original", "modified"], default="modified")
    g.add_argument("--adaptive", action="store_true",
                   help="also report the multi-bit adaptive deployment")
    g.add_argument("--scl", action="store_true",
                   help="adaptive deployment with per-bit clipping levels")
    g.add_argument("--output-dir", default=None)
    g.set_defaults(func=cmd_budget)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args) or 0
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except TrainingDiverged as e:
        print(f"divergence: {e}", file=sys.stderr)
        return 3
    except BitflexError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
