"""Command-line entry point wiring data generation, training, evaluation,
parameter counting and single-sample codec runs into reproducible runs.

Subcommands: gen-data, train, eval, count-params, codec.  Every run writes
the fully resolved configuration next to its outputs; rerunning with
``--config <out>/resolved.cfg`` reproduces it.  Exit codes: 0 success,
2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import channel, evaluation, expconfig, model, training
from .errors import (ConfigError, CsiError, DataError, DimensionError,
                     NumericError, StateError)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

RESOLVED_NAME = "resolved.cfg"
LOSS_LOG_NAME = "loss_log.csv"
RESULTS_NAME = "results.csv"


def _gamma_tag(gamma: Fraction) -> str:
    return f"{gamma.numerator}-{gamma.denominator}"


def _paths(cfg: expconfig.ExperimentConfig) -> dict[str, Path]:
    out = Path(cfg.out_dir)
    return {
        "out": out,
        "train": out / "train.acnt",
        "val": out / "val.acnt",
        "test": out / "test.acnt",
        "resolved": out / RESOLVED_NAME,
        "loss_log": out / LOSS_LOG_NAME,
        "results": out / RESULTS_NAME,
        "denoiser": out / "denoiser.ckpt",
        "last_denoiser": out / "last_denoiser.ckpt",
    }


def _feedback_path(cfg, gamma: Fraction, last: bool = False) -> Path:
    prefix = "last_feedback" if last else "feedback"
    return Path(cfg.out_dir) / f"{prefix}_{_gamma_tag(gamma)}.ckpt"


def _end_to_end_path(cfg, last: bool = False) -> Path:
    prefix = "last_end_to_end" if last else "end_to_end"
    return Path(cfg.out_dir) / f"{prefix}_{_gamma_tag(cfg.gamma)}.ckpt"


def _write_resolved(cfg) -> None:
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    expconfig.write_config_file(cfg, _paths(cfg)["resolved"])


def _load_split(cfg, split: str) -> channel.ChannelDataset:
    path = _paths(cfg)[split]
    if not path.exists():
        raise DataError(f"missing {split} dataset; expected it at {path} (run gen-data first)")
    ds = channel.read_dataset(path)
    if (ds.n_cc, ds.n_t) != (cfg.n_cc, cfg.n_t):
        raise ConfigError(f"{split} dataset is {ds.n_cc}x{ds.n_t} but the config wants "
                          f"{cfg.n_cc}x{cfg.n_t}")
    return ds


def cmd_gen_data(cfg, args) -> int:
    params = cfg.generator_params()
    paths = _paths(cfg)
    targets = {s: paths[s] for s in ("train", "val", "test")}
    existing = [str(p) for p in targets.values() if p.exists()]
    if existing and not args.force:
        raise DataError("refusing to overwrite existing dataset files (use --force): "
                        + ", ".join(existing))
    paths["out"].mkdir(parents=True, exist_ok=True)
    offsets = cfg.split_offsets()
    sizes = cfg.split_sizes()
    for split, path in targets.items():
        ds = channel.make_dataset(params, sizes[split], cfg.cnr_db, cfg.master_seed,
                                  index_offset=offsets[split])
        channel.write_dataset(ds, path)
        print(f"{split}: {len(ds)} samples at CNR {cfg.cnr_db:g} dB "
              f"(empirical {channel.empirical_cnr_db(ds):.2f} dB) -> {path}")
    _write_resolved(cfg)
    return EXIT_OK


def _save_snapshot(path: Path, mcfg, snap: training.EpochSnapshot) -> None:
    training.save_checkpoint(path, mcfg, training.snapshot_entries(snap))


def _load_resume(path: Path, mcfg) -> training.EpochSnapshot | None:
    if not path.exists():
        return None
    info, entries = training.load_checkpoint(path)
    training.require_checkpoint_config(info, mcfg)
    return training.entries_to_snapshot(entries)


def _net_weights(entries, prefix: str):
    return {k: v for k, v in entries.items() if k.startswith(prefix + ".")}


def _load_best_weights(path: Path, mcfg):
    if not path.exists():
        raise DataError(f"missing checkpoint; expected it at {path} (run train first)")
    info, entries = training.load_checkpoint(path)
    training.require_checkpoint_config(info, mcfg)
    return entries


def cmd_train(cfg, args) -> int:
    stage_mode = args.stage or cfg.stage
    train_ds = _load_split(cfg, "train")
    val_ds = _load_split(cfg, "val")
    tcfg = cfg.train_config()
    tcfg.validate(len(train_ds))
    mcfg = cfg.model_config()
    paths = _paths(cfg)
    _write_resolved(cfg)
    log = training.LossLog()
    try:
        if stage_mode == "two-stage":
            den_resume = _load_resume(paths["last_denoiser"], mcfg) if args.resume else None
            fb_last = _feedback_path(cfg, cfg.gamma, last=True)
            stage1_complete = den_resume is not None and den_resume.epoch >= tcfg.epochs
            if stage1_complete:
                entries = _load_best_weights(paths["denoiser"], mcfg)
                den_weights = _net_weights(entries, "denoiser")
                print(f"stage denoiser: already complete, reusing {paths['denoiser']}")
            else:
                res1 = training.train_denoiser(
                    train_ds, val_ds, mcfg, tcfg, resume=den_resume,
                    on_epoch=lambda s: _save_snapshot(paths["last_denoiser"], mcfg, s))
                training.save_checkpoint(paths["denoiser"], mcfg, res1.best_weights)
                log.rows += res1.log.rows
                den_weights = res1.best_weights
                print(f"stage denoiser: best val loss {res1.best_val_loss:.6g} "
                      f"at epoch {res1.best_epoch}")
                # stage-two inputs depend on the denoiser, so any stage-two
                # progress recorded before this point is stale
                fb_last.unlink(missing_ok=True)
            fb_resume = _load_resume(fb_last, mcfg) if args.resume and stage1_complete else None
            res2 = training.train_feedback(
                train_ds, val_ds, den_weights, mcfg, tcfg, resume=fb_resume,
                on_epoch=lambda s: _save_snapshot(fb_last, mcfg, s))
            training.save_checkpoint(_feedback_path(cfg, cfg.gamma), mcfg, res2.best_weights)
            log.rows += res2.log.rows
            print(f"stage feedback: best val loss {res2.best_val_loss:.6g} "
                  f"at epoch {res2.best_epoch}")
        elif stage_mode == "end-to-end":
            init_den = None
            if args.init_denoiser:
                entries = _load_best_weights(Path(args.init_denoiser), mcfg)
                init_den = _net_weights(entries, "denoiser")
            e2e_last = _end_to_end_path(cfg, last=True)
            e2e_resume = _load_resume(e2e_last, mcfg) if args.resume else None
            res = training.train_end_to_end(
                train_ds, val_ds, mcfg, tcfg, init_denoiser=init_den, resume=e2e_resume,
                on_epoch=lambda s: _save_snapshot(e2e_last, mcfg, s))
            training.save_checkpoint(_end_to_end_path(cfg), mcfg, res.best_weights)
            log.rows += res.log.rows
            print(f"stage end-to-end: best val loss {res.best_val_loss:.6g} "
                  f"at epoch {res.best_epoch}")
        else:
            raise ConfigError(f"unknown training stage {stage_mode!r}")
    except training.TrainingDiverged as exc:
        crash = paths["out"] / "diverged.ckpt"
        training.save_checkpoint(crash, mcfg, exc.result.best_weights)
        raise NumericError(f"{exc}; last good weights saved to {crash}") from exc
    _merge_loss_log(paths["loss_log"], log)
    return EXIT_OK


def _merge_loss_log(path: Path, new_log: training.LossLog) -> None:
    """Keep rows from earlier runs that the new rows do not supersede."""
    rows = []
    if path.exists():
        old = training.LossLog.read_csv(path)
        fresh = {(stage, epoch) for stage, epoch, _, _ in new_log.rows}
        rows = [r for r in old.rows if (r[0], r[1]) not in fresh]
    merged = training.LossLog(rows + new_log.rows)
    merged.rows.sort(key=lambda r: (training._STAGE_IDS.get(r[0], 99), r[1]))
    merged.write_csv(path)


def _load_feedback_model(cfg, gamma: Fraction) -> evaluation.FeedbackModel:
    mcfg = cfg.model_config(gamma)
    den_entries = _load_best_weights(_paths(cfg)["denoiser"], cfg.model_config())
    fb_entries = _load_best_weights(_feedback_path(cfg, gamma), mcfg)
    return evaluation.FeedbackModel(
        f"feedback_{_gamma_tag(gamma)}", mcfg,
        _net_weights(den_entries, "denoiser"),
        _net_weights(fb_entries, "encoder"),
        _net_weights(fb_entries, "decoder"))


def cmd_eval(cfg, args) -> int:
    baseline = args.baseline or cfg.baseline
    models = [_load_feedback_model(cfg, g) for g in cfg.eval_gammas]
    if baseline == "identity":
        models.append(evaluation.IdentityBaseline())
    params = cfg.generator_params()
    offset = cfg.split_offsets()["test"]
    datasets = [channel.make_dataset(params, cfg.n_test, c, cfg.master_seed, index_offset=offset)
                for c in cfg.eval_cnrs]
    results = evaluation.evaluate_sweep(models, datasets)
    paths = _paths(cfg)
    paths["out"].mkdir(parents=True, exist_ok=True)
    evaluation.write_results_csv(results, paths["results"])
    if args.per_sample:
        for model in models:
            for ds in datasets:
                name = f"samples_{model.name}_cnr{ds.cnr_db:g}.csv"
                evaluation.write_per_sample_csv(model, ds, paths["out"] / name)
    _write_resolved(cfg)
    _print_results_table(results)
    print(f"wrote {paths['results']}")
    return EXIT_OK


def _print_results_table(results) -> None:
    """NMSE(dB) table: one row per CNR, one column per model."""
    names = sorted({r.model for r in results})
    cnrs = sorted({r.cnr_db for r in results})
    cell = {(r.model, r.cnr_db): r.nmse_db for r in results}
    width = max(12, max(len(n) for n in names) + 2)
    print("NMSE (dB) by CNR and model")
    print("CNR(dB)".ljust(9) + "".join(n.rjust(width) for n in names))
    for c in cnrs:
        row = f"{c:<9g}"
        for n in names:
            v = cell.get((n, c))
            row += (f"{v:.2f}" if v is not None else "-").rjust(width)
        print(row)


def cmd_count_params(cfg, args) -> int:
    shown = [cfg.gamma] + [g for g in model.REFERENCE_TOTALS if g != cfg.gamma]
    for gamma in shown:
        mcfg = cfg.model_config(gamma)
        counts = model.count_params(mcfg)
        print(f"gamma={evaluation.format_gamma(gamma)} (codeword length {mcfg.codeword_len}):")
        print(f"  denoiser conv {counts.denoiser_conv:>9,}")
        print(f"  encoder conv  {counts.encoder_conv:>9,}   encoder dense {counts.encoder_dense:>9,}")
        print(f"  decoder conv  {counts.decoder_conv:>9,}   decoder dense {counts.decoder_dense:>9,}")
        print(f"  conv+dense    {counts.conv_dense_total:>9,}   norm aux {counts.norm_aux:,}"
              f"   total {counts.total:,}")
        ref = model.REFERENCE_TOTALS.get(gamma)
        if ref is not None:
            ok = "match" if counts.conv_dense_total == ref - model.REFERENCE_AUX else "MISMATCH"
            print(f"  reference     {ref:>9,} - {model.REFERENCE_AUX:,} aux = "
                  f"{ref - model.REFERENCE_AUX:,} ({ok})")
    return EXIT_OK


def _write_grid(path: Path, grid: np.ndarray) -> None:
    with open(path, "w") as f:
        for row in np.asarray(grid):
            f.write(",".join(repr(float(v)) for v in row) + "\n")


def cmd_codec(cfg, args) -> int:
    fb = _load_feedback_model(cfg, cfg.gamma)
    source = Path(args.input) if args.input else _paths(cfg)["test"]
    if not source.exists():
        raise DataError(f"missing input sample file; expected it at {source}")
    ds = channel.read_dataset(source)
    if not 0 <= args.index < len(ds):
        raise DataError(f"sample index {args.index} outside [0, {len(ds)})")
    inp = ds.inputs[args.index:args.index + 1]
    lab = ds.labels[args.index:args.index + 1]
    scale = float(ds.scales[args.index])
    denoised = fb.denoise(inp)
    codeword = fb.encode(denoised)
    decoded = fb.decode(codeword)
    out = _paths(cfg)["out"]
    out.mkdir(parents=True, exist_ok=True)
    for tag, arr in (("noisy", inp), ("denoised", denoised), ("decoded", decoded)):
        mat = channel.recombine(arr[0], scale)
        _write_grid(out / f"codec_{tag}_mag.csv", np.abs(mat))
        _write_grid(out / f"codec_{tag}_real.csv", mat.real)
        _write_grid(out / f"codec_{tag}_imag.csv", mat.imag)
    _write_grid(out / "codec_codeword.csv", codeword)
    scales = ds.scales[args.index:args.index + 1]
    print(f"codeword length {codeword.shape[1]}")
    print(f"input NMSE      {evaluation.nmse(inp, lab, scales).db:.2f} dB")
    print(f"denoised NMSE   {evaluation.nmse(denoised, lab, scales).db:.2f} dB")
    print(f"decoded NMSE    {evaluation.nmse(decoded, lab, scales).db:.2f} dB")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "count-params": cmd_count_params,
    "codec": cmd_codec,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="configuration file to start from")
    common.add_argument("--profile", choices=expconfig.PROFILES,
                        help="defaults profile (desk: small fast runs; paper: full scale)")
    common.add_argument("--seed", type=int, metavar="U64", help="override the master seed")
    common.add_argument("--out", metavar="DIR", help="override the output directory")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration value (repeatable)")
    parser = argparse.ArgumentParser(prog="csicomp", parents=[common],
                                     description="noisy-CSI feedback compression lab")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate train/val/test datasets")
    p_train = sub.add_parser("train", parents=[common], help="train the networks")
    p_train.add_argument("--stage", choices=expconfig.STAGE_CHOICES,
                         help="override the configured training mode")
    p_train.add_argument("--resume", action="store_true",
                         help="continue from the last per-epoch checkpoint")
    p_train.add_argument("--init-denoiser", metavar="CKPT",
                         help="end-to-end only: start from these denoiser weights")
    p_eval = sub.add_parser("eval", parents=[common], help="evaluate NMSE over the CNR sweep")
    p_eval.add_argument("--baseline", choices=expconfig.BASELINE_CHOICES,
                        help="add a pass-through baseline row")
    p_eval.add_argument("--per-sample", action="store_true",
                        help="also dump per-sample NMSE distributions")
    sub.add_parser("count-params", parents=[common], help="print the parameter breakdown")
    p_codec = sub.add_parser("codec", parents=[common], help="run one sample through the chain")
    p_codec.add_argument("--input", metavar="PATH", help="dataset file holding the sample")
    p_codec.add_argument("--index", type=int, default=0, help="sample index in the file")
    return parser


def resolve_config(args) -> expconfig.ExperimentConfig:
    pairs = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"config file not found: {path}")
        pairs = expconfig.parse_pairs(path.read_text())
    profile = args.profile or pairs.get(("experiment", "profile"), "desk")
    cfg = expconfig.default_config(profile)
    cfg = expconfig.apply_pairs(cfg, pairs)
    if args.profile:
        cfg = expconfig.apply_pairs(cfg, {("experiment", "profile"): args.profile})
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"--set wants SECTION.KEY=VALUE, got {item!r}")
        section, _, name = key.strip().partition(".")
        overrides[(section.strip(), name.strip())] = value.strip()
    cfg = expconfig.apply_pairs(cfg, overrides)
    if args.seed is not None:
        cfg = expconfig.apply_pairs(cfg, {("experiment", "master_seed"): str(args.seed)})
    if args.out is not None:
        cfg = expconfig.apply_pairs(cfg, {("experiment", "out_dir"): args.out})
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, DimensionError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, StateError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CsiError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
