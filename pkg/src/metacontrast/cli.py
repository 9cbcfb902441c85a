"""Command-line entry points.

Subcommands: generate (build a corpus file), train (one training run),
eval (re-score a checkpoint), ablate (component and mixing-weight
sweeps), gradcheck (finite-difference verification). Config values
resolve as defaults < config file < command-line flags, and every output
artifact embeds the resolved configuration, so a run can be reproduced
from any of its outputs.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

from .ablation import (COMPONENT_VARIANTS, SweepSettings, aggregate_rows, alpha_variants,
                       plot_loss_curves, plot_metric_bars, run_matrix, table_text)
from .checkpoint import load_params, save_params
from .encoder import EncoderConfig
from .evaluation import evaluate_split
from .gradcheck import SCOPES, format_report, run_suites
from .seeding import derive_seed
from .synth import generate_corpus, load_corpus, save_corpus, split_support_query
from .trainer import TrainConfig, config_echo, train

__all__ = ["main"]

GENERATE_FIELDS: dict[str, object] = {
    "classes": 8,
    "clips_per_class": 24,
    "frames": 8,
    "height": 16,
    "width": 16,
    "channels": 1,
    "noise_std": 0.005,
    "seed": 0,
}

TRAIN_FIELDS: dict[str, object] = {
    "mode": "meta",
    "alpha": 0.2,
    "lr_inner": 0.1,
    "lr_meta": 0.1,
    "batch_size": 8,
    "epochs": 20,
    "iters_per_epoch": 0,
    "tau": 0.1,
    "k": 0,
    "meta_order": "first-order",
    "seed": 0,
    "bank_mode": "in-batch",
    "bank_capacity": 512,
    "symmetric_nce": True,
    "pair_policy": "derangement",
    "mirrored_pairs": False,
    "inner_steps": 1,
    "freeze_head_inner": False,
    "eval_every": 0,
    "hidden_width": 32,
    "embed_dim": 16,
    "init_scale": 1.0,
    "shared_views": True,
    "support_fraction": 0.5,
    "eval_train_fraction": 0.5,
    "probe_iters": 300,
    "probe_lr": 0.5,
    "ks": "1,5,10,20,50",
}

EVAL_FIELDS: dict[str, object] = {
    "probe_iters": 300,
    "probe_lr": 0.5,
    "probe_seed": 0,
    "ks": "1,5,10,20,50",
}

ABLATE_FIELDS: dict[str, object] = {
    key: value for key, value in TRAIN_FIELDS.items() if key != "mode"
}
ABLATE_FIELDS.update({
    "seeds": "0,1,2,3,4",
    "part": "both",
    "alphas": "0.1,0.2,0.3,0.4",
    "workers": 1,
})

GRADCHECK_FIELDS: dict[str, object] = {
    "scope": "all",
    "cases": 20,
    "seed": 0,
}

MODES = {
    "meta": (True, True),
    "combined": (True, False),
    "baseline": (False, False),
}


def _fmt(value) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def read_config_file(path: str) -> dict[str, str]:
    """Flat ``key = value`` lines; blank lines and # comments ignored."""
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, _, text = line.partition("=")
            values[key.strip()] = text.strip()
    return values


def _coerce(key: str, text: str, kind: type):
    if kind is bool:
        lowered = text.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"config key {key!r}: cannot read {text!r} as a boolean")
    try:
        return kind(text)
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot read {text!r} as {kind.__name__}") from None


def resolve_config(fields: dict[str, object], args: argparse.Namespace) -> dict[str, object]:
    resolved = dict(fields)
    config_path = getattr(args, "config", None)
    if config_path:
        for key, text in read_config_file(config_path).items():
            if key not in fields:
                raise ValueError(f"unknown config key {key!r} (valid: {', '.join(sorted(fields))})")
            resolved[key] = _coerce(key, text, type(fields[key]))
    for key in fields:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _parse_ints(text: str, what: str) -> tuple[int, ...]:
    try:
        return tuple(int(part.strip()) for part in str(text).split(",") if part.strip())
    except ValueError:
        raise ValueError(f"cannot parse {what} list {text!r}") from None


def _parse_floats(text: str, what: str) -> tuple[float, ...]:
    try:
        return tuple(float(part.strip()) for part in str(text).split(",") if part.strip())
    except ValueError:
        raise ValueError(f"cannot parse {what} list {text!r}") from None


def _add_field_args(parser: argparse.ArgumentParser, fields: dict[str, object]) -> None:
    for name, default in fields.items():
        flag = "--" + name.replace("_", "-")
        if isinstance(default, bool):
            parser.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction,
                                default=None, help=f"default {default}")
        elif isinstance(default, int):
            parser.add_argument(flag, dest=name, type=int, default=None,
                                help=f"default {default}")
        elif isinstance(default, float):
            parser.add_argument(flag, dest=name, type=float, default=None,
                                help=f"default {default}")
        else:
            parser.add_argument(flag, dest=name, type=str, default=None,
                                help=f"default {default!r}")


def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args: argparse.Namespace) -> int:
    resolved = resolve_config(GENERATE_FIELDS, args)
    clips = generate_corpus(
        n_classes=int(resolved["classes"]),
        clips_per_class=int(resolved["clips_per_class"]),
        n_view_frames=int(resolved["frames"]),
        h=int(resolved["height"]), w=int(resolved["width"]), c=int(resolved["channels"]),
        seed=int(resolved["seed"]), noise_std=float(resolved["noise_std"]),
    )
    save_corpus(args.out, clips)
    histogram: dict[int, int] = {}
    for clip in clips:
        histogram[clip.label] = histogram.get(clip.label, 0) + 1
    lines = [f"config.{key} = {_fmt(resolved[key])}" for key in sorted(resolved)]
    lines.append(f"n_clips = {len(clips)}")
    lines.append(f"n_classes = {len(histogram)}")
    n_frames, h, w, c = clips[0].frames.shape
    lines.append(f"raw_frames_per_clip = {n_frames}")
    lines.append(f"view_frames_per_clip = {n_frames - 1}")
    lines.append(f"frame_height = {h}")
    lines.append(f"frame_width = {w}")
    lines.append(f"frame_channels = {c}")
    for label in sorted(histogram):
        lines.append(f"class_{label} = {histogram[label]}")
    _write_text(args.out + ".summary", "\n".join(lines) + "\n")
    print(f"wrote {args.out}: {len(clips)} clips, {len(histogram)} classes")
    return 0


def _build_configs(resolved: dict[str, object], dims: tuple[int, int, int, int],
                   mode: str) -> tuple[TrainConfig, EncoderConfig]:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}, expected one of {sorted(MODES)}")
    use_bl, use_meta_stages = MODES[mode]
    alpha = 0.0 if mode == "baseline" else float(resolved["alpha"])
    cfg = TrainConfig(
        alpha=alpha,
        lr_inner=float(resolved["lr_inner"]),
        lr_meta=float(resolved["lr_meta"]),
        batch_size=int(resolved["batch_size"]),
        epochs=int(resolved["epochs"]),
        iters_per_epoch=int(resolved["iters_per_epoch"]),
        tau=float(resolved["tau"]),
        k=int(resolved["k"]),
        meta_order=str(resolved["meta_order"]),
        seed=int(resolved["seed"]),
        use_bl=use_bl,
        use_meta_stages=use_meta_stages,
        bank_mode=str(resolved["bank_mode"]),
        bank_capacity=int(resolved["bank_capacity"]),
        symmetric_nce=bool(resolved["symmetric_nce"]),
        pair_policy=str(resolved["pair_policy"]),
        mirrored_pairs=bool(resolved["mirrored_pairs"]),
        inner_steps=int(resolved["inner_steps"]),
        freeze_head_inner=bool(resolved["freeze_head_inner"]),
        eval_every=int(resolved["eval_every"]),
    )
    enc_config = EncoderConfig(
        input_dims=dims,
        hidden_width=int(resolved["hidden_width"]),
        embed_dim=int(resolved["embed_dim"]),
        init_scale=float(resolved["init_scale"]),
        shared_views=bool(resolved["shared_views"]),
    )
    return cfg, enc_config


def _corpus_dims(clips) -> tuple[int, int, int, int]:
    n_frames, h, w, c = clips[0].frames.shape
    return (n_frames - 1, h, w, c)


def cmd_train(args: argparse.Namespace) -> int:
    resolved = resolve_config(TRAIN_FIELDS, args)
    clips = load_corpus(args.corpus)
    mode = str(resolved["mode"])
    cfg, enc_config = _build_configs(resolved, _corpus_dims(clips), mode)
    split = split_support_query(clips, float(resolved["support_fraction"]),
                                derive_seed(cfg.seed, "split"),
                                float(resolved["eval_train_fraction"]))
    params, record = train(cfg, enc_config, split)
    echo = dict(record.config)
    echo["cli.mode"] = mode
    echo["data.corpus"] = args.corpus
    echo["data.support_fraction"] = float(resolved["support_fraction"])
    echo["data.eval_train_fraction"] = float(resolved["eval_train_fraction"])
    echo["eval.probe_iters"] = int(resolved["probe_iters"])
    echo["eval.probe_lr"] = float(resolved["probe_lr"])
    echo["eval.ks"] = str(resolved["ks"])
    record.config = echo

    os.makedirs(args.out_dir, exist_ok=True)
    checkpoint_path = os.path.join(args.out_dir, "checkpoint.bin")
    checkpoint_id = save_params(checkpoint_path, params, echo)
    _write_text(os.path.join(args.out_dir, "losses.log"), record.loss_log_text())
    report = evaluate_split(
        params, enc_config, split,
        ks=_parse_ints(resolved["ks"], "ks"),
        probe_iters=int(resolved["probe_iters"]), probe_lr=float(resolved["probe_lr"]),
        probe_seed=derive_seed(cfg.seed, "probe"),
        checkpoint_id=checkpoint_id,
        extra={key: _fmt(value) for key, value in echo.items()},
    )
    _write_text(os.path.join(args.out_dir, "eval.txt"), report.to_text())
    summary = [f"{key} = {_fmt(value)}" for key, value in sorted(echo.items())]
    summary.append(f"checkpoint_id = {checkpoint_id}")
    summary.append(f"iterations = {len(record.iterations)}")
    summary.append(f"result.probe_top1 = {report.probe_top1!r}")
    for k in sorted(report.retrieval):
        summary.append(f"result.retrieval_top{k} = {report.retrieval[k]!r}")
    summary.append(f"wall_time_s = {record.wall_time_s!r}")
    _write_text(os.path.join(args.out_dir, "summary.txt"), "\n".join(summary) + "\n")
    print(f"checkpoint {checkpoint_id} after {len(record.iterations)} iterations")
    print(f"probe_top1 = {report.probe_top1!r}")
    for k in sorted(report.retrieval):
        print(f"retrieval_top{k} = {report.retrieval[k]!r}")
    return 0


def _encoder_from_echo(echo: dict) -> EncoderConfig:
    try:
        dims = tuple(int(x) for x in str(echo["encoder.input_dims"]).split("x"))
        return EncoderConfig(
            input_dims=dims,  # type: ignore[arg-type]
            hidden_width=int(echo["encoder.hidden_width"]),
            embed_dim=int(echo["encoder.embed_dim"]),
            init_scale=float(echo["encoder.init_scale"]),
            shared_views=bool(echo["encoder.shared_views"]),
        )
    except KeyError as missing:
        raise ValueError(f"checkpoint config echo lacks {missing}; not a training checkpoint?") from None


def cmd_eval(args: argparse.Namespace) -> int:
    resolved = resolve_config(EVAL_FIELDS, args)
    params, echo, checkpoint_id = load_params(args.checkpoint)
    clips = load_corpus(args.corpus)
    enc_config = _encoder_from_echo(echo)
    corpus_dims = _corpus_dims(clips)
    if corpus_dims != tuple(enc_config.input_dims):
        raise ValueError(
            f"checkpoint encodes views of dims {tuple(enc_config.input_dims)} "
            f"but corpus {args.corpus!r} provides {corpus_dims}"
        )
    train_seed = int(echo.get("train.seed", 0))
    split = split_support_query(
        clips,
        float(echo.get("data.support_fraction", 0.5)),
        derive_seed(train_seed, "split"),
        float(echo.get("data.eval_train_fraction", 0.5)),
    )
    extra = {key: _fmt(value) for key, value in echo.items()}
    extra["eval.checkpoint"] = args.checkpoint
    extra["eval.corpus"] = args.corpus
    for key in EVAL_FIELDS:
        extra[f"eval.{key}"] = _fmt(resolved[key])
    report = evaluate_split(
        params, enc_config, split,
        ks=_parse_ints(resolved["ks"], "ks"),
        probe_iters=int(resolved["probe_iters"]), probe_lr=float(resolved["probe_lr"]),
        probe_seed=int(resolved["probe_seed"]),
        checkpoint_id=checkpoint_id, extra=extra,
    )
    text = report.to_text()
    if args.out:
        _write_text(args.out, text)
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    resolved = resolve_config(ABLATE_FIELDS, args)
    clips = load_corpus(args.corpus)
    base_cfg, enc_config = _build_configs(resolved, _corpus_dims(clips), "meta")
    settings = SweepSettings(
        support_fraction=float(resolved["support_fraction"]),
        eval_train_fraction=float(resolved["eval_train_fraction"]),
        probe_iters=int(resolved["probe_iters"]),
        probe_lr=float(resolved["probe_lr"]),
        ks=_parse_ints(resolved["ks"], "ks"),
    )
    seeds = _parse_ints(resolved["seeds"], "seeds")
    if not seeds:
        raise ValueError("need at least one seed")
    part = str(resolved["part"])
    if part not in ("components", "alpha", "both"):
        raise ValueError(f"unknown part {part!r}, expected components, alpha, or both")
    workers = int(resolved["workers"])
    echo = config_echo(base_cfg, enc_config)
    echo["data.corpus"] = args.corpus
    echo["ablate.seeds"] = str(resolved["seeds"])
    echo["ablate.part"] = part
    for key in ("support_fraction", "eval_train_fraction", "probe_iters", "probe_lr", "ks"):
        echo[f"data.{key}"] = _fmt(resolved[key])
    os.makedirs(args.out_dir, exist_ok=True)

    def metrics_of(outcomes):
        names = list(outcomes[0].metrics)
        return tuple(sorted(names, key=lambda n: (n != "probe_top1", len(n), n)))

    summary_lines = [f"{key} = {_fmt(value)}" for key, value in sorted(echo.items())]
    if part in ("components", "both"):
        outcomes = run_matrix(clips, base_cfg, enc_config, COMPONENT_VARIANTS,
                              seeds, settings, workers=workers)
        rows = aggregate_rows(outcomes, metrics_of(outcomes))
        _write_text(os.path.join(args.out_dir, "components.tsv"), table_text(rows, echo))
        plot_loss_curves(outcomes, os.path.join(args.out_dir, "loss_curves.png"))
        plot_metric_bars(rows, "retrieval_top1", os.path.join(args.out_dir, "ablation_bars.png"))
        for row in rows:
            if row["metric"] in ("probe_top1", "retrieval_top1"):
                line = (f"components {row['variant']} {row['metric']}: "
                        f"median {row['median']!r} (min {row['min']!r}, max {row['max']!r})")
                summary_lines.append(line)
                print(line)
        summary_lines.append(
            "components_wall_time_s = " + repr(sum(oc.wall_time_s for oc in outcomes)))
    if part in ("alpha", "both"):
        alphas = _parse_floats(resolved["alphas"], "alphas")
        outcomes = run_matrix(clips, base_cfg, enc_config, alpha_variants(alphas),
                              seeds, settings, workers=workers)
        rows = aggregate_rows(outcomes, metrics_of(outcomes))
        _write_text(os.path.join(args.out_dir, "alpha_sweep.tsv"), table_text(rows, echo))
        plot_metric_bars(rows, "probe_top1", os.path.join(args.out_dir, "alpha_sweep_bars.png"))
        for row in rows:
            if row["metric"] == "probe_top1":
                line = (f"alpha sweep {row['variant']} probe_top1: "
                        f"median {row['median']!r} (min {row['min']!r}, max {row['max']!r})")
                summary_lines.append(line)
                print(line)
    summary_lines.append(f"total_wall_time_s = {time.perf_counter() - started!r}")
    _write_text(os.path.join(args.out_dir, "summary.txt"), "\n".join(summary_lines) + "\n")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    resolved = resolve_config(GRADCHECK_FIELDS, args)
    scope = str(resolved["scope"])
    scopes = SCOPES if scope == "all" else (scope,)
    cases = run_suites(scopes, cases_per_op=int(resolved["cases"]),
                       base_seed=int(resolved["seed"]))
    header = [f"# {key} = {_fmt(resolved[key])}" for key in sorted(resolved)]
    text = "\n".join(header) + "\n" + format_report(cases)
    print(text, end="")
    if args.out:
        _write_text(args.out, text)
    return 0 if all(case.passed for case in cases) else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metacontrast",
        description="two-view contrastive training with a meta-learned pairing branch",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a synthetic corpus to a file")
    p.add_argument("--out", required=True, help="corpus file to write")
    p.add_argument("--config", default=None, help="key = value config file")
    _add_field_args(p, GENERATE_FIELDS)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="run one training configuration")
    p.add_argument("--corpus", required=True, help="corpus file from 'generate'")
    p.add_argument("--out-dir", required=True, help="directory for checkpoint and logs")
    p.add_argument("--config", default=None, help="key = value config file")
    _add_field_args(p, TRAIN_FIELDS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="probe and retrieval scores for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", default=None, help="report file (default: stdout)")
    p.add_argument("--config", default=None, help="key = value config file")
    _add_field_args(p, EVAL_FIELDS)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="component rows and mixing-weight sweep")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", default=None, help="key = value config file")
    _add_field_args(p, ABLATE_FIELDS)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--out", default=None, help="report file (also printed)")
    p.add_argument("--config", default=None, help="key = value config file")
    _add_field_args(p, GRADCHECK_FIELDS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
