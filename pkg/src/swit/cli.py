"""Command-line entry point: ``swit <command> ...``.

Every command is deterministic given its inputs. Failures print one JSON
line ``{"error": kind, "message": ...}`` on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import torch

from . import evaluation as ev
from .channel_sim import generate_dataset, load_dataset, save_dataset
from .config import RunConfig, from_pairs, load_config, parse_pairs, serialize_config
from .encoder import WiTEncoder
from .errors import InvalidArgument, SwitError
from .trainer import pretrain, seeded_module

log = logging.getLogger("swit")

EXIT_MISSING_FILE = 3
CONFIG_NAME = "config.cfg"


def _config(args, near: Path | None = None) -> RunConfig:
    """--config if given, else config.cfg beside ``near``, else defaults; then --set overrides."""
    path = getattr(args, "config", None)
    if path is None and near is not None and (near / CONFIG_NAME).exists():
        path = near / CONFIG_NAME
    cfg = load_config(path) if path is not None else RunConfig()
    overrides = getattr(args, "set", None) or []
    if overrides:
        cfg = from_pairs(parse_pairs("\n".join(overrides), "--set"), cfg)
    return cfg


def _run_log(out: Path, command: str, started: float) -> None:
    """Wall-clock facts go here, never into the CSV outputs."""
    with open(out / "run.log", "a") as fh:
        stamp = time.strftime("%Y-%m-%dT%H:%M:%S")
        fh.write(f"{stamp} {command} runtime_s={time.perf_counter() - started:.3f}\n")


# --- commands -------------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    cfg = _config(args)
    dataset = generate_dataset(cfg.scenario)
    save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} samples to {args.out}")


def cmd_pretrain(args) -> None:
    cfg = _config(args)
    started = time.perf_counter()
    dataset = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_NAME).write_text(serialize_config(cfg))

    def progress(row):
        if row["step"] % 50 == 0:
            log.info("step %d loss %.4f", row["step"], row["loss_total"])

    pretrain(
        dataset,
        cfg.encoder,
        cfg.trainer,
        cfg.augment,
        seed=cfg.seed,
        out_dir=out,
        max_steps=args.max_steps,
        progress=progress,
    )
    _run_log(out, "pretrain", started)
    print(f"wrote {out / 'target_encoder.ckpt'}")


def _encoder(args, cfg: RunConfig) -> WiTEncoder:
    if getattr(args, "random_init", False):
        encoder = seeded_module(lambda: WiTEncoder(cfg.encoder), cfg.seed)
        encoder.eval()
        return encoder
    return ev.load_encoder(args.ckpt, cfg.encoder)


def _eval_config(args, cfg: RunConfig, mode: str) -> ev.EvalConfig:
    changes = {"mode": mode}
    for name in ("task", "k", "train_size", "test_size", "epochs"):
        value = getattr(args, name, None)
        if value is not None:
            changes[name] = value
    if mode == "knn":
        changes["task"] = "spot"
    return dataclasses.replace(cfg.eval, **changes)


def _emit(args, run: str, config: ev.EvalConfig, result: ev.EvalResult, n_train: int, started: float):
    row = ev.report_row(run, config, result, n_train)
    text = ev.format_csv(ev.REPORT_HEADER, [row])
    if args.out is None:
        sys.stdout.write(text)
        return
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(text)
    (out / "samples.csv").write_text(ev.format_sample_errors(result))
    _run_log(out, run, started)
    sys.stdout.write(text)


def _evaluate(args, mode: str, run: str) -> None:
    started = time.perf_counter()
    near = None if getattr(args, "ckpt", None) is None else Path(args.ckpt).parent
    cfg = _config(args, near)
    dataset = load_dataset(args.data)
    encoder = _encoder(args, cfg)
    config = _eval_config(args, cfg, mode)
    train, _ = ev.split_dataset(dataset, config)
    result = ev.evaluate(encoder, dataset, config)
    _emit(args, run, config, result, len(train), started)


def cmd_linear_eval(args) -> None:
    _evaluate(args, "linear", args.name or "linear")


def cmd_finetune(args) -> None:
    default = "finetune-random" if args.random_init else "finetune"
    _evaluate(args, "finetune", args.name or default)


def cmd_knn(args) -> None:
    _evaluate(args, "knn", args.name or "knn")


def cmd_export_embeddings(args) -> None:
    cfg = _config(args, Path(args.ckpt).parent)
    dataset = load_dataset(args.data)
    encoder = _encoder(args, cfg)
    tokens = ev.downstream_tokens(dataset.channels, dataset.deltas, cfg.eval.token_len)
    emb = ev.extract_embeddings(encoder, tokens)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "spot", "x", "y", "z", "pathloss_db"] + [f"e{i}" for i in range(emb.shape[1])])
    for i in range(len(emb)):
        pos = [repr(float(v)) for v in dataset.positions[i]]
        w.writerow(
            [i, int(dataset.spot_labels[i]), *pos, repr(float(dataset.pathloss_db[i]))]
            + [repr(float(v)) for v in emb[i]]
        )
    Path(args.out).write_text(buf.getvalue())
    print(f"wrote {len(emb)} embeddings to {args.out}")


def _metric_files(paths) -> list[Path]:
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            found = sorted(p.rglob("metrics.csv"))
            if not found:
                raise FileNotFoundError(f"no metrics.csv under {p}")
            files.extend(found)
        elif p.exists():
            files.append(p)
        else:
            raise FileNotFoundError(str(p))
    return files


def merge_reports(paths) -> str:
    """Concatenate metrics CSVs into one table keyed by run name and source."""
    rows = []
    for path in _metric_files(paths):
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != ev.REPORT_HEADER:
                raise InvalidArgument(f"{path}: not a metrics CSV")
            for r in reader:
                rows.append({"source": str(path.parent), **r})
    return ev.format_csv(("source",) + ev.REPORT_HEADER, rows)


def cmd_report(args) -> None:
    text = merge_reports(args.runs)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


# --- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", type=Path, help="key = value config file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        return p

    p = common(sub.add_parser("gen-data", help="simulate a channel dataset"))
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("pretrain", help="self-supervised pretraining"))
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--max-steps", type=int)
    p.set_defaults(func=cmd_pretrain)

    def eval_parser(name, help_text, func, random_init=False):
        p = common(sub.add_parser(name, help=help_text))
        if random_init:
            g = p.add_mutually_exclusive_group(required=True)
            g.add_argument("--ckpt", type=Path)
            g.add_argument("--random-init", action="store_true")
        else:
            p.add_argument("--ckpt", required=True, type=Path)
        p.add_argument("--data", required=True, type=Path)
        p.add_argument("--out", type=Path, help="directory for metrics.csv and samples.csv")
        p.add_argument("--name", help="run name in the metrics table")
        p.add_argument("--train-size", type=int)
        p.add_argument("--test-size", type=int)
        p.set_defaults(func=func)
        return p

    p = eval_parser("linear-eval", "linear probe on frozen embeddings", cmd_linear_eval)
    p.add_argument("--task", choices=ev.TASKS)
    p.add_argument("--epochs", type=int)
    p = eval_parser("finetune", "fine-tune encoder and head", cmd_finetune, random_init=True)
    p.add_argument("--task", choices=ev.TASKS)
    p.add_argument("--epochs", type=int)
    p = eval_parser("knn", "weighted k-NN spot classification", cmd_knn)
    p.add_argument("--k", type=int)

    p = common(sub.add_parser("export-embeddings", help="write LID embeddings as CSV"))
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("report", help="merge metrics CSVs")
    p.add_argument("--runs", nargs="+", required=True, help="metrics.csv files or run directories")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_report)
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    threads = os.environ.get("SWIT_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except SwitError as exc:
        return _fail(exc.kind, str(exc), exc.exit_code)
    except FileNotFoundError as exc:
        return _fail("missing_file", str(exc), EXIT_MISSING_FILE)
    except (IsADirectoryError, PermissionError) as exc:
        return _fail("io_error", str(exc), 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
