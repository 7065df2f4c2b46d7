"""Command-line entry point: ``kilnseg {generate,train,eval,stream,gradcheck}``."""

from __future__ import annotations

import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")  # single-threaded BLAS keeps runs reproducible

import argparse  # noqa: E402
import hashlib  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

from .errors import CheckpointError, DatasetError, GradientError, KilnSegError  # noqa: E402
from .pipeline.config import MODELS, RunConfig, load_config  # noqa: E402


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key = value file; flags override it")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--model", choices=MODELS)
    parser.add_argument("--loss", choices=("ce", "dice", "tanimoto"))
    parser.add_argument("--weighting", choices=("none", "isv", "isrv"))
    parser.add_argument("--window", type=int, help="running-variance window (default 60)")
    parser.add_argument("--threshold", type=float, help="occlusion threshold (default 0.5)")
    parser.add_argument("--data", help="dataset directory")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--batch-size", dest="batch_size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kilnseg", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("generate", help="write the synthetic dataset, occlusion set and two streams")
    _common(p)
    p.add_argument("--n-pairs", dest="n_pairs", type=int)
    p.add_argument("--occlusion-frames", dest="occlusion_frames", type=int)
    p.add_argument("--stream-frames", dest="stream_frames", type=int)

    p = sub.add_parser("train", help="train one model and write its checkpoint")
    _common(p)
    p.add_argument("--base", help="framewise PSPNet checkpoint (pspnet-lstm only)")
    p.add_argument("--time-budget", dest="time_budget", type=float, help="CPU seconds")

    p = sub.add_parser("eval", help="per-class IoU report on a split")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("train", "val", "test"))

    p = sub.add_parser("stream", help="run the gated slag-fraction monitor over a stream")
    _common(p)
    p.add_argument("--stream", help="stream directory, or a profile name (gradual|removal)")
    p.add_argument("--discriminator")
    p.add_argument("--framewise")
    p.add_argument("--temporal")
    p.add_argument("--tau", type=float)
    p.add_argument("--stream-frames", dest="stream_frames", type=int)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and model")
    _common(p)
    return parser


def _config(args: argparse.Namespace) -> RunConfig:
    values = {k: v for k, v in vars(args).items() if k not in ("verb", "config")}
    return load_config(args.config, **values)


def run_id(cfg: RunConfig, verb: str) -> str:
    """Deterministic id from the configuration, so identical runs write identical logs."""
    payload = json.dumps({"verb": verb, **cfg.with_(out="").as_dict()}, sort_keys=True)
    return hashlib.blake2b(payload.encode(), digest_size=6).hexdigest()


def _dataset_dir(cfg: RunConfig, kind: str) -> Path:
    if cfg.data is None:
        raise DatasetError("--data is required")
    root = Path(cfg.data)
    for candidate in (root / kind, root):
        if (candidate / "manifest.jsonl").exists():
            return candidate
    raise DatasetError(f"no {kind} manifest under {root}")


def _load(path, what: str):
    from .models.checkpoint import load_checkpoint

    if path is None:
        raise CheckpointError(f"--{what} checkpoint is required")
    return load_checkpoint(path)


def cmd_generate(cfg: RunConfig) -> dict:
    from .synthetic import (SceneParams, make_dataset, make_occlusion_dataset, make_stream,
                            manifest_hash, save_stream)

    out = Path(cfg.out)
    params = SceneParams(seed=cfg.seed)
    make_dataset(params, out / "dataset", n_pairs=cfg.n_pairs)
    make_occlusion_dataset(params.with_(occlusion_prob=0.5), out / "occlusion", n_frames=cfg.occlusion_frames)
    stream_params = params.with_(occlusion_prob=cfg.stream_occlusion_prob)
    for profile in ("gradual", "removal"):
        save_stream(make_stream(stream_params, cfg.stream_frames, profile), out / "streams" / profile)
    return {"dataset": str(out / "dataset"), "manifest_sha256": manifest_hash(out / "dataset")}


def cmd_train(cfg: RunConfig) -> dict:
    from .models import ModelConfig, build_pspnet, build_unet_mini, init_lstm_variant_from_base
    from .models.checkpoint import save_checkpoint
    from .occlusion import OcclusionDiscriminator
    from .pipeline import training
    from .synthetic import load_occlusion_split, load_pairs

    out = Path(cfg.out)
    history = out / f"{cfg.model}_history.csv"
    common = dict(epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size, seed=cfg.seed,
                  history_csv=history, time_budget=cfg.time_budget)
    if cfg.model == "discriminator":
        root = _dataset_dir(cfg, "occlusion")
        (x, y), (xv, yv) = load_occlusion_split(root, "train"), load_occlusion_split(root, "val")
        model = OcclusionDiscriminator(seed=cfg.seed)
        result = training.train_discriminator(model, x, y, xv, yv, **common)
    else:
        root = _dataset_dir(cfg, "dataset")
        train, val = load_pairs(root, "train"), load_pairs(root, "val")
        common.update(loss=cfg.loss, weighting=cfg.weighting)
        if cfg.model == "pspnet-lstm":
            model = init_lstm_variant_from_base(_load(cfg.base, "base"))
            result = training.train_temporal(model, train.prev_images, train.cur_images, train.cur_masks,
                                             val.prev_images, val.cur_images, val.cur_masks, **common)
        else:
            build = build_unet_mini if cfg.model == "unet" else build_pspnet
            model = build(ModelConfig(), seed=cfg.seed)
            # only I_t frames are guaranteed unoccluded, so the framewise models see those alone
            result = training.train_segmenter(model, train.cur_images, train.cur_masks,
                                              val.cur_images, val.cur_masks, **common)
    path = save_checkpoint(model, out / f"{cfg.model}.kseg")
    return {"checkpoint": str(path), "history": str(history), "best_epoch": result.best_epoch,
            "best_score": result.best_score}


def cmd_eval(cfg: RunConfig) -> dict:
    from .pipeline.evaluate import evaluate_model, format_table, write_report

    model = _load(cfg.checkpoint, "checkpoint")
    report = evaluate_model(model, _dataset_dir(cfg, "dataset"), cfg.split)
    csv_path, txt_path = write_report(report, cfg.out)
    print(format_table([report]), end="")
    return {"report": str(csv_path), "table": str(txt_path), "slag_iou": report.iou[1],
            "miou": report.miou, "accuracy": report.accuracy}


def cmd_stream(cfg: RunConfig) -> dict:
    from .pipeline.stream import run_stream, write_stream_outputs
    from .synthetic import PROFILES, SceneParams, load_stream, make_stream

    if cfg.stream is None:
        raise DatasetError("--stream is required")
    if cfg.stream in PROFILES and not Path(cfg.stream).exists():
        params = SceneParams(seed=cfg.seed, occlusion_prob=cfg.stream_occlusion_prob)
        frames = list(make_stream(params, cfg.stream_frames, cfg.stream))
    else:
        frames = load_stream(cfg.stream)
    disc = _load(cfg.discriminator, "discriminator")
    framewise = _load(cfg.framewise, "framewise") if cfg.framewise else None
    temporal = _load(cfg.temporal, "temporal") if cfg.temporal else None
    records, summary = run_stream(frames, disc, framewise, temporal, window=cfg.window,
                                  threshold=cfg.threshold, tau=cfg.tau, run_id=run_id(cfg, "stream"))
    log_path, summary_path = write_stream_outputs(records, summary, cfg.out)
    return {"log": str(log_path), "summary": str(summary_path), **summary["models"]}


def cmd_gradcheck(cfg: RunConfig) -> dict:
    from .gradsuite import TOLERANCE, run_gradient_suite

    errors = run_gradient_suite(seed=cfg.seed)
    for name, err in errors.items():
        print(f"{'PASS' if err < TOLERANCE else 'FAIL'} {name} max_rel_error={err:.3e}")
    failed = [n for n, e in errors.items() if not e < TOLERANCE]
    if failed:
        raise GradientError(f"{len(failed)} case(s) above {TOLERANCE}: {', '.join(failed)}")
    return {"cases": len(errors), "max_rel_error": max(errors.values())}


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "stream": cmd_stream,
            "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        result = COMMANDS[args.verb](cfg)
    except KilnSegError as exc:
        print(f"ERROR {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"ERROR {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
