"""Command-line entry point: ``hvdpo <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Diagnostics go to
stderr; results go to the files named by flags.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import data as D
from . import gradcheck
from .denoiser import init_params
from .metrics import build_report
from .training import (
    TrainConfig,
    load_checkpoint,
    run_inference,
    run_inversion,
    save_checkpoint,
    train_stage_a,
    train_stage_b,
    write_log,
)

logger = logging.getLogger("hvdpo")

PATH_KEYS = ("data", "pairs", "ref", "out")
TRAIN_FLAGS = ("lr", "iterations", "batch_size", "beta", "weight_decay", "hidden", "lora_rank", "lora_alpha")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def read_config_file(path) -> dict[str, str]:
    """``key = value`` lines, ``#`` comments. Unknown keys are rejected by the caller."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            out[key.strip()] = val.strip()
    return out


def _resolve_train(args, stage: str) -> tuple[TrainConfig, dict[str, str]]:
    raw = read_config_file(args.config) if args.config else {}
    paths = {k: raw.pop(k) for k in PATH_KEYS if k in raw}
    if "stage" in raw and raw.pop("stage") != stage:
        raise UsageError(f"config file is for a different stage than train-{stage.lower()}")
    for key in TRAIN_FLAGS:
        val = getattr(args, key, None)
        if val is not None:
            raw[key] = val
    raw["seed"] = args.seed
    try:
        cfg = TrainConfig.from_mapping({"stage": stage, **raw})
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    for key in PATH_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            paths[key] = str(val)
    return cfg, paths


def _write_resolved(out: Path, cfg: TrainConfig, paths: dict[str, str]) -> None:
    lines = cfg.resolved_lines() + [f"{k} = {paths[k]}" for k in sorted(paths)]
    Path(str(out) + ".config").write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info("resolved config:\n%s", "\n".join(lines))


def _require(paths: dict[str, str], key: str) -> str:
    if key not in paths:
        raise UsageError(f"missing required flag --{key}")
    return paths[key]


def _load(path) -> list[D.VideoRecord]:
    """A dataset directory (uses its index.tsv) or an index file such as ``score`` output."""
    path = Path(path)
    if path.is_file():
        return D.load_dataset(path.parent, path.name)
    return D.load_dataset(path)


# --------------------------------------------------------------------------- subcommands


def cmd_gen_toy(args) -> None:
    out = Path(args.out)
    shape = (args.frames, args.channels, args.height, args.width)
    records = D.gen_toy_videos(args.kind, args.count, args.condition, args.seed, args.quality, shape, args.prefix)
    entries = []
    if args.append and (out / "index.tsv").exists():
        entries = D.read_index(out / "index.tsv")
    taken = {e.id for e in entries}
    (out / "videos").mkdir(parents=True, exist_ok=True)
    for r in records:
        if r.id in taken:
            raise ValueError(f"video id {r.id!r} already in {out / 'index.tsv'}")
        rel = f"videos/{r.id}.hvdp"
        D.write_video(out / rel, r.frames)
        entries.append(D.IndexEntry(r.id, r.condition, rel, r.score))
    D.write_index(out / "index.tsv", entries)
    logger.info("wrote %d videos to %s", len(records), out)


def cmd_score(args) -> None:
    entries, warnings = D.ingest_scores(args.data, args.scores)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    src = Path(args.data).resolve()
    rebased = [
        D.IndexEntry(e.id, e.condition, os.path.relpath(src / e.path, out.parent.resolve()), e.score) for e in entries
    ]
    D.write_index(out, rebased)
    logger.info("scored %d of %d videos (%d warnings)", sum(e.score is not None for e in entries), len(entries), len(warnings))


def cmd_pair(args) -> None:
    records = _load(args.data)
    index = D.build_pairs(records, args.n_pairs, args.seed)
    D.write_pairs(args.out, index)
    logger.info("wrote %d pairs to %s", len(index), args.out)


def cmd_train_a(args) -> None:
    cfg, paths = _resolve_train(args, "A")
    data_dir, out = _require(paths, "data"), Path(_require(paths, "out"))
    records = _load(data_dir)
    init = init_params(args.init_seed if args.init_seed is not None else cfg.seed, cfg.arch())
    res = train_stage_a(cfg, records, init)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, res.checkpoint)
    write_log(str(out) + ".log.tsv", res.history, "A")
    _write_resolved(out, cfg, paths)


def cmd_train_b(args) -> None:
    cfg, paths = _resolve_train(args, "B")
    data_dir, out = _require(paths, "data"), Path(_require(paths, "out"))
    base = load_checkpoint(_require(paths, "ref"), include_lora=False)
    # architecture and noise schedule always follow the reference checkpoint
    sched = base.schedule()
    cfg = replace(cfg, **asdict(base.config), T=sched.T, beta_start=float(sched.betas[0]), beta_end=float(sched.betas[-1]))
    pairs = D.read_pairs(_require(paths, "pairs"))
    records = _load(data_dir)
    res = train_stage_b(cfg, pairs, records, base)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, res.checkpoint)
    write_log(str(out) + ".log.tsv", res.history, "B")
    _write_resolved(out, cfg, paths)


def cmd_invert(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    video = D.normalize_frames(D.read_video(args.video))
    latent = run_inversion(ckpt, video, args.cond, args.steps, refine_iters=args.refine)
    D.write_video(args.out, latent)


def _first_frame(args, shape) -> np.ndarray:
    if args.first_frame:
        return D.normalize_frames(D.read_video(args.first_frame))[0]
    if args.toy_kind:
        return D.gen_toy_videos(args.toy_kind, 1, args.cond, args.toy_seed, 1.0, shape)[0].frames[0]
    raise UsageError("sample needs --first-frame or --toy-kind")


def cmd_sample(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    first = _first_frame(args, ckpt.config.video_shape)
    out = Path(args.out)
    (out / "videos").mkdir(parents=True, exist_ok=True)
    entries = []
    for k in range(args.count):
        video = run_inference(ckpt, first, args.cond, args.steps, args.seed + k)
        vid = f"sample-s{args.seed + k}"
        D.write_video(out / "videos" / f"{vid}.hvdp", video)
        entries.append(D.IndexEntry(vid, args.cond, f"videos/{vid}.hvdp", None))
    D.write_index(out / "index.tsv", entries)


def cmd_eval(args) -> None:
    records = _load(args.data)
    meta = {"dataset": str(args.data)}
    for item in args.meta or []:
        k, sep, v = item.partition("=")
        if not sep:
            raise UsageError(f"--meta expects key=value, got {item!r}")
        meta[k] = v
    report = build_report([(r.id, r.frames) for r in records], meta)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json(), encoding="utf-8")
    out.with_suffix(".tsv").write_text(report.to_tsv(), encoding="utf-8")


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(args.seed, args.instances, log=lambda s: print(s, file=sys.stderr))
    if args.out:
        Path(args.out).write_text(
            "".join(f"{r.name}\t{r.instances}\t{r.max_rel_error!r}\t{'pass' if r.passed else 'fail'}\n" for r in results),
            encoding="utf-8",
        )
    return 0 if all(r.passed for r in results) else 2


def cmd_show_checkpoint(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    for k in sorted(ckpt.metadata):
        print(f"{k}: {ckpt.metadata[k]}")
    print(f"architecture: {ckpt.config}")
    tensors = dict(ckpt.params)
    if ckpt.lora is not None:
        print(f"lora: rank={ckpt.lora.rank} alpha={ckpt.lora.alpha}")
        tensors.update(ckpt.lora.tensors())
    for name in sorted(tensors):
        print(f"  {name:<16} {tuple(tensors[name].shape)}")


# --------------------------------------------------------------------------- parser


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value run config; flags override it")
    p.add_argument("--data", help="dataset directory or index file")
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--lr", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hvdpo", description="Video DPO on a desk-scale diffusion model.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-toy", help="generate synthetic scored videos")
    p.add_argument("--kind", choices=D.TOY_KINDS, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--quality", type=float, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--condition", type=int, default=0)
    p.add_argument("--prefix")
    p.add_argument("--append", action="store_true", help="add to an existing index.tsv in --out")
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--height", type=int, default=16)
    p.add_argument("--width", type=int, default=16)
    p.set_defaults(func=cmd_gen_toy)

    p = sub.add_parser("score", help="attach id,score rows to a dataset index")
    p.add_argument("--data", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True, help="path of the updated index.tsv")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("pair", help="build random preference pairs")
    p.add_argument("--data", required=True)
    p.add_argument("--n-pairs", dest="n_pairs", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pair)

    p = sub.add_parser("train-a", help="stage A: denoising training")
    _train_flags(p)
    p.add_argument("--hidden", type=int)
    p.add_argument("--init-seed", dest="init_seed", type=int)
    p.set_defaults(func=cmd_train_a)

    p = sub.add_parser("train-b", help="stage B: DPO fine-tuning of a LoRA adapter")
    _train_flags(p)
    p.add_argument("--pairs")
    p.add_argument("--ref", help="stage-A checkpoint; frozen reference and base")
    p.add_argument("--lora-rank", dest="lora_rank", type=int)
    p.add_argument("--lora-alpha", dest="lora_alpha", type=float)
    p.set_defaults(func=cmd_train_b)

    p = sub.add_parser("invert", help="DDIM-invert a video to a noise latent")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--video", required=True)
    p.add_argument("--cond", type=int, default=0)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--refine", type=int, default=2, help="fixed-point iterations per inversion step")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("sample", help="generate videos from a clean first frame")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--first-frame", dest="first_frame", help="video file whose frame 0 is used")
    p.add_argument("--toy-kind", dest="toy_kind", choices=D.TOY_KINDS)
    p.add_argument("--toy-seed", dest="toy_seed", type=int, default=0)
    p.add_argument("--cond", type=int, default=0)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="SSIM/MSE consistency report")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="report JSON path (TSV summary written alongside)")
    p.add_argument("--meta", action="append", help="key=value metadata, repeatable")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all primitives and the DPO loss")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("show-checkpoint", help="print checkpoint metadata and tensor shapes")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_show_checkpoint)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("HVDPO_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.INFO), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def dispatch(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        rc = args.func(args)
        return rc if isinstance(rc, int) else 0
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        logger.debug("failure", exc_info=True)
        print(f"hvdpo: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
