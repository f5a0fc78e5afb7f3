"""``voco`` command line: training, compression, inference, evaluation and reports.

Exit codes: 0 ok, 1 mask violations found, 2 configuration or usage error,
3 training failure, 4 format error (corrupt or stale file), 5 protocol mismatch.
Reports are JSON with sorted keys; only ``created_at`` and ``wall_clock_s``
vary between identical runs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from collections import OrderedDict
from pathlib import Path

import numpy as np

from voco import bench as B
from voco import tensor as T
from voco.config import RunConfig, load_config
from voco.data import Batch, gen_dataset, parse_question, write_dataset
from voco.errors import ConfigError, FormatError, ProtocolError, UsageError, VocoError
from voco.layout import AttentionMask, build_layout, build_video_layout, build_voco_mask, validate_mask
from voco.model import load_checkpoint, save_checkpoint
from voco.runtime import compress, deserialize_cache, infer_with_cache, serialize_cache
from voco.temporal import compress_video, deserialize_video, infer_video, serialize_video
from voco.train import (AvgPoolCompressor, QueryFormerCompressor, RetentionReport,
                        compute_retention, continue_train_video, evaluate, make_dataset, retention_experiment,
                        train_baseline, train_upper_bound, train_voco)

SCHEMA_VERSION = 1
TRAIN_KINDS = ("upper", "voco", "baseline-avgpool", "baseline-qformer", "video")
ROLES = ("upper", "lower", "candidate")

log = logging.getLogger("voco")


# ---------------------------------------------------------------- helpers


def _report(command: str, cfg: RunConfig | None, started: float, **body) -> dict:
    out = {"schema_version": SCHEMA_VERSION, "command": command, "created_at": time.time(),
           "wall_clock_s": time.time() - started}
    if cfg is not None:
        out["config"] = cfg.snapshot()
    out.update(body)
    return out


def _emit(report: dict, out_dir: Path, name: str, quiet: bool) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    text = json.dumps(report, indent=2, sort_keys=True)
    path.write_text(text + "\n")
    if not quiet:
        print(text)
    return path


def _save_compressor(comp, path: Path) -> None:
    np.savez(path, kind=np.array(comp.kind), n_heads=np.array(getattr(comp, "n_heads", 1)),
             **{name: t.data for name, t in comp.tensors.items()})


def load_compressor(path: str | Path):
    with np.load(path) as f:
        kind = str(f["kind"])
        tensors = OrderedDict((k, T.Tensor(f[k], requires_grad=True)) for k in f.files if k not in ("kind", "n_heads"))
        n_heads = int(f["n_heads"])
    comp = AvgPoolCompressor(tensors) if kind == "avgpool" else QueryFormerCompressor(tensors)
    comp.n_heads = n_heads
    return comp


def _parse_ids(text: str, what: str) -> np.ndarray:
    try:
        return np.array([int(x) for x in text.replace(",", " ").split()], dtype=np.int64)
    except ValueError:
        raise UsageError(f"{what} must be whitespace-separated integers") from None


def _read_image(spec: str) -> np.ndarray:
    """``spec`` is a list of patch ids, or ``@path`` to a file holding one."""
    if spec.startswith("@"):
        try:
            spec = Path(spec[1:]).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read image file: {exc}") from None
    return _parse_ids(spec, "image")


def _load_model(path: str):
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc}") from None


# ---------------------------------------------------------------- commands


def cmd_train(args, cfg: RunConfig) -> dict:
    started = time.time()
    out = Path(args.out)
    kind = args.kind
    artifacts = {}
    if kind == "video":
        if not args.init:
            raise UsageError("train video needs --init <image-compression checkpoint>")
        task = cfg.task.with_frames(cfg.sweep.video_frames, ("frame",))
        res = continue_train_video(_load_model(args.init), cfg.train.replace(mask_mode="voco"), task)
    else:
        data = make_dataset(cfg.task, cfg.train)
        if kind == "upper":
            res = train_upper_bound(cfg.model, cfg.train.replace(mask_mode="causal"), data)
        elif kind == "voco":
            res = train_voco(cfg.model, cfg.train.replace(mask_mode="voco"), data)
        else:
            res = train_baseline(kind.split("-", 1)[1], cfg.model, cfg.train.replace(mask_mode="causal"), data)
    ckpt = out / f"{kind}.ckpt"
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(res.params, ckpt)
    artifacts["checkpoint"] = str(ckpt)
    if res.compressor is not None:
        comp_path = out / f"{kind}.compressor.npz"
        _save_compressor(res.compressor, comp_path)
        artifacts["compressor"] = str(comp_path)
    body = {"kind": kind, "metrics": res.metrics, "final_loss": res.losses[-1] if res.losses else None,
            "model_fingerprint": f"{res.params.fingerprint():016x}", "artifacts": artifacts}
    return _report("train", cfg, started, **body)


def cmd_compress(args, cfg: RunConfig) -> dict:
    started = time.time()
    params = _load_model(args.checkpoint)
    if args.num_voco < 1:
        raise UsageError("--num-voco must be >= 1")
    images = [_read_image(s) for s in args.image]
    out = Path(args.output)
    if len(images) == 1:
        cache = compress(params, images[0], args.num_voco)
        out.write_bytes(serialize_cache(cache))
        info = {"source_fingerprint": f"{cache.source_fingerprint:016x}", "position_ids": list(cache.position_ids),
                "frames": 1}
    else:
        seq = compress_video(params, images, args.num_voco, text_budget=cfg.task.text_len)
        out.write_bytes(serialize_video(seq))
        info = {"source_fingerprint": [f"{c.source_fingerprint:016x}" for c in seq.frames],
                "position_ids": [list(c.position_ids) for c in seq.frames], "frames": len(images)}
    return _report("compress", None, started, model_fingerprint=f"{params.fingerprint():016x}",
                   num_voco=args.num_voco, bytes=out.stat().st_size, output=str(out), **info)


def _load_caches(path: str):
    buf = Path(path).read_bytes()
    if buf[:4] == b"VCVB":
        return deserialize_video(buf)
    return deserialize_cache(buf)


def cmd_infer(args, cfg: RunConfig) -> dict:
    started = time.time()
    params = _load_model(args.checkpoint)
    try:
        caches = _load_caches(args.cache)
    except OSError as exc:
        raise UsageError(f"cannot read cache {args.cache}: {exc}") from None
    voc = cfg.task.vocab
    prompt = parse_question(cfg.task, args.question) if not args.text_ids else list(_parse_ids(args.text_ids, "text"))
    if hasattr(caches, "frames"):
        logits = infer_video(params, caches, prompt)
        used = caches.context_tokens(len(prompt))
    else:
        logits = infer_with_cache(params, [caches], prompt)
        used = caches.num_voco + len(prompt)
    answer = int(np.argmax(logits[-1])) if len(prompt) else None
    if not args.quiet and answer is not None:
        print(voc.name(answer))
    return _report("infer", None, started, prompt_ids=[int(x) for x in prompt], answer_id=answer,
                   answer=voc.name(answer) if answer is not None else None, context_tokens=used)


def _eval_batch(cfg: RunConfig) -> tuple[Batch, int]:
    data = gen_dataset(cfg.task, 1, cfg.train.seed, cfg.train.eval_count)
    return data.eval, data.eval_hash


def cmd_eval(args, cfg: RunConfig) -> dict:
    started = time.time()
    params = _load_model(args.checkpoint)
    batch, eval_hash = _eval_batch(cfg)
    scores = evaluate(params, batch, args.num_voco or cfg.train.num_voco, args.mask)
    return _report("eval", None, started, role=args.role, name=args.name or args.role, mask=args.mask,
                   scores=scores, eval_hash=f"{eval_hash:016x}", seed=cfg.train.seed,
                   model_fingerprint=f"{params.fingerprint():016x}")


def merge_fragments(fragments: list[dict], task: str = "cell") -> dict:
    """Combine eval fragments into one retention table; all must share an eval set."""
    if not fragments:
        raise UsageError("no fragments given")
    hashes = {f.get("eval_hash") for f in fragments}
    if len(hashes) != 1:
        raise ProtocolError(f"fragments were evaluated on different eval sets: {sorted(map(str, hashes))}")
    by_role: dict[str, list[dict]] = {r: [] for r in ROLES}
    for f in fragments:
        if f.get("role") not in by_role:
            raise ProtocolError(f"fragment has unknown role {f.get('role')!r}")
        by_role[f["role"]].append(f)
    if len(by_role["upper"]) != 1 or len(by_role["lower"]) != 1 or not by_role["candidate"]:
        raise ProtocolError("need exactly one upper, one lower and at least one candidate fragment")
    upper, lower = by_role["upper"][0]["scores"], by_role["lower"][0]["scores"]
    if task not in upper or task not in lower:
        raise ProtocolError(f"fragments lack scores for task {task!r}")
    report = RetentionReport(upper, lower, {f["name"]: f["scores"] for f in by_role["candidate"]})
    rows = []
    for f in by_role["candidate"]:
        value = compute_retention(upper[task], lower[task], f["scores"][task])
        rows.append({"model": f["name"], "score": f["scores"][task], "retention": value,
                     "undefined": value is None})
    return {"task": task, "upper": upper, "lower": lower, "rows": rows, "eval_hash": hashes.pop(),
            "candidates": report.candidates}


def cmd_retention(args, cfg: RunConfig) -> dict:
    started = time.time()
    fragments = []
    for path in args.fragments:
        try:
            fragments.append(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"cannot read fragment {path}: {exc}") from None
    merged = merge_fragments(fragments, args.task)
    if any(r["undefined"] for r in merged["rows"]):
        print("warning: upper == lower, retention undefined", file=sys.stderr)
    return _report("retention", None, started, **merged)


def cmd_bench(args, cfg: RunConfig) -> dict:
    started = time.time()
    scenarios = cfg.bench.scenario_list()
    if not scenarios:
        raise ConfigError("bench.scenarios is empty")
    params = _load_model(args.checkpoint) if args.checkpoint else None
    reports = []
    for sc in scenarios:
        analytic = B.vicuna_report(sc).to_dict()
        model = params or B.timing_model(cfg.train.seed, sc)
        measured = B.bench(model, sc, cfg.bench.repetitions, seed=cfg.train.seed).to_dict()
        reports.append({"scenario": sc.name, "analytic": analytic, "measured": measured})
    return _report("bench", cfg, started, scenarios=reports)


def _retention_rows(report: RetentionReport, task: str) -> list[dict]:
    return [dict(r, undefined=r["retention"] is None) for r in report.rows(task)]


def cmd_sweep(args, cfg: RunConfig) -> dict:
    started = time.time()
    seeds = cfg.sweep.seeds or (cfg.train.seed,)
    runs = []
    for seed in seeds:
        train_cfg = cfg.train.replace(seed=seed)
        report, _ = retention_experiment(cfg.model, train_cfg, cfg.task, cfg.sweep.voco_counts, cfg.sweep.baselines)
        task = cfg.task.kinds[0]
        runs.append({"seed": seed, "upper": report.upper, "lower": report.lower,
                     "rows": _retention_rows(report, task), "eval_hash": f"{report.meta['eval_hash']:016x}"})
    return _report("sweep", cfg, started, runs=runs)


def cmd_gen_data(args, cfg: RunConfig) -> dict:
    started = time.time()
    data = gen_dataset(cfg.task, args.count, cfg.train.seed, cfg.train.eval_count)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(data.train, out / "train.tsv", cfg.task)
    write_dataset(data.eval, out / "eval.tsv", cfg.task)
    return _report("gen-data", cfg, started, train=len(data.train), eval=len(data.eval),
                   eval_hash=f"{data.eval_hash:016x}",
                   artifacts={"train": str(out / "train.tsv"), "eval": str(out / "eval.tsv")})


def cmd_validate_mask(args, cfg: RunConfig) -> dict:
    started = time.time()
    if args.frames > 1:
        layout = build_video_layout([(args.n, args.v)] * args.frames, args.m, args.independent)
    else:
        layout = build_layout(args.n, args.v, args.m)
    if args.mask_file:
        rows = [r.strip() for r in Path(args.mask_file).read_text().splitlines() if r.strip()]
        if any(set(r) - {"0", "1"} for r in rows) or len({len(r) for r in rows}) > 1:
            raise FormatError("mask file must hold equal-length rows of 0/1")
        mask = AttentionMask(np.array([[c == "1" for c in r] for r in rows], dtype=bool))
    else:
        mask = build_voco_mask(layout)
    violations = validate_mask(mask, layout)
    if args.ascii and not args.quiet:
        print(mask.to_ascii())
    return _report("validate-mask", None, started, length=layout.total_len, violations=len(violations),
                   first_violations=[v._asdict() for v in violations[:20]])


# ---------------------------------------------------------------- argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="overrides train.seed")
    common.add_argument("--out", default=".", help="output directory for reports and artifacts")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    common.add_argument("--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="voco", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("kind", choices=TRAIN_KINDS)
    p.add_argument("--init", help="checkpoint to continue from (video)")

    p = sub.add_parser("compress", parents=[common], help="compress image(s) into a cache file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", action="append", required=True, help="patch ids or @file; repeat for video frames")
    p.add_argument("--num-voco", type=int, default=1)
    p.add_argument("--output", required=True)

    p = sub.add_parser("infer", parents=[common], help="answer a question from a cache file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--question", default="cell 0 0", help='e.g. "cell 1 2", "count 0 5", "frame 3"')
    p.add_argument("--text-ids", help="raw text token ids instead of --question")

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint, emitting a retention fragment")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mask", choices=("voco", "causal"), default="voco")
    p.add_argument("--role", choices=ROLES, default="candidate")
    p.add_argument("--name")
    p.add_argument("--num-voco", type=int)

    p = sub.add_parser("retention", parents=[common], help="merge eval fragments into a retention table")
    p.add_argument("fragments", nargs="+")
    p.add_argument("--task", default="cell")

    p = sub.add_parser("bench", parents=[common], help="storage/FLOPs/time efficiency report")
    p.add_argument("--checkpoint")

    sub.add_parser("sweep", parents=[common], help="upper/lower bounds and VoCo models over sweep.voco_counts")

    p = sub.add_parser("gen-data", parents=[common], help="write train/eval dataset files")
    p.add_argument("--count", type=int, default=1000)

    p = sub.add_parser("validate-mask", parents=[common], help="check a mask against the isolation rule")
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--v", type=int, default=1)
    p.add_argument("--m", type=int, default=4)
    p.add_argument("--frames", type=int, default=1)
    p.add_argument("--independent", action="store_true")
    p.add_argument("--mask-file", help="0/1 rows to validate instead of the built mask")
    p.add_argument("--ascii", action="store_true", help="print the mask as a 0/1 grid")
    return parser


COMMANDS = {
    "train": (cmd_train, "train_{kind}.json"),
    "compress": (cmd_compress, "compress.json"),
    "infer": (cmd_infer, "infer.json"),
    "eval": (cmd_eval, "eval_{name}.json"),
    "retention": (cmd_retention, "retention.json"),
    "bench": (cmd_bench, "bench.json"),
    "sweep": (cmd_sweep, "sweep.json"),
    "gen-data": (cmd_gen_data, "gen_data.json"),
    "validate-mask": (cmd_validate_mask, "validate_mask.json"),
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.override, args.seed)
        fn, name = COMMANDS[args.command]
        report = fn(args, cfg)
        fname = name.format(kind=getattr(args, "kind", ""), name=getattr(args, "name", None) or
                            getattr(args, "role", ""))
        quiet = args.quiet or args.command in ("infer", "validate-mask")
        _emit(report, Path(args.out), fname, quiet)
        if args.command == "validate-mask" and report["violations"]:
            print(f"{report['violations']} violations", file=sys.stderr)
            return 1
        return 0
    except VocoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyError as exc:
        print(f"error: unknown token or key {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
