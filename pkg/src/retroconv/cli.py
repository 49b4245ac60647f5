"""``retroconv`` command line: synth, train, eval, infer, gradcheck.

Exit codes: 0 ok, 1 usage or configuration, 2 data (unreadable or malformed
files, unrenderable scenes), 3 numeric (training abort, failed gradient check).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config, to_ini
from .data import Sampler, fg_histogram, group_by_tag, load_clip, load_corpus, synth_corpus, write_corpus
from .errors import ConfigError, FormatError, NumericAbort, SamplingError, SpecError
from .network import build_model, check_clip_for, infer_multiscale, load_checkpoint, save_checkpoint
from .tensor import save_tensor
from .train import evaluate, train
from .verify import run_gradcheck, summary_lines

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    seeds: dict
    out_dir: str
    tool_version: str = __version__
    timestamp: str = field(default_factory=lambda: time.strftime("%Y-%m-%dT%H:%M:%S%z"))
    argv: list[str] = field(default_factory=list)

    def write(self, directory) -> Path:
        path = Path(directory) / "run_manifest.json"
        path.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _config(args) -> RunConfig:
    return load_config(args.config) if args.config else RunConfig()


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    d = Path(args.out)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UsageError(f"cannot create output directory {d}: {e}") from None
    return d


def _scales(text: str | None, default) -> tuple[float, ...]:
    if text is None:
        return tuple(default)
    try:
        vals = tuple(float(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise UsageError(f"--scales must be comma-separated numbers, got {text!r}") from None
    if not vals or any(v <= 0 for v in vals):
        raise UsageError(f"--scales needs positive values, got {text!r}")
    return vals


def _manifest(args, cfg_seeds, out) -> None:
    RunManifest(args.command, args.config, cfg_seeds, str(out), argv=sys.argv[1:]).write(out)


# --- commands ----------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    seed = cfg.data.corpus_seed if args.seed is None else args.seed
    _manifest(args, {"corpus": seed}, out)
    samples = synth_corpus(cfg.scenarios, cfg.data.length, cfg.data.canvas, cfg.data.interval_range, seed)
    write_corpus(out, samples)
    for tag, group in sorted(group_by_tag(samples).items()):
        print(f"scenario {tag} clips {len(group)}")
    hist = fg_histogram(samples)
    print("fg_ratio histogram " + " ".join(f"[{i / 10:.1f},{(i + 1) / 10:.1f}):{c}" for i, c in enumerate(hist)))
    print(f"wrote {len(samples)} clips to {out}")
    return EXIT_OK


def _load_samples(corpus):
    if not corpus:
        raise UsageError("--corpus is required")
    try:
        samples, failures = load_corpus(corpus)
    except OSError as e:
        raise FormatError(f"cannot read corpus manifest {corpus}: {e}") from None
    for path, err in failures:
        print(f"warning: skipped {path}: {err}", file=sys.stderr)
    if not samples:
        raise UsageError(f"corpus {corpus} has no readable clips")
    return samples, len(failures)


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    seed = cfg.train.seed if args.seed is None else args.seed
    if args.max_iters is not None:
        cfg.optim.max_iters = args.max_iters
    static = cfg.train.static_synthesis and not args.no_static_synthesis
    _manifest(args, {"model": seed, "sampler": seed}, out)
    (out / "config.ini").write_text(to_ini(cfg), encoding="utf-8")
    samples, _ = _load_samples(args.corpus)
    model = build_model(cfg.model, seed)
    sampler = Sampler(samples, cfg.sampler_config(), seed)
    with open(out / "loss.log", "w", encoding="utf-8") as log_file:
        def emit(line):
            print(line)
            log_file.write(line + "\n")
            log_file.flush()
        result = train(model, sampler, cfg.loss, cfg.optim, static, cfg.train.log_every, emit)
    save_checkpoint(result.model, out / "model.rcnet")
    print(f"wrote {out / 'model.rcnet'}")
    return EXIT_OK


def _checkpoint(path):
    try:
        return load_checkpoint(path)
    except OSError as e:
        raise FormatError(f"cannot read checkpoint {path}: {e}") from None


def cmd_eval(args) -> int:
    cfg = _config(args)
    model = _checkpoint(args.checkpoint)
    scales = _scales(args.scales, cfg.eval.scales)
    samples, skipped = _load_samples(args.corpus)
    out = _out_dir(args) if args.out else None
    if out:
        _manifest(args, {"checkpoint": model.seed}, out)
    workers = args.workers or cfg.eval.workers
    report = evaluate(model, samples, scales, cfg.eval.threshold, workers, skipped)
    text = report.render()
    print(text)
    if out:
        (out / "report.txt").write_text(text + "\n", encoding="utf-8")
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def write_pgm(path, mask: np.ndarray) -> None:
    h, w = mask.shape
    body = (np.asarray(mask) > 0).astype(np.uint8) * 255
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + body.tobytes())


def cmd_infer(args) -> int:
    cfg = _config(args)
    model = _checkpoint(args.checkpoint)
    out = _out_dir(args)
    _manifest(args, {"checkpoint": model.seed}, out)
    try:
        sample = load_clip(args.clip)
    except OSError as e:
        raise FormatError(f"cannot read clip {args.clip}: {e}") from None
    check_clip_for(model, sample.clip)
    prob = infer_multiscale(model, sample.clip, _scales(args.scales, cfg.eval.scales))
    save_tensor(out / "prob.rten", prob)
    mask = prob[0, 0, 0] >= cfg.eval.threshold
    write_pgm(out / "mask.pgm", mask)
    print(f"foreground fraction {mask.mean():.4f}; wrote {out / 'prob.rten'} and {out / 'mask.pgm'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.out:
        out = _out_dir(args)
        _manifest(args, {"gradcheck": args.seed or 0}, out)
    cfg = load_config(args.config).model if args.config else None
    fd = np.float64 if args.f64 else np.longdouble
    results = run_gradcheck(fd_dtype=fd, seed=args.seed or 0, model_cfg=cfg)
    lines = summary_lines(results)
    for (name, rep), line in zip(results, lines):
        print(line)
        if not rep.passed:
            for detail in rep.lines("    "):
                print(detail)
    ok = all(rep.passed for _, rep in results)
    print("gradcheck " + ("PASS" if ok else "FAIL"))
    if args.out:
        (out / "gradcheck.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK if ok else EXIT_NUMERIC


# --- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="retroconv", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"retroconv {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI run configuration")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        return sp

    common(sub.add_parser("synth", help="render a synthetic corpus"))
    t = common(sub.add_parser("train", help="train a model on a corpus"))
    t.add_argument("--corpus", help="corpus directory or manifest")
    t.add_argument("--max-iters", type=int)
    t.add_argument("--no-static-synthesis", action="store_true", help="train on native clips only")
    e = common(sub.add_parser("eval", help="evaluate a checkpoint on a corpus"))
    e.add_argument("checkpoint")
    e.add_argument("--corpus")
    e.add_argument("--scales", help="comma-separated inference scales, e.g. 1,0.5")
    e.add_argument("--workers", type=int, help="evaluation threads")
    i = common(sub.add_parser("infer", help="predict one clip file"))
    i.add_argument("checkpoint")
    i.add_argument("clip")
    i.add_argument("--scales")
    g = common(sub.add_parser("gradcheck", help="finite-difference check of every op and a full model"))
    g.add_argument("--f64", action="store_true",
                   help="run finite differences in float64 (default: extended precision)")
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, SpecError, SamplingError, ValueError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
