"""``hiergen`` command line: build, train, generate, edit, upscale and benchmark.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Artifacts default to
``$HIERGEN_CACHE_DIR/bundle`` (``~/.cache/hiergen/bundle`` when unset).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

CACHE_ENV = "HIERGEN_CACHE_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def default_bundle_dir() -> Path:
    root = os.environ.get(CACHE_ENV) or Path.home() / ".cache" / "hiergen"
    return Path(root) / "bundle"


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p.add_argument("--bundle", type=Path, default=None, help="artifact directory")


def _sampler_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--sampler", choices=("topk", "topp", "cluster"), default="cluster")
    p.add_argument("--k", type=int, default=4, help="tokens (topk) or clusters (cluster) kept")
    p.add_argument("--p", type=float, default=1.0)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="hiergen", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("tokenize-build", help="synthetic data -> codebook + vocabulary")
    _common(p)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--codebook-size", type=int, default=512)
    p.add_argument("--clusters", type=int, default=16)
    p.add_argument("--patches", type=int, default=20000)

    p = sub.add_parser("train", help="pretrain the CogLM model")
    _common(p)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--config", type=Path, help="JSON training config")
    p.add_argument("--steps", type=int)
    p.add_argument("--log", type=Path, help="CSV training log (default: <bundle>/coglm_log.csv)")
    p.add_argument("--plot", type=Path, help="loss curve PNG")

    p = sub.add_parser("finetune-sr", help="finetune a super-resolution stage")
    _common(p)
    p.add_argument("--stage", choices=("direct", "iterative"), required=True)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--config", type=Path)
    p.add_argument("--steps", type=int)
    p.add_argument("--log", type=Path)
    p.add_argument("--plot", type=Path)

    p = sub.add_parser("generate", help="text -> ranked high-resolution images")
    _common(p)
    _sampler_flags(p)
    p.add_argument("--text", required=True)
    p.add_argument("--language", choices=("en", "zh"), default="en")
    p.add_argument("--candidates", type=int, default=16)
    p.add_argument("--keep", type=int, default=1)
    p.add_argument("--upweight", type=float, default=0.0)
    p.add_argument("--no-post-select", action="store_true")
    p.add_argument("--format", choices=("png", "ppm"), default="png")
    p.add_argument("--out", type=Path, default=Path("hiergen_out"))

    p = sub.add_parser("infill", help="re-generate a token rectangle of a low-resolution image")
    _common(p)
    _sampler_flags(p)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--rect", type=int, nargs=4, metavar=("ROW0", "COL0", "ROW1", "COL1"), required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--language", choices=("en", "zh"), default="en")
    p.add_argument("--mode", choices=("all_at_once", "region_by_region"), default="all_at_once")
    p.add_argument("--upscale", action="store_true", help="also run both super-resolution stages")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("superres", help="low-resolution image -> high-resolution image")
    _common(p)
    _sampler_flags(p)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--direct-only", action="store_true")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("bench-attn", help="windowed vs dense attention benchmark")
    _common(p)
    p.add_argument("--grid", type=int, nargs="+", default=[48])
    p.add_argument("--window", type=int, default=9)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--head-dim", type=int, default=64)
    p.add_argument("--out", type=Path, help="CSV path (default: stdout)")

    p = sub.add_parser("check-grad", help="finite-difference gradient check")
    _common(p)
    p.add_argument("--coords", type=int, default=240)
    p.add_argument("--upweight", type=float, default=0.0)
    p.add_argument("--use-bundle", action="store_true", help="check the trained CogLM weights")

    p = sub.add_parser("schedule-dump", help="print a LoPAR schedule as JSON")
    _common(p)
    p.add_argument("--hw", type=int, nargs=2, metavar=("H", "W"), default=[60, 60])
    p.add_argument("--sigma", type=int, default=6)
    p.add_argument("--pattern", choices=("grid", "seeded_random"), default="grid")
    p.add_argument("--uncompressed", action="store_true")
    p.add_argument("--out", type=Path)
    return ap


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _bundle_dir(args) -> Path:
    return args.bundle or default_bundle_dir()


def _sampler(args):
    from .sampling import SamplerConfig

    return SamplerConfig(args.temperature, args.sampler, args.k, args.p, args.seed)


def _corpus(args, bundle):
    from .data import synthetic_dataset
    from .training import encode_corpus

    splits = synthetic_dataset(args.n, seed=args.seed)
    return encode_corpus(splits.train, bundle.codebook, bundle.vocab)


def _train_config(args, **defaults):
    from .training import TrainConfig

    d = dict(defaults)
    if args.config:
        d.update(json.loads(args.config.read_text()))
    if args.steps is not None:
        d["steps"] = args.steps
    d.setdefault("seed", args.seed)
    return TrainConfig.from_dict(d)


def plot_losses(rows: list[dict], path, size=(480, 240)) -> None:
    """Minimal loss-curve PNG."""
    from PIL import Image, ImageDraw

    w, h = size
    img = Image.new("RGB", size, "white")
    dr = ImageDraw.Draw(img)
    steps = np.array([r["step"] for r in rows], dtype=float)
    loss = np.array([r["loss"] for r in rows], dtype=float)
    if len(rows) > 1:
        x = 30 + (steps - steps.min()) / max(np.ptp(steps), 1e-9) * (w - 40)
        y = h - 20 - (loss - loss.min()) / max(np.ptp(loss), 1e-9) * (h - 40)
        dr.line(list(zip(x.tolist(), y.tolist())), fill=(30, 60, 200), width=2)
    dr.text((32, 4), f"loss {loss[0]:.3f} -> {loss[-1]:.3f}", fill="black")
    img.save(path, format="PNG")


def cmd_tokenize_build(args) -> int:
    from .data import synthetic_dataset
    from .pipeline import Bundle
    from .training import build_tokenizer

    splits = synthetic_dataset(args.n, seed=args.seed)
    cb, vocab = build_tokenizer(splits.train, k=args.codebook_size, n_clusters=args.clusters,
                                n_patches=args.patches, seed=args.seed)
    Bundle(cb, vocab).save(_bundle_dir(args))
    print(f"codebook K={cb.size} ({cb.n_clusters} clusters), {len(vocab)} words -> {_bundle_dir(args)}")
    return 0


def _finish_log(args, log, default_name):
    path = args.log or _bundle_dir(args) / default_name
    log.write_csv(path)
    if args.plot:
        plot_losses(log.rows, args.plot)
    print(f"loss {log.losses[0]:.4f} -> {log.losses[-1]:.4f}; log {path}")


def cmd_train(args) -> int:
    from .pipeline import Bundle
    from .training import pretrain_coglm

    bundle = Bundle.load(_bundle_dir(args))
    params, log = pretrain_coglm(_corpus(args, bundle), bundle.vocab, _train_config(args))
    bundle.coglm = params
    bundle.save(_bundle_dir(args))
    _finish_log(args, log, "coglm_log.csv")
    return 0


def cmd_finetune_sr(args) -> int:
    from .pipeline import Bundle
    from .training import finetune_sr

    bundle = Bundle.load(_bundle_dir(args), require=("coglm",))
    cfg = _train_config(args, steps=120, batch_size=4, lr=2e-3, warmup=10)
    params, log = finetune_sr(bundle.coglm, args.stage, _corpus(args, bundle), bundle.vocab, cfg)
    setattr(bundle, args.stage, params)
    bundle.save(_bundle_dir(args))
    _finish_log(args, log, f"{args.stage}_log.csv")
    return 0


def cmd_generate(args) -> int:
    from .pipeline import Bundle, generate, write_run

    bundle = Bundle.load(_bundle_dir(args), require=("coglm", "direct", "iterative"))
    res = generate(args.text, bundle, args.candidates, args.keep, _sampler(args), args.upweight, args.seed,
                   post_select=not args.no_post_select, language=args.language, workers=args.workers)
    paths = write_run(res, args.out, args.format)
    for p in paths:
        print(p)
    return 0


def _low_grid(path, bundle):
    from .data import LOW_PX
    from .imageio import read_image
    from .tokenizer import encode_image

    img = read_image(path)
    if img.shape[:2] != (LOW_PX, LOW_PX):
        raise ValueError(f"expected a {LOW_PX}x{LOW_PX} low-resolution image, got {img.shape[1]}x{img.shape[0]}")
    return encode_image(img, bundle.codebook)


def cmd_infill(args) -> int:
    from .imageio import write_image
    from .pipeline import Bundle, infill_edit, upscale
    from .tokenizer import decode_tokens

    need = ("coglm", "direct", "iterative") if args.upscale else ("coglm",)
    bundle = Bundle.load(_bundle_dir(args), require=need)
    grid = _low_grid(args.image, bundle)
    out = infill_edit(grid, tuple(args.rect), args.text, bundle, args.mode, _sampler(args), seed=args.seed,
                      language=args.language)
    if args.upscale:
        out = upscale(out, bundle, _sampler(args), args.seed, args.workers)
    write_image(args.out, decode_tokens(out, bundle.codebook))
    print(args.out)
    return 0


def cmd_superres(args) -> int:
    from .hierarchy import direct_sr
    from .imageio import write_image
    from .pipeline import Bundle, upscale
    from .tokenizer import decode_tokens

    need = ("direct",) if args.direct_only else ("direct", "iterative")
    bundle = Bundle.load(_bundle_dir(args), require=need)
    grid = _low_grid(args.image, bundle)
    if args.direct_only:
        high = direct_sr(grid, bundle.stage("direct"), bundle.vocab, args.seed, args.temperature,
                         workers=args.workers)
    else:
        high = upscale(grid, bundle, _sampler(args), args.seed, args.workers)
    write_image(args.out, decode_tokens(high, bundle.codebook))
    print(args.out)
    return 0


def cmd_bench_attn(args) -> int:
    from .local_attention import benchmark, speed_and_memory_ratios, write_benchmark_csv

    rows = benchmark(tuple(args.grid), args.window, args.reps, args.workers, args.head_dim, args.seed)
    if args.out:
        write_benchmark_csv(rows, args.out)
    else:
        write_benchmark_csv(rows, sys.stdout)
    for g, (speed, mem) in speed_and_memory_ratios(rows).items():
        print(f"grid {g}: windowed is {speed:.1f}x faster, {100 * mem:.1f}% of dense peak bytes",
              file=sys.stderr)
    return 0


def cmd_check_grad(args) -> int:
    from .coglm import TEXT_TO_IMAGE, MASK_AND_CAPTION
    from .data import vocabulary_words
    from .model import ModelParams, grad_check
    from .pipeline import Bundle
    from .tokenizer import TextVocab
    from .training import coglm_batch, desk_model_config, random_token_corpus

    if args.use_bundle:
        bundle = Bundle.load(_bundle_dir(args), require=("coglm",))
        vocab, params = bundle.vocab, bundle.coglm
    else:
        vocab = TextVocab(vocabulary_words(), offset=512)
        params = ModelParams.init(desk_model_config(vocab), seed=args.seed)
    rng = np.random.default_rng(args.seed)
    corpus = random_token_corpus(vocab, 2, rng)
    inp, targets, weights, _ = coglm_batch(corpus, [0, 1], vocab, rng, [TEXT_TO_IMAGE, MASK_AND_CAPTION])
    rep = grad_check(params, inp, targets, weights, n_coords=args.coords, seed=args.seed, upweight=args.upweight)
    ok = bool(rep.max_rel_error < 1e-3)
    print(json.dumps({"max_rel_error": rep.max_rel_error, "n_coords": rep.n_coords, "pass": ok,
                      "per_tensor": rep.per_tensor}, indent=2, sort_keys=True))
    return 0 if ok else 2


def cmd_schedule_dump(args) -> int:
    from .hierarchy import build_lopar_schedule

    sched = build_lopar_schedule(args.hw[0], args.hw[1], args.sigma, args.pattern,
                                 compressed=not args.uncompressed, seed=args.seed)
    text = sched.to_json()
    if args.out:
        args.out.write_text(text)
    else:
        print(text)
    return 0


COMMANDS = {
    "tokenize-build": cmd_tokenize_build, "train": cmd_train, "finetune-sr": cmd_finetune_sr,
    "generate": cmd_generate, "infill": cmd_infill, "superres": cmd_superres,
    "bench-attn": cmd_bench_attn, "check-grad": cmd_check_grad, "schedule-dump": cmd_schedule_dump,
}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if e.code in (0, None) else 1
    try:
        return COMMANDS[args.command](args)
    except KeyboardInterrupt:
        return 2
    except Exception as e:  # noqa: BLE001 - the CLI reports every runtime failure the same way
        print(f"hiergen {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
