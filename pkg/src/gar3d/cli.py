"""Command-line entry point: synth, train, infer, eval, bench, check.

Exit codes: 0 ok, 1 usage error, 2 contract/format error, 3 check failure.
"""
from __future__ import annotations

import argparse
import csv
import math
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FormatError, Gar3dError

EXIT_OK, EXIT_USAGE, EXIT_CONTRACT, EXIT_CHECK = 0, 1, 2, 3
SVG_HASHSALT = "gar3d"


class UsageError(Exception):
    pass


def parse_queue(text) -> int | None | str:
    """Queue capacity: a positive integer, ``inf`` / ``none`` for unbounded, or ``auto``."""
    if text is None:
        return None
    s = str(text).strip().lower()
    if s in ("inf", "none", "unbounded"):
        return None
    if s == "auto":
        return "auto"
    try:
        q = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"queue must be an integer or 'inf', got {text!r}") from None
    if q < 1:
        raise argparse.ArgumentTypeError(f"queue must be >= 1, got {q}")
    return q


def int_list(text) -> list:
    return [int(x) for x in str(text).split(",") if x.strip()]


def queue_list(text) -> list:
    return [parse_queue(x) for x in str(text).split(",") if x.strip()]


def str_list(text) -> list:
    return [x.strip() for x in str(text).split(",") if x.strip()]


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------
def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--patch", type=int, default=8)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float64")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gar3d", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value file; explicit flags take precedence")
        p.add_argument("--seed", type=int, default=0)
        return p

    p = common(sub.add_parser("synth", help="write a synthetic dataset"))
    p.add_argument("--n-scenes", type=int, default=32)
    p.add_argument("--n-frames", type=int, default=8)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="replace an existing non-empty directory")

    p = common(sub.add_parser("train", help="train a model on a dataset"))
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=3e-3, help="peak learning rate")
    p.add_argument("--warmup", type=int, default=50, help="linear warmup steps")
    p.add_argument("--schedule", choices=("cosine", "constant"), default="cosine")
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--grad-clip", type=float, default=0.0, help="global max-norm; 0 disables")
    p.add_argument("--seq-min", type=int, default=4)
    p.add_argument("--seq-max", type=int, default=8)
    p.add_argument("--force", action="store_true")
    _model_flags(p)

    p = common(sub.add_parser("infer", help="run a checkpoint on one scene"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("offline", "online", "hybrid"), default="offline")
    p.add_argument("--group-size", type=int, default=None)
    p.add_argument("--queue", type=parse_queue, default="auto",
                   help="capacity in frames, 'inf', or 'auto' (twice the group size, at least the prefill)")
    p.add_argument("--policy", choices=("fifo", "random", "merge", "stride"), default="fifo")
    p.add_argument("--prefill", type=int, default=0)
    p.add_argument("--force", action="store_true")

    p = common(sub.add_parser("eval", help="score an exported prediction"))
    p.add_argument("--pred", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--align", choices=("sim3", "median", "none"), default="sim3")
    p.add_argument("--out", help="CSV report path")

    p = common(sub.add_parser("bench", help="time streaming inference over N, Q and policy"))
    p.add_argument("--checkpoint", help="defaults to a freshly initialized model")
    p.add_argument("--frames", type=int_list, default=[16, 32, 64, 128])
    p.add_argument("--queues", type=queue_list, default=[8, None])
    p.add_argument("--policies", type=str_list, default=["fifo"])
    p.add_argument("--group-sizes", type=int_list, default=[1])
    p.add_argument("--repeat", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--emit-plot", action="store_true")
    p.add_argument("--force", action="store_true")
    _model_flags(p)

    p = common(sub.add_parser("check", help="run the invariant self-check suite"))
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list) -> argparse.Namespace:
    """Parse once to find ``--config``, load it as defaults, then parse again."""
    from .fileio import read_kv

    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    try:
        values = read_kv(args.config)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {args.config}") from None
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    sp = sub.choices[args.command]
    actions = {a.dest: a for a in sp._actions}
    defaults = {}
    for key, raw in values.items():
        dest = key.replace("-", "_")
        if dest not in actions or dest in ("config", "help"):
            raise UsageError(f"unknown config key {key!r} for '{args.command}'")
        act = actions[dest]
        if isinstance(act, argparse._StoreTrueAction):
            defaults[dest] = raw.lower() in ("1", "true", "yes")
        else:
            conv = act.type or str
            try:
                defaults[dest] = conv(raw)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config key {key}: {exc}") from None
        if act.required:
            act.required = False
    sp.set_defaults(**defaults)
    args = parser.parse_args(argv)
    missing = [a.option_strings[0] for a in sp._actions if a.dest in defaults and getattr(args, a.dest) is None]
    if missing:
        raise UsageError(f"missing values for {missing}")
    return args


def _effective(args) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in ("func",):
            continue
        if isinstance(v, list):
            v = ",".join("inf" if x is None else str(x) for x in v)
        elif v is None:
            v = "none"
        out[k] = v
    return out


def _echo_config(args, out_dir: Path | None) -> None:
    from .fileio import format_kv, write_kv

    eff = _effective(args)
    sys.stdout.write("# effective config\n" + format_kv(eff))
    if out_dir is not None:
        write_kv(out_dir / "config.txt", eff)


def _prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"{out} exists and is not empty; pass --force to replace it")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------
def cmd_synth(args) -> int:
    from .synthdata import generate_dataset

    out = _prepare_out(args.out, args.force)
    seeds = generate_dataset(out, args.n_scenes, args.n_frames, args.height, args.width, args.seed)
    _echo_config(args, out)
    print(f"wrote {len(seeds)} scenes x {args.n_frames} frames to {out}")
    return EXIT_OK


def _model_config(args):
    from .model import ModelConfig

    return ModelConfig(layers=args.layers, dim=args.dim, heads=args.heads, patch_size=args.patch,
                       height=args._height, width=args._width, seed=args.seed, dtype=args.dtype)


def cmd_train(args) -> int:
    from .model import GroupAutoregressiveModel, save_checkpoint
    from .synthdata import load_dataset
    from .train import TrainConfig, train

    scenes = load_dataset(args.dataset)
    if args.seq_min < 2 or args.seq_max < args.seq_min:
        raise UsageError(f"bad sequence range [{args.seq_min}, {args.seq_max}]")
    out = _prepare_out(args.out, args.force)
    args._height, args._width = scenes[0].height, scenes[0].width
    model = GroupAutoregressiveModel(_model_config(args))
    cfg = TrainConfig(steps=args.steps, lr=args.lr, weight_decay=args.weight_decay, grad_clip=args.grad_clip,
                      seq_min=args.seq_min, seq_max=args.seq_max, seed=args.seed, warmup=args.warmup,
                      schedule=args.schedule)
    del args._height, args._width
    _echo_config(args, out)
    last = {}

    def progress(row):
        last.update(row)
        if row["step"] % 100 == 0:
            print(f"step {row['step']}: total={row['total']:.4f} rel_point={row['rel_point']:.4f} "
                  f"abs_point={row['abs_point']:.4f}", flush=True)

    train(model, scenes, cfg, out / "losses.csv", progress)
    save_checkpoint(model, out / "checkpoint.garg")
    print(f"saved {out / 'checkpoint.garg'} after {args.steps} steps")
    return EXIT_OK


def run_inference(model, frames, mode: str, group_size: int | None, queue: int | None,
                  policy: str, prefill: int, seed: int = 0):
    """Dispatch to one of the three inference modes; returns (outputs, stats)."""
    from .model import ModelOutput
    from . import numkernel as nk

    N = len(frames)
    with nk.no_grad():
        if mode == "offline":
            outs = [model.forward_offline(frames, group_size=group_size or N)]
        elif mode == "online":
            outs = model.forward_online(frames, group_size or 1, queue, policy, seed)
        else:
            outs = model.forward_hybrid(frames, prefill, queue, policy, seed, group_size or 1)
    stats = {"peak_cache_frames": max((o.stats.get("peak_cache_frames", 0) for o in outs), default=0),
             "peak_kv_floats": max((o.stats.get("peak_kv_floats", 0) for o in outs), default=0),
             "steps": len(outs)}
    return ModelOutput.concat(outs), stats


def cmd_infer(args) -> int:
    from .fileio import save_predictions
    from .model import load_checkpoint
    from .synthdata import read_scene

    model = load_checkpoint(args.checkpoint)
    scene = read_scene(args.scene)
    G, Q = args.group_size, args.queue
    if G is not None and G < 1:
        raise UsageError("group size must be >= 1")
    if Q == "auto":
        Q = None if args.mode == "offline" else max(2 * (G or 1), args.prefill if args.mode == "hybrid" else 0)
    if args.mode != "offline" and G is not None and Q is not None and G > Q:
        raise UsageError(f"group size {G} exceeds queue capacity {Q}")
    if args.mode == "hybrid" and Q is not None and args.prefill > Q:
        raise UsageError(f"prefill {args.prefill} exceeds queue capacity {Q}")
    out = _prepare_out(args.out, args.force)
    frames = scene.bundles()
    pred, stats = run_inference(model, frames, args.mode, G, Q, args.policy, args.prefill, args.seed)
    man = {"mode": args.mode, "group_size": G if G is not None else ("all" if args.mode == "offline" else 1),
           "queue": "inf" if Q is None else Q, "policy": args.policy, "prefill": args.prefill,
           "checkpoint": Path(args.checkpoint).name, **stats}
    save_predictions(out, pred.local_points.data, pred.confidence.data, pred.poses(), man)
    _echo_config(args, out)
    print(f"wrote {len(frames)} frames to {out} (peak cache frames {stats['peak_cache_frames']})")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evalsuite import evaluate_sequence
    from .fileio import load_predictions
    from .synthdata import read_scene

    pred = load_predictions(args.pred)
    scene = read_scene(args.scene)
    if len(pred) != len(scene):
        raise ContractError(f"prediction has {len(pred)} frames, scene has {len(scene)}")
    report = evaluate_sequence(pred.points, pred.poses, scene.local_points, scene.depth,
                               [f.pose for f in scene.frames], scene.valid, args.align)
    sys.stdout.write(report.to_table())
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(report.to_csv())
    return EXIT_OK


def expected_peak_floats(layers: int, tokens: int, dim: int, n_frames: int, G: int, Q: int | None) -> int:
    """Peak resident K/V floats of a streaming run: the largest pre-eviction queue."""
    peak, seen = 0, 0
    for start in range(0, n_frames, G):
        g = min(G, n_frames - start)
        before = seen if Q is None else min(seen, Q)
        peak = max(peak, before + g)
        seen += g
    return layers * peak * tokens * dim * 2


def bench_rows(model, frames_list, queues, policies, group_sizes, repeat: int = 1, seed: int = 0) -> list:
    """One row per (N, G, Q, policy) with timing and memory accounting."""
    from .numkernel import Rng, no_grad
    from .model import FrameBundle

    c = model.config
    rng = Rng(seed)
    pool = [FrameBundle(rng.random((c.height, c.width))) for _ in range(max(frames_list))]
    rows = []
    for policy in policies:
        for Q in queues:
            for G in group_sizes:
                if Q is not None and G > Q:
                    continue
                for N in frames_list:
                    best = None
                    for _ in range(repeat):
                        session = model.new_session(Q, policy, seed)
                        times, touched = [], []
                        with no_grad():
                            for s in range(0, N, G):
                                t0 = time.perf_counter()
                                out = session.step(pool[s:s + G])
                                times.append(time.perf_counter() - t0)
                                touched.append(out.stats["touched_keys"][0])
                        if best is None or sum(times) < sum(best[0]):
                            best = (times, touched, session)
                    times, touched, session = best
                    tail = times[len(times) // 2:]
                    rows.append({
                        "N": N, "G": G, "Q": "inf" if Q is None else Q, "policy": policy,
                        "time_per_frame_ms": 1e3 * sum(times) / N,
                        "last_half_step_ms": 1e3 * float(np.mean(tail)),
                        "touched_keys_last_step": touched[-1],
                        "peak_cache_frames": session.cache.peak_frames,
                        "peak_kv_floats": session.cache.peak_floats,
                        "expected_kv_floats": expected_peak_floats(c.layers, c.tokens_per_frame, c.dim, N, G, Q),
                    })
    return rows


def write_bench_svg(rows: list, path: Path, x: str, y: str, series: str, title: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = SVG_HASHSALT
    fig, ax = plt.subplots(figsize=(5, 3.5))
    keys = []
    for r in rows:
        if r[series] not in keys:
            keys.append(r[series])
    for k in keys:
        pts = sorted((r[x], r[y]) for r in rows if r[series] == k)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"{series}={k}")
    ax.set_xlabel(x)
    ax.set_ylabel(y)
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_bench(args) -> int:
    from .model import GroupAutoregressiveModel, ModelConfig, load_checkpoint

    out = _prepare_out(args.out, args.force)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        model = GroupAutoregressiveModel(ModelConfig(layers=args.layers, dim=args.dim, heads=args.heads,
                                                     patch_size=args.patch, seed=args.seed, dtype=args.dtype))
    _echo_config(args, out)
    rows = bench_rows(model, args.frames, args.queues, args.policies, args.group_sizes, args.repeat, args.seed)
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(", ".join(f"{k}={v:.3f}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))
    if args.emit_plot:
        write_bench_svg(rows, out / "capacity_sweep.svg", "N", "last_half_step_ms", "Q",
                        "per-step time vs sequence length")
        write_bench_svg(rows, out / "group_sweep.svg", "G", "time_per_frame_ms", "N",
                        "time per frame vs group size")
    return EXIT_OK


def cmd_check(args, mask_builder=None) -> int:
    from .checks import run_checks

    results = run_checks(mask_builder) if mask_builder is not None else run_checks()
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_CHECK if failed else EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "bench": cmd_bench, "check": cmd_check}


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _apply_config_file(parser, argv)
        return COMMANDS[args.command](args)
    except SystemExit as exc:          # argparse usage errors
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractError, FormatError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except Gar3dError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
