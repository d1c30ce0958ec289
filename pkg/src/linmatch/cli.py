"""Command-line entry point: synthesis, matching, evaluation, training, benchmarks.

Subcommands: `synth`, `match`, `eval`, `bench`, `train-toy`, `gradcheck`.
Every subcommand accepts `--seed`, `--config <json>`, `--threads <n>` and
`-o <dir>`; configuration precedence is dataclass defaults, then config-file
sections, then explicit flags.  Unknown config sections or keys are rejected
up front.  All randomness derives from the single seed through stable
per-module streams, so any subcommand rerun with the same seed reproduces
its outputs byte for byte.

Exit codes: 0 success, 1 failed numeric check, 2 usage error, 3 data error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bench import (
    bench_attention,
    bench_pipeline,
    op_counter_audit,
    write_bench_csv,
    write_bench_json,
)
from .encoder import NetworkConfig, NetworkWeights, load_weights, save_weights
from .geometry import (
    GenNoiseConfig,
    generate_pair,
    read_ground_truth,
    read_homography,
    read_kpds,
    write_ground_truth,
    write_homography,
    write_kpds,
)
from .matcher import (
    FilterConfig,
    evaluate,
    match_pipeline,
    read_matches,
    write_matches,
    write_metrics,
)
from .neighborhood import NeighborhoodConfig
from .training import (
    LossConfig,
    gradient_check,
    save_optimizer_state,
    train_toy,
    write_loss_trace,
)

EXIT_OK = 0
EXIT_FAILED_CHECK = 1
EXIT_USAGE = 2
EXIT_DATA = 3


class UsageError(Exception):
    """Bad flags or configuration; maps to exit code 2."""


class DataError(Exception):
    """Missing or malformed input data; maps to exit code 3."""


_CONFIG_SECTIONS = {
    "network": NetworkConfig,
    "neighborhood": NeighborhoodConfig,
    "filter": FilterConfig,
    "loss": LossConfig,
    "noise": GenNoiseConfig,
    "bench": None,
}
_BENCH_KEYS = {"sizes", "reps", "c_prime", "methods", "px_per_keypoint"}

# fixed stream tags so each module draws from its own child of --seed
_STREAMS = {"synth": 1, "filter": 2, "train": 3, "scene": 4}


def _child_seed(seed: int, stream: str, index: int = 0) -> int:
    ss = np.random.SeedSequence([seed, _STREAMS[stream], index])
    return int(ss.generate_state(1)[0])


@dataclass
class RunConfig:
    command: str
    seed: int
    threads: int
    output: Path | None
    sections: dict  # validated config-file sections


def _load_file_sections(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"config file is not valid JSON: {e}")
    if not isinstance(raw, dict):
        raise UsageError("config file must hold a JSON object of sections")
    unknown = sorted(set(raw) - set(_CONFIG_SECTIONS))
    if unknown:
        raise UsageError(f"unknown config sections: {unknown}")
    for name, body in raw.items():
        if not isinstance(body, dict):
            raise UsageError(f"config section {name!r} must be an object")
        if name == "bench":
            allowed = _BENCH_KEYS
        else:
            allowed = {f.name for f in dataclasses.fields(_CONFIG_SECTIONS[name])}
        bad = sorted(set(body) - allowed)
        if bad:
            raise UsageError(f"unknown keys in config section {name!r}: {bad}")
    return raw


def _run_config(args) -> RunConfig:
    if args.threads < 1:
        raise UsageError("--threads must be at least 1")
    sections = _load_file_sections(args.config)
    return RunConfig(args.command, args.seed, args.threads, args.output, sections)


def _section(run: RunConfig, name: str, cls, seeded=None, **flag_values):
    """Instantiate a config dataclass: defaults < config file < flags.

    `seeded` supplies values derived from --seed that sit below the config
    file, so an explicit file entry still wins over the derived stream.
    """
    body = dict(seeded or {})
    body.update(run.sections.get(name, {}))
    body.update({k: v for k, v in flag_values.items() if v is not None})
    try:
        return cls(**body)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid {name} config: {e}")


def _out_dir(run: RunConfig) -> Path:
    out = run.output or Path(".")
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        raise UsageError(f"output directory not writable: {e}")
    return out


def _read_input(reader, path, what):
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what} file not found: {p}")
    try:
        return reader(p)
    except ValueError as e:
        raise DataError(f"{p}: {e}")


# ---------------------------------------------------------------- synth

def cmd_synth(args) -> int:
    run = _run_config(args)
    if args.pairs <= 0:
        raise UsageError("--pairs must be positive")
    if args.kpts <= 0:
        raise UsageError("--kpts must be positive")
    out = _out_dir(run)
    noise = _section(run, "noise", GenNoiseConfig, desc_sigma=args.desc_sigma,
                     jitter_sigma=args.jitter_sigma, distractors=args.distractors)
    entries = []
    for k in range(args.pairs):
        child = _child_seed(run.seed, "synth", k)
        ks, kt, gt, h = generate_pair(child, args.kpts, args.dims, args.desc_dim,
                                      noise, min_matches=args.min_matches)
        name = f"pair{k:04d}"
        pdir = out / name
        pdir.mkdir(exist_ok=True)
        write_kpds(pdir / "source.kpds", ks)
        write_kpds(pdir / "target.kpds", kt)
        write_ground_truth(pdir / "gt.csv", gt)
        write_homography(pdir / "homography.txt", h)
        entries.append({
            "name": name, "seed": child,
            "source": f"{name}/source.kpds", "target": f"{name}/target.kpds",
            "gt": f"{name}/gt.csv", "homography": f"{name}/homography.txt",
            "n_source": len(ks), "n_target": len(kt),
            "n_correspondences": len(gt.pairs),
        })
    manifest = {"seed": run.seed, "keypoints": args.kpts,
                "descriptor_dim": args.desc_dim, "dims": list(args.dims),
                "pairs": entries}
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {args.pairs} pairs ({args.kpts} keypoints each) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- match

def cmd_match(args) -> int:
    run = _run_config(args)
    ks = _read_input(read_kpds, args.source, "source keypoint")
    kt = _read_input(read_kpds, args.target, "target keypoint")
    weights = _read_input(load_weights, args.weights, "weight")
    if args.skip_pairwise:
        weights = NetworkWeights(weights.self_layers, weights.cross_layers, [])

    wq = np.asarray(weights.self_layers[0].wq)
    in_dim, hidden = wq.shape
    for side, kset in (("source", ks), ("target", kt)):
        d = kset.descriptors.shape[1]
        if d != in_dim:
            raise DataError(f"{side} descriptor dim {d} does not match "
                            f"weight input dim {in_dim}")

    net = _section(run, "network", NetworkConfig, input_dim=in_dim,
                   hidden_dim=hidden, heads=args.heads,
                   l1=len(weights.self_layers), l2=len(weights.pair_layers))
    neigh = _section(run, "neighborhood", NeighborhoodConfig, theta=args.theta)
    fcfg = _section(run, "filter", FilterConfig,
                    seeded={"rng_seed": _child_seed(run.seed, "filter")})

    result = match_pipeline(ks, kt, weights, net, neigh, fcfg,
                            skip_filter=args.no_filter, threads=run.threads)
    out = _out_dir(run)
    write_matches(out / "matches.csv", result)
    verified = sum(1 for s in result.stage if s == "verified")
    print(f"{len(result)} matches ({verified} verified) written to "
          f"{out / 'matches.csv'}")
    return EXIT_OK


# ----------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    run = _run_config(args)
    m = _read_input(read_matches, args.matches, "match")
    ks = _read_input(read_kpds, args.source, "source keypoint")
    kt = _read_input(read_kpds, args.target, "target keypoint")
    gt = _read_input(lambda p: read_ground_truth(p, n_source=len(ks),
                                                 n_target=len(kt)),
                     args.gt, "ground-truth")
    h = _read_input(read_homography, args.homography, "homography")
    try:
        metrics = evaluate(m, gt, h, ks, kt)
    except ValueError as e:
        raise DataError(str(e))
    out = _out_dir(run)
    write_metrics(out / "metrics.json", metrics)
    print(f"precision {metrics.precision:.4f}  recall {metrics.recall:.4f}  "
          f"matches {metrics.num_matches}  -> {out / 'metrics.json'}")
    return EXIT_OK


# ---------------------------------------------------------------- bench

def _bench_value(run, args, key, default):
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    return run.sections.get("bench", {}).get(key, default)


def cmd_bench(args) -> int:
    run = _run_config(args)
    out = _out_dir(run)
    if args.mode == "audit":
        try:
            counts = op_counter_audit(seed=run.seed)
        except AssertionError as e:
            print(f"audit failed: {e}", file=sys.stderr)
            return EXIT_FAILED_CHECK
        with open(out / "audit.json", "w") as f:
            json.dump({k: list(v) if isinstance(v, tuple) else v
                       for k, v in counts.items()}, f, indent=2, sort_keys=True)
            f.write("\n")
        print(f"audit ok: {counts['linear_multiplies']} multiplies "
              f"(bound {counts['linear_bound']}) -> {out / 'audit.json'}")
        return EXIT_OK

    sizes = _bench_value(run, args, "sizes", (1024, 2048, 4096, 8192))
    reps = int(_bench_value(run, args, "reps", 5))
    c_prime = int(_bench_value(run, args, "c_prime", 64))
    methods = _bench_value(run, args, "methods", ("linear", "softmax"))
    try:
        if args.mode == "attention":
            report = bench_attention(tuple(methods), tuple(int(s) for s in sizes),
                                     c_prime=c_prime, reps=reps, seed=run.seed)
        else:
            net = _section(run, "network", NetworkConfig)
            neigh = _section(run, "neighborhood", NeighborhoodConfig)
            report = bench_pipeline(tuple(int(s) for s in sizes), net, reps,
                                    seed=run.seed, neigh_cfg=neigh,
                                    threads=run.threads)
    except ValueError as e:
        raise UsageError(str(e))
    write_bench_csv(out / "bench.csv", report)
    write_bench_json(out / "bench.json", report)
    for method, slope in sorted(report.slopes.items()):
        print(f"{method}: slope {slope:.3f}")
    print(f"report -> {out / 'bench.csv'}")
    return EXIT_OK


# ------------------------------------------------------------ train-toy

def cmd_train_toy(args) -> int:
    run = _run_config(args)
    if args.pairs <= 0:
        raise UsageError("--pairs must be positive")
    if args.steps <= 0:
        raise UsageError("--steps must be positive")
    net = _section(run, "network", NetworkConfig, input_dim=args.desc_dim,
                   hidden_dim=args.hidden, heads=args.heads, l1=args.l1,
                   l2=args.l2)
    loss = _section(run, "loss", LossConfig, learning_rate=args.lr,
                    decay=args.decay)
    noise = _section(run, "noise", GenNoiseConfig, desc_sigma=args.desc_sigma,
                     jitter_sigma=args.jitter_sigma, distractors=args.distractors)
    neigh = _section(run, "neighborhood", NeighborhoodConfig)
    dataset = []
    for k in range(args.pairs):
        scene = generate_pair(_child_seed(run.seed, "scene", k), args.kpts,
                              args.dims, net.input_dim, noise)
        dataset.append(scene[:3])
    try:
        weights, trace, state = train_toy(dataset, net, loss, args.steps,
                                          seed=_child_seed(run.seed, "train"),
                                          neigh_cfg=neigh)
    except RuntimeError as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return EXIT_FAILED_CHECK
    out = _out_dir(run)
    save_weights(out / "weights.lawt", weights)
    save_optimizer_state(out / "optimizer.lawt", state)
    write_loss_trace(out / "trace.csv", trace)
    print(f"loss {trace[0][1]:.6f} -> {trace[-1][1]:.6f} over {args.steps} steps; "
          f"weights -> {out / 'weights.lawt'}")
    return EXIT_OK


# ------------------------------------------------------------ gradcheck

def cmd_gradcheck(args) -> int:
    run = _run_config(args)
    net = _section(run, "network", NetworkConfig, input_dim=args.input_dim,
                   hidden_dim=args.hidden, heads=args.heads, l1=args.l1,
                   l2=args.l2)
    loss = _section(run, "loss", LossConfig)
    dtype = np.float64 if args.precision == "double" else np.float32
    max_err, frac_ok, count = gradient_check(net, loss, seed=run.seed,
                                             samples=args.samples,
                                             step=args.step, dtype=dtype)
    print(f"max relative error {max_err:.3e} over {count} entries "
          f"({frac_ok * 100:.1f}% within {args.tol:g})")
    return EXIT_OK if max_err < args.tol else EXIT_FAILED_CHECK


# --------------------------------------------------------------- parser

def _parse_dims(text: str):
    try:
        w, h = text.lower().split("x")
        dims = (int(w), int(h))
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must look like 640x480, got {text!r}")
    if dims[0] <= 0 or dims[1] <= 0:
        raise argparse.ArgumentTypeError("dims must be positive")
    return dims


def _parse_sizes(text: str):
    try:
        return tuple(int(tok) for tok in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"sizes must be comma-separated ints, got {text!r}")


def _parse_methods(text: str):
    return tuple(tok.strip() for tok in text.split(",") if tok.strip())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="linmatch",
        description="Sparse keypoint matching with linear-time attention.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0,
                        help="global random seed (default 0)")
    common.add_argument("--config", type=Path, default=None,
                        help="JSON config file with per-module sections")
    common.add_argument("--threads", type=int, default=1,
                        help="worker threads for the filter stage (default 1)")
    common.add_argument("-o", "--output", type=Path, default=None,
                        help="output directory (default current directory)")
    sub = parser.add_subparsers(dest="command", required=True)

    sy = sub.add_parser("synth", parents=[common],
                        help="generate labelled synthetic pairs")
    sy.add_argument("--pairs", type=int, default=10)
    sy.add_argument("--kpts", type=int, default=512)
    sy.add_argument("--dims", type=_parse_dims, default=(640, 480))
    sy.add_argument("--desc-dim", type=int, default=256)
    sy.add_argument("--desc-sigma", type=float, default=None)
    sy.add_argument("--jitter-sigma", type=float, default=None)
    sy.add_argument("--distractors", type=int, default=None)
    sy.add_argument("--min-matches", type=int, default=None)
    sy.set_defaults(func=cmd_synth)

    ma = sub.add_parser("match", parents=[common],
                        help="match two keypoint files with trained weights")
    ma.add_argument("source", help="source .kpds file")
    ma.add_argument("target", help="target .kpds file")
    ma.add_argument("--weights", required=True, help="weight .lawt file")
    ma.add_argument("--heads", type=int, default=None)
    ma.add_argument("--theta", type=float, default=None,
                    help="distance-ratio acceptance threshold")
    ma.add_argument("--no-filter", action="store_true",
                    help="emit unfiltered candidates (distance matching only)")
    ma.add_argument("--skip-pairwise", action="store_true",
                    help="drop the neighborhood attention layers")
    ma.set_defaults(func=cmd_match)

    ev = sub.add_parser("eval", parents=[common],
                        help="score a match file against ground truth")
    ev.add_argument("--matches", required=True)
    ev.add_argument("--source", required=True)
    ev.add_argument("--target", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--homography", required=True)
    ev.set_defaults(func=cmd_eval)

    be = sub.add_parser("bench", parents=[common],
                        help="measure runtime scaling or audit op counts")
    be.add_argument("--mode", choices=("attention", "pipeline", "audit"),
                    default="attention")
    be.add_argument("--sizes", type=_parse_sizes, default=None)
    be.add_argument("--methods", type=_parse_methods, default=None)
    be.add_argument("--reps", type=int, default=None)
    be.add_argument("--c-prime", dest="c_prime", type=int, default=None)
    be.set_defaults(func=cmd_bench)

    tr = sub.add_parser("train-toy", parents=[common],
                        help="train a small network on synthetic pairs")
    tr.add_argument("--pairs", type=int, default=200)
    tr.add_argument("--kpts", type=int, default=128)
    tr.add_argument("--dims", type=_parse_dims, default=(256, 256))
    tr.add_argument("--desc-dim", type=int, default=32)
    tr.add_argument("--hidden", type=int, default=16)
    tr.add_argument("--heads", type=int, default=2)
    tr.add_argument("--l1", type=int, default=2)
    tr.add_argument("--l2", type=int, default=1)
    tr.add_argument("--steps", type=int, default=300)
    tr.add_argument("--lr", type=float, default=None)
    tr.add_argument("--decay", type=float, default=None)
    tr.add_argument("--desc-sigma", type=float, default=None)
    tr.add_argument("--jitter-sigma", type=float, default=None)
    tr.add_argument("--distractors", type=int, default=None)
    tr.set_defaults(func=cmd_train_toy)

    gc = sub.add_parser("gradcheck", parents=[common],
                        help="compare analytic gradients with finite differences")
    gc.add_argument("--precision", choices=("single", "double"), default="double")
    gc.add_argument("--samples", type=int, default=256)
    gc.add_argument("--step", type=float, default=1e-5)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.add_argument("--input-dim", type=int, default=8)
    gc.add_argument("--hidden", type=int, default=4)
    gc.add_argument("--heads", type=int, default=1)
    gc.add_argument("--l1", type=int, default=1)
    gc.add_argument("--l2", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except AssertionError as e:
        print(f"check failed: {e}", file=sys.stderr)
        return EXIT_FAILED_CHECK


if __name__ == "__main__":
    sys.exit(main())
