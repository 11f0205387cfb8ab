"""Command-line entry point: ``cmetrack {gen,run,ablate,gradcheck}``.

Exit codes: 0 success, 1 verification failure, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import csv
import io as _io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .dfl import (
    PARAM_NAMES,
    dfl_backward,
    dfl_forward,
    dfl_init_params,
    finite_difference_grads,
    load_params,
    relative_error,
)
from .io import FormatError, atomic_write_text, load_feature_map, load_mask_pgm, save_feature_map, save_mask_pgm
from .scenario import ScenarioError, generate_scenario, load_scenario
from .tracker import DflMode, mean_iou, run_tracker
from .types import CmeConfig, ContractError, FeatureMap, Mask, Strategy, make_rng

log = logging.getLogger("cmetrack")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
GRADCHECK_TOL = 1e-4

# variant label -> (memory strategy, DFL mode)
VARIANTS = {
    "baseline": (Strategy.INITIAL_ONLY, DflMode.OFF),
    "+dfl_n": (Strategy.INITIAL_ONLY, DflMode.NO_POSTERIOR),
    "+dfl": (Strategy.INITIAL_ONLY, DflMode.FULL),
    "+me_all": (Strategy.ALL_FRAMES, DflMode.OFF),
    "+cme": (Strategy.COMPACT, DflMode.OFF),
    "+cme+dfl": (Strategy.COMPACT, DflMode.FULL),
}

FRAME_COLUMNS = ["frame", "iou", "bank_size", "merged", "expanded", "discarded"]


class UsageError(Exception):
    pass


def _seed_list(text: str) -> list[int]:
    try:
        seeds = [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be a comma-separated list of integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("seed list is empty")
    return seeds


def _size(text: str) -> tuple[int, int, int]:
    try:
        h, w, c = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxWxC, got {text!r}") from None
    return h, w, c


def thread_count() -> int:
    raw = os.environ.get("CME_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"CME_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("CME_THREADS must be a positive integer")
    return n


def _resolve_config(args) -> CmeConfig:
    try:
        return CmeConfig(
            topk=args.topk,
            zeta=args.zeta,
            beta=args.beta,
            strategy=Strategy(args.strategy),
            all_frames_cap=args.all_frames_cap,
        )
    except ContractError as exc:
        raise UsageError(str(exc)) from None


def _load_sequence(path: Path, seed: int | None):
    """A TOML scenario is generated in memory; a directory must come from ``gen``."""
    if not path.exists():
        raise UsageError(f"scenario not found: {path}")
    if path.is_dir():
        frames = sorted(path.glob("frame_*.fm"))
        if not frames:
            raise UsageError(f"no frame_*.fm files in {path}")
        seq = []
        for fp in frames:
            tp = fp.with_name(fp.name.replace("frame_", "truth_").replace(".fm", ".pgm"))
            if not tp.exists():
                raise UsageError(f"missing ground truth {tp.name}")
            seq.append((load_feature_map(fp), load_mask_pgm(tp)))
        meta_path = path / "scenario.json"
        meta_seed = json.loads(meta_path.read_text())["seed"] if meta_path.exists() else 0
        return seq, (seed if seed is not None else meta_seed), {"directory": str(path)}
    spec = load_scenario(path)
    if seed is not None:
        spec = spec.with_seed(seed)
    return generate_scenario(spec), spec.seed, spec.as_dict()


def _dfl_params(args, c: int, seed: int):
    if args.dfl == DflMode.OFF.value:
        return None
    if args.dfl_params:
        params = load_params(args.dfl_params)
        if params.c != c:
            raise UsageError(f"DFL params expect c={params.c}, sequence has c={c}")
        return params
    return dfl_init_params(seed, c, args.hidden)


def frames_csv(results) -> str:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(FRAME_COLUMNS)
    for r in results:
        rep = r.report
        writer.writerow([r.frame, repr(float(r.iou)), rep.bank_size_after, rep.merged_count, rep.expanded_count, rep.discarded_count])
    return buf.getvalue()


# --- subcommands -------------------------------------------------------------

def cmd_gen(args) -> int:
    spec = load_scenario(args.scenario)
    if args.seeds:
        spec = spec.with_seed(args.seeds[0])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t, (fm, truth) in enumerate(generate_scenario(spec)):
        save_feature_map(fm, out / f"frame_{t:03d}.fm")
        save_mask_pgm(truth, out / f"truth_{t:03d}.pgm")
    atomic_write_text(out / "scenario.json", json.dumps(spec.as_dict(), indent=2, sort_keys=True) + "\n")
    print(f"wrote {spec.frame_count} frames to {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _resolve_config(args)
    seed = args.seeds[0] if args.seeds else None
    seq, seed, scenario_echo = _load_sequence(Path(args.scenario), seed)
    params = _dfl_params(args, seq[0][0].c, seed)
    results = run_tracker(seq, cfg, params, args.dfl, probe_seed=seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ious = [r.iou for r in results]
    metrics = {
        "version": __version__,
        "config": {
            **cfg.as_dict(),
            "dfl": args.dfl,
            "dfl_hidden": None if params is None else params.d,
            "seed": seed,
            "scenario": str(args.scenario),
            "scenario_spec": scenario_echo,
        },
        "summary": {
            "frames": len(results),
            "mean_iou": float(np.mean(ious)),
            "min_iou": float(np.min(ious)),
            "final_bank_size": {cfg.strategy.value: results[-1].report.bank_size_after},
        },
    }
    atomic_write_text(out / "metrics.json", json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    atomic_write_text(out / "frames.csv", frames_csv(results))
    reports = "".join(json.dumps({"frame": r.frame, **r.report.as_dict()}, sort_keys=True) + "\n" for r in results)
    atomic_write_text(out / "reports.jsonl", reports)
    if args.save_masks:
        (out / "masks").mkdir(exist_ok=True)
        for r in results:
            save_mask_pgm(r.mask, out / "masks" / f"frame_{r.frame:03d}.pgm")
    print(f"mean IoU {metrics['summary']['mean_iou']:.4f} over {len(results)} frames -> {out}")
    return EXIT_OK


def _ablation_cell(spec, seed: int, variant: str, base_cfg: CmeConfig, hidden):
    strategy, mode = VARIANTS[variant]
    cfg = CmeConfig(base_cfg.topk, base_cfg.zeta, base_cfg.beta, strategy, base_cfg.all_frames_cap)
    seq = generate_scenario(spec.with_seed(seed))
    params = None if mode is DflMode.OFF else dfl_init_params(seed, spec.c, hidden)
    results = run_tracker(seq, cfg, params, mode, probe_seed=seed)
    return seed, variant, mean_iou(results), results[-1].report.bank_size_after


def run_ablation(spec, seeds, variants, base_cfg: CmeConfig, hidden=None, threads: int = 1):
    """One ``(seed, variant, mean_iou, final_bank_size)`` row per cell, sorted by (seed, variant order)."""
    cells = [(s, v) for s in seeds for v in variants]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        rows = list(pool.map(lambda cell: _ablation_cell(spec, cell[0], cell[1], base_cfg, hidden), cells))
    order = {v: k for k, v in enumerate(variants)}
    return sorted(rows, key=lambda r: (r[0], order[r[1]]))


def ablation_tables(rows, variants) -> tuple[str, str]:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["seed", "variant", "mean_iou", "final_bank_size"])
    for seed, variant, iou, size in rows:
        writer.writerow([seed, variant, repr(float(iou)), size])
    summary = _io.StringIO()
    writer = csv.writer(summary, lineterminator="\n")
    writer.writerow(["variant", "mean_iou", "mean_final_bank_size", "seeds"])
    for v in variants:
        sel = [r for r in rows if r[1] == v]
        writer.writerow([v, repr(float(np.mean([r[2] for r in sel]))), repr(float(np.mean([r[3] for r in sel]))), len(sel)])
    return buf.getvalue(), summary.getvalue()


def cmd_ablate(args) -> int:
    variants = args.variants
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise UsageError(f"unknown variant(s): {', '.join(unknown)}; choose from {', '.join(VARIANTS)}")
    if len(variants) < 2:
        raise UsageError("ablate needs at least two variants")
    cfg = _resolve_config(args)
    spec = load_scenario(args.scenario)
    seeds = args.seeds or [spec.seed]
    rows = run_ablation(spec, seeds, variants, cfg, args.hidden, thread_count())
    table, summary = ablation_tables(rows, variants)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "ablation.csv", table)
    atomic_write_text(out / "ablation_summary.csv", summary)
    sys.stdout.write(summary)
    return EXIT_OK


def gradcheck(seed: int, size, hidden: int, zero_mask: bool = False, corrupt: bool = False, step: float = 1e-5, floor: float = 1e-6):
    """Worst relative error per parameter between analytic and finite-difference gradients."""
    h, w, c = size
    rng = make_rng(seed)
    query = FeatureMap(rng.standard_normal((h, w, c)))
    reference = FeatureMap(rng.standard_normal((h, w, c)))
    p1 = Mask(np.zeros((h, w)) if zero_mask else rng.uniform(0.0, 1.0, (h, w)))
    loss_grad = rng.standard_normal((h * w, hidden))
    params = dfl_init_params(seed, c, hidden)
    _, cache = dfl_forward(query, reference, p1, params)
    analytic = dfl_backward(loss_grad, cache, query, reference, params)
    if corrupt:
        analytic.W_c[0, 0] += 1.0
    numeric = finite_difference_grads(query, reference, p1, params, loss_grad, step)
    worst = {}
    for name in PARAM_NAMES:
        err = relative_error(getattr(analytic, name), getattr(numeric, name), floor)
        idx = np.unravel_index(int(np.argmax(err)), err.shape)
        worst[name] = (float(err[idx]), tuple(int(i) for i in idx))
    return worst


def cmd_gradcheck(args) -> int:
    h, w, _ = args.size
    if h * w > 16:
        raise UsageError("gradcheck sizes must satisfy h*w <= 16")
    worst = gradcheck(args.seed, args.size, args.hidden, args.zero_mask, args.corrupt_gradient, args.step)
    max_err = max(e for e, _ in worst.values())
    print(f"max relative error {max_err:.3e} (tolerance {GRADCHECK_TOL:.0e})")
    if max_err < GRADCHECK_TOL:
        return EXIT_OK
    for name, (err, idx) in worst.items():
        print(f"  {name}{list(idx)}: {err:.3e}")
    return EXIT_FAIL


# --- argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmetrack", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def matching_flags(p):
        p.add_argument("--scenario", required=True, help="TOML scenario spec (or a directory written by gen, for run)")
        p.add_argument("--strategy", default=Strategy.COMPACT.value, choices=[s.value for s in Strategy])
        p.add_argument("--topk", type=int, default=3)
        p.add_argument("--zeta", type=float, default=0.90)
        p.add_argument("--beta", type=float, default=0.001)
        p.add_argument("--all-frames-cap", type=int, default=None)
        p.add_argument("--hidden", type=int, default=None, help="DFL hidden width (default: c)")
        p.add_argument("--seeds", type=_seed_list, default=None)
        p.add_argument("--out", required=True)

    p = sub.add_parser("gen", help="write a synthetic sequence to disk")
    p.add_argument("--scenario", required=True)
    p.add_argument("--seeds", type=_seed_list, default=None, help="first seed overrides the scenario seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("run", help="track one sequence")
    matching_flags(p)
    p.add_argument("--dfl", default=DflMode.OFF.value, choices=[m.value for m in DflMode])
    p.add_argument("--dfl-params", default=None, help="parameter file (dfl-params v1)")
    p.add_argument("--save-masks", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run ablation variants over a seed list")
    matching_flags(p)
    p.add_argument("--variants", type=lambda s: [v for v in s.split(",") if v], default=list(VARIANTS))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="compare DFL gradients with finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=_size, default=(2, 2, 3), help="HxWxC, h*w <= 16")
    p.add_argument("--hidden", type=int, default=3)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--zero-mask", action="store_true", help="use an all-zero initial mask")
    p.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ScenarioError, FormatError, ContractError, FileNotFoundError) as exc:
        print(f"cmetrack {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
