"""Relative cost of the built-in networks.

Wall-clock FPS depends on the machine, so the harness ranks networks by
their analytic FLOPs and parameter counts.  ``--time`` also measures one
forward pass per network on this machine for reference.
"""
from __future__ import annotations

import argparse
import time

from .analysis import count_flops, count_params
from .netdef import BUILTIN_NAMES, build_builtin


def cost_table(input_size: int = 416, class_count: int = 80) -> list[dict]:
    """One row per built-in network, cheapest first."""
    rows = []
    for name in BUILTIN_NAMES:
        g = build_builtin(name, class_count, input_size=input_size)
        rows.append({"name": name, "params": count_params(g)[0], "bflops": count_flops(g)})
    return sorted(rows, key=lambda r: r["bflops"])


def flops_ordering(input_size: int = 416) -> list[str]:
    return [r["name"] for r in cost_table(input_size)]


def time_forward(name: str, input_size: int = 416, seed: int = 0) -> float:
    import numpy as np

    from .engine import forward, random_weights

    g = build_builtin(name, input_size=input_size)
    w = random_weights(g, seed)
    img = np.random.default_rng(seed).random((3, input_size, input_size), dtype=np.float32)
    t0 = time.perf_counter()
    forward(g, w, img, threads=1)
    return time.perf_counter() - t0


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(prog="python -m yolosmall.bench", description=__doc__)
    ap.add_argument("--input-size", type=int, default=416)
    ap.add_argument("--time", action="store_true", help="also time one forward pass each")
    args = ap.parse_args(argv)
    print(f"{'network':<12} {'params':>11} {'BFLOPs':>8}" + ("  seconds" if args.time else ""))
    for r in cost_table(args.input_size):
        extra = f"  {time_forward(r['name'], args.input_size):7.2f}" if args.time else ""
        print(f"{r['name']:<12} {r['params']:>11,} {r['bflops']:>8.2f}{extra}")


if __name__ == "__main__":
    main()
