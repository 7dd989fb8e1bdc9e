"""Wall-time and tape-memory comparison of the backward modes."""

from __future__ import annotations

import time

import numpy as np

from .encoders import init_params
from .implicit_grad import backward_approximate, backward_unrolled
from .inner_opt import InnerConfig, minimize
from .matching import hungarian_loss_grad
from .tasks import seed_stream


def measure_modes(n, d, hidden, batch, iterations, seed=0) -> dict:
    """One decode+backward in unrolled and approximate mode at matched T."""
    rng = seed_stream(seed, "bench")
    params = init_params(d, hidden, "fspool", n=n, rng=rng)
    y0 = rng.normal(0, np.sqrt(0.1), size=(batch * n, d))
    z = rng.normal(size=(batch, hidden))
    target = rng.standard_normal((batch, n, d))
    upstream = rng.normal(size=(batch * n, d)) / (batch * n)
    out = {}
    for mode in ("approximate", "unrolled"):
        cfg = InnerConfig(
            step_size=0.1,
            iterations=iterations,
            clip_norm=10.0,
            anchor_lambda=0.2,
            record_for_unroll=(mode == "unrolled"),
        )
        t0 = time.perf_counter()
        trace = minimize(z, params, y0, cfg, batch=batch)
        t1 = time.perf_counter()
        match_t0 = time.perf_counter()
        for s in range(batch):
            hungarian_loss_grad(trace.y_final[s * n : (s + 1) * n], target[s], "huber", fast=True)
        match_t1 = time.perf_counter()
        if mode == "unrolled":
            bundle = backward_unrolled(trace, z, params, upstream)
            peak_nodes = bundle.diagnostics["tape_nodes"]
        else:
            bundle = backward_approximate(trace.y_final, z, params, cfg, upstream, batch=batch)
            peak_nodes = max(trace.peak_tape_nodes, bundle.diagnostics["tape_nodes"])
        t2 = time.perf_counter()
        out[mode] = {
            "iterations": iterations,
            "peak_tape_nodes": int(peak_nodes),
            "forward_ms": (t1 - t0) * 1e3,
            "matching_ms": (match_t1 - match_t0) * 1e3,
            "backward_ms": (t2 - match_t1) * 1e3,
        }
    return out


def run_bench(n, d, hidden, batch, iteration_counts, seed=0) -> dict:
    """Per-T phase breakdown; node counts split from timings for stable output."""
    stable = {"node_counts": {}}
    timing = {}
    for t in iteration_counts:
        res = measure_modes(n, d, hidden, batch, t, seed=seed)
        stable["node_counts"][str(t)] = {m: res[m]["peak_tape_nodes"] for m in res}
        timing[str(t)] = {
            m: {k: v for k, v in res[m].items() if k.endswith("_ms")} for m in res
        }
    counts = stable["node_counts"]
    ts = sorted(int(t) for t in counts)
    if len(ts) >= 2:
        approx = [counts[str(t)]["approximate"] for t in ts]
        stable["approximate_t_independent"] = bool(
            max(approx) - min(approx) <= 0.01 * max(approx)
        )
        unrolled = [counts[str(t)]["unrolled"] for t in ts]
        stable["unrolled_vs_t_r2"] = _linear_r2(ts, unrolled)
    return {"stable": stable, "timing": timing}


def _linear_r2(xs, ys) -> float:
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    a, b = np.polyfit(x, y, 1)
    pred = a * x + b
    ss_res = ((y - pred) ** 2).sum()
    ss_tot = ((y - y.mean()) ** 2).sum()
    return float(1.0 - ss_res / ss_tot) if ss_tot > 0 else 1.0
