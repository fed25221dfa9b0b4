"""Attention cost model and measurement harness.

Compares the block-attention transformer against plain full-grid attention:
analytically (token counts, score FLOPs) and empirically (peak live bytes
through the tensor engine during a training-style forward+backward, plus wall
time).  Absolute numbers depend on model size; the object of interest is the
scaling trend: block attention grows linearly with the number of grid tokens
while full attention grows quadratically.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .blockattn import PriorConfig, TokenTransformer, seq_len
from .sampling import SampleConfig, sample_image
from .tensor import AllocTracker, Rng, Tensor, cross_entropy, set_alloc_tracker

ITEMSIZE = 4  # float32 activations


@dataclass
class CostReport:
    mode: str  # "blockattn" or "global"
    grid_h: int
    grid_w: int
    block_size: int
    halo: int
    layers: int
    dim: int
    heads: int
    tokens_global: int  # plain-attention sequence length (H*W)
    tokens_blockattn: int  # per-block sequence length
    n_blocks: int
    score_entries: int  # attention score entries per full-grid pass
    attn_flops: int
    est_activation_bytes: int  # lower bound: score tensors alone
    measured_peak_bytes: Optional[int] = None
    measured_oom: bool = False
    wall_time_s: Optional[float] = None


def analytic_cost(grid_h: int, grid_w: int, block_size: int, halo: int,
                  layers: int = 1, dim: int = 32, heads: int = 2,
                  mode: str = "blockattn") -> CostReport:
    """Predicted attention cost of covering the whole grid once.

    blockattn: n_blocks forwards over short sequences; global: one forward
    over all H*W tokens (modelled as a single grid-sized block).
    """
    n = grid_h * grid_w
    s = seq_len(grid_h, grid_w, block_size, halo)
    nb = (grid_h // block_size) * (grid_w // block_size)
    if mode == "global":
        s_eff, blocks_eff = n, 1
    else:
        s_eff, blocks_eff = s, nb
    score_entries = layers * heads * blocks_eff * s_eff * s_eff
    attn_flops = 4 * layers * blocks_eff * s_eff * s_eff * dim
    return CostReport(
        mode=mode, grid_h=grid_h, grid_w=grid_w, block_size=block_size, halo=halo,
        layers=layers, dim=dim, heads=heads,
        tokens_global=n, tokens_blockattn=s, n_blocks=nb,
        score_entries=score_entries, attn_flops=attn_flops,
        est_activation_bytes=score_entries * ITEMSIZE,
    )


def _training_pass(model: TokenTransformer, grid: np.ndarray) -> None:
    """Forward all blocks and backprop one summed loss (training-shaped peak)."""
    plan, cfg = model.plan, model.cfg
    losses = []
    for b in range(plan.n_blocks):
        logits = model.forward(grid[None], b)
        targets = grid.reshape(-1)[plan.block_cells(b)]
        losses.append(cross_entropy(logits.reshape((plan.block_size**2, cfg.vocab)), targets))
    total = losses[0]
    for item in losses[1:]:
        total = total + item
    (total * (1.0 / len(losses))).backward()


def measured_cost(grid_side: int, block_size: int, halo: int, layers: int = 1,
                  dim: int = 32, heads: int = 2, vocab: int = 32,
                  seed: int = 0, trials: int = 1) -> CostReport:
    """Peak live bytes and wall time of real forward+backward passes.

    The probe counts arrays owned by the tensor engine (a deterministic lower
    bound on allocator traffic); an allocation failure is reported as a valid
    measured-OOM data point.
    """
    mode = "global" if block_size == grid_side and halo == 0 else "blockattn"
    report = analytic_cost(grid_side, grid_side, block_size, halo, layers, dim, heads, mode)
    rng = Rng(seed)
    try:
        cfg = PriorConfig(grid_side, grid_side, vocab, block_size, halo, layers, dim, heads)
        model = TokenTransformer(cfg, rng)
        grid = rng.integers(0, vocab, (grid_side, grid_side)).astype(np.int64)
        peaks, times = [], []
        for _ in range(trials):
            for p in model.params().values():
                p.grad = None
            tracker = AllocTracker()
            set_alloc_tracker(tracker)
            t0 = time.perf_counter()
            try:
                _training_pass(model, grid)
            finally:
                set_alloc_tracker(None)
            times.append(time.perf_counter() - t0)
            peaks.append(tracker.peak)
        report.measured_peak_bytes = max(peaks)
        report.wall_time_s = min(times)
    except MemoryError:
        set_alloc_tracker(None)
        report.measured_oom = True
    return report


def loglog_slope(xs, ys) -> float:
    """Least-squares slope of log(y) against log(x)."""
    return float(np.polyfit(np.log(np.asarray(xs, dtype=float)),
                            np.log(np.asarray(ys, dtype=float)), 1)[0])


def scaling_run(sides_blockattn=(16, 32, 64), sides_global=(16, 32, 48),
                block_size: int = 8, halo: int = 4, layers: int = 1,
                dim: int = 32, heads: int = 2, seed: int = 0,
                trials: int = 1) -> dict:
    """Measure peak bytes across latent sizes for both attention modes and
    fit log-log slopes against the token count H*W."""
    reports = []
    for side in sides_blockattn:
        reports.append(measured_cost(side, block_size, halo, layers, dim, heads, seed=seed, trials=trials))
    for side in sides_global:
        reports.append(measured_cost(side, side, 0, layers, dim, heads, seed=seed, trials=trials))
    block_reports = [r for r in reports if r.mode == "blockattn" and not r.measured_oom]
    global_reports = [r for r in reports if r.mode == "global" and not r.measured_oom]
    slopes = {
        "blockattn": loglog_slope([r.tokens_global for r in block_reports],
                                  [r.measured_peak_bytes for r in block_reports]),
        "global": loglog_slope([r.tokens_global for r in global_reports],
                               [r.measured_peak_bytes for r in global_reports]),
    }
    return {"reports": reports, "slopes": slopes}


def block_size_sweep(latent_side: int = 16, block_sizes=(1, 2, 4, 8, 16),
                     steps_per_block: int = 8, vocab: int = 16, layers: int = 1,
                     dim: int = 32, heads: int = 2, seed: int = 0) -> list[dict]:
    """Model calls and wall time for one full sampling run per block size.

    Halo is 0 so sequence composition changes only through the block
    structure; call counts follow n_blocks * T exactly.
    """
    rows = []
    for ws in block_sizes:
        cfg = PriorConfig(latent_side, latent_side, vocab, ws, 0, layers, dim, heads)
        model = TokenTransformer(cfg, Rng(seed))
        scfg = SampleConfig(steps_per_block=steps_per_block, seed=seed)
        t0 = time.perf_counter()
        result = sample_image(model, scfg, Rng(seed))
        wall = time.perf_counter() - t0
        rows.append({
            "block_size": ws,
            "n_blocks": model.plan.n_blocks,
            "model_calls": result.model_calls,
            "wall_time_s": wall,
        })
    return rows


_CSV_FIELDS = [
    "mode", "grid_h", "grid_w", "block_size", "halo", "layers", "dim", "heads",
    "tokens_global", "tokens_blockattn", "n_blocks", "score_entries", "attn_flops",
    "est_activation_bytes", "measured_peak_bytes", "measured_oom", "wall_time_s",
]


def write_cost_reports(reports: list[CostReport], csv_path, jsonl_path) -> None:
    """Emit CostReport rows as CSV (one header row) and JSON lines."""
    with open(csv_path, "w") as fh:
        fh.write(",".join(_CSV_FIELDS) + "\n")
        for r in reports:
            d = asdict(r)
            fh.write(",".join("" if d[k] is None else str(d[k]) for k in _CSV_FIELDS) + "\n")
    with open(jsonl_path, "w") as fh:
        for r in reports:
            fh.write(json.dumps(asdict(r)) + "\n")
