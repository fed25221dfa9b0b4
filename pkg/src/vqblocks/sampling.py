"""Block-autoregressive sampling with in-block parallel decoding.

Blocks are visited in raster order; inside a block, T rounds of parallel
decoding follow the cosine schedule: every round predicts all still-masked
cells, then keeps the most confident draws so the remaining masked count
matches the schedule.  Committed cells never change.

The module also ships two straight-line reference decoders used by the
verification command and the equivalence tests: a full-grid parallel decoder
(one block spanning the grid) and a raster autoregressive decoder (block
size 1, one step).  Both share the model weights and RNG stream and must
reproduce the sampler's trace bit for bit at the degenerate settings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .blockattn import TokenTransformer
from .quantize import Codebook
from .tensor import Rng, Tensor, no_grad
from .training import mask_fraction


@dataclass
class SampleConfig:
    steps_per_block: int = 8
    temperature: float = 1.0
    confidence_noise: float = 1.0  # gumbel scale, annealed linearly to zero
    seed: int = 0
    class_id: Optional[int] = None

    def __post_init__(self):
        if self.steps_per_block < 1:
            raise ValueError("steps_per_block must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class InfillSpec:
    """Token grid with fixed cells and MASK cells to generate."""

    grid: np.ndarray
    class_id: Optional[int] = None


@dataclass
class SampleResult:
    grid: np.ndarray
    image: Optional[np.ndarray]
    model_calls: int


def in_block_schedule(steps: int, block_size: int) -> list[int]:
    """Masked-count targets after each step: ceil(cos(pi*t/(2T)) * Ws^2).

    Monotone nonincreasing, ending at 0; step t commits the difference from
    the previous target (clamped to however many cells are actually masked).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    n = block_size * block_size
    return [math.ceil(n * mask_fraction(t / steps)) for t in range(1, steps + 1)]


def _softmax_rows(logits: np.ndarray, temperature: float) -> np.ndarray:
    x = logits.astype(np.float64) / temperature
    x = x - x.max(axis=1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=1, keepdims=True)


def _categorical(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    ids = (cdf < u[:, None]).sum(axis=1)
    return np.minimum(ids, probs.shape[1] - 1)


def _gumbel(rng: Rng, n: int) -> np.ndarray:
    return -np.log(-np.log(rng.random(n)))


def sample_block(model: TokenTransformer, grid: np.ndarray, block_id: int,
                 cfg: SampleConfig, rng: Rng, trace: list | None = None) -> int:
    """Fill the block's masked cells in place; returns the model call count.

    A block with no masked cells is untouched and costs zero calls; otherwise
    the model runs exactly ``steps_per_block`` times.
    """
    plan = model.plan
    mask_id = model.cfg.mask_id
    cells = plan.block_cells(block_id)
    flat = grid.reshape(-1)
    if not (flat[cells] == mask_id).any():
        return 0
    schedule = in_block_schedule(cfg.steps_per_block, plan.block_size)
    t_total = cfg.steps_per_block
    calls = 0
    for t in range(1, t_total + 1):
        in_block_rows = np.nonzero(flat[cells] == mask_id)[0]
        masked_cells = cells[in_block_rows]
        cur = masked_cells.size
        target = min(schedule[t - 1], cur)
        with no_grad():
            logits = model.forward(grid[None], block_id, class_ids=cfg.class_id).data[0]
        calls += 1
        probs = _softmax_rows(logits[in_block_rows], cfg.temperature)
        u = rng.random(cur)
        ids = _categorical(probs, u)
        fix = cur - target
        if fix == 0:
            kept = np.empty(0, dtype=np.int64)
        elif fix == cur:
            kept = np.arange(cur)
        else:
            conf = probs[np.arange(cur), ids]
            noise_scale = cfg.confidence_noise * (1.0 - t / t_total)
            conf = conf + noise_scale * _gumbel(rng, cur)
            kept = np.argsort(-conf, kind="stable")[:fix]
        flat[masked_cells[kept]] = ids[kept]
        if trace is not None:
            trace.append((block_id, t, tuple(masked_cells), tuple(ids),
                          tuple(masked_cells[kept]), target))
    return calls


def decode_tokens(decoder, codebook: Codebook, grid: np.ndarray) -> np.ndarray:
    """Map a finished token grid through the codebook and stage-1 decoder."""
    rows = codebook.entries.data[grid]
    with no_grad():
        img = decoder.forward(Tensor(rows[None]))
    return img.data[0]


def sample_image(model: TokenTransformer, cfg: SampleConfig, rng: Rng,
                 decoder=None, codebook: Codebook | None = None,
                 trace: list | None = None) -> SampleResult:
    """Generate one token grid block by block, optionally decoding to pixels."""
    plan = model.plan
    grid = np.full((model.cfg.grid_height, model.cfg.grid_width), model.cfg.mask_id, dtype=np.int64)
    calls = 0
    for b in range(plan.n_blocks):
        calls += sample_block(model, grid, b, cfg, rng, trace)
    if (grid == model.cfg.mask_id).any():
        raise RuntimeError("sampling finished with MASK cells remaining")
    image = decode_tokens(decoder, codebook, grid) if decoder is not None else None
    return SampleResult(grid, image, calls)


def infill(model: TokenTransformer, spec: InfillSpec, cfg: SampleConfig, rng: Rng,
           decoder=None, codebook: Codebook | None = None,
           trace: list | None = None) -> SampleResult:
    """Complete the masked cells of a partially known grid.

    Blocks without masked cells are skipped entirely; fixed cells come out
    bit-identical.
    """
    mask_id = model.cfg.mask_id
    grid = np.asarray(spec.grid).astype(np.int64).copy()
    if grid.shape != (model.cfg.grid_height, model.cfg.grid_width):
        raise ValueError("infill grid dims do not match the model")
    known = grid != mask_id
    if grid[known].size and (grid[known].min() < 0 or grid[known].max() >= model.cfg.vocab):
        raise ValueError("known cells must hold codebook ids")
    run_cfg = cfg if spec.class_id is None else SampleConfig(
        cfg.steps_per_block, cfg.temperature, cfg.confidence_noise, cfg.seed, spec.class_id
    )
    calls = 0
    for b in range(model.plan.n_blocks):
        calls += sample_block(model, grid, b, run_cfg, rng, trace)
    image = decode_tokens(decoder, codebook, grid) if decoder is not None else None
    return SampleResult(grid, image, calls)


def pixel_mask_to_token_mask(pixel_mask: np.ndarray, downsample: int) -> np.ndarray:
    """Any-overlap mapping of a pixel-level mask onto token cells."""
    h, w = pixel_mask.shape
    f = downsample
    view = pixel_mask.reshape(h // f, f, w // f, f)
    return view.any(axis=(1, 3))


# ---------------------------------------------------------------------------
# reference decoders (independent straight-line implementations)
# ---------------------------------------------------------------------------


def global_parallel_reference(model: TokenTransformer, cfg: SampleConfig, rng: Rng,
                              trace: list | None = None) -> np.ndarray:
    """Full-grid parallel decoding with the cosine schedule.

    Requires a model whose single block spans the whole grid; used to verify
    that the block sampler degenerates to plain parallel decoding.
    """
    if model.plan.n_blocks != 1:
        raise ValueError("reference needs block_size == grid side (one block)")
    h, w = model.cfg.grid_height, model.cfg.grid_width
    n = h * w
    mask_id = model.cfg.mask_id
    grid = np.full((h, w), mask_id, dtype=np.int64)
    flat = grid.reshape(-1)
    t_total = cfg.steps_per_block
    for t in range(1, t_total + 1):
        rows = np.nonzero(flat == mask_id)[0]
        cur = rows.size
        # final step always empties the mask; cos(pi/2) != 0 in floats
        target = 0 if t == t_total else min(math.ceil(n * math.cos(0.5 * math.pi * t / t_total)), cur)
        with no_grad():
            logits = model.forward(grid[None], 0, class_ids=cfg.class_id).data[0]
        probs = _softmax_rows(logits[rows], cfg.temperature)
        ids = _categorical(probs, rng.random(cur))
        fix = cur - target
        if fix == 0:
            kept = np.empty(0, dtype=np.int64)
        elif fix == cur:
            kept = np.arange(cur)
        else:
            score = probs[np.arange(cur), ids] + cfg.confidence_noise * (1.0 - t / t_total) * _gumbel(rng, cur)
            kept = np.argsort(-score, kind="stable")[:fix]
        flat[rows[kept]] = ids[kept]
        if trace is not None:
            trace.append((0, t, tuple(rows), tuple(ids), tuple(rows[kept]), target))
    return grid


def raster_autoregressive_reference(model: TokenTransformer, cfg: SampleConfig, rng: Rng,
                                    trace: list | None = None) -> np.ndarray:
    """One token per step in raster order, sampled from the model conditional.

    Requires block_size == 1; used to verify the sampler degenerates to
    autoregressive generation at block size 1 with a single in-block step.
    """
    if model.plan.block_size != 1:
        raise ValueError("reference needs block_size == 1")
    h, w = model.cfg.grid_height, model.cfg.grid_width
    grid = np.full((h, w), model.cfg.mask_id, dtype=np.int64)
    flat = grid.reshape(-1)
    for cell in range(h * w):
        with no_grad():
            logits = model.forward(grid[None], cell, class_ids=cfg.class_id).data[0]
        probs = _softmax_rows(logits, cfg.temperature)
        token = int(_categorical(probs, rng.random(1))[0])
        flat[cell] = token
        if trace is not None:
            trace.append((cell, 1, (cell,), (token,), (cell,), 0))
    return grid
