"""Windowed local-attention encoder/decoder around the quantization bottleneck.

The encoder embeds fixed 4x4 patches, runs window-attention transformer
stages with 2x patch-merging between them, and projects to the latent grid.
The decoder mirrors it with patch-expanding stages, a final nearest-neighbor
2x upsample, and a linear projection to pixels (no squashing; clamp to [0,1]
happens at image serialization only).

Windows never wrap around image borders: a shifted layer re-anchors the
tiling and edge windows simply get fewer cells, which keeps the influence of
any cell provably local (see ``receptive_radius``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    Rng,
    ShapeError,
    Tensor,
    broadcast_to,
    concat,
    gelu,
    init_linear,
    layer_norm,
    matmul,
    ones_param,
    softmax,
    take0,
    transpose,
    zeros_param,
)

PATCH = 4  # fixed patch size of the pixel embedding

MASK_BIAS = -1e9  # additive attention bias for invalid positions


@dataclass
class AeConfig:
    image_size: int = 16
    channels: int = 1
    downsample: int = 4  # f: latent grid is (H/f) x (W/f)
    window: int = 4
    dims: tuple[int, ...] = (64,)
    depths: tuple[int, ...] = (2,)
    heads: tuple[int, ...] = (4,)
    latent_dim: int = 16

    def __post_init__(self):
        n = len(self.depths)
        if len(self.dims) != n or len(self.heads) != n:
            raise ValueError("dims, depths and heads must have equal length")
        if self.downsample != PATCH * 2 ** (n - 1):
            raise ValueError(
                f"downsample factor {self.downsample} needs {self._stages_for(self.downsample)} "
                f"stage(s), got {n}"
            )
        if self.image_size % self.downsample != 0:
            raise ValueError("image size must be divisible by the downsample factor")
        for i in range(n):
            side = self.image_size // (PATCH * 2**i)
            if side % self.window != 0:
                raise ValueError(f"stage {i} grid side {side} not divisible by window {self.window}")
        for d, h in zip(self.dims, self.heads):
            if d % h != 0:
                raise ValueError("stage dim must divide evenly over heads")

    @staticmethod
    def _stages_for(f: int) -> int:
        return int(np.log2(f / PATCH)) + 1

    @property
    def n_stages(self) -> int:
        return len(self.depths)

    @property
    def latent_side(self) -> int:
        return self.image_size // self.downsample

    def stage_side(self, i: int) -> int:
        return self.image_size // (PATCH * 2**i)


# ---------------------------------------------------------------------------
# window tiling
# ---------------------------------------------------------------------------


def _bands(n: int, win: int, shift: int) -> list[tuple[int, int]]:
    edges = [0]
    pos = win - shift if shift else win
    while pos < n:
        edges.append(pos)
        pos += win
    edges.append(n)
    return list(zip(edges[:-1], edges[1:]))


@dataclass(frozen=True)
class WindowPlan:
    """Non-overlapping tiling of an h x w grid, optionally shifted.

    ``idx`` is [n_windows, max_len] of flat cell ids (-1 padding),
    ``valid`` the matching mask, and ``inverse`` maps each cell back to its
    (window, slot) position as a flat index into the window layout.
    """

    h: int
    w: int
    window: int
    shift: int
    idx: np.ndarray = field(repr=False)
    valid: np.ndarray = field(repr=False)
    inverse: np.ndarray = field(repr=False)


def window_plan(h: int, w: int, window: int, shift: int = 0) -> WindowPlan:
    rows = _bands(h, window, shift)
    cols = _bands(w, window, shift)
    max_len = window * window
    groups = []
    for r0, r1 in rows:
        for c0, c1 in cols:
            rr, cc = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
            groups.append((rr * w + cc).reshape(-1))
    idx = np.full((len(groups), max_len), -1, dtype=np.int64)
    for g, cells in enumerate(groups):
        idx[g, : cells.size] = cells
    valid = idx >= 0
    inverse = np.empty(h * w, dtype=np.int64)
    flat = idx.reshape(-1)
    inverse[flat[flat >= 0]] = np.nonzero(flat >= 0)[0]
    return WindowPlan(h, w, window, shift, idx, valid, inverse)


# ---------------------------------------------------------------------------
# transformer block over windows
# ---------------------------------------------------------------------------


class WindowBlock:
    """Pre-LN self-attention within each window, then a GELU MLP."""

    def __init__(self, dim: int, heads: int, rng: Rng, dtype=np.float32):
        self.dim = dim
        self.heads = heads
        self.ln1_g = ones_param(dim, dtype)
        self.ln1_b = zeros_param(dim, dtype)
        self.w_qkv = init_linear(rng, dim, (dim, 3 * dim), dtype)
        self.b_qkv = zeros_param(3 * dim, dtype)
        self.w_out = init_linear(rng, dim, (dim, dim), dtype)
        self.b_out = zeros_param(dim, dtype)
        self.ln2_g = ones_param(dim, dtype)
        self.ln2_b = zeros_param(dim, dtype)
        hidden = 4 * dim
        self.w_mlp1 = init_linear(rng, dim, (dim, hidden), dtype)
        self.b_mlp1 = zeros_param(hidden, dtype)
        self.w_mlp2 = init_linear(rng, hidden, (hidden, dim), dtype)
        self.b_mlp2 = zeros_param(dim, dtype)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.{k}": v
            for k, v in vars(self).items()
            if isinstance(v, Tensor)
        }

    def forward(self, x: Tensor, plan: WindowPlan) -> Tensor:
        b, h, w, d = x.shape
        n = h * w
        dh = d // self.heads
        xf = x.reshape((b, n, d))

        a = layer_norm(xf, self.ln1_g, self.ln1_b)
        qkv = matmul(a, self.w_qkv) + self.b_qkv  # [B, N, 3d]

        safe_idx = np.where(plan.idx >= 0, plan.idx, 0)
        gathered = take0(transpose(qkv, (1, 0, 2)), safe_idx)  # [G, L, B, 3d]
        gathered = transpose(gathered, (2, 0, 1, 3))  # [B, G, L, 3d]
        g_, l_ = plan.idx.shape

        q = gathered[:, :, :, 0:d]
        k = gathered[:, :, :, d : 2 * d]
        v = gathered[:, :, :, 2 * d : 3 * d]
        q = transpose(q.reshape((b, g_, l_, self.heads, dh)), (0, 1, 3, 2, 4))
        k = transpose(k.reshape((b, g_, l_, self.heads, dh)), (0, 1, 3, 2, 4))
        v = transpose(v.reshape((b, g_, l_, self.heads, dh)), (0, 1, 3, 2, 4))

        bias = np.where(plan.valid, 0.0, MASK_BIAS).astype(x.dtype)
        bias = bias[None, :, None, None, :]  # [1, G, 1, 1, L]
        scores = matmul(q, transpose(k, (0, 1, 2, 4, 3))) * (1.0 / np.sqrt(dh))
        attn = softmax(scores + Tensor(bias), axis=-1)
        mixed = matmul(attn, v)  # [B, G, h, L, dh]
        mixed = transpose(mixed, (0, 1, 3, 2, 4)).reshape((b, g_ * l_, d))

        # scatter windows back to the grid (a permutation of valid slots)
        back = take0(transpose(mixed, (1, 0, 2)), plan.inverse)
        back = transpose(back, (1, 0, 2))  # [B, N, d]
        xf = xf + (matmul(back, self.w_out) + self.b_out)

        m = layer_norm(xf, self.ln2_g, self.ln2_b)
        m = matmul(gelu(matmul(m, self.w_mlp1) + self.b_mlp1), self.w_mlp2) + self.b_mlp2
        return (xf + m).reshape((b, h, w, d))


# ---------------------------------------------------------------------------
# patch rearrangement ops
# ---------------------------------------------------------------------------


def patch_cells(img: Tensor) -> Tensor:
    """[B, H, W, C] -> [B, H/4, W/4, 16*C] by flattening each 4x4 patch."""
    b, hh, ww, c = img.shape
    if hh % PATCH or ww % PATCH:
        raise ShapeError("image dims must be divisible by the patch size")
    h, w = hh // PATCH, ww // PATCH
    x = img.reshape((b, h, PATCH, w, PATCH, c))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return x.reshape((b, h, w, PATCH * PATCH * c))


def merge_cells(x: Tensor) -> Tensor:
    """[B, h, w, d] -> [B, h/2, w/2, 4d] by concatenating 2x2 neighborhoods."""
    b, h, w, d = x.shape
    if h % 2 or w % 2:
        raise ShapeError("patch merge requires even grid dims")
    y = x.reshape((b, h // 2, 2, w // 2, 2, d))
    y = transpose(y, (0, 1, 3, 2, 4, 5))
    return y.reshape((b, h // 2, w // 2, 4 * d))


def expand_cells(x: Tensor) -> Tensor:
    """[B, h, w, 4d] -> [B, 2h, 2w, d]: spread channel groups over 2x2 cells."""
    b, h, w, d4 = x.shape
    d = d4 // 4
    y = x.reshape((b, h, w, 2, 2, d))
    y = transpose(y, (0, 1, 3, 2, 4, 5))
    return y.reshape((b, 2 * h, 2 * w, d))


def nearest_upsample(x: Tensor) -> Tensor:
    """2x nearest-neighbor: each cell replicated into a 2x2 block."""
    b, h, w, d = x.shape
    y = x.reshape((b, h, 1, w, 1, d))
    y = broadcast_to(y, (b, h, 2, w, 2, d))
    return y.reshape((b, 2 * h, 2 * w, d))


# ---------------------------------------------------------------------------
# encoder / decoder
# ---------------------------------------------------------------------------


class LocalEncoder:
    def __init__(self, cfg: AeConfig, rng: Rng, dtype=np.float32):
        self.cfg = cfg
        in_dim = PATCH * PATCH * cfg.channels
        self.embed_w = init_linear(rng, in_dim, (in_dim, cfg.dims[0]), dtype)
        self.embed_b = zeros_param(cfg.dims[0], dtype)
        self.stages: list[list[WindowBlock]] = []
        self.merge_w: list[Tensor] = []
        self.merge_b: list[Tensor] = []
        self.plans: list[tuple[WindowPlan, WindowPlan]] = []
        for i in range(cfg.n_stages):
            side = cfg.stage_side(i)
            self.plans.append(
                (window_plan(side, side, cfg.window, 0),
                 window_plan(side, side, cfg.window, cfg.window // 2))
            )
            self.stages.append(
                [WindowBlock(cfg.dims[i], cfg.heads[i], rng, dtype) for _ in range(cfg.depths[i])]
            )
            if i + 1 < cfg.n_stages:
                self.merge_w.append(init_linear(rng, 4 * cfg.dims[i], (4 * cfg.dims[i], cfg.dims[i + 1]), dtype))
                self.merge_b.append(zeros_param(cfg.dims[i + 1], dtype))
        self.out_ln_g = ones_param(cfg.dims[-1], dtype)
        self.out_ln_b = zeros_param(cfg.dims[-1], dtype)
        self.out_w = init_linear(rng, cfg.dims[-1], (cfg.dims[-1], cfg.latent_dim), dtype)
        self.out_b = zeros_param(cfg.latent_dim, dtype)

    def params(self) -> dict[str, Tensor]:
        out = {"enc.embed.w": self.embed_w, "enc.embed.b": self.embed_b}
        for i, blocks in enumerate(self.stages):
            for j, blk in enumerate(blocks):
                out.update(blk.params(f"enc.s{i}.l{j}"))
        for i, (w, b) in enumerate(zip(self.merge_w, self.merge_b)):
            out[f"enc.merge{i}.w"] = w
            out[f"enc.merge{i}.b"] = b
        out.update({"enc.out.ln_g": self.out_ln_g, "enc.out.ln_b": self.out_ln_b,
                    "enc.out.w": self.out_w, "enc.out.b": self.out_b})
        return out

    def forward(self, img: Tensor) -> Tensor:
        cfg = self.cfg
        if img.shape[1] != cfg.image_size or img.shape[2] != cfg.image_size or img.shape[3] != cfg.channels:
            raise ShapeError(f"expected [B, {cfg.image_size}, {cfg.image_size}, {cfg.channels}] images")
        x = matmul(patch_cells(img), self.embed_w) + self.embed_b
        for i, blocks in enumerate(self.stages):
            plain, shifted = self.plans[i]
            for j, blk in enumerate(blocks):
                x = blk.forward(x, shifted if j % 2 else plain)
            if i + 1 < cfg.n_stages:
                x = matmul(merge_cells(x), self.merge_w[i]) + self.merge_b[i]
        x = layer_norm(x, self.out_ln_g, self.out_ln_b)
        return matmul(x, self.out_w) + self.out_b


class LocalDecoder:
    def __init__(self, cfg: AeConfig, rng: Rng, dtype=np.float32):
        self.cfg = cfg
        self.in_w = init_linear(rng, cfg.latent_dim, (cfg.latent_dim, cfg.dims[-1]), dtype)
        self.in_b = zeros_param(cfg.dims[-1], dtype)
        self.stages: list[list[WindowBlock]] = []
        self.expand_w: list[Tensor] = []
        self.expand_b: list[Tensor] = []
        self.plans: list[tuple[WindowPlan, WindowPlan]] = []
        for i in reversed(range(cfg.n_stages)):
            side = cfg.stage_side(i)
            self.plans.append(
                (window_plan(side, side, cfg.window, 0),
                 window_plan(side, side, cfg.window, cfg.window // 2))
            )
            self.stages.append(
                [WindowBlock(cfg.dims[i], cfg.heads[i], rng, dtype) for _ in range(cfg.depths[i])]
            )
            out_dim = cfg.dims[i - 1] if i > 0 else cfg.dims[0]
            self.expand_w.append(init_linear(rng, cfg.dims[i], (cfg.dims[i], 4 * out_dim), dtype))
            self.expand_b.append(zeros_param(4 * out_dim, dtype))
        self.out_w = init_linear(rng, cfg.dims[0], (cfg.dims[0], cfg.channels), dtype)
        self.out_b = zeros_param(cfg.channels, dtype)

    def params(self) -> dict[str, Tensor]:
        out = {"dec.in.w": self.in_w, "dec.in.b": self.in_b}
        for i, blocks in enumerate(self.stages):
            for j, blk in enumerate(blocks):
                out.update(blk.params(f"dec.s{i}.l{j}"))
        for i, (w, b) in enumerate(zip(self.expand_w, self.expand_b)):
            out[f"dec.expand{i}.w"] = w
            out[f"dec.expand{i}.b"] = b
        out.update({"dec.out.w": self.out_w, "dec.out.b": self.out_b})
        return out

    def forward(self, z_q: Tensor) -> Tensor:
        cfg = self.cfg
        side = cfg.latent_side
        if z_q.shape[1] != side or z_q.shape[2] != side or z_q.shape[3] != cfg.latent_dim:
            raise ShapeError(f"expected [B, {side}, {side}, {cfg.latent_dim}] latents")
        x = matmul(z_q, self.in_w) + self.in_b
        for s, blocks in enumerate(self.stages):
            plain, shifted = self.plans[s]
            for j, blk in enumerate(blocks):
                x = blk.forward(x, shifted if j % 2 else plain)
            x = expand_cells(matmul(x, self.expand_w[s]) + self.expand_b[s])
        x = nearest_upsample(x)
        return matmul(x, self.out_w) + self.out_b


class LocalAutoencoder:
    """Symmetric encoder/decoder pair sharing one configuration."""

    def __init__(self, cfg: AeConfig, rng: Rng, dtype=np.float32):
        self.cfg = cfg
        self.encoder = LocalEncoder(cfg, rng, dtype)
        self.decoder = LocalDecoder(cfg, rng, dtype)

    def params(self) -> dict[str, Tensor]:
        out = self.encoder.params()
        out.update(self.decoder.params())
        return out

    def encode(self, images) -> Tensor:
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images))
        return self.encoder.forward(images)

    def decode(self, z_q: Tensor) -> Tensor:
        return self.decoder.forward(z_q)


# ---------------------------------------------------------------------------
# receptive-field bound
# ---------------------------------------------------------------------------


def receptive_radius(cfg: AeConfig, side: str = "decoder") -> int:
    """Sound bound on perturbation spread, by interval arithmetic over layers.

    decoder: the maximum number of output pixels, beyond the perturbed latent
    cell's own f x f footprint, that can change in any direction.  Each
    window-attention layer widens the affected box by (window - 1) cells
    (shifted or not, windows never wrap), each 2x upsample doubles margins.

    encoder: the analogous bound in latent cells around the patch containing
    a perturbed input pixel (merges halve margins, rounding up).
    """
    w = cfg.window
    if side == "decoder":
        m = 0
        for i in reversed(range(cfg.n_stages)):
            m += cfg.depths[i] * (w - 1)
            m *= 2  # patch expand
        return m * 2  # final nearest-neighbor upsample
    if side == "encoder":
        m = 0
        for i in range(cfg.n_stages):
            m += cfg.depths[i] * (w - 1)
            if i + 1 < cfg.n_stages:
                m = (m + 1) // 2  # patch merge
        return m
    raise ValueError("side must be 'encoder' or 'decoder'")


def affected_pixel_box(cfg: AeConfig, cell_row: int, cell_col: int) -> tuple[int, int, int, int]:
    """Inclusive pixel box (r0, r1, c0, c1) a latent-cell edit may touch."""
    f = cfg.downsample
    m = receptive_radius(cfg, "decoder")
    r0 = max(0, cell_row * f - m)
    r1 = min(cfg.image_size - 1, (cell_row + 1) * f - 1 + m)
    c0 = max(0, cell_col * f - m)
    c1 = min(cfg.image_size - 1, (cell_col + 1) * f - 1 + m)
    return r0, r1, c0, c1
