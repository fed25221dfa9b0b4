"""Block-structured attention over token grids: pooled per-block global
tokens concatenated with one block's halo-local tokens.

For a query block the model sees (a) one pooled summary token per block of
the whole grid and (b) the (block + halo) local neighborhood, and predicts
codebook logits for the block's own cells.  Attention is full self-attention
over that concatenated sequence, so its cost scales with the short sequence
rather than with the full grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    Rng,
    ShapeError,
    Tensor,
    concat,
    gelu,
    init_embedding,
    init_linear,
    layer_norm,
    matmul,
    ones_param,
    softmax,
    take0,
    transpose,
    zeros_param,
)

MASK_BIAS = -1e9

# running count of attention score entries computed (heads * Lq * Lk),
# used to assert complexity claims and by the bench module
_score_ops = 0


def reset_score_ops() -> None:
    global _score_ops
    _score_ops = 0


def score_ops() -> int:
    return _score_ops


def seq_len(h: int, w: int, block_size: int, halo: int) -> int:
    """Attention sequence length: one global token per block plus the
    (block_size + 2*halo)^2 local window."""
    if h % block_size or w % block_size:
        raise ShapeError("grid dims must be divisible by the block size")
    return (h // block_size) * (w // block_size) + (block_size + 2 * halo) ** 2


@dataclass(frozen=True)
class BlockPlan:
    """Partition of an h x w token grid into square query blocks.

    Blocks are visited in raster order.  ``local_idx[b]`` lists the flat grid
    positions of block b's halo window (-1 where the window pokes outside the
    grid); ``inner_slots`` are the window slots of the block's own cells.
    """

    height: int
    width: int
    block_size: int
    halo: int
    local_idx: np.ndarray = field(repr=False)
    local_valid: np.ndarray = field(repr=False)
    inner_slots: np.ndarray = field(repr=False)

    @property
    def blocks_h(self) -> int:
        return self.height // self.block_size

    @property
    def blocks_w(self) -> int:
        return self.width // self.block_size

    @property
    def n_blocks(self) -> int:
        return self.blocks_h * self.blocks_w

    @property
    def local_len(self) -> int:
        return (self.block_size + 2 * self.halo) ** 2

    @property
    def seq_len(self) -> int:
        return self.n_blocks + self.local_len

    def block_origin(self, block_id: int) -> tuple[int, int]:
        return (
            (block_id // self.blocks_w) * self.block_size,
            (block_id % self.blocks_w) * self.block_size,
        )

    def block_cells(self, block_id: int) -> np.ndarray:
        """Flat grid ids of the block's own cells, raster order."""
        r0, c0 = self.block_origin(block_id)
        rr, cc = np.meshgrid(
            np.arange(r0, r0 + self.block_size),
            np.arange(c0, c0 + self.block_size),
            indexing="ij",
        )
        return (rr * self.width + cc).reshape(-1)

    def block_of_cell(self, flat_cell: int) -> int:
        r, c = divmod(flat_cell, self.width)
        return (r // self.block_size) * self.blocks_w + (c // self.block_size)


def make_block_plan(height: int, width: int, block_size: int, halo: int) -> BlockPlan:
    if height % block_size or width % block_size:
        raise ShapeError("grid dims must be divisible by the block size")
    if halo < 0:
        raise ValueError("halo must be >= 0")
    side = block_size + 2 * halo
    nb = (height // block_size) * (width // block_size)
    local_idx = np.full((nb, side * side), -1, dtype=np.int64)
    for b in range(nb):
        r0 = (b // (width // block_size)) * block_size - halo
        c0 = (b % (width // block_size)) * block_size - halo
        rr, cc = np.meshgrid(np.arange(r0, r0 + side), np.arange(c0, c0 + side), indexing="ij")
        inside = (rr >= 0) & (rr < height) & (cc >= 0) & (cc < width)
        flat = np.where(inside, rr * width + cc, -1)
        local_idx[b] = flat.reshape(-1)
    local_valid = local_idx >= 0
    inner = np.arange(side * side).reshape(side, side)[
        halo : halo + block_size, halo : halo + block_size
    ].reshape(-1)
    return BlockPlan(height, width, block_size, halo, local_idx, local_valid, inner)


def gather_local(grid: np.ndarray, block_id: int, plan: BlockPlan) -> tuple[np.ndarray, np.ndarray]:
    """Tokens of the halo window around a query block plus a validity mask.

    Out-of-grid slots hold -1 and are invalid; callers map them to a PAD
    vocabulary entry and attention-mask them.
    """
    flat = grid.reshape(-1)
    idx = plan.local_idx[block_id]
    valid = plan.local_valid[block_id]
    tokens = np.where(valid, flat[np.where(valid, idx, 0)], -1)
    return tokens, valid


@dataclass
class PriorConfig:
    grid_height: int = 16
    grid_width: int = 16
    vocab: int = 1024  # codebook entries; MASK and PAD ids follow
    block_size: int = 4
    halo: int = 2
    layers: int = 4
    dim: int = 128
    heads: int = 4
    n_classes: int = 0

    def __post_init__(self):
        if self.grid_height % self.block_size or self.grid_width % self.block_size:
            raise ValueError("grid dims must be divisible by the block size")
        if self.dim % self.heads:
            raise ValueError("dim must divide evenly over heads")

    @property
    def mask_id(self) -> int:
        return self.vocab

    @property
    def pad_id(self) -> int:
        return self.vocab + 1


class AttnLayer:
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
        self.w_mlp1 = init_linear(rng, dim, (dim, 4 * dim), dtype)
        self.b_mlp1 = zeros_param(4 * dim, dtype)
        self.w_mlp2 = init_linear(rng, 4 * dim, (4 * dim, dim), dtype)
        self.b_mlp2 = zeros_param(dim, dtype)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": v for k, v in vars(self).items() if isinstance(v, Tensor)}

    def forward(self, x: Tensor, key_bias: np.ndarray, attn_sink: list | None = None) -> Tensor:
        global _score_ops
        b, s, d = x.shape
        dh = d // self.heads
        a = layer_norm(x, self.ln1_g, self.ln1_b)
        qkv = matmul(a, self.w_qkv) + self.b_qkv
        q = qkv[:, :, 0:d]
        k = qkv[:, :, d : 2 * d]
        v = qkv[:, :, 2 * d : 3 * d]
        q = transpose(q.reshape((b, s, self.heads, dh)), (0, 2, 1, 3))
        k = transpose(k.reshape((b, s, self.heads, dh)), (0, 2, 1, 3))
        v = transpose(v.reshape((b, s, self.heads, dh)), (0, 2, 1, 3))
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
        _score_ops += b * self.heads * s * s
        attn = softmax(scores + Tensor(key_bias), axis=-1)
        if attn_sink is not None:
            attn_sink.append(attn.data.copy())
        mixed = transpose(matmul(attn, v), (0, 2, 1, 3)).reshape((b, s, d))
        x = x + (matmul(mixed, self.w_out) + self.b_out)
        m = layer_norm(x, self.ln2_g, self.ln2_b)
        m = matmul(gelu(matmul(m, self.w_mlp1) + self.b_mlp1), self.w_mlp2) + self.b_mlp2
        return x + m


class TokenTransformer:
    """Masked token model over one query block with pooled global context.

    Vocabulary rows 0..K-1 are codebook ids, row K the MASK token and row
    K+1 the PAD token used for halo slots outside the grid.
    """

    def __init__(self, cfg: PriorConfig, rng: Rng, dtype=np.float32):
        self.cfg = cfg
        self.plan = make_block_plan(cfg.grid_height, cfg.grid_width, cfg.block_size, cfg.halo)
        d = cfg.dim
        self.tok_emb = init_embedding(rng, (cfg.vocab + 2, d), dtype)
        self.pos_local = init_embedding(rng, (cfg.grid_height * cfg.grid_width, d), dtype)
        self.pos_global = init_embedding(rng, (self.plan.n_blocks, d), dtype)
        if cfg.n_classes:
            self.class_emb = init_embedding(rng, (cfg.n_classes, d), dtype)
        else:
            self.class_emb = None
        pooled_in = cfg.block_size * cfg.block_size * d
        self.pool_w = init_linear(rng, pooled_in, (pooled_in, d), dtype)
        self.pool_b = zeros_param(d, dtype)
        self.layers = [AttnLayer(d, cfg.heads, rng, dtype) for _ in range(cfg.layers)]
        self.ln_f_g = ones_param(d, dtype)
        self.ln_f_b = zeros_param(d, dtype)
        self.head_w = init_linear(rng, d, (d, cfg.vocab), dtype)
        self.head_b = zeros_param(cfg.vocab, dtype)

    def params(self) -> dict[str, Tensor]:
        out = {
            "prior.tok_emb": self.tok_emb,
            "prior.pos_local": self.pos_local,
            "prior.pos_global": self.pos_global,
            "prior.pool.w": self.pool_w,
            "prior.pool.b": self.pool_b,
        }
        if self.class_emb is not None:
            out["prior.class_emb"] = self.class_emb
        for i, layer in enumerate(self.layers):
            out.update(layer.params(f"prior.l{i}"))
        out.update({
            "prior.ln_f.g": self.ln_f_g,
            "prior.ln_f.b": self.ln_f_b,
            "prior.head.w": self.head_w,
            "prior.head.b": self.head_b,
        })
        return out

    # -- global pooling ----------------------------------------------------

    def pool_global(self, grids: np.ndarray) -> Tensor:
        """One token per block: a learned linear over the block's embedded
        cells (equivalently a block_size-stride convolution).

        Cells holding MASK contribute the MASK embedding, so fully masked
        blocks pool to a dedicated masked summary.
        """
        cfg = self.cfg
        b = grids.shape[0]
        hb, wb, ws = self.plan.blocks_h, self.plan.blocks_w, cfg.block_size
        emb = take0(self.tok_emb, grids.reshape(b, -1))  # [B, N, d]
        emb = emb.reshape((b, hb, ws, wb, ws, cfg.dim))
        emb = transpose(emb, (0, 1, 3, 2, 4, 5)).reshape((b, hb * wb, ws * ws * cfg.dim))
        pooled = matmul(emb, self.pool_w) + self.pool_b
        return pooled + self.pos_global

    # -- forward -------------------------------------------------------------

    def forward(
        self,
        grids: np.ndarray,
        block_ids,
        global_grids: np.ndarray | None = None,
        class_ids=None,
        attn_sink: list | None = None,
        masked_global_slots=None,
    ) -> Tensor:
        """Logits [B, block_size^2, K] for each grid's query block.

        ``grids`` is [B, H, W] of token ids (codes, MASK, never PAD); the
        local branch reads it directly while the global branch reads
        ``global_grids`` (defaults to ``grids``).  ``masked_global_slots``
        optionally force-masks global positions out of attention (used by
        routing diagnostics).
        """
        cfg, plan = self.cfg, self.plan
        grids = np.asarray(grids)
        if grids.ndim != 3 or grids.shape[1] != cfg.grid_height or grids.shape[2] != cfg.grid_width:
            raise ShapeError("grids must be [B, grid_height, grid_width]")
        b = grids.shape[0]
        bids = np.broadcast_to(np.asarray(block_ids, dtype=np.int64), (b,))
        gg = grids if global_grids is None else np.asarray(global_grids)

        g_tokens = self.pool_global(gg)  # [B, nb, d]

        idx = plan.local_idx[bids]  # [B, L]
        valid = plan.local_valid[bids]
        flat = grids.reshape(b, -1)
        ids = np.where(valid, np.take_along_axis(flat, np.where(valid, idx, 0), axis=1), cfg.pad_id)
        l_tokens = take0(self.tok_emb, ids) + take0(self.pos_local, np.where(valid, idx, 0))

        x = concat([g_tokens, l_tokens], axis=1)  # [B, nb + L, d]
        if class_ids is not None:
            if self.class_emb is None:
                raise ValueError("model built without class conditioning")
            cids = np.broadcast_to(np.asarray(class_ids, dtype=np.int64), (b,))
            x = x + take0(self.class_emb, cids).reshape((b, 1, cfg.dim))

        key_valid = np.concatenate(
            [np.ones((b, plan.n_blocks), dtype=bool), valid], axis=1
        )
        if masked_global_slots is not None:
            key_valid = key_valid.copy()
            key_valid[:, np.asarray(masked_global_slots)] = False
        bias = np.where(key_valid, 0.0, MASK_BIAS).astype(x.dtype)[:, None, None, :]

        for layer in self.layers:
            x = layer.forward(x, bias, attn_sink)
        x = layer_norm(x, self.ln_f_g, self.ln_f_b)

        # rows of the query block inside the local segment (same slots for
        # every block: the halo window's inner square)
        slot_idx = plan.n_blocks + plan.inner_slots
        picked = transpose(take0(transpose(x, (1, 0, 2)), slot_idx), (1, 0, 2))
        return matmul(picked, self.head_w) + self.head_b
