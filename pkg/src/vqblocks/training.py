"""Training loops: masked token modeling for the prior (stage 2) and the
reconstruction + quantization objective for the autoencoder (stage 1)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autoencoder import LocalAutoencoder
from .blockattn import BlockPlan, TokenTransformer
from .quantize import Codebook, codebook_usage, quantize, vq_loss
from .tensor import Rng, Tensor, cross_entropy_per_position


def mask_fraction(r: float) -> float:
    """Cosine masking schedule cos(pi*r/2): 1 at r=0, decreasing to 0 at r=1.

    Endpoints are exact (cos(pi/2) is not exactly zero in floating point, but
    the schedule must reach an empty mask at r=1).
    """
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"mask ratio {r} outside [0, 1]")
    if r == 1.0:
        return 0.0
    return math.cos(0.5 * math.pi * r)


def mask_count(n_cells: int, r: float) -> int:
    return math.ceil(mask_fraction(r) * n_cells)


def sample_token_mask(height: int, width: int, r: float, rng: Rng) -> np.ndarray:
    """Exactly ceil(mask_fraction(r) * H * W) distinct flat positions."""
    n = height * width
    count = mask_count(n, r)
    return rng.choice(n, size=count, replace=False)


def sample_block_mask(plan: BlockPlan, rng: Rng) -> np.ndarray:
    """Whole-block mask for the global branch: draw one ratio, then mask each
    block independently with probability mask_fraction(ratio)."""
    frac = mask_fraction(float(rng.random()))
    return rng.random(plan.n_blocks) < frac


def apply_token_mask(grid: np.ndarray, positions: np.ndarray, mask_id: int) -> np.ndarray:
    out = grid.copy()
    out.reshape(-1)[positions] = mask_id
    return out


def apply_block_mask(grid: np.ndarray, block_mask: np.ndarray, plan: BlockPlan, mask_id: int) -> np.ndarray:
    out = grid.copy().reshape(-1)
    for b in np.nonzero(block_mask)[0]:
        out[plan.block_cells(int(b))] = mask_id
    return out.reshape(grid.shape)


class Adam:
    """Adam over a named parameter dict; state keyed by parameter name."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            update = (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)
            p.data = p.data - (self.lr * update).astype(p.data.dtype)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr_stage1: float = 1e-3
    lr_stage2: float = 3e-4
    seed: int = 0

    def __post_init__(self):
        if self.steps <= 0 or self.batch_size <= 0:
            raise ValueError("steps and batch_size must be positive")
        if self.lr_stage1 <= 0 or self.lr_stage2 <= 0:
            raise ValueError("learning rates must be positive")


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------


def train_step_stage1(ae: LocalAutoencoder, codebook: Codebook, images: np.ndarray,
                      opt: Adam) -> dict[str, float]:
    """One update of encoder, decoder and codebook on an image batch.

    Loss = mean squared pixel error + quantization loss (the trainable subset
    of the full objective; perceptual and adversarial terms are out of scope).
    """
    x = Tensor(np.asarray(images))
    z = ae.encode(x)
    indices, z_q = quantize(z, codebook)
    recon = ae.decode(z_q)
    l2 = ((recon - x) ** 2).mean()
    vq = vq_loss(z, indices, codebook)
    loss = l2 + vq
    opt.zero_grad()
    loss.backward()
    opt.step()
    _, perplexity = codebook_usage(indices, codebook.num_codes)
    return {
        "loss": float(loss.data),
        "l2": float(l2.data),
        "vq": float(vq.data),
        "perplexity": perplexity,
    }


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------


def corrupt_for_training(grid: np.ndarray, model: TokenTransformer, rng: Rng):
    """Two-part corruption of one token grid: uniformly chosen token masks for
    the local branch, whole-block masks for the global branch, plus one query
    block chosen uniformly at random."""
    cfg, plan = model.cfg, model.plan
    r = float(rng.random())
    positions = sample_token_mask(cfg.grid_height, cfg.grid_width, r, rng)
    local = apply_token_mask(grid, positions, cfg.mask_id)
    block_mask = sample_block_mask(plan, rng)
    global_ = apply_block_mask(grid, block_mask, plan, cfg.mask_id)
    block_id = int(rng.integers(0, plan.n_blocks))
    return local, global_, block_id, positions


def train_step_stage2(model: TokenTransformer, grids: np.ndarray, opt: Adam,
                      rng: Rng, class_ids=None) -> dict[str, float]:
    """One masked-prediction update on a batch of token grids.

    Cross-entropy is accumulated only over query-block positions that are
    masked in the local branch; everything else contributes exactly zero.
    """
    cfg, plan = model.cfg, model.plan
    grids = np.asarray(grids)
    b = grids.shape[0]
    streams = rng.spawn(b)
    locals_, globals_, bids, weights = [], [], [], []
    for i in range(b):
        local, global_, block_id, positions = corrupt_for_training(grids[i], model, streams[i])
        locals_.append(local)
        globals_.append(global_)
        bids.append(block_id)
        masked_flat = np.zeros(cfg.grid_height * cfg.grid_width, dtype=bool)
        masked_flat[positions] = True
        weights.append(masked_flat[plan.block_cells(block_id)])
    local_b = np.stack(locals_)
    global_b = np.stack(globals_)
    bids = np.asarray(bids)
    w = np.stack(weights).reshape(-1)  # [B * block_size^2]

    logits = model.forward(local_b, bids, global_grids=global_b, class_ids=class_ids)
    k = cfg.vocab
    n_rows = b * plan.block_size**2
    targets = np.stack([grids[i].reshape(-1)[plan.block_cells(int(bids[i]))] for i in range(b)])
    ce = cross_entropy_per_position(logits.reshape((n_rows, k)), targets.reshape(-1))
    denom = max(1, int(w.sum()))
    loss = (ce * Tensor(w.astype(ce.dtype))).sum() * (1.0 / denom)

    opt.zero_grad()
    loss.backward()
    opt.step()

    pred = logits.data.reshape(n_rows, k).argmax(axis=1)
    hits = (pred == targets.reshape(-1)) & w
    acc = float(hits.sum() / denom) if w.any() else 0.0
    return {"loss": float(loss.data), "masked_acc": acc, "masked_tokens": int(w.sum())}


def masked_accuracy(model: TokenTransformer, grids: np.ndarray, rng: Rng,
                    r: float = 0.5, class_ids=None) -> float:
    """Held-out masked-token accuracy: mask at ratio r, predict every block."""
    cfg, plan = model.cfg, model.plan
    grids = np.asarray(grids)
    hits = 0
    total = 0
    for i in range(grids.shape[0]):
        positions = sample_token_mask(cfg.grid_height, cfg.grid_width, r, rng)
        corrupted = apply_token_mask(grids[i], positions, cfg.mask_id)
        masked_flat = np.zeros(cfg.grid_height * cfg.grid_width, dtype=bool)
        masked_flat[positions] = True
        cid = None if class_ids is None else class_ids[i]
        for blk in range(plan.n_blocks):
            cells = plan.block_cells(blk)
            w = masked_flat[cells]
            if not w.any():
                continue
            logits = model.forward(corrupted[None], blk, class_ids=cid)
            pred = logits.data[0].argmax(axis=1)
            target = grids[i].reshape(-1)[cells]
            hits += int(((pred == target) & w).sum())
            total += int(w.sum())
    return hits / max(1, total)


def tokenize_dataset(ae: LocalAutoencoder, codebook: Codebook, images: np.ndarray,
                     batch: int = 64) -> np.ndarray:
    """Run the frozen stage-1 encoder + quantizer over a dataset."""
    from .tensor import no_grad

    out = []
    with no_grad():
        for lo in range(0, images.shape[0], batch):
            z = ae.encode(images[lo : lo + batch])
            indices, _ = quantize(z, codebook)
            out.append(indices)
    return np.concatenate(out, axis=0)
