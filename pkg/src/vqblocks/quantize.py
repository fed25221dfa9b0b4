"""Discrete codebook with nearest-neighbor quantization and straight-through gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Rng, ShapeError, Tensor, init_embedding, take0


class Codebook:
    """K learnable d-dimensional rows queried by nearest neighbor.

    Rows are immutable during a forward pass; optimizer updates apply between
    steps.  ``commitment_beta`` weights the encoder-side term of the loss.
    """

    def __init__(self, num_codes: int, dim: int, rng: Rng, commitment_beta: float = 0.25,
                 dtype=np.float32):
        if num_codes < 2 or dim < 1:
            raise ValueError("codebook needs num_codes >= 2 and dim >= 1")
        self.num_codes = num_codes
        self.dim = dim
        self.commitment_beta = commitment_beta
        self.entries = init_embedding(rng, (num_codes, dim), dtype=dtype)

    def parameters(self) -> dict[str, Tensor]:
        return {"codebook.entries": self.entries}


def nearest_code(z_flat: np.ndarray, entries: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Argmin of squared Euclidean distance per row; ties -> lowest index."""
    n = z_flat.shape[0]
    out = np.empty(n, dtype=np.int64)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        diff = z_flat[lo:hi, None, :] - entries[None, :, :]
        d2 = (diff * diff).sum(axis=2)
        out[lo:hi] = d2.argmin(axis=1)
    return out


def quantize(z: Tensor, codebook: Codebook) -> tuple[np.ndarray, Tensor]:
    """Snap each cell of a latent grid to its nearest codebook row.

    ``z`` is [..., d].  Returns (indices, z_q) where ``indices`` has shape
    z.shape[:-1] and ``z_q`` carries the selected rows forward while routing
    the backward gradient straight through to ``z`` unchanged.
    """
    if z.shape[-1] != codebook.dim:
        raise ShapeError(f"latent dim {z.shape[-1]} != codebook dim {codebook.dim}")
    lead = z.shape[:-1]
    z_flat = z.data.reshape(-1, codebook.dim)
    indices = nearest_code(z_flat, codebook.entries.data).reshape(lead)
    # forward value = selected row; backward gradient copied through to z
    rows = codebook.entries.data[indices.reshape(-1)].reshape(z.shape)
    z_q = z + Tensor(rows - z.data)
    return indices, z_q


def selected_rows(indices: np.ndarray, codebook: Codebook) -> Tensor:
    """Differentiable lookup of the selected codebook rows (grad -> codebook)."""
    lead = indices.shape
    rows = take0(codebook.entries, indices.reshape(-1))
    return rows.reshape(lead + (codebook.dim,))


def vq_loss(z: Tensor, indices: np.ndarray, codebook: Codebook) -> Tensor:
    """Mean over cells of ||sg(z) - e||^2 + beta * ||z - sg(e)||^2.

    The first term moves the selected rows toward the encoder output; the
    second (commitment) term moves the encoder toward the rows.
    """
    e = selected_rows(indices, codebook)
    codebook_term = ((e - z.detach()) ** 2).sum(axis=-1).mean()
    commit_term = ((z - e.detach()) ** 2).sum(axis=-1).mean()
    return codebook_term + commit_term * codebook.commitment_beta


def codebook_usage(indices: np.ndarray, num_codes: int) -> tuple[np.ndarray, float]:
    """Counts per code id and the perplexity of the empirical distribution."""
    counts = np.bincount(np.asarray(indices).reshape(-1), minlength=num_codes)
    total = counts.sum()
    if total == 0:
        return counts, 0.0
    p = counts[counts > 0] / total
    entropy = -(p * np.log(p)).sum()
    return counts, float(np.exp(entropy))
