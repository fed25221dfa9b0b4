"""Versioned checkpoint files: named parameter arrays plus a config echo.

Parameters round-trip bit-exactly through npz; a format version mismatch is
rejected, never coerced.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .autoencoder import AeConfig, LocalAutoencoder
from .blockattn import PriorConfig, TokenTransformer
from .quantize import Codebook
from .tensor import Rng, Tensor

FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    kind: str  # "vq" or "prior"
    config: dict
    arrays: dict[str, np.ndarray]
    seed: int
    format_version: int


def save_checkpoint(path, kind: str, config: dict, params: dict[str, Tensor], seed: int) -> None:
    meta = {"format_version": FORMAT_VERSION, "kind": kind, "config": config, "seed": seed}
    arrays = {f"param/{k}": p.data for k, p in params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> Checkpoint:
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(z["__meta__"].tobytes().decode())
            arrays = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} != supported {FORMAT_VERSION}")
    return Checkpoint(meta["kind"], meta["config"], arrays, meta.get("seed", 0), version)


def _load_params(target: dict[str, Tensor], arrays: dict[str, np.ndarray]) -> None:
    if set(target) != set(arrays):
        missing = set(target) - set(arrays)
        extra = set(arrays) - set(target)
        raise CheckpointError(f"parameter mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
    for k, p in target.items():
        if p.data.shape != arrays[k].shape:
            raise CheckpointError(f"shape mismatch for {k}")
        p.data = arrays[k]


# -- stage 1 ----------------------------------------------------------------


def vq_config_dict(ae_cfg: AeConfig, num_codes: int, beta: float, dataset: dict | None = None) -> dict:
    return {"ae": asdict(ae_cfg), "num_codes": num_codes, "beta": beta, "dataset": dataset or {}}


def ae_config_from_dict(d: dict) -> AeConfig:
    ae = dict(d)
    for k in ("dims", "depths", "heads"):
        ae[k] = tuple(ae[k])
    return AeConfig(**ae)


def save_vq_checkpoint(path, ae: LocalAutoencoder, codebook: Codebook, config: dict, seed: int) -> None:
    params = ae.params()
    params.update(codebook.parameters())
    save_checkpoint(path, "vq", config, params, seed)


def load_vq_checkpoint(path) -> tuple[LocalAutoencoder, Codebook, Checkpoint]:
    ck = load_checkpoint(path)
    if ck.kind != "vq":
        raise CheckpointError(f"expected a vq checkpoint, found '{ck.kind}'")
    cfg = ae_config_from_dict(ck.config["ae"])
    rng = Rng(0)  # placeholder init, fully overwritten below
    ae = LocalAutoencoder(cfg, rng)
    codebook = Codebook(ck.config["num_codes"], cfg.latent_dim, rng, ck.config["beta"])
    params = ae.params()
    params.update(codebook.parameters())
    _load_params(params, ck.arrays)
    return ae, codebook, ck


# -- stage 2 ----------------------------------------------------------------


def prior_config_from_dict(d: dict) -> PriorConfig:
    return PriorConfig(**d)


def save_prior_checkpoint(path, model: TokenTransformer, config: dict, seed: int) -> None:
    save_checkpoint(path, "prior", config, model.params(), seed)


def load_prior_checkpoint(path) -> tuple[TokenTransformer, Checkpoint]:
    ck = load_checkpoint(path)
    if ck.kind != "prior":
        raise CheckpointError(f"expected a prior checkpoint, found '{ck.kind}'")
    cfg = prior_config_from_dict(ck.config["prior"])
    model = TokenTransformer(cfg, Rng(0))
    _load_params(model.params(), ck.arrays)
    return model, ck
