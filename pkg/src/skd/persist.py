"""Adapters between domain objects and the binary container format."""

from __future__ import annotations

import numpy as np

from .container import Container
from .errors import ParseError
from .model import ModelCheckpoint
from .runconfig import (generator_config_from_meta, generator_config_to_meta,
                        model_config_from_meta, model_config_to_meta)
from .synthdata import GeneratorConfig, SequenceBatch


def dataset_to_container(train: SequenceBatch, test: SequenceBatch,
                         cfg: GeneratorConfig) -> Container:
    arrays = {"train_frames": train.frames, "test_frames": test.frames}
    for split, batch in (("train", train), ("test", test)):
        for name, lab in (batch.labels or {}).items():
            arrays[f"{split}_label_{name}"] = lab.astype(np.float64)
        for name, aux in batch.aux.items():
            arrays[f"{split}_aux_{name}"] = aux.astype(np.float64)
    meta = {
        "generator": generator_config_to_meta(cfg),
        "seed": cfg.seed,
        "value_range": train.value_range,
        "channels": train.channels,
        "factor_roles": train.factor_roles,
        "factor_arity": train.factor_arity,
        "factors": sorted(train.labels or {}),
        "aux": sorted(train.aux),
    }
    return Container(kind="dataset", meta=meta, arrays=arrays)


def dataset_from_container(c: Container) -> tuple[SequenceBatch, SequenceBatch, GeneratorConfig]:
    if c.kind != "dataset":
        raise ParseError(f"expected a dataset container, got kind {c.kind!r}")
    cfg = generator_config_from_meta(c.meta["generator"])

    def split(name: str) -> SequenceBatch:
        return SequenceBatch(
            frames=c.arrays[f"{name}_frames"],
            labels={f: c.arrays[f"{name}_label_{f}"].astype(np.int64)
                    for f in c.meta["factors"]},
            value_range=c.meta["value_range"],
            channels=int(c.meta.get("channels", 1)),
            factor_roles=dict(c.meta["factor_roles"]),
            factor_arity={k: int(v) for k, v in c.meta["factor_arity"].items()},
            aux={a: c.arrays[f"{name}_aux_{a}"] for a in c.meta.get("aux", [])},
        )

    return split("train"), split("test"), cfg


def checkpoint_to_container(ckpt: ModelCheckpoint) -> Container:
    arrays: dict[str, np.ndarray] = {}
    for group, tensors in (("enc", ckpt.enc), ("dec", ckpt.dec),
                           ("adam_m", ckpt.adam_m), ("adam_v", ckpt.adam_v)):
        for i, arr in enumerate(tensors):
            arrays[f"{group}_{i}"] = arr
    if ckpt.final_eigenvalues is not None:
        arrays["final_eig_re"] = ckpt.final_eigenvalues.real
        arrays["final_eig_im"] = ckpt.final_eigenvalues.imag
    meta = {
        "model": model_config_to_meta(ckpt.config),
        "seed": ckpt.seed,
        "step": ckpt.step,
        "n_enc": len(ckpt.enc),
        "n_dec": len(ckpt.dec),
        "loss_history": ckpt.loss_history,
    }
    return Container(kind="checkpoint", meta=meta, arrays=arrays)


def checkpoint_from_container(c: Container) -> ModelCheckpoint:
    if c.kind != "checkpoint":
        raise ParseError(f"expected a checkpoint container, got kind {c.kind!r}")
    n_enc, n_dec = int(c.meta["n_enc"]), int(c.meta["n_dec"])
    eig = None
    if "final_eig_re" in c.arrays:
        eig = c.arrays["final_eig_re"] + 1j * c.arrays["final_eig_im"]
    return ModelCheckpoint(
        config=model_config_from_meta(c.meta["model"]),
        enc=[c.arrays[f"enc_{i}"] for i in range(n_enc)],
        dec=[c.arrays[f"dec_{i}"] for i in range(n_dec)],
        adam_m=[c.arrays[f"adam_m_{i}"] for i in range(n_enc + n_dec)],
        adam_v=[c.arrays[f"adam_v_{i}"] for i in range(n_enc + n_dec)],
        step=int(c.meta["step"]),
        seed=int(c.meta["seed"]),
        loss_history=list(c.meta["loss_history"]),
        final_eigenvalues=eig,
    )
