"""Checkpoints: one container file per tensor plus a plain-text manifest."""

from pathlib import Path
from typing import Dict, Union

import numpy as np
import torch

from ..container import load_container, save_container
from ..utils.logger import get_logger
from ..utils.provenance import code_version, read_manifest, write_manifest
from .consistency import ConsistencyModel
from .diffusion import DenoiserModel
from .network import UNetConfig, init_unet
from .schedule import karras_schedule

logger = get_logger(__name__)

MANIFEST = "manifest.txt"
TENSOR_DIR = "tensors"
MODEL_KINDS = {"denoiser": DenoiserModel, "consistency": ConsistencyModel}


def save_state(state: Dict[str, torch.Tensor], directory: Union[str, Path], header: Dict[str, object]) -> Path:
    """Write tensors in order and a manifest listing ``name|shape|file`` per tensor."""
    directory = Path(directory)
    (directory / TENSOR_DIR).mkdir(parents=True, exist_ok=True)
    entries: Dict[str, object] = dict(header)
    entries["code_version"] = code_version()
    entries["n_tensors"] = len(state)
    for index, (name, tensor) in enumerate(state.items()):
        array = tensor.detach().cpu().numpy()
        file = f"{TENSOR_DIR}/{index:04d}.prtc"
        save_container(np.ascontiguousarray(array), directory / file)
        shape = "x".join(str(s) for s in array.shape) or "scalar"
        entries[f"tensor.{index:04d}"] = f"{name}|{shape}|{file}"
    write_manifest(directory / MANIFEST, entries)
    return directory


def load_state(directory: Union[str, Path]) -> Dict[str, torch.Tensor]:
    directory = Path(directory)
    manifest = read_manifest(directory / MANIFEST)
    state: Dict[str, torch.Tensor] = {}
    for index in range(int(manifest["n_tensors"])):
        name, _shape, file = manifest[f"tensor.{index:04d}"].split("|")
        state[name] = torch.from_numpy(load_container(directory / file))
    return state


def save_checkpoint(model: Union[DenoiserModel, ConsistencyModel], directory: Union[str, Path]) -> Path:
    """
    Save a denoiser or consistency model.

    The manifest records the model kind, U-Net configuration, schedule
    parameters and sigma_data so :func:`load_checkpoint` can rebuild it.
    """
    header: Dict[str, object] = {"kind": model.kind, "sigma_data": model.sigma_data}
    header.update(model.schedule.to_dict())
    header.update({f"unet_{k}": v for k, v in model.cfg.to_dict().items()})
    header["dtype"] = str(next(model.parameters()).dtype).replace("torch.", "")
    path = save_state(model.net.state_dict(), directory, header)
    logger.info(f"Saved {model.kind} checkpoint to {path}")
    return path


def load_checkpoint(directory: Union[str, Path]) -> Union[DenoiserModel, ConsistencyModel]:
    directory = Path(directory)
    if not (directory / MANIFEST).exists():
        msg = f"Checkpoint manifest not found in {directory}"
        logger.error(msg)
        raise FileNotFoundError(msg)
    manifest = read_manifest(directory / MANIFEST)
    kind = manifest.get("kind")
    if kind not in MODEL_KINDS:
        raise ValueError(f"{directory}: unknown model kind '{kind}'")

    cfg = UNetConfig.from_dict({k[len("unet_"):]: v for k, v in manifest.items() if k.startswith("unet_")})
    schedule = karras_schedule(
        int(manifest["schedule_N"]),
        float(manifest["schedule_eps"]),
        float(manifest["schedule_T"]),
        float(manifest["schedule_rho"]),
    )
    net = init_unet(cfg)
    state = load_state(directory)
    dtype = getattr(torch, manifest.get("dtype", "float32"))
    net.load_state_dict({k: v.to(dtype) for k, v in state.items()})
    model = MODEL_KINDS[kind](net.to(dtype), schedule, float(manifest["sigma_data"]))
    model.eval()
    logger.info(f"Loaded {kind} checkpoint from {directory}")
    return model


def load_denoiser(directory: Union[str, Path]) -> DenoiserModel:
    model = load_checkpoint(directory)
    if not isinstance(model, DenoiserModel):
        raise ValueError(f"{directory} holds a {model.kind} model, expected a denoiser")
    return model


def load_consistency(directory: Union[str, Path]) -> ConsistencyModel:
    model = load_checkpoint(directory)
    if not isinstance(model, ConsistencyModel):
        raise ValueError(f"{directory} holds a {model.kind} model, expected a consistency model")
    return model
