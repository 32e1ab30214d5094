"""The assembled segmentation network and its checkpoint format.

A checkpoint is a single ``.npz`` archive: one array per dotted state-dict
path plus a ``__config__`` entry holding the JSON-serialized ModelConfig.
"""
import json
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .backbone import LDCNet
from .config import ModelConfig, from_dict, to_dict
from .decoder import ContextDecoder, DecoderOutput
from .errors import ConfigError

CONFIG_KEY = "__config__"


class LEDCNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.backbone = LDCNet(config.backbone, config.in_channels)
        self.decoder = ContextDecoder(config, self.backbone.out_channels)

    @property
    def num_classes(self):
        return self.config.num_classes

    def forward(self, images) -> DecoderOutput:
        return self.decoder(self.backbone(images))


def build_model(config: ModelConfig) -> LEDCNet:
    return LEDCNet(config)


def save_checkpoint(model: LEDCNet, path, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    meta = {"model": to_dict(model.config), "extra": extra or {}}
    arrays[CONFIG_KEY] = np.array(json.dumps(meta))
    # np.savez appends .npz when missing; write through a handle to keep the name
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path, map_location="cpu"):
    """Return ``(model, extra)`` rebuilt from an archive written by :func:`save_checkpoint`."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        if CONFIG_KEY not in archive:
            raise ConfigError(f"{path} has no embedded model config")
        meta = json.loads(str(archive[CONFIG_KEY]))
        state = {k: torch.from_numpy(archive[k].copy()) for k in archive.files if k != CONFIG_KEY}
    model = LEDCNet(from_dict(ModelConfig, meta["model"]))
    model.load_state_dict(state)
    return model.to(map_location), meta.get("extra", {})
