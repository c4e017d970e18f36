"""Gradient-weighted class activation maps for the single-logit classifier."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

DEFAULT_LAYER = "body.blocks.2"


class UnknownLayerError(KeyError):
    def __init__(self, name: str, available: list[str]):
        super().__init__(name)
        self.name = name
        self.available = available

    def __str__(self):
        return f"unknown layer {self.name!r}; available: {', '.join(self.available)}"


def layer_names(model: nn.Module) -> list[str]:
    return [name for name, _ in model.named_modules() if name]


def find_layer(model: nn.Module, name: str) -> nn.Module:
    modules = dict(model.named_modules())
    if not name or name not in modules:
        raise UnknownLayerError(name, layer_names(model))
    return modules[name]


def gradcam(model: nn.Module, image: torch.Tensor, layer_name: str = DEFAULT_LAYER) -> torch.Tensor:
    """Heatmap (H x W, values in [0, 1]) for the logit of ``image``.

    ``image`` is a model-ready ``C x H x W`` (or ``1 x C x H x W``) tensor.
    Channel weights are the spatially averaged gradients of the logit with
    respect to the layer's output; the weighted sum is rectified, upsampled
    bilinearly to the input size and divided by its maximum.  A map with no
    positive evidence (e.g. zero gradients) is returned as all zeros.
    """
    layer = find_layer(model, layer_name)
    x = image.unsqueeze(0) if image.dim() == 3 else image
    if x.dim() != 4 or x.shape[0] != 1:
        raise ValueError(f"expected one image, got shape {tuple(image.shape)}")
    captured = {}

    def hook(_module, _inp, out):
        captured["act"] = out

    was_training = model.training
    model.eval()
    handle = layer.register_forward_hook(hook)
    try:
        with torch.enable_grad():
            x = x.detach().requires_grad_(True)  # keeps the graph alive even for a frozen network
            logit = model(x).reshape(-1)[0]
            act = captured.get("act")
            if act is None:
                raise RuntimeError(f"layer {layer_name!r} was not used in the forward pass")
            if not act.requires_grad:
                grads = torch.zeros_like(act)
            else:
                grads, = torch.autograd.grad(logit, act, allow_unused=True)
                grads = torch.zeros_like(act) if grads is None else grads
    finally:
        handle.remove()
        model.train(was_training)

    weights = grads.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * act.detach()).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=x.shape[-2:], mode="bilinear", align_corners=False)[0, 0]
    cam = cam.clamp(min=0)
    peak = cam.max()
    return cam / peak if peak > 0 else torch.zeros_like(cam)
