"""Gradient-weighted class activation maps for the performer and the explainer.

Channel weights are the spatial mean of the class logit's gradient at the
target layer; the heatmap is the ReLU of the weighted channel sum, bilinearly
upsampled to image size and max-normalized into [0, 1].
"""

from __future__ import annotations

from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError
from .explainer import ExplainerNet
from .performer import PerformerNet


def cam_from_activation(
    activation: torch.Tensor, logit: torch.Tensor, image_size: int
) -> np.ndarray:
    """Build the heatmap given a spatial activation on the logit's graph."""
    if activation.dim() != 4:
        raise ContractError(
            f"target layer must be spatial (B, C, h, w), got {tuple(activation.shape)}"
        )
    grads = torch.autograd.grad(logit, activation, retain_graph=False)[0]
    weights = grads.mean(dim=(2, 3))  # (B, C)
    cam = F.relu((weights[:, :, None, None] * activation).sum(dim=1, keepdim=True))
    cam = F.interpolate(
        cam, size=(image_size, image_size), mode="bilinear", align_corners=False
    )[0, 0].detach()
    peak = cam.max()
    if float(peak) > 0.0:
        cam = cam / peak
    return cam.numpy()


def grad_cam(
    forward: Callable[[torch.Tensor], tuple[torch.Tensor, torch.Tensor]],
    image: np.ndarray | torch.Tensor,
    class_index: int,
    image_size: int,
) -> np.ndarray:
    """Generic grad-CAM: `forward` maps an image batch to (activation, logits)."""
    x = torch.as_tensor(np.asarray(image, dtype=np.float32))
    if x.dim() == 3:
        x = x[None]
    if x.dim() != 4 or x.shape[0] != 1:
        raise ContractError(f"expected one image (1, C, S, S), got {tuple(x.shape)}")
    x = x.requires_grad_(True)
    activation, logits = forward(x)
    if not (0 <= class_index < logits.shape[-1]):
        raise ContractError(
            f"class index {class_index} out of range for {logits.shape[-1]} classes"
        )
    return cam_from_activation(activation, logits[0, class_index], image_size)


def performer_grad_cam(
    performer: PerformerNet,
    image: np.ndarray | torch.Tensor,
    class_index: int,
    target_layer: int | None = None,
) -> np.ndarray:
    """Attention of the performer's own prediction at its tap (or given) layer."""

    def forward(x):
        bundle = performer(x, tap_layer=target_layer)
        return bundle.x_tap, bundle.logits

    return grad_cam(forward, image, class_index, performer.arch.image_size)


def explainer_grad_cam(
    performer: PerformerNet,
    explainer: ExplainerNet,
    image: np.ndarray | torch.Tensor,
    class_index: int,
) -> np.ndarray:
    """Attention over the interpretable track of the substituted pipeline."""

    def forward(x):
        bundle = performer(x)
        outputs = explainer(bundle.x_tap)
        logits = performer.classify_from_fc2(outputs.x_fcdec2)
        return outputs.trace.x_interp, logits

    return grad_cam(forward, image, class_index, performer.arch.image_size)
