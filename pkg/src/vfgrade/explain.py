"""Volumetric Grad-CAM on the encoder's last residual stage."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


class ExplainError(RuntimeError):
    pass


@dataclass
class AttentionVolume:
    values: np.ndarray
    target_class: int
    raw_max: float

    @property
    def shape(self):
        return self.values.shape


def default_target_layer(model, stage: int = -1):
    return model.encoder.stages[stage]


def grad_cam(model, patch, target_class: int | None = None, target_layer=None,
             normalize: bool = True) -> AttentionVolume:
    """Attention map for one ``(3, D, H, W)`` patch.

    Channel weights are the spatial means of d(target logit)/d(feature maps);
    the map is the rectified weighted channel sum, trilinearly upsampled to the
    patch shape and min-max scaled to [0, 1] (an all-zero map stays zero).
    ``target_class=None`` explains the predicted grade.
    """
    for p in model.parameters():
        if not torch.isfinite(p).all():
            raise ExplainError("model has non-finite parameters")
    arr = patch.channels if hasattr(patch, "channels") else patch
    x = torch.as_tensor(np.asarray(arr), dtype=torch.float32)
    if x.dim() == 4:
        x = x[None]
    if target_layer is None:
        target_layer = default_target_layer(model)

    captured = {}

    def hook(_module, _inp, out):
        captured["act"] = out

    handle = target_layer.register_forward_hook(hook)
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            logits = model(x)
            if target_class is None:
                target_class = int(logits[0].argmax())
            act = captured["act"]
            target = logits[0, target_class]
            if target.requires_grad:
                grad, = torch.autograd.grad(target, act, allow_unused=True)
            else:  # logit does not depend on anything differentiable
                grad = None
    finally:
        handle.remove()
        model.train(was_training)

    act = act.detach()
    if grad is None:
        grad = torch.zeros_like(act)
    weights = grad.mean(dim=tuple(range(2, act.dim())), keepdim=True)
    cam = F.relu((weights * act).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=tuple(x.shape[2:]), mode="trilinear", align_corners=False)
    cam = cam[0, 0].double().numpy()
    cam = np.maximum(cam, 0.0)
    raw_max = float(cam.max())
    if normalize:
        cam = minmax(cam)
    return AttentionVolume(cam.astype(np.float32), int(target_class), raw_max)


def minmax(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    if hi <= 0 or hi == lo:
        return np.zeros_like(a) if hi <= 0 else np.ones_like(a)
    return (a - lo) / (hi - lo)


def mid_slice(shape, axis: int) -> int:
    return shape[axis] // 2


def export_overlay(patch, attention, out_dir, slice_axis: int = 0, slices=None,
                   channel: int = 0, prefix: str = "gradcam", panel: bool = True) -> list:
    """Write grayscale-plus-heatmap PNGs for the chosen slices (mid-slice by default)."""
    from pathlib import Path

    from .plotting import gradcam_panel, overlay_rgb, save_rgb, take_slice

    arr = patch.channels if hasattr(patch, "channels") else np.asarray(patch)
    att = attention.values if isinstance(attention, AttentionVolume) else np.asarray(attention)
    ct = arr[channel]
    if ct.shape != att.shape:
        raise ExplainError(f"attention {att.shape} does not match patch {ct.shape}")
    if slices is None:
        slices = [mid_slice(ct.shape, slice_axis)]
    out = Path(out_dir)
    paths = []
    for idx in slices:
        rgb = overlay_rgb(take_slice(ct, slice_axis, idx), take_slice(att, slice_axis, idx))
        paths.append(save_rgb(rgb, out / f"{prefix}_axis{slice_axis}_slice{idx:03d}.png"))
    if panel:
        paths.append(gradcam_panel(ct, att, out / f"{prefix}_panel.png", slice_axis, slices))
    return paths
