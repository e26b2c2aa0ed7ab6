import numpy as np
import pytest
import torch
from torch import nn

from vfgrade.explain import (AttentionVolume, ExplainError, export_overlay, grad_cam, mid_slice,
                             minmax)
from vfgrade.network import EncoderSpec, GradingNetwork
from vfgrade.plotting import overlay_rgb


class Stub(nn.Module):
    """Conv feature layer followed by a hand-written logit rule."""

    def __init__(self, rule):
        super().__init__()
        torch.manual_seed(0)
        self.features = nn.Sequential(nn.Conv3d(3, 4, 3, stride=2, padding=1), nn.ReLU())
        self.rule = rule

    def forward(self, x):
        return self.rule(self.features(x))


def constant_logits(a):
    return torch.zeros(a.shape[0], 4) + 0.0 * a.sum() + torch.tensor([1.0, 2.0, 3.0, 4.0])


def channel_mean(k):
    def rule(a):
        out = torch.zeros(a.shape[0], 4)
        out[:, 0] = a[:, k].mean(dim=(1, 2, 3))
        return out
    return rule


def upsample_linear(a, shape):
    """Separable linear upsampling with half-pixel centres and edge clamping."""
    for axis, n_out in enumerate(shape):
        n_in = a.shape[axis]
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        w = src - lo
        a = np.moveaxis(a, axis, 0)
        a = a[lo] * (1 - w)[:, None, None] + a[hi] * w[:, None, None]
        a = np.moveaxis(a, 0, axis)
    return a


def patch(seed=0, shape=(16, 12, 20)):
    return np.random.default_rng(seed).random((3, *shape)).astype(np.float32)


def test_constant_logit_gives_zero_map():
    m = Stub(constant_logits)
    att = grad_cam(m, patch(), target_class=2, target_layer=m.features)
    assert att.values.shape == (16, 12, 20)
    assert not att.values.any() and att.raw_max == 0.0


def test_logit_independent_of_layer_gives_zero_map():
    m = Stub(lambda a: torch.ones(a.shape[0], 4))
    assert not grad_cam(m, patch(), 0, target_layer=m.features).values.any()


@pytest.mark.parametrize("k", [0, 3])
def test_designated_channel_probe(k):
    m = Stub(channel_mean(k))
    x = patch(k)
    att = grad_cam(m, x, target_class=0, target_layer=m.features)
    with torch.no_grad():
        a = m.features(torch.from_numpy(x)[None])[0, k].double().numpy()
    ref = upsample_linear(a, x.shape[1:])
    ref = (ref - ref.min()) / (ref.max() - ref.min())
    assert np.max(np.abs(att.values - ref)) <= 1e-5
    assert att.values.max() == pytest.approx(1.0)


def test_real_network_contract():
    torch.manual_seed(0)
    model = GradingNetwork(EncoderSpec(width_scale=0.125, input_side=16, layers=(1, 1, 1, 1),
                                       stem_pool=False))
    model.train()
    x = patch(shape=(16, 16, 16))
    att = grad_cam(model, x)
    assert isinstance(att, AttentionVolume) and att.shape == (16, 16, 16)
    assert att.values.min() >= 0 and att.values.max() <= 1
    assert att.target_class == int(model.predict_proba(torch.from_numpy(x)[None]).argmax())
    assert model.training  # mode restored
    raw = grad_cam(model, x, 1, normalize=False)
    assert raw.values.min() >= 0


def test_nan_parameters_rejected():
    m = Stub(channel_mean(0))
    with torch.no_grad():
        m.features[0].weight[0, 0, 0, 0, 0] = float("nan")
    with pytest.raises(ExplainError):
        grad_cam(m, patch(), 0, target_layer=m.features)


def test_minmax_edge_cases():
    assert not minmax(np.zeros(4)).any()
    assert minmax(np.full(3, 2.0)).tolist() == [1, 1, 1]
    assert minmax(np.array([1.0, 3.0])).tolist() == [0, 1]


def test_mid_slice():
    assert mid_slice((7, 4, 9), 0) == 3 and mid_slice((7, 4, 9), 2) == 4


def test_zero_attention_is_grayscale():
    ct = np.linspace(0, 1, 64).reshape(8, 8)
    rgb = overlay_rgb(ct, np.zeros((8, 8)))
    assert np.array_equal(rgb[..., 0], rgb[..., 1]) and np.array_equal(rgb[..., 1], rgb[..., 2])
    assert np.array_equal(rgb[..., 0], np.round(ct * 255).astype(np.uint8))


def test_export_overlay_files_and_bytes(tmp_path):
    import matplotlib.pyplot as plt

    x = patch(shape=(10, 12, 14))
    att = np.random.default_rng(1).random((10, 12, 14)).astype(np.float32)
    a = export_overlay(x, att, tmp_path / "a", slice_axis=1, slices=[2, 6])
    b = export_overlay(x, att, tmp_path / "b", slice_axis=1, slices=[2, 6])
    assert [p.name for p in a] == ["gradcam_axis1_slice002.png", "gradcam_axis1_slice006.png",
                                   "gradcam_panel.png"]
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()
    img = plt.imread(a[0])
    assert img.shape[:2] == (10, 14)
    default = export_overlay(x, np.zeros_like(att), tmp_path / "c", panel=False)
    assert default[0].name == "gradcam_axis0_slice005.png"
    gray = plt.imread(default[0])[..., :3]
    assert np.allclose(gray[..., 0], gray[..., 1]) and np.allclose(gray[..., 1], gray[..., 2])


def test_export_shape_mismatch(tmp_path):
    with pytest.raises(ExplainError):
        export_overlay(patch(), np.zeros((3, 3, 3)), tmp_path)
