"""3D squeeze-excitation ResNet encoder with a projection head and a detached
classification head."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

NUM_GRADES = 4


@dataclass
class EncoderSpec:
    """Shape contract of the feature extractor.

    ``width_scale`` shrinks every stage width (1.0 gives the 2048-d SE-ResNet50).
    ``stem_stride``/``stem_pool`` control the early downsampling so small
    inputs still leave a non-trivial final feature map.
    """

    layers: tuple[int, ...] = (3, 4, 6, 3)
    base_width: int = 64
    width_scale: float = 1.0
    input_side: int = 128
    in_channels: int = 3
    se_reduction: int = 16
    use_se: bool = True
    stem_stride: int = 2
    stem_pool: bool = True
    projection_dim: int = 128
    num_classes: int = NUM_GRADES

    @property
    def width(self) -> int:
        return max(1, int(round(self.base_width * self.width_scale)))

    @property
    def feature_dim(self) -> int:
        return self.width * 8 * Bottleneck.expansion

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = list(self.layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSpec":
        d = dict(d)
        if "layers" in d:
            d["layers"] = tuple(d["layers"])
        return cls(**d)


class SqueezeExcite3d(nn.Module):
    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x):
        s = x.mean(dim=(2, 3, 4))
        s = torch.sigmoid(self.fc2(F.relu(self.fc1(s))))
        return x * s[:, :, None, None, None]


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, inplanes, planes, stride=1, use_se=True, reduction=16):
        super().__init__()
        out = planes * self.expansion
        self.conv1 = nn.Conv3d(inplanes, planes, 1, bias=False)
        self.bn1 = nn.BatchNorm3d(planes)
        self.conv2 = nn.Conv3d(planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm3d(planes)
        self.conv3 = nn.Conv3d(planes, out, 1, bias=False)
        self.bn3 = nn.BatchNorm3d(out)
        self.se = SqueezeExcite3d(out, reduction) if use_se else nn.Identity()
        self.downsample = None
        if stride != 1 or inplanes != out:
            self.downsample = nn.Sequential(
                nn.Conv3d(inplanes, out, 1, stride=stride, bias=False),
                nn.BatchNorm3d(out),
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        y = F.relu(self.bn1(self.conv1(x)))
        y = F.relu(self.bn2(self.conv2(y)))
        y = self.se(self.bn3(self.conv3(y)))
        return F.relu(y + identity)


class Encoder(nn.Module):
    """SE-ResNet-style 3D feature extractor; returns globally pooled features."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        w = spec.width
        self.stem = nn.Sequential(
            nn.Conv3d(spec.in_channels, w, 7, stride=spec.stem_stride, padding=3, bias=False),
            nn.BatchNorm3d(w),
            nn.ReLU(inplace=True),
        )
        self.pool = nn.MaxPool3d(3, stride=2, padding=1) if spec.stem_pool else nn.Identity()
        stages = []
        inplanes = w
        for i, blocks in enumerate(spec.layers):
            planes = w * 2**i
            stride = 1 if i == 0 else 2
            layer = []
            for b in range(blocks):
                layer.append(Bottleneck(inplanes, planes, stride if b == 0 else 1,
                                        spec.use_se, spec.se_reduction))
                inplanes = planes * Bottleneck.expansion
            stages.append(nn.Sequential(*layer))
        self.stages = nn.ModuleList(stages)
        self.calls = 0
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv3d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm3d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def feature_maps(self, x):
        x = self.pool(self.stem(x))
        for stage in self.stages:
            x = stage(x)
        return x

    def forward(self, x):
        side = self.spec.input_side
        if x.dim() != 5 or tuple(x.shape[1:]) != (self.spec.in_channels, side, side, side):
            raise ValueError(
                f"expected views of shape (N, {self.spec.in_channels}, {side}, {side}, {side}), "
                f"got {tuple(x.shape)}"
            )
        self.calls += 1
        return self.feature_maps(x).mean(dim=(2, 3, 4))


class ProjectionHead(nn.Module):
    """Single affine map followed by projection onto the unit sphere."""

    def __init__(self, in_dim: int, out_dim: int = 128):
        super().__init__()
        self.fc = nn.Linear(in_dim, out_dim)

    def forward(self, features):
        if features.shape[-1] != self.fc.in_features:
            raise ValueError(f"projection expects {self.fc.in_features}-d features, "
                             f"got {features.shape[-1]}")
        z = self.fc(features)
        norm = z.norm(dim=1, keepdim=True)
        zero = norm.squeeze(1) == 0
        if bool(zero.any()):
            warnings.warn(f"{int(zero.sum())} zero-norm projection(s); using unit fallback")
            fallback = torch.zeros_like(z)
            fallback[:, 0] = 1.0
            z = torch.where(zero[:, None], fallback, z)
            norm = torch.where(zero[:, None], torch.ones_like(norm), norm)
        return z / norm


class ClassificationHead(nn.Module):
    """Linear grading head. Inputs are detached so its loss never reaches the encoder."""

    def __init__(self, in_dim: int, num_classes: int = NUM_GRADES):
        super().__init__()
        self.fc = nn.Linear(in_dim, num_classes)
        nn.init.zeros_(self.fc.bias)

    def forward(self, features):
        if features.shape[-1] != self.fc.in_features:
            raise ValueError(f"classifier expects {self.fc.in_features}-d features, "
                             f"got {features.shape[-1]}")
        return self.fc(features.detach())


class GradingNetwork(nn.Module):
    def __init__(self, spec: EncoderSpec | None = None):
        super().__init__()
        self.spec = spec or EncoderSpec()
        self.encoder = Encoder(self.spec)
        self.projection = ProjectionHead(self.spec.feature_dim, self.spec.projection_dim)
        self.classifier = ClassificationHead(self.spec.feature_dim, self.spec.num_classes)

    def encode(self, views):
        return self.encoder(views)

    def project(self, features):
        return self.projection(features)

    def classify(self, features):
        return self.classifier(features)

    def forward_training(self, view_a, view_b):
        """Run both views of B patches through one encoder pass.

        Returns ``(embeddings, logits)`` of length 2B, ordered as all
        ``view_a`` rows then all ``view_b`` rows.
        """
        views = torch.cat([view_a, view_b], dim=0)
        features = self.encode(views)
        return self.project(features), self.classify(features)

    def forward(self, views):
        """Inference path: encoder + classification head only."""
        return self.classify(self.encode(views))

    @torch.no_grad()
    def predict_proba(self, views, batch_size: int = 16):
        """Class probabilities in eval mode; the previous train/eval mode is restored."""
        was_training = self.training
        self.eval()
        try:
            out = [F.softmax(self.forward(views[i:i + batch_size]), dim=1)
                   for i in range(0, views.shape[0], batch_size)]
        finally:
            self.train(was_training)
        return torch.cat(out, dim=0)


def parameter_groups(model: GradingNetwork) -> dict[str, list[torch.nn.Parameter]]:
    return {
        "encoder": list(model.encoder.parameters()),
        "projection": list(model.projection.parameters()),
        "classifier": list(model.classifier.parameters()),
    }


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def desk_spec(input_side: int = 32, width_scale: float = 0.25) -> EncoderSpec:
    """Scaled-down encoder for CPU-scale runs."""
    return EncoderSpec(width_scale=width_scale, input_side=input_side,
                       stem_stride=2, stem_pool=False)


__all__ = [
    "EncoderSpec", "Encoder", "ProjectionHead", "ClassificationHead",
    "GradingNetwork", "parameter_groups", "count_parameters", "desk_spec",
    "NUM_GRADES",
]
