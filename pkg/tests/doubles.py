"""Hand-checkable test doubles for Grad-CAM."""

import torch
import torch.nn as nn


class LinearDouble(nn.Module):
    """A 1x1 conv feature layer followed by a spatial-mean linear read-out."""

    def __init__(self, w, v):
        super().__init__()
        self.feat = nn.Conv2d(w.shape[1], w.shape[0], 1, bias=False).double()
        with torch.no_grad():
            self.feat.weight.copy_(torch.as_tensor(w)[..., None, None])
        self.v = torch.as_tensor(v, dtype=torch.float64)
        self.cam_layers = ("feat",)

    def forward(self, x):
        a = self.feat(x)
        return (a.mean(dim=(2, 3)) * self.v).sum(dim=1)


class ZeroDouble(LinearDouble):
    def forward(self, x):
        return super().forward(x) * 0.0
