"""Channel gating, global context encoding and the classification head.

Average and max pools compress the feature map to channel vectors whose
concatenation drives a sigmoid gate; the gated map is pooled again and passed
through a bottlenecked pair of fully connected layers before the linear
class head.
"""

import numpy as np

from .layers import Conv, Dense
from .tensor import activation, adaptive_pool, concat_channels, hadamard


class DCIF:
    """Dual-pool gate and classifier over (n, h, w, c) features."""

    def __init__(self, channels, classes, rng, reduction=4, dtype=np.float32):
        if channels % reduction != 0:
            raise ValueError(
                f"channel count {channels} is not divisible by the bottleneck "
                f"reduction {reduction}"
            )
        if classes < 1:
            raise ValueError(f"classes must be positive, got {classes}")
        self.channels = channels
        self.classes = classes
        self.reduction = reduction
        self.attn_conv = Conv("dcif.attn_conv", 1, 1, 2 * channels, channels, rng, dtype)
        hidden = channels // reduction
        self.fc1 = Dense("dcif.fc1", channels, hidden, rng, dtype)
        self.fc2 = Dense("dcif.fc2", hidden, channels, rng, dtype)
        self.head = Dense("dcif.head", channels, classes, rng, dtype)

    def attention(self, features):
        """Gate the features per channel; returns (gated, gate).

        The gate is sigmoid of a 1x1 convolution over the concatenated
        average-pool and max-pool summaries, so every entry is in (0, 1).
        """
        avg = adaptive_pool("avg", features, (1, 1))
        mx = adaptive_pool("max", features, (1, 1))
        pooled = concat_channels(avg, mx)
        gate = activation("sigmoid", self.attn_conv(pooled))
        return hadamard(features, gate), gate

    def encode(self, gated):
        """Global context vector from the pooled gated features."""
        pooled = adaptive_pool("avg", gated, (1, 1))
        return self.fc2(activation("relu", self.fc1(pooled)))

    def logits(self, context):
        return self.head(context)

    def __call__(self, features):
        gated, gate = self.attention(features)
        return self.logits(self.encode(gated)), gate

    def parameters(self):
        params = self.attn_conv.parameters()
        params += self.fc1.parameters()
        params += self.fc2.parameters()
        params += self.head.parameters()
        return params
