"""Encoder-decoder network for map expansion.

Shape contract (mirrored bit-for-bit by the inference side):
  - encoder: 7 stages of conv 4x4 stride 2 -> batch-norm (eps 1e-5) -> ReLU,
    ceil-division downsampling via asymmetric zero padding, low side 1 and
    high side 1 (even input) or 2 (odd input); spatial chain for 120 input:
    120 -> 60 -> 30 -> 15 -> 8 -> 4 -> 2 -> 1.
  - decoder: transposed conv 4x4 stride 2 with no padding, output cropped to
    [1 : 1+target] per axis, batch-norm + ReLU, then concatenation with the
    mirror encoder activation. Published widths list the decoder stage
    *input* channels (after concatenation).
  - head: transposed conv to the 3-class score field at the input size,
    bilinear-resized (half-pixel centers) to the output size.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from . import DECODER_FILTERS, ENCODER_FILTERS, INPUT_SIZE, NUM_CLASSES, OUTPUT_SIZE


def scaled_filters(scale: int = 1):
    """Width-divided variants of the canonical filter counts for fast tests."""
    enc = tuple(max(2, c // scale) for c in ENCODER_FILTERS)
    outs = [max(2, c // scale) for c in (512, 512, 512, 256, 128, 64)]
    dec = [enc[-1]]
    for j in range(6):
        dec.append(outs[j] + enc[5 - j])
    return enc, tuple(dec)


def decoder_output_channels(encoder_filters, decoder_filters, num_classes=NUM_CLASSES):
    n = len(encoder_filters)
    outs = []
    for j in range(n - 1):
        out = decoder_filters[j + 1] - encoder_filters[n - 2 - j]
        if out <= 0:
            raise ValueError(f"decoder stage {j}: non-positive width {out}")
        outs.append(out)
    outs.append(num_classes)
    return outs


def _same_pad(x):
    h, w = x.shape[-2:]
    ph = (1, 1) if h % 2 == 0 else (1, 2)
    pw = (1, 1) if w % 2 == 0 else (1, 2)
    return F.pad(x, (pw[0], pw[1], ph[0], ph[1]))


class MapExpansionNet(nn.Module):
    def __init__(
        self,
        encoder_filters=ENCODER_FILTERS,
        decoder_filters=DECODER_FILTERS,
        in_channels=NUM_CLASSES,
        num_classes=NUM_CLASSES,
        input_size=INPUT_SIZE,
        output_size=OUTPUT_SIZE,
    ):
        super().__init__()
        if decoder_filters[0] != encoder_filters[-1]:
            raise ValueError("first decoder width must equal the bottleneck width")
        self.encoder_filters = tuple(encoder_filters)
        self.decoder_filters = tuple(decoder_filters)
        self.input_size = input_size
        self.output_size = output_size
        self.num_classes = num_classes

        enc = []
        enc_bn = []
        prev = in_channels
        for c in encoder_filters:
            enc.append(nn.Conv2d(prev, c, 4, stride=2, padding=0, bias=True))
            enc_bn.append(nn.BatchNorm2d(c, eps=1e-5))
            prev = c
        self.enc = nn.ModuleList(enc)
        self.enc_bn = nn.ModuleList(enc_bn)

        outs = decoder_output_channels(encoder_filters, decoder_filters, num_classes)
        dec = []
        dec_bn = []
        for j in range(len(encoder_filters)):
            dec.append(
                nn.ConvTranspose2d(decoder_filters[j], outs[j], 4, stride=2, padding=0, bias=True)
            )
            if j < len(encoder_filters) - 1:
                dec_bn.append(nn.BatchNorm2d(outs[j], eps=1e-5))
        self.dec = nn.ModuleList(dec)
        self.dec_bn = nn.ModuleList(dec_bn)

        sizes = [input_size]
        for _ in encoder_filters:
            sizes.append((sizes[-1] + 1) // 2)
        self._sizes = sizes

    def forward(self, x):
        """(B, 3, 120, 120) one-hot float -> (B, 3, 150, 150) scores."""
        skips = []
        n = len(self.enc)
        for conv, bn in zip(self.enc, self.enc_bn):
            x = F.relu(bn(conv(_same_pad(x))))
            skips.append(x)
        x = skips[-1]
        for j in range(n - 1):
            target = self._sizes[n - 1 - j]
            x = self.dec[j](x)[:, :, 1 : 1 + target, 1 : 1 + target]
            x = F.relu(self.dec_bn[j](x))
            x = torch.cat([x, skips[n - 2 - j]], dim=1)
        x = self.dec[n - 1](x)[:, :, 1 : 1 + self.input_size, 1 : 1 + self.input_size]
        return F.interpolate(
            x, size=(self.output_size, self.output_size), mode="bilinear", align_corners=False
        )


def one_hot_batch(cells: "np.ndarray | torch.Tensor") -> torch.Tensor:
    """(B, H, W) uint8 trinary -> (B, 3, H, W) float32 one-hot."""
    t = torch.as_tensor(cells, dtype=torch.long)
    return F.one_hot(t, NUM_CLASSES).permute(0, 3, 1, 2).float()
