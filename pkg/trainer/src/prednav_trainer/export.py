"""OMPW weight export (the boundary contract with the inference engine).

Layout:
  "OMPW" | u32 version=1 | u32 E, E x u32 encoder filters
  u32 D, D x u32 decoder filters | u32 input_size | u32 output_size
  u32 in_channels | u32 num_classes | u32 record count
  per record: u8 kind (0 conv / 1 tconv / 2 batchnorm), u8 tensor count,
              per tensor u8 ndim + ndim x u32 dims
  all tensor payloads as little-endian float32 in declared order
  u32 CRC32 (zlib) of the payload bytes

Records in forward order: (conv, bn) per encoder stage, (tconv, bn) per
hidden decoder stage, one final tconv. Batch-norm tensors are exported as
(scale, shift, running mean, running var) and applied with epsilon 1e-5.
Conv weights are (C_out, C_in, 4, 4); transposed-conv weights keep the
(C_in, C_out, 4, 4) layout.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np
import torch

from .model import MapExpansionNet
from .train import model_from_checkpoint

MAGIC = b"OMPW"
VERSION = 1
KIND_CONV = 0
KIND_TCONV = 1
KIND_BATCHNORM = 2


def _records_from_model(model: MapExpansionNet):
    records = []

    def conv_record(kind, layer):
        records.append(
            (kind, [layer.weight.detach().numpy(), layer.bias.detach().numpy()])
        )

    def bn_record(bn):
        records.append(
            (
                KIND_BATCHNORM,
                [
                    bn.weight.detach().numpy(),
                    bn.bias.detach().numpy(),
                    bn.running_mean.detach().numpy(),
                    bn.running_var.detach().numpy(),
                ],
            )
        )

    for conv, bn in zip(model.enc, model.enc_bn):
        conv_record(KIND_CONV, conv)
        bn_record(bn)
    n = len(model.enc)
    for j in range(n - 1):
        conv_record(KIND_TCONV, model.dec[j])
        bn_record(model.dec_bn[j])
    conv_record(KIND_TCONV, model.dec[n - 1])
    return records


def export_weights(checkpoint, path):
    """Write the checkpoint's network as an OMPW file."""
    model = model_from_checkpoint(checkpoint)
    model.eval()
    records = _records_from_model(model)
    meta = model

    head = bytearray()
    head += MAGIC
    head += struct.pack("<I", VERSION)
    head += struct.pack("<I", len(meta.encoder_filters))
    head += struct.pack(f"<{len(meta.encoder_filters)}I", *meta.encoder_filters)
    head += struct.pack("<I", len(meta.decoder_filters))
    head += struct.pack(f"<{len(meta.decoder_filters)}I", *meta.decoder_filters)
    head += struct.pack(
        "<4I", meta.input_size, meta.output_size, 3, meta.num_classes
    )
    head += struct.pack("<I", len(records))
    payload = bytearray()
    for kind, tensors in records:
        head += struct.pack("<BB", kind, len(tensors))
        for t in tensors:
            t = np.ascontiguousarray(t, dtype="<f4")
            head += struct.pack("<B", t.ndim)
            head += struct.pack(f"<{t.ndim}I", *t.shape)
            payload += t.tobytes()
    crc = zlib.crc32(bytes(payload)) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(bytes(head))
        f.write(bytes(payload))
        f.write(struct.pack("<I", crc))
    return path


def reference_scores(checkpoint, cells_batch) -> np.ndarray:
    """Reference forward pass: (B, H, W) trinary -> (B, 3, 150, 150) float32."""
    from .model import one_hot_batch

    model = model_from_checkpoint(checkpoint)
    model.eval()
    with torch.no_grad():
        return model(one_hot_batch(np.asarray(cells_batch))).numpy()
