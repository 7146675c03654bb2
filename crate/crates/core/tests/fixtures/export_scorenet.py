"""Writes scorenet_torch.bin: a small conv/dense score network exported from
PyTorch in SCORENET1 layout, with a test vector computed by PyTorch.

    python3 export_scorenet.py
"""
import struct
from pathlib import Path

import torch
from torch import nn

SIDE = 6
SIGMA_DSM = 0.1


def net():
    px = SIDE * SIDE
    return nn.Sequential(
        nn.Conv2d(1, 4, 3, padding=1),
        nn.ELU(),
        nn.Conv2d(4, 2, 5, padding=2),
        nn.Softplus(),
        nn.Flatten(0),
        nn.Linear(2 * px, px),
        nn.ELU(),
        nn.Unflatten(0, (1, SIDE, SIDE)),
        nn.Conv2d(1, 1, 1),
    )


def f32s(t):
    return t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()


def export(model, test_input):
    layers = [m for m in model if not isinstance(m, (nn.Flatten, nn.Unflatten))]
    out = bytearray(b"SCORENET1")
    out += struct.pack("<IIfI", 1, SIDE, SIGMA_DSM, len(layers))
    for m in layers:
        if isinstance(m, nn.Conv2d):
            out += struct.pack("<BIII", 0, m.in_channels, m.out_channels, m.kernel_size[0])
            out += f32s(m.weight) + f32s(m.bias)
        elif isinstance(m, nn.Linear):
            out += struct.pack("<BII", 1, m.in_features, m.out_features)
            out += f32s(m.weight) + f32s(m.bias)
        elif isinstance(m, nn.ELU):
            out += b"\x02"
        elif isinstance(m, nn.Softplus):
            out += b"\x03"
    with torch.no_grad():
        expected = model(test_input.unsqueeze(0)).squeeze(0)
    return bytes(out) + f32s(test_input) + f32s(expected)


if __name__ == "__main__":
    torch.manual_seed(20)
    model = net().double()
    for p in model.parameters():
        p.data = p.data.float().double()
    x = torch.rand(SIDE, SIDE, dtype=torch.float64).float().double()
    Path(__file__).with_name("scorenet_torch.bin").write_bytes(export(model, x))
