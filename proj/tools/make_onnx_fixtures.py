"""Export the small ONNX models used by the inference tests.

Writes tests/data/embedder_small.onnx (N x 3 x 64 x 64 -> N x 128),
tests/data/detector_small.onnx (1 x 3 x 64 x 64 -> three 1 x 3 x S x S x 7 heads)
and tests/data/onnx_reference.json with torch outputs for a fixed input.
Requires torch and onnx.
"""
import json
import pathlib
import sys

import torch
import torch.nn as nn
import torch.nn.functional as F


class Embedder(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(3, 8, 3, padding=1)
        self.fc = nn.Linear(8, 128)

    def forward(self, x):
        return self.fc(F.silu(self.conv(x)).mean(dim=(2, 3)))


class Detector(nn.Module):
    def __init__(self):
        super().__init__()
        self.convs = nn.ModuleList([nn.Conv2d(3, 21, 1, stride=s) for s in (8, 16, 32)])

    def forward(self, x):
        outs = []
        for conv in self.convs:
            y = conv(x)
            s = y.shape[-1]
            outs.append(y.view(1, 3, 7, s, s).permute(0, 1, 3, 4, 2).contiguous())
        return tuple(outs)


def reference_input():
    i = torch.arange(3 * 64 * 64, dtype=torch.float32)
    return (((i * 37 + torch.div(i, 64, rounding_mode="floor") * 11) % 17) / 16.0).reshape(1, 3, 64, 64)


def main(out_dir):
    out = pathlib.Path(out_dir)
    torch.manual_seed(0)
    emb, det = Embedder().eval(), Detector().eval()
    x = reference_input()
    torch.onnx.export(emb, x, out / "embedder_small.onnx", input_names=["chip"], output_names=["embedding"],
                      dynamic_axes={"chip": {0: "N"}, "embedding": {0: "N"}}, opset_version=13, dynamo=False)
    torch.onnx.export(det, x, out / "detector_small.onnx", input_names=["images"],
                      output_names=["head0", "head1", "head2"], opset_version=13, dynamo=False)
    with torch.no_grad():
        ref = {"embedding": emb(x)[0].tolist(), "heads": [h.flatten().tolist() for h in det(x)]}
    (out / "onnx_reference.json").write_text(json.dumps(ref))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "tests/data")
