"""Record residual-stage output shapes of the torchvision backbones for 32x32 inputs.

Writes tests/fixtures/teacher_shapes.json, which the C++ tests compare against.
"""

import argparse
import json
from pathlib import Path

import torch
import torchvision

BACKBONES = {
    "resnet18": torchvision.models.resnet18,
    "resnet50": torchvision.models.resnet50,
    "resnext50": torchvision.models.resnext50_32x4d,
    "wide_resnet50": torchvision.models.wide_resnet50_2,
}


def stage_shapes(net, size):
    x = torch.zeros(1, 3, size, size)
    x = net.maxpool(net.relu(net.bn1(net.conv1(x))))
    shapes = {}
    for block in range(1, 5):
        x = getattr(net, f"layer{block}")(x)
        shapes[str(block)] = list(x.shape[1:])
    return shapes


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--size", type=int, default=32)
    parser.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "tests/fixtures/teacher_shapes.json")
    args = parser.parse_args()

    result = {"input_size": args.size, "torchvision": torchvision.__version__, "backbones": {}}
    with torch.no_grad():
        for name, ctor in BACKBONES.items():
            net = ctor(weights=None).eval()
            result["backbones"][name] = stage_shapes(net, args.size)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(result, indent=2) + "\n")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
