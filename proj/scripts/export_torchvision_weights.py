"""Export a torchvision backbone as a TorchScript file the teacher loader accepts.

    python scripts/export_torchvision_weights.py resnet50 --out-dir $PKGNET_WEIGHTS_DIR

With --random the weights are left at their random initialization (useful for
tests when no pretrained checkpoint can be downloaded).
"""

import argparse
from pathlib import Path

import torch
import torchvision

MODELS = {
    "resnet18": (torchvision.models.resnet18, "IMAGENET1K_V1"),
    "resnet50": (torchvision.models.resnet50, "IMAGENET1K_V1"),
    "resnext50": (torchvision.models.resnext50_32x4d, "IMAGENET1K_V1"),
    "wide_resnet50": (torchvision.models.wide_resnet50_2, "IMAGENET1K_V1"),
}


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("backbone", choices=sorted(MODELS))
    parser.add_argument("--out-dir", type=Path, required=True)
    parser.add_argument("--random", action="store_true", help="skip downloading pretrained weights")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    ctor, weights = MODELS[args.backbone]
    torch.manual_seed(args.seed)
    net = ctor(weights=None if args.random else weights).eval()
    args.out_dir.mkdir(parents=True, exist_ok=True)
    out = args.out_dir / f"{args.backbone}.pt"
    torch.jit.script(net).save(str(out))
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
