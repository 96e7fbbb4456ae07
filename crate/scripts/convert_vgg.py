#!/usr/bin/env python3
"""Export torchvision VGG-19 convolutions up to conv4_1 as a safetensors archive.

Usage: python scripts/convert_vgg.py weights/vgg19_relu4_1.safetensors

Needs torch, torchvision and safetensors. The archive stores `convK_J.weight`
and `convK_J.bias` in float32 plus `preprocess = imagenet` metadata, which is
what torchvision's weights expect (RGB in [0, 1], ImageNet mean/std).
"""
import argparse

import torch
from safetensors.torch import save_file
from torchvision.models import VGG19_Weights, vgg19

# indices of the convolutions inside `vgg19().features`
LAYERS = {
    "conv1_1": 0,
    "conv1_2": 2,
    "conv2_1": 5,
    "conv2_2": 7,
    "conv3_1": 10,
    "conv3_2": 12,
    "conv3_3": 14,
    "conv3_4": 16,
    "conv4_1": 19,
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out")
    args = ap.parse_args()

    features = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features
    tensors = {}
    for name, idx in LAYERS.items():
        conv = features[idx]
        assert isinstance(conv, torch.nn.Conv2d), (name, conv)
        tensors[f"{name}.weight"] = conv.weight.detach().float().contiguous()
        tensors[f"{name}.bias"] = conv.bias.detach().float().contiguous()
    save_file(tensors, args.out, metadata={"preprocess": "imagenet", "base_width": "64"})
    print(f"wrote {len(tensors)} tensors to {args.out}")


if __name__ == "__main__":
    main()
