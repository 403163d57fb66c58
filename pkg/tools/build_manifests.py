"""Regenerate the bundled MAC manifests (MobileNet V1/V2 at 224x224,
width 1.0) from their standard architecture definitions.

Usage: python tools/build_manifests.py
Writes src/bitflex/manifests/*.json.
"""

from __future__ import annotations

import json
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "src" / "bitflex" / "manifests"


def conv(name, hw, cin, cout, k, stride=1, depthwise=False, role="interior"):
    out_hw = hw // stride
    if depthwise:
        macs = out_hw * out_hw * cin * k * k
        params = cin * k * k
    else:
        macs = out_hw * out_hw * cout * cin * k * k
        params = cin * cout * k * k
    return {"name": name, "macs": macs, "params": params, "role": role}, out_hw


def mobilenet_v1():
    layers = []
    bn_channels = []

    layer, hw = conv("conv1", 224, 3, 32, 3, stride=2, role="first")
    layers.append(layer)
    bn_channels.append(32)

    # (stride, out channels) of the 13 depthwise-separable blocks
    blocks = [(1, 64), (2, 128), (1, 128), (2, 256), (1, 256), (2, 512),
              (1, 512), (1, 512), (1, 512), (1, 512), (1, 512), (2, 1024), (1, 1024)]
    cin = 32
    for i, (stride, cout) in enumerate(blocks, start=1):
        layer, hw = conv(f"dw{i}", hw, cin, cin, 3, stride=stride, depthwise=True)
        layers.append(layer)
        bn_channels.append(cin)
        layer, hw = conv(f"pw{i}", hw, cin, cout, 1)
        layers.append(layer)
        bn_channels.append(cout)
        cin = cout

    layers.append({"name": "fc", "macs": 1024 * 1000, "params": 1024 * 1000, "role": "last"})
    return {
        "name": "mobilenet_v1",
        "layers": layers,
        "bn_params": 2 * sum(bn_channels),
        "bias_params": 1000,
    }


def mobilenet_v2():
    layers = []
    bn_channels = []

    layer, hw = conv("conv1", 224, 3, 32, 3, stride=2, role="first")
    layers.append(layer)
    bn_channels.append(32)

    # inverted residual settings: (expansion t, out channels c, repeats n, stride s)
    settings = [(1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2),
                (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)]
    cin = 32
    bi = 0
    for t, c, n, s in settings:
        for j in range(n):
            bi += 1
            stride = s if j == 0 else 1
            hidden = cin * t
            if t != 1:
                layer, _ = conv(f"b{bi}_expand", hw, cin, hidden, 1)
                layers.append(layer)
                bn_channels.append(hidden)
            layer, hw = conv(f"b{bi}_dw", hw, hidden, hidden, 3, stride=stride, depthwise=True)
            layers.append(layer)
            bn_channels.append(hidden)
            layer, hw = conv(f"b{bi}_project", hw, hidden, c, 1)
            layers.append(layer)
            bn_channels.append(c)
            cin = c

    layer, hw = conv("conv_last", hw, 320, 1280, 1)
    layers.append(layer)
    bn_channels.append(1280)

    layers.append({"name": "fc", "macs": 1280 * 1000, "params": 1280 * 1000, "role": "last"})
    return {
        "name": "mobilenet_v2",
        "layers": layers,
        "bn_params": 2 * sum(bn_channels),
        "bias_params": 1000,
    }


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for build in (mobilenet_v1, mobilenet_v2):
        manifest = build()
        path = OUT / f"{manifest['name']}.json"
        path.write_text(json.dumps(manifest, indent=1) + "\n")
        total_macs = sum(l["macs"] for l in manifest["layers"])
        total_params = sum(l["params"] for l in manifest["layers"])
        print(f"{manifest['name']}: {len(manifest['layers'])} layers, "
              f"{total_macs:,} MACs, {total_params:,} weight params, "
              f"bn={manifest['bn_params']:,}, bias={manifest['bias_params']:,}")


if __name__ == "__main__":
    main()
