"""Reference output for the 37x61 -> 224x224 bilinear resize test.

Uses torch.nn.functional.interpolate(mode="bilinear", align_corners=False).
"""
import json
import sys

import torch
import torch.nn.functional as F

h, w, side = 37, 61, 224
img = torch.tensor(
    [[((y * 7 + x * 13) % 17) / 16.0 for x in range(w)] for y in range(h)],
    dtype=torch.float32,
)
out = F.interpolate(img[None, None], size=(side, side), mode="bilinear", align_corners=False)[0, 0]
step = 7
json.dump(
    {
        "in_h": h,
        "in_w": w,
        "side": side,
        "step": step,
        "samples": out[::step, ::step].tolist(),
        "sum": float(out.double().sum()),
    },
    open(sys.argv[1], "w"),
)
