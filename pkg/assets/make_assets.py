#!/usr/bin/env python3
"""Regenerate the bundled sample assets (deterministic).

Produces ref.png (128x128) and pool/<label>/*.png (32 exemplars, 64x64,
labels a-d), sized for the default config: level=3 blocks of 16x16 and
scale=4 tiles of 64x64.
"""

from pathlib import Path

import numpy as np

from mosaicgen.cli import DEFAULT_CONFIG_TEXT
from mosaicgen.imageops import gaussian_blur, save_image

HERE = Path(__file__).parent


def smooth(shape, rng, sigma):
    img = gaussian_blur(rng.random(shape), sigma)
    return (img - img.min()) / (img.max() - img.min())


def main():
    rng = np.random.default_rng(2024)
    save_image(smooth((3, 128, 128), rng, 4.0), HERE / "ref.png")
    for lab in "abcd":
        d = HERE / "pool" / lab
        d.mkdir(parents=True, exist_ok=True)
        for i in range(8):
            save_image(smooth((3, 64, 64), rng, 2.0), d / f"{lab}{i}.png")
    (HERE / "default.cfg").write_text(DEFAULT_CONFIG_TEXT)
    print("assets written to", HERE)


if __name__ == "__main__":
    main()
