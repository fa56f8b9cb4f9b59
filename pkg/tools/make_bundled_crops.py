"""Regenerate the bundled test crops from scikit-image's sample images.

The sources are public-domain / CC0 images shipped with scikit-image
(astronaut: NASA; coffee: Rachel Michetti, CC0; chelsea: Stefan van der Walt,
CC0; camera: scikit-image's CC0 cameraman replacement).  Run from the repo root:

    python tools/make_bundled_crops.py
"""

import os

import numpy as np
import skimage.data as data

from splat2d.imageio import save_image

OUT = os.path.join("src", "splat2d", "data")

CROPS = {
    "astronaut.ppm": (data.astronaut, (slice(100, 148), slice(200, 248))),
    "coffee.ppm": (data.coffee, (slice(150, 198), slice(250, 298))),
    "chelsea.ppm": (data.chelsea, (slice(100, 148), slice(150, 198))),
    "camera.pgm": (data.camera, (slice(200, 232), slice(230, 262))),
}


def main():
    os.makedirs(OUT, exist_ok=True)
    for name, (loader, (rows, cols)) in CROPS.items():
        img = np.asarray(loader())[rows, cols] / 255.0
        grid = img[None] if img.ndim == 2 else np.moveaxis(img, 2, 0)
        save_image(grid, os.path.join(OUT, name))
        print(name, grid.shape)


if __name__ == "__main__":
    main()
