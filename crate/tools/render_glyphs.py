"""Regenerate crates/core/assets/glyphs28.txt from a serif TrueType font.

Each digit is rendered anti-aliased, fitted into a 20x20 box, and placed on a
28x28 canvas so that its ink centroid sits at the canvas center. The output has
one line per digit: 784 two-digit hex bytes (row-major, 0 = background).
"""
import sys

import numpy as np
from PIL import Image, ImageDraw, ImageFont

FONT = sys.argv[1] if len(sys.argv) > 1 else "/usr/share/fonts/truetype/dejavu/DejaVuSerif.ttf"
OUT = sys.argv[2] if len(sys.argv) > 2 else "crates/core/assets/glyphs28.txt"


def render(digit, font):
    big = Image.new("L", (200, 200), 0)
    ImageDraw.Draw(big).text((40, 10), str(digit), fill=255, font=font)
    arr = np.asarray(big)
    ys, xs = np.nonzero(arr)
    crop = big.crop((xs.min(), ys.min(), xs.max() + 1, ys.max() + 1))
    w, h = crop.size
    scale = 20.0 / max(w, h)
    crop = crop.resize((max(1, round(w * scale)), max(1, round(h * scale))), Image.LANCZOS)
    a = np.asarray(crop).astype(np.float64)
    ys, xs = np.mgrid[0 : a.shape[0], 0 : a.shape[1]]
    cy = (a * ys).sum() / a.sum()
    cx = (a * xs).sum() / a.sum()
    canvas = Image.new("L", (28, 28), 0)
    canvas.paste(crop, (int(round(13.5 - cx)), int(round(13.5 - cy))))
    return np.asarray(canvas)


def main():
    font = ImageFont.truetype(FONT, 120)
    with open(OUT, "w") as f:
        for d in range(10):
            g = render(d, font)
            f.write("".join(f"{v:02x}" for v in g.flatten()) + "\n")


if __name__ == "__main__":
    main()
