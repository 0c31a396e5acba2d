#!/usr/bin/env python3
"""Turn DIV2K HR images into 640x480 VGA frames.

Each image is center-cropped to a 4:3 aspect ratio and resized with a
Lanczos kernel (radius 3), then written as PNG.
"""

import argparse
from pathlib import Path

from PIL import Image

WIDTH, HEIGHT = 640, 480


def to_vga(img: Image.Image) -> Image.Image:
    w, h = img.size
    if w * HEIGHT > h * WIDTH:
        cw, ch = h * WIDTH // HEIGHT, h
    else:
        cw, ch = w, w * HEIGHT // WIDTH
    left, top = (w - cw) // 2, (h - ch) // 2
    img = img.crop((left, top, left + cw, top + ch))
    return img.resize((WIDTH, HEIGHT), Image.Resampling.LANCZOS)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("src", type=Path, help="folder of DIV2K HR images")
    ap.add_argument("dst", type=Path, help="output folder")
    args = ap.parse_args()
    args.dst.mkdir(parents=True, exist_ok=True)
    paths = sorted(p for p in args.src.iterdir() if p.suffix.lower() == ".png")
    if not paths:
        raise SystemExit(f"no PNG images in {args.src}")
    for p in paths:
        with Image.open(p) as img:
            to_vga(img.convert("RGB")).save(args.dst / p.name)
    print(f"{len(paths)} frames written to {args.dst}")


if __name__ == "__main__":
    main()
