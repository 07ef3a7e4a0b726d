"""Crop DIV2K images to 4:3 around the centre and resize them to 640x480 with Lanczos."""

import argparse
from pathlib import Path

from PIL import Image


def to_vga(img: Image.Image, width: int = 640, height: int = 480) -> Image.Image:
    w, h = img.size
    if w * height > h * width:
        cw, ch = h * width // height, h
    else:
        cw, ch = w, w * height // width
    left, top = (w - cw) // 2, (h - ch) // 2
    return img.crop((left, top, left + cw, top + ch)).resize((width, height), Image.LANCZOS)


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("src", type=Path)
    p.add_argument("dst", type=Path)
    args = p.parse_args()
    args.dst.mkdir(parents=True, exist_ok=True)
    files = sorted(args.src.glob("*.png"))
    if not files:
        raise SystemExit(f"no PNG files in {args.src}")
    for f in files:
        to_vga(Image.open(f).convert("RGB")).save(args.dst / f.name)
    print(f"{len(files)} images written to {args.dst}")


if __name__ == "__main__":
    main()
