"""Generate the synthetic grayscale test images as PGM files.

Usage: python scripts/make_images.py [outdir]
"""

import sys
from pathlib import Path

from smoe import synth
from smoe.imaging import save_image


def main():
    outdir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("images")
    outdir.mkdir(parents=True, exist_ok=True)
    images = {
        "step_64.pgm": synth.vertical_step(64, 64),
        "disk_64.pgm": synth.disk(64, 64),
        "gradient_64.pgm": synth.two_tone_gradient(64, 64),
        "disk_128.pgm": synth.disk(128, 128),
        "bars_128.pgm": synth.crossing_bars(128, 128),
        "checker_128.pgm": synth.checkerboard_diagonal(128, 128, 32),
        "composite_256.pgm": synth.composite(256, 256),
        "composite_768x512.pgm": synth.composite(768, 512),
    }
    for name, image in images.items():
        save_image(image, outdir / name)
        print(f"wrote {outdir / name} ({image.width}x{image.height})")


if __name__ == "__main__":
    main()
