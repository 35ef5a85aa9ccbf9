"""Generate a synthetic icon corpus with planted lookalike families.

Writes PNG icons plus a manifest.jsonl into --out. Each family is a popular
"original" app and a few near-copies of its icon: same texture with small
pixel perturbations, published under the same developer with similar names
so the groups subcommand will pick them up as labelled ground truth. The
rest of the corpus is independent noise icons.

Usage:
    python scripts/make_demo_corpus.py --out demo_corpus --families 4 --noise 60
"""
import argparse
import json
from pathlib import Path

import numpy as np
from PIL import Image

FAMILY_NAMES = [
    "sudoku master",
    "photo editor pro",
    "coin dozer",
    "solitaire classic",
    "flashlight plus",
    "battery saver",
    "music player gold",
    "weather radar live",
]

VARIANT_SUFFIXES = ["", " free", " hd", " 2"]


def family_icon(rng, size):
    # blocky texture so downscaled copies still look alike
    tile = rng.integers(0, 256, size=(size // 4, size // 4, 3), dtype=np.uint8)
    return np.repeat(np.repeat(tile, 4, axis=0), 4, axis=1)


def perturb(icon, rng, amount=6):
    noise = rng.integers(-amount, amount + 1, size=icon.shape, dtype=np.int16)
    return np.clip(icon.astype(np.int16) + noise, 0, 255).astype(np.uint8)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--families", type=int, default=4)
    parser.add_argument("--copies", type=int, default=3,
                        help="apps per family, original included")
    parser.add_argument("--noise", type=int, default=60,
                        help="unrelated filler apps")
    parser.add_argument("--size", type=int, default=48, help="icon edge length")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    if args.families > len(FAMILY_NAMES):
        parser.error(f"at most {len(FAMILY_NAMES)} families are named")
    if args.copies > len(VARIANT_SUFFIXES):
        parser.error(f"at most {len(VARIANT_SUFFIXES)} copies per family")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.Philox(args.seed))
    rows = []

    for f in range(args.families):
        base_name = FAMILY_NAMES[f]
        developer = f"dev.family{f}"
        base_icon = family_icon(rng, args.size)
        for c in range(args.copies):
            app_id = f"com.family{f}.app{c}"
            icon = base_icon if c == 0 else perturb(base_icon, rng)
            Image.fromarray(icon).save(out / f"{app_id}.png")
            rows.append(
                {
                    "app_id": app_id,
                    "icon_path": f"{app_id}.png",
                    "app_name": base_name + VARIANT_SUFFIXES[c],
                    "developer": developer,
                    "category": "GAME" if f % 2 == 0 else "TOOLS",
                    # the original is the popular one; copies trail it
                    "downloads": 2_000_000 - 400_000 * c,
                }
            )

    for i in range(args.noise):
        app_id = f"com.noise.app{i}"
        icon = rng.integers(0, 256, size=(args.size, args.size, 3), dtype=np.uint8)
        Image.fromarray(icon).save(out / f"{app_id}.png")
        rows.append(
            {
                "app_id": app_id,
                "icon_path": f"{app_id}.png",
                "app_name": f"random app {i}",
                "developer": f"dev.noise{i % 17}",
                "category": "GAME" if i % 2 == 0 else "TOOLS",
                "downloads": int(rng.integers(100, 50_000)),
            }
        )

    manifest = out / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    print(f"wrote {len(rows)} apps ({args.families} families) to {manifest}")


if __name__ == "__main__":
    main()
