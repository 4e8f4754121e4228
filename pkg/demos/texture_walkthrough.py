"""End-to-end walkthrough on generated textures.

Builds a small three-class texture tree, trains the reference network for a
few epochs, evaluates it on the held-out split and writes a Grad-CAM overlay
and activation grids for one test image. Everything goes through the CLI so
the commands printed here can be pasted into a shell.

    python3 demos/texture_walkthrough.py [workdir]
"""

import sys
import tempfile
from pathlib import Path

from ctnet.cli import main
from ctnet.synthetic import write_texture_tree


def step(*argv):
    argv = [str(a) for a in argv]
    print("\n$ ctnet " + " ".join(argv))
    rc = main(argv)
    if rc != 0:
        sys.exit(rc)


def walkthrough(work: Path) -> None:
    data = write_texture_tree(work / "data", {"train": 60, "valid": 20, "test": 20}, size=64, seed=7)
    print(f"texture tree written to {data}")
    run = work / "run"
    step("train", "--data", data, "--run-dir", run, "--epochs", 6, "--image-size", 64, "--batch-size", 16,
         "--seed", 11, "--bn-momentum", 0.9, "--clr-min", 1e-4, "--clr-max", 1e-3, "--cache-images", "true")
    step("eval", "--checkpoint", run / "best.ckpt", "--data", data, "--split", "test", "--out", work / "eval")
    image = sorted((data / "test" / "COVID-19").glob("*.png"))[0]
    step("gradcam", "--checkpoint", run / "best.ckpt", "--image", image, "--out", work / "gradcam")
    step("activations", "--checkpoint", run / "best.ckpt", "--image", image, "--out", work / "activations")
    print(f"\nall outputs under {work}")


if __name__ == "__main__":
    if len(sys.argv) > 1:
        walkthrough(Path(sys.argv[1]))
    else:
        with tempfile.TemporaryDirectory() as tmp:
            walkthrough(Path(tmp))
