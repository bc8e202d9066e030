#!/usr/bin/env python3
"""
Universal launcher — Windows / Mac / Linux
Usage:  python run.py [--no-install] [--out DIR]

Installs the requirements, then runs a tiny end-to-end demo: collect,
train, evaluate baseline vs ITC, and print one ITC rollout.
"""
import subprocess
import sys
from pathlib import Path

HERE = Path(__file__).parent


def _itc(*args):
    return subprocess.call([sys.executable, str(HERE / "itc.py"), *args])


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    out = "runs/demo"
    if "--out" in argv:
        out = argv[argv.index("--out") + 1]
    if "--no-install" not in argv:
        print("Installing dependencies...")
        subprocess.check_call(
            [sys.executable, "-m", "pip", "install", "-r", str(HERE / "requirements.txt")]
        )
    print("Training the demo world model...")
    code = _itc("train-wm", "--tiny", "--out", out, "--deterministic")
    if code:
        return code
    print("Evaluating baseline vs ITC...")
    code = _itc("eval-accuracy", "--tiny", "--out", out,
                "--checkpoint", f"{out}/model.ckpt", "--data", f"{out}/data.jsonl")
    if code:
        return code
    print("Imagined rollout (ITC)...")
    return _itc("rollout", "--tiny", "--out", out, "--checkpoint", f"{out}/model.ckpt",
                "--codebook", f"{out}/codebook.bin", "--horizon", "10")


if __name__ == "__main__":
    sys.exit(main())
