"""The same pipeline through the ``mmsae`` command line.

Generates data files, trains a model, evaluates it, and runs the split
dictionary repair. Everything lands in a temporary directory.
"""

import subprocess
import sys
import tempfile
from pathlib import Path


def mmsae(*args):
    cmd = [sys.executable, "-m", "mmsae.cli", *map(str, args)]
    print("$ mmsae", " ".join(map(str, args)))
    res = subprocess.run(cmd, capture_output=True, text=True)
    print(res.stdout.rstrip() or res.stderr.rstrip())
    return res.returncode


with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    mmsae("tools", "synth-gen", "--out-dir", tmp / "shared", "--n-pairs", 4000, "--noise", 0.05,
          "--offset", 3.0, "--n-classes", 10, "--seed", 1)
    mmsae("train", "--variant", "mgsae", "--manifest", tmp / "shared/data.toml", "--k", 8,
          "--expansion", 8, "--lambda", 0.05, "--p-mask", 0.05, "--lr", 1e-2, "--steps", 800,
          "--log-every", 400, "--out", tmp / "mg.msc")
    for what in ("dead", "align"):
        mmsae("eval", what, "--ckpt", tmp / "mg.msc", "--val", tmp / "shared/data.toml",
              "--out", tmp / f"{what}.toml")
    mmsae("eval", "mms", "--ckpt", tmp / "mg.msc", "--val", tmp / "shared/data.toml",
          "--scorer", tmp / "shared/scorer.toml", "--pair", "image,text", "--out", tmp / "mms.csv",
          "--format", "csv")
    mmsae("eval", "zeroshot", "--ckpt", tmp / "mg.msc", "--task", tmp / "shared/zeroshot.toml",
          "--out", tmp / "zs.toml")
    mmsae("eval", "retrieval", "--ckpt", tmp / "mg.msc", "--task", tmp / "shared/retrieval.toml",
          "--out", tmp / "ret.toml")

    mmsae("tools", "synth-gen", "--regime", "split", "--seed", 3, "--d", 16, "--p-true", 32, "--s", 3,
          "--n-pairs", 20, "--c-target", 0.5, "--out-dir", tmp / "split")
    mmsae("eval", "mms", "--ckpt", tmp / "split/split.msc", "--val", tmp / "split/data.toml",
          "--scorer", tmp / "split/data.toml", "--out", tmp / "split_mms.toml")
    mmsae("tools", "augment-dict", "--in", tmp / "split/split.msc", "--pairs", tmp / "split/pairs.meb",
          "--codes", tmp / "split/codes.meb", "--c", 0.5)
