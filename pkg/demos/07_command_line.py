"""The airm command line
========================

Five subcommands cover the workflow: gen-data, train, refine, eval and
ablate. Each writes its resolved settings next to its outputs. This script
drives them through subprocess with a tiny config.
"""

# %%
import os
import subprocess
import sys
import tempfile

work = tempfile.mkdtemp(prefix="airm-cli-")


def airm(*args):
    cmd = [sys.executable, "-m", "airm", *args]
    print("$ airm", " ".join(args))
    proc = subprocess.run(cmd, capture_output=True, text=True)
    print((proc.stdout + proc.stderr).strip(), f"[exit {proc.returncode}]\n")
    return proc.returncode


# %%
airm("gen-data", "--out", f"{work}/data", "--n", "4", "--size", "64x64", "--seed", "1")

with open(f"{work}/tiny.cfg", "w") as fh:
    fh.write("total_iters = 30\ndecay_iters = 20\nn_scenes = 8\ncrop = 32x32\n"
             "aee_dims = 16,32\nfeat_dim = 16\nhidden = 32\nhyper_width = 16\n")
airm("train", "--config", f"{work}/tiny.cfg", "--data", f"{work}/data", "--out", f"{work}/m.ckpt",
     "--deterministic")
print(open(f"{work}/m.ckpt.config.txt").read())

# %%
airm("refine", "--ckpt", f"{work}/m.ckpt", "--manifest", f"{work}/data/test/manifest.tsv",
     "--out", f"{work}/refined", "--ratios", "1")
airm("eval", "--pred", f"{work}/refined", "--gt", f"{work}/data/test", "--report", f"{work}/report.csv")
print(open(f"{work}/report.csv").read())

# %%
# Usage errors exit with status 2.
airm("gen-data", "--out", f"{work}/bad", "--size", "8x8")
print("outputs under", work, ":", sorted(os.listdir(work)))
