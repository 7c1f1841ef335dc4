"""
Three-stage training through the command line
=============================================

Generates data, trains the three stages, then compares inference with and
without points and sweeps the alignment error rate. By default the stages
are cut to a few dozen iterations so the script ends in a couple of minutes;
``--full`` runs the default smoke configuration (about 15 minutes on one core).
"""
import argparse
import os
import tempfile

from pointvto.cli import main

parser = argparse.ArgumentParser()
parser.add_argument("--full", action="store_true")
parser.add_argument("--out", default=None)
opts = parser.parse_args()
root = opts.out or tempfile.mkdtemp(prefix="pointvto_smoke_")


def run(*argv):
    print("$ pointvto", " ".join(map(str, argv)))
    if main([str(a) for a in argv]) != 0:
        raise SystemExit(1)


short = [] if opts.full else ["--iterations", 40]
count, test_count = (64, 24) if opts.full else (16, 6)
run("gen-data", "--count", count, "--seed", 0, "--out", f"{root}/train", "--force")
run("gen-data", "--count", test_count, "--seed", 10000, "--difficulty", "hard", "--out", f"{root}/test", "--force")
run("train", "--stage", 1, "--data", f"{root}/train", "--out", f"{root}/s1", "--force", *short)
run("train", "--stage", 2, "--data", f"{root}/train", "--init-ckpt", f"{root}/s1", "--out", f"{root}/s2",
    "--force", *short)
# stage 3 first mines the pairs the stage-2 model reconstructs badly
run("train", "--stage", 3, "--data", f"{root}/train", "--init-ckpt", f"{root}/s2", "--out", f"{root}/s3",
    "--force", *short)

run("eval", "--ckpt", f"{root}/s3", "--data", f"{root}/test", "--points", "none", "--out", f"{root}/eval_none",
    "--force")
run("sweep", "--ckpt", f"{root}/s3", "--data", f"{root}/test", "--axis", "error-rate", "--values", "0,0.2,0.7",
    "--out", f"{root}/sweep", "--force")

for line in open(f"{root}/eval_none/report.tsv"):
    if line.startswith("# mean"):
        print("no points (ssim, tc, placement):", " ".join(line.split()[2:5]))
print(open(f"{root}/sweep/sweep.tsv").read())
print("outputs under", os.path.abspath(root))
