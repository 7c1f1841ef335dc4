"""Command-line entry point: gen-data, train, infer, eval, sweep and rerun.

Every command writes ``run_manifest.json`` into its output directory
before starting and finalizes it (end time, output hashes) afterwards.
``pointvto rerun <manifest>`` replays a run and checks the hashes.
"""
from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import os
import shutil
import sys
from types import SimpleNamespace

import numpy as np
import torch

from . import __version__
from .evaluation import eval_alignment, evaluate, k_sweep, robustness_sweep, write_report, write_sweep
from .io import (DatasetEntry, atomic_write_text, load_garment, read_dataset, read_frames, sha256_file,
                 write_dataset, write_frames)
from .model import Denoiser, load_checkpoint, read_checkpoint_meta, save_checkpoint
from .pipeline import (RunConfig, build_pseudo_pairs, format_config, infer_video, mine_hard_pairs,
                       parse_config, train_stage)
from .points import AlignmentParseError, PointAlignment, read_alignment, write_alignment
from .scene import SceneTruth, gen_synthetic_scene

log = logging.getLogger("pointvto")

SEED_ENV = "POINTVTO_SEED"
MANIFEST = "run_manifest.json"
CKPT_DIR = "checkpoint"
PATH_ARGS = ("out", "data", "config", "init_ckpt", "ckpt", "video", "garment", "pose", "truth", "mask",
             "points")


class CLIError(Exception):
    pass


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV, "0")
    try:
        return int(raw)
    except ValueError:
        raise CLIError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _unfinished(path: str) -> bool:
    try:
        with open(os.path.join(path, MANIFEST), encoding="utf-8") as fh:
            return json.load(fh).get("status") != "complete"
    except (OSError, ValueError):
        return False


def _prepare_out(path: str, force: bool) -> None:
    if os.path.isdir(path) and os.listdir(path):
        if not (force or _unfinished(path)):
            raise CLIError(f"output directory {path} is not empty (use --force to replace it)")
        shutil.rmtree(path)
    os.makedirs(path, exist_ok=True)


def _outputs(out: str) -> dict[str, str]:
    hashes = {}
    for root, _dirs, files in os.walk(out):
        for f in files:
            p = os.path.join(root, f)
            rel = os.path.relpath(p, out).replace(os.sep, "/")
            if rel != MANIFEST:
                hashes[rel] = sha256_file(p)
    return dict(sorted(hashes.items()))


def _config_text(path: str | None) -> str | None:
    if path is None:
        return None
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def _load_config(path: str | None) -> RunConfig:
    text = _config_text(path)
    return RunConfig() if text is None else parse_config(text)


def _run_with_manifest(args: argparse.Namespace, body) -> None:
    out = args.out
    _prepare_out(out, args.force)
    recorded = {k: v for k, v in vars(args).items() if k not in ("func", "force", "verbose")}
    for k in PATH_ARGS:  # absolute paths let a rerun start from any directory
        if recorded.get(k) is not None and (k != "points" or os.path.exists(recorded[k])):
            recorded[k] = os.path.abspath(recorded[k])
    cfg_text = _config_text(getattr(args, "config", None))
    manifest = {
        "command": args.command,
        "args": recorded,
        "config_path": getattr(args, "config", None),
        "config_sha256": None if cfg_text is None else hashlib.sha256(cfg_text.encode()).hexdigest(),
        "seed": args.seed,
        "code_version": __version__,
        "output_dir": os.path.abspath(out),
        "started": _now(),
        "finished": None,
        "status": "running",
        "outputs": {},
    }
    path = os.path.join(out, MANIFEST)
    atomic_write_text(path, json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    try:
        body(args)
    except BaseException as e:
        manifest.update(finished=_now(), status="failed", error=f"{type(e).__name__}: {e}")
        atomic_write_text(path, json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        raise
    manifest.update(finished=_now(), status="complete", outputs=_outputs(out))
    atomic_write_text(path, json.dumps(manifest, indent=1, sort_keys=True) + "\n")


# -- commands ---------------------------------------------------------------

def cmd_gen_data(args) -> None:
    if args.count < 0:
        raise CLIError("--count must be >= 0")
    samples, entries = [], []
    for i in range(args.count):
        difficulty = args.difficulty
        if difficulty == "mixed":
            difficulty = "easy" if i % 2 else "hard"
        scene_seed = args.seed + i
        truth, *_ = gen_synthetic_scene(scene_seed, difficulty, num_frames=args.frames,
                                        garments_per_scene=args.garments_per_scene)
        pairs = build_pseudo_pairs([truth], args.corruption, scene_seed, args.garments_per_scene)
        for j, s in enumerate(pairs):
            samples.append(s)
            # build_pseudo_pairs seeds pair j of a single scene with seed + j
            entries.append(DatasetEntry(f"scene_{i:04d}_g{j}", s.pseudo_garment, args.corruption,
                                        scene_seed + j))
    write_dataset(args.out, samples, entries)
    log.info("wrote %d samples to %s", len(samples), args.out)


def _checkpoint_dir(path: str) -> str:
    sub = os.path.join(path, CKPT_DIR)
    return sub if os.path.isdir(sub) else path


def _require_checkpoint(path: str | None, what: str) -> str:
    if path is None:
        raise CLIError(f"{what} requires --init-ckpt")
    d = _checkpoint_dir(path)
    if not os.path.exists(os.path.join(d, "manifest.txt")):
        raise CLIError(f"no checkpoint found at {path}")
    return d


def cmd_train(args) -> None:
    cfg = _load_config(args.config)
    st = cfg.stages[args.stage]
    if args.iterations is not None:
        st.iterations = args.iterations
    if args.stage == 1:
        if args.init_ckpt is not None:
            model = load_checkpoint(_require_checkpoint(args.init_ckpt, "stage 1"))
        else:
            model = Denoiser(cfg.model)
    else:
        d = _require_checkpoint(args.init_ckpt, f"stage {args.stage}")
        prev = read_checkpoint_meta(d).get("stage")
        if prev != str(args.stage - 1):
            raise CLIError(f"stage {args.stage} needs a stage-{args.stage - 1} checkpoint, got stage {prev}")
        model = load_checkpoint(d)
        if args.config is not None and dataclasses.asdict(model.cfg) != dataclasses.asdict(cfg.model):
            raise CLIError("the [model] section of --config differs from the checkpoint's model")
    cfg.model = model.cfg
    data = read_dataset(args.data, model.cfg.K)
    if not data:
        raise CLIError(f"dataset {args.data} is empty")
    schedule = model.schedule
    lines = []
    if args.stage == 3:
        hard, scores = mine_hard_pairs(data, model, st.hard_threshold, schedule, cfg.mine_timestep,
                                       args.seed)
        with open(os.path.join(args.data, "dataset.json"), encoding="utf-8") as fh:
            names = [e["name"] for e in json.load(fh)["scenes"]]
        rows = [f"{n}\t{s:.6f}\t{int(s < st.hard_threshold)}" for n, s in zip(names, scores)]
        atomic_write_text(os.path.join(args.out, "hard_pairs.tsv"),
                          "sample\tregion_ssim\thard\n" + "\n".join(rows) + "\n")
        if not hard:
            log.warning("no sample below SSIM %.2f; training on all samples", st.hard_threshold)
            hard = data
        data = hard
    state = train_stage(st, data, model, schedule, seed=args.seed * 10 + args.stage,
                        progress=lambda i, l: lines.append(f"{i}\t{l:.8f}"))
    save_checkpoint(model, os.path.join(args.out, CKPT_DIR),
                    {"stage": args.stage, "seed": args.seed, "iterations": st.iterations,
                     "video_iterations": state.video_iterations})
    atomic_write_text(os.path.join(args.out, "loss.tsv"), "iteration\tloss\n" + "\n".join(lines) + "\n")
    atomic_write_text(os.path.join(args.out, "config.ini"), format_config(cfg))


def _scene_file(video_dir: str, name: str) -> str | None:
    for base in (video_dir, os.path.dirname(os.path.abspath(video_dir))):
        p = os.path.join(base, name)
        if os.path.exists(p):
            return p
    return None


def cmd_infer(args) -> None:
    d = _checkpoint_dir(args.ckpt)
    if not os.path.exists(os.path.join(d, "manifest.txt")):
        raise CLIError(f"no checkpoint found at {args.ckpt}")
    model = load_checkpoint(d)
    frames = read_frames(args.video)[..., :3]
    T = frames.shape[0]
    pose_dir = args.pose or _scene_file(args.video, "pose")
    pose = read_frames(pose_dir) if pose_dir else np.zeros(frames.shape[:3])
    if pose.ndim == 4:
        pose = pose.mean(axis=-1)
    g, m_g = load_garment(args.garment)
    mask = None
    if args.mask is not None:
        mask = read_frames(args.mask)
        mask = (mask.mean(axis=-1) if mask.ndim == 4 else mask) > 0.5
    align = None
    if args.points == "oracle":
        truth_path = args.truth or _scene_file(args.video, "truth.json")
        if truth_path is None:
            raise CLIError("--points oracle needs the scene's truth.json (pass --truth)")
        with open(truth_path, encoding="utf-8") as fh:
            truth = SceneTruth.from_json(fh.read())
        align = eval_alignment(SimpleNamespace(truth=truth, num_frames=T), model.cfg.K, args.seed)
    elif args.points != "none":
        try:
            align = read_alignment(args.points)
        except AlignmentParseError as e:
            raise CLIError(f"{args.points}: {e}") from None
    video = infer_video(model, frames, pose, g, m_g, model.schedule, args.seed, align, args.steps,
                        args.window, args.stride, mask)
    write_frames(os.path.join(args.out, "frames"), video)
    if align is not None:
        write_alignment(os.path.join(args.out, "alignment.txt"), align)


def _load_model(path: str) -> Denoiser:
    d = _checkpoint_dir(path)
    if not os.path.exists(os.path.join(d, "manifest.txt")):
        raise CLIError(f"no checkpoint found at {path}")
    return load_checkpoint(d)


def cmd_eval(args) -> None:
    model = _load_model(args.ckpt)
    data = read_dataset(args.data, model.cfg.K)
    report = evaluate(model, data, model.schedule, args.seed, args.points, args.K, args.error_rate,
                      args.steps, args.window, args.stride, args.mask_based)
    write_report(report, os.path.join(args.out, "report.tsv"))


def _parse_values(raw: str, axis: str) -> list:
    try:
        vals = [int(v) if axis == "k" else float(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise CLIError(f"bad --values {raw!r} for axis {axis}") from None
    if not vals:
        raise CLIError("--values is empty")
    return vals


def cmd_sweep(args) -> None:
    model = _load_model(args.ckpt)
    data = read_dataset(args.data, model.cfg.K)
    values = _parse_values(args.values, args.axis)
    kw = dict(steps=args.steps, window=args.window, stride=args.stride)
    try:
        if args.axis == "k":
            result = k_sweep(model, data, values, model.schedule, args.seed, **kw)
        else:
            result = robustness_sweep(model, data, values, model.schedule, args.seed, **kw)
    except ValueError as e:
        raise CLIError(str(e)) from None
    write_sweep(result, args.out)


def cmd_rerun(args) -> None:
    with open(args.manifest, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("status") != "complete":
        raise CLIError(f"{args.manifest} records an unfinished run")
    argv = _argv_from(manifest["command"], manifest["args"], args.out)
    code = main(argv + ["--force"])
    if code != 0:
        raise CLIError(f"replayed command exited with {code}")
    got = _outputs(args.out or manifest["args"]["out"])
    want = manifest["outputs"]
    bad = sorted(k for k in set(got) | set(want) if got.get(k) != want.get(k))
    if bad:
        raise CLIError(f"{len(bad)} output(s) differ from the manifest, e.g. {bad[:3]}")
    print(f"reproduced {len(want)} output files byte for byte")


def _argv_from(command: str, recorded: dict, out: str | None) -> list[str]:
    argv = [command]
    for k, v in recorded.items():
        if k in ("command",) or v is None or v is False:
            continue
        if k == "out" and out is not None:
            v = out
        flag = "--" + k.replace("_", "-")
        argv += [flag] if v is True else [flag, str(v)]
    return argv


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pointvto", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--out", required=True)
        sp.add_argument("--force", action="store_true", help="replace a non-empty output directory")
        if seed:
            sp.add_argument("--seed", type=int, default=None,
                            help=f"defaults to ${SEED_ENV} or 0")

    g = sub.add_parser("gen-data", help="render synthetic scenes and pseudo pairs",
                       description="Scene i is rendered from seed + i; with 'mixed', odd i are easy.")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--difficulty", choices=["easy", "hard", "mixed"], default="mixed")
    g.add_argument("--frames", type=int, default=8)
    g.add_argument("--garments-per-scene", type=int, default=1)
    g.add_argument("--corruption", type=float, default=0.0)
    common(g)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", type=int, choices=[1, 2, 3], required=True)
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--init-ckpt")
    t.add_argument("--iterations", type=int)
    common(t)
    t.set_defaults(func=cmd_train)

    def infer_opts(sp):
        sp.add_argument("--steps", type=int, default=10)
        sp.add_argument("--window", type=int)
        sp.add_argument("--stride", type=int)

    i = sub.add_parser("infer", help="generate a try-on video")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--video", required=True, help="directory of frame_*.png")
    i.add_argument("--garment", required=True)
    i.add_argument("--points", default="none", help="alignment file, 'oracle' or 'none'")
    i.add_argument("--pose", help="directory of pose frames (default: sibling pose/)")
    i.add_argument("--truth", help="scene truth.json for --points oracle")
    i.add_argument("--mask", help="agnostic mask frames; switches to mask-based inference")
    infer_opts(i)
    common(i)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--points", choices=["oracle", "none"], default="oracle")
    e.add_argument("--K", type=int)
    e.add_argument("--error-rate", type=float, default=0.0)
    e.add_argument("--mask-based", action="store_true")
    infer_opts(e)
    common(e)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="K or alignment-error ablation")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--axis", choices=["k", "error-rate"], required=True)
    s.add_argument("--values", required=True)
    infer_opts(s)
    common(s)
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("rerun", help="replay a run manifest and verify its outputs")
    r.add_argument("manifest")
    r.add_argument("--out", help="write the replay here instead of the recorded directory")
    r.set_defaults(func=cmd_rerun)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    # one thread keeps float reductions in a fixed order, so reruns match bit for bit
    torch.set_num_threads(1)
    try:
        if args.command == "rerun":
            args.func(args)
            return 0
        if args.seed is None:
            args.seed = _default_seed()
        _run_with_manifest(args, args.func)
    except (CLIError, FileNotFoundError, ValueError) as e:
        print(f"pointvto {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
