"""Command-line entry point: dataset generation, training, evaluation,
gradient checks, sampling overlays, and ablation sweeps.

Configuration lives in a UTF-8 key-value file (``section.key = value``,
``#`` comments) whose schema mirrors the TrainConfig / SynthConfig /
EvalConfig dataclasses; command-line flags override file values. Every
run writes its resolved config next to its artifacts, so any output is
reproducible from the recorded config and seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import types
import typing
from dataclasses import dataclass, fields, replace

import numpy as np

from .core import Rng
from .dataio import (
    SynthConfig,
    gen_synthetic,
    load_manifest,
    read_checkpoint,
    write_checkpoint,
    write_overlay,
)
from .evaluation import cluster_probe, linear_probe
from .gradcheck import run_suite
from .propagation import ProjectionParams
from .sampling import depth_to_pointcloud, farthest_point_sample, random_sample
from .training import (
    Dataset,
    SegHeadParams,
    TrainConfig,
    config_digest,
    seg_head_apply,
    train,
)


@dataclass(frozen=True)
class EvalConfig:
    """Cluster-probe and linear-probe knobs."""

    k_pred: int | None = None  # defaults to the ground-truth class count
    kmeans_iters: int = 50
    probe_lr: float = 5e-3
    probe_steps: int = 200
    seed: int = 0


_SECTIONS = {"train": TrainConfig, "synth": SynthConfig, "eval": EvalConfig}


def _field_types(cls) -> dict:
    return typing.get_type_hints(cls)


def _parse_value(raw: str, ftype):
    raw = raw.strip()
    if isinstance(ftype, types.UnionType):
        args = typing.get_args(ftype)
        if type(None) in args:
            if raw.lower() in ("none", ""):
                return None
            inner = [a for a in args if a is not type(None)][0]
            return _parse_value(raw, inner)
        raise ValueError(f"unsupported union type {ftype}")
    if ftype is bool:
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if ftype is int:
        return int(raw)
    if ftype is float:
        return float(raw)
    if ftype is str:
        return raw
    raise ValueError(f"unsupported config type {ftype}")


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class CliConfig:
    train: TrainConfig
    synth: SynthConfig
    eval: EvalConfig

    def render(self) -> str:
        lines = []
        for section, cfg in (("train", self.train), ("synth", self.synth), ("eval", self.eval)):
            for f in fields(cfg):
                lines.append(f"{section}.{f.name} = {_format_value(getattr(cfg, f.name))}")
        return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> CliConfig:
    overrides: dict[str, dict] = {s: {} for s in _SECTIONS}
    types_by_section = {s: _field_types(c) for s, c in _SECTIONS.items()}
    names_by_section = {s: {f.name for f in fields(c)} for s, c in _SECTIONS.items()}
    for ln, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"config line {ln}: expected 'key = value'")
        key, raw = (x.strip() for x in stripped.split("=", 1))
        if "." not in key:
            raise ValueError(f"config line {ln}: keys are namespaced, e.g. train.steps")
        section, name = key.split(".", 1)
        if section not in _SECTIONS or name not in names_by_section[section]:
            raise ValueError(f"config line {ln}: unknown key {key!r}")
        overrides[section][name] = _parse_value(raw, types_by_section[section][name])
    return CliConfig(
        train=TrainConfig(**overrides["train"]),
        synth=SynthConfig(**overrides["synth"]),
        eval=EvalConfig(**overrides["eval"]),
    )


def load_config(path: str | None) -> CliConfig:
    if path is None:
        return CliConfig(TrainConfig(), SynthConfig(), EvalConfig())
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def _collect_codes(ds: Dataset, head: SegHeadParams):
    codes, labels = [], []
    for crop in ds.crops:
        if crop.labels is None:
            raise ValueError(f"crop {crop.image_id}/{crop.crop_id} has no labels")
        c, _ = seg_head_apply(head, crop.features.positions_matrix())
        codes.append(c)
        labels.append(crop.labels.reshape(-1))
    return np.concatenate(codes, axis=0), np.concatenate(labels)


def _head_from_checkpoint(tensors: dict) -> tuple[SegHeadParams, ProjectionParams | None]:
    head = SegHeadParams(
        **{k: tensors[k].astype(np.float64) for k in ("w_lin", "b_lin", "w1", "b1", "w2", "b2")}
    )
    proj = None
    if "proj_weight" in tensors:
        proj = ProjectionParams(
            tensors["proj_weight"].astype(np.float64),
            tensors["proj_bias"].astype(np.float64),
        )
    return head, proj


def _run_training(cfg: CliConfig, manifest: str, out_dir: str, verbose: bool) -> str:
    ds, report = load_manifest(manifest)
    result = train(cfg.train, ds)
    digest = config_digest(cfg.train)
    run_dir = os.path.join(out_dir, f"{digest[:12]}-seed{cfg.train.seed}")
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg.render())
    with open(os.path.join(run_dir, "metrics.log"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(result.log_lines) + "\n")
    if report.messages:
        with open(os.path.join(run_dir, "load_report.txt"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(report.messages) + "\n")
    tensors = dict(result.head.as_dict())
    if result.proj is not None:
        tensors["proj_weight"] = result.proj.weight
        tensors["proj_bias"] = result.proj.bias
    write_checkpoint(os.path.join(run_dir, "checkpoint.npz"), tensors, digest)
    if verbose:
        print(f"final loss: {result.final_loss!r}")
    print(run_dir)
    return run_dir


def _evaluate(cfg: CliConfig, ds: Dataset, head: SegHeadParams) -> dict:
    codes, labels = _collect_codes(ds, head)
    k_gt = int(labels[labels != 255].max()) + 1
    probe = cluster_probe(
        codes,
        labels,
        k_gt,
        k_pred=cfg.eval.k_pred,
        iters=cfg.eval.kmeans_iters,
        rng=Rng(cfg.eval.seed),
    )
    lin_acc, lin_miou = linear_probe(
        codes, labels, codes, labels, k_gt,
        lr=cfg.eval.probe_lr, steps=cfg.eval.probe_steps, rng=Rng(cfg.eval.seed),
    )
    return {
        "cluster_accuracy": probe["accuracy"],
        "cluster_miou": probe["miou"],
        "per_class_iou": probe["iou"],
        "confusion": probe["confusion"].counts.tolist(),
        "assignment": list(probe["assignment"].mapping),
        "linear_accuracy": lin_acc,
        "linear_miou": lin_miou,
    }


def _write_eval_report(out_dir: str, record: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(record, fh, sort_keys=True, indent=2)
        fh.write("\n")
    lines = [
        f"cluster probe accuracy: {record['cluster_accuracy']!r}",
        f"cluster probe mIoU:     {record['cluster_miou']!r}",
        f"linear probe accuracy:  {record['linear_accuracy']!r}",
        f"linear probe mIoU:      {record['linear_miou']!r}",
        f"assignment: {record['assignment']}",
        "per-class IoU: " + " ".join(repr(x) for x in record["per_class_iou"]),
        "confusion matrix (rows=predicted clusters, cols=classes):",
    ]
    lines += ["  " + " ".join(f"{v:8d}" for v in row) for row in record["confusion"]]
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


_ABLATION_ROWS = [
    ("baseline", {"lambda_depth": 0.0, "sampler": "random", "lhp": False}),
    ("depth-correlation", {"sampler": "random", "lhp": False}),
    ("fps-sampling", {"lambda_depth": 0.0, "sampler": "fps", "lhp": False}),
    ("combined", {"lhp": False}),
]
_ABLATION_ROWS_LHP = [
    ("propagation", {"lambda_depth": 0.0, "sampler": "random", "lhp": True}),
    ("combined+propagation", {"lhp": True}),
]


def _run_ablation(cfg: CliConfig, ds: Dataset, seeds: list[int], with_lhp: bool) -> list[dict]:
    rows = list(_ABLATION_ROWS) + (list(_ABLATION_ROWS_LHP) if with_lhp else [])
    out = []
    for name, mods in rows:
        accs, mious = [], []
        for seed in seeds:
            tc = replace(cfg.train, seed=seed, **mods)
            result = train(tc, ds)
            codes, labels = _collect_codes(ds, result.head)
            k_gt = int(labels[labels != 255].max()) + 1
            probe = cluster_probe(
                codes, labels, k_gt,
                k_pred=cfg.eval.k_pred, iters=cfg.eval.kmeans_iters, rng=Rng(cfg.eval.seed),
            )
            accs.append(probe["accuracy"])
            mious.append(probe["miou"])
        out.append(
            {
                "name": name,
                "accuracy": accs,
                "miou": mious,
                "mean_accuracy": float(np.mean(accs)),
                "mean_miou": float(np.mean(mious)),
            }
        )
    return out


def _format_ablation_table(rows: list[dict]) -> str:
    lines = [f"{'configuration':<22} {'acc(%)':>8} {'mIoU(%)':>8}  per-seed acc(%)"]
    for r in rows:
        per_seed = " ".join(f"{100*a:.2f}" for a in r["accuracy"])
        lines.append(
            f"{r['name']:<22} {100*r['mean_accuracy']:>8.2f}"
            f" {100*r['mean_miou']:>8.2f}  {per_seed}"
        )
    return "\n".join(lines)


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="depthseg")
    p.add_argument("--config", help="key-value config file")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    p.add_argument("--seed", type=int, help="override train.seed and synth.seed")
    p.add_argument("--steps", type=int, help="override train.steps")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    g = sub.add_parser("gen-synth", help="generate the synthetic dataset")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train the segmentation head")
    t.add_argument("--data", required=True, help="manifest path")
    t.add_argument("--out", required=True, help="output directory for run dirs")

    e = sub.add_parser("eval", help="cluster probe + linear probe")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)

    sub.add_parser("gradcheck", help="finite-difference gradient suite")

    s = sub.add_parser("sample", help="emit FPS and random sampling overlays")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--index", type=int, default=0, help="crop index in the manifest")

    a = sub.add_parser("ablate", help="contribution ablation grid")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", default="0", help="comma-separated training seeds")
    a.add_argument("--lhp", action="store_true", help="include propagation rows")
    return p


def run(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = CliConfig(
                replace(cfg.train, seed=args.seed),
                replace(cfg.synth, seed=args.seed),
                cfg.eval,
            )
        if args.steps is not None:
            cfg = CliConfig(replace(cfg.train, steps=args.steps), cfg.synth, cfg.eval)
        if args.print_config:
            sys.stdout.write(cfg.render())
            return 0
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 2

        if args.command == "gen-synth":
            manifest = gen_synthetic(cfg.synth, args.out)
            print(manifest)
            return 0

        if args.command == "train":
            _run_training(cfg, args.data, args.out, args.verbose)
            return 0

        if args.command == "eval":
            ds, _ = load_manifest(args.data)
            tensors, _ = read_checkpoint(args.checkpoint)
            head, _ = _head_from_checkpoint(tensors)
            record = _evaluate(cfg, ds, head)
            _write_eval_report(args.out, record)
            print(os.path.join(args.out, "report.txt"))
            return 0

        if args.command == "gradcheck":
            results = run_suite()
            ok = True
            for name, err in results.items():
                status = "ok" if err <= 1e-6 else "FAIL"
                ok = ok and err <= 1e-6
                print(f"{name:<28} max rel err {err:.3e}  {status}")
            return 0 if ok else 1

        if args.command == "sample":
            ds, _ = load_manifest(args.data)
            crop = ds.crops[args.index]
            h, w = crop.depth.height, crop.depth.width
            k = min(cfg.train.n_samples**2, h * w)
            cloud = depth_to_pointcloud(crop.depth, cfg.train.depth_scale)
            rng = Rng(cfg.train.seed)
            init = 0 if cfg.train.fps_init == "zero" else rng.randint(len(cloud))
            fps = farthest_point_sample(cloud, k, init)
            rnd = random_sample(h, w, k, rng)
            os.makedirs(args.out, exist_ok=True)
            stem = f"{crop.image_id}_{crop.crop_id}"
            fps_path = os.path.join(args.out, f"{stem}_fps.ppm")
            rnd_path = os.path.join(args.out, f"{stem}_random.ppm")
            write_overlay(crop.depth, fps, fps_path)
            write_overlay(crop.depth, rnd, rnd_path)
            print(fps_path)
            print(rnd_path)
            return 0

        if args.command == "ablate":
            ds, _ = load_manifest(args.data)
            seeds = [int(x) for x in args.seeds.split(",") if x != ""]
            rows = _run_ablation(cfg, ds, seeds, args.lhp)
            os.makedirs(args.out, exist_ok=True)
            table = _format_ablation_table(rows)
            with open(os.path.join(args.out, "ablation.json"), "w", encoding="utf-8") as fh:
                json.dump(rows, fh, sort_keys=True, indent=2)
                fh.write("\n")
            with open(os.path.join(args.out, "ablation.txt"), "w", encoding="utf-8") as fh:
                fh.write(table + "\n")
            print(table)
            return 0

        parser.print_usage(sys.stderr)
        return 2
    except (ValueError, OSError, FloatingPointError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))
