"""Command-line entry points tying the pipeline together.

Subcommands: infer, track, flops, selftest, gen-weights, gen-scene. All
outputs are deterministic: running a command twice on identical inputs
produces byte-identical files regardless of the worker thread count.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import backbone as backbone_mod
from . import head as head_mod
from . import formats, model, scene, selftest
from .config import PipelineConfig, load_config
from .errors import SvxError
from .sparse import FlopsReport
from .tracker import Tracker
from .voxelize import voxelize


def _load_cfg(path) -> PipelineConfig:
    return load_config(path)


def _frame_paths(source: Path) -> list[Path]:
    if source.is_dir():
        paths = sorted(source.glob("*.svxp"))
        if not paths:
            raise SvxError(f"no .svxp frames in {source}")
        return paths
    return [source]


def _infer_frame(path: Path, cfg: PipelineConfig, weights) -> dict:
    bw, hw = weights
    pc = formats.read_frame(path)
    t0 = voxelize(pc, cfg.grid)
    fc = backbone_mod.forward_backbone(t0, bw, cfg.backbone)
    scores = head_mod.classify_voxels(fc, hw, cfg.head)
    selected = head_mod.select_query_voxels(scores, cfg.head)
    regs = head_mod.regress_boxes(fc, selected, hw, cfg.head)
    dets = head_mod.decode_boxes(selected, regs, cfg.grid, frame_id=pc.frame_id)
    return {
        "frame_id": pc.frame_id,
        "timestamp": pc.timestamp,
        "detections": [formats.detection_record(d) for d in dets],
    }


def _write_json(path: Path, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _cmd_infer(args) -> int:
    cfg = _load_cfg(args.config)
    weights = model.load_weights(args.weights, cfg.backbone, cfg.head)
    inputs = _frame_paths(Path(args.input))
    out = Path(args.output)

    if len(inputs) == 1 and not out.is_dir() and out.suffix == ".json":
        _write_json(out, _infer_frame(inputs[0], cfg, weights))
        return 0

    out.mkdir(parents=True, exist_ok=True)
    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
        docs = list(pool.map(lambda p: _infer_frame(p, cfg, weights), inputs))
    for path, doc in zip(inputs, docs):
        _write_json(out / (path.stem + ".json"), doc)
    return 0


def _cmd_track(args) -> int:
    cfg = _load_cfg(args.config)
    det_dir = Path(args.dets)
    paths = sorted(det_dir.glob("*.json")) if det_dir.is_dir() else [det_dir]
    if not paths:
        raise SvxError(f"no detection files in {det_dir}")
    frames = [formats.read_detections(p, cfg.grid) for p in paths]
    frames.sort(key=lambda f: (f[1], f[0]))

    trk = Tracker(cfg.tracker)
    outputs = []
    prev_ts = None
    for frame_id, ts, dets in frames:
        # first frame has no predecessor; dt only steers velocity prediction
        # and there are no tracks yet to predict
        dt = 1.0 if prev_ts is None else ts - prev_ts
        outputs.append((frame_id, ts, trk.step(dets, dt)))
        prev_ts = ts
    formats.write_tracks(args.output, outputs)
    return 0


def _stage_of(entry_name: str) -> str:
    if entry_name.startswith("backbone.stage"):
        return entry_name.split(".")[1]
    if entry_name.startswith("backbone."):
        return "stem"
    return "head"


def _cmd_flops(args) -> int:
    cfg = _load_cfg(args.config)
    bw, hw = model.load_weights(args.weights, cfg.backbone, cfg.head)
    pc = formats.read_frame(args.input)
    t0 = voxelize(pc, cfg.grid)

    report = FlopsReport()
    fc = backbone_mod._forward(t0, bw, cfg.backbone, report)
    scores = head_mod.classify_voxels(fc, hw, cfg.head, report=report)
    selected = head_mod.select_query_voxels(scores, cfg.head)
    head_mod.regress_boxes(fc, selected, hw, cfg.head, report=report)

    print(f"{'layer':<34}{'in sites':>10}{'out sites':>10}{'pairs':>12}{'MFLOPs':>12}")
    for e in report.entries:
        print(f"{e.name:<34}{e.input_sites:>10}{e.output_sites:>10}"
              f"{e.pairs:>12}{e.flops / 1e6:>12.3f}")
    print()
    stages: dict[str, list] = {}
    for e in report.entries:
        stages.setdefault(_stage_of(e.name), []).append(e)
    print(f"{'stage':<12}{'sites':>10}{'MFLOPs':>12}")
    for name, entries in stages.items():
        sites = entries[-1].output_sites
        mflops = sum(e.flops for e in entries) / 1e6
        print(f"{name:<12}{sites:>10}{mflops:>12.3f}")
    print()
    print(f"backbone FLOPs: {report.group_flops('backbone'):,}")
    print(f"head FLOPs:     {report.group_flops('head'):,}")
    print(f"total FLOPs:    {report.total_flops:,}")
    return 0


def _cmd_selftest(args) -> int:
    return 0 if selftest.run_selftest() else 1


def _cmd_gen_weights(args) -> int:
    cfg = _load_cfg(args.config)
    tensors = model.random_weights(cfg.backbone, cfg.head, args.seed)
    model.save_weights(args.output, tensors)
    total = sum(t.size for t in tensors.values())
    print(f"wrote {len(tensors)} tensors ({total:,} parameters) to {args.output}")
    return 0


def _cmd_gen_scene(args) -> int:
    spec = scene.load_scene_spec(args.spec)
    frames = scene.generate_scene(spec)
    out = Path(args.output)
    if len(frames) == 1 and out.suffix == ".svxp":
        formats.write_frame(out, frames[0][0])
    else:
        out.mkdir(parents=True, exist_ok=True)
        for pc, _ in frames:
            formats.write_frame(out / f"frame_{pc.frame_id:04d}.svxp", pc)
    if args.gt_output:
        doc = {
            "frames": [
                {
                    "frame_id": pc.frame_id,
                    "timestamp": pc.timestamp,
                    "boxes": [scene.gt_record(b) for b in gts],
                }
                for pc, gts in frames
            ]
        }
        _write_json(Path(args.gt_output), doc)
    print(f"wrote {len(frames)} frame(s) to {args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="svx",
        description="Fully sparse voxel 3D detection and tracking engine",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("infer", help="detect objects in one frame or a directory of frames")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--input", required=True, help=".svxp file or directory")
    p.add_argument("--output", required=True, help=".json file or directory")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(fn=_cmd_infer)

    p = sub.add_parser("track", help="link per-frame detections into tracks")
    p.add_argument("--config", required=True)
    p.add_argument("--dets", required=True, help="detection .json file or directory")
    p.add_argument("--output", required=True)
    p.set_defaults(fn=_cmd_track)

    p = sub.add_parser("flops", help="print the per-layer FLOPs table for one frame")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--input", required=True)
    p.set_defaults(fn=_cmd_flops)

    p = sub.add_parser("selftest", help="run the built-in oracle property suite")
    p.set_defaults(fn=_cmd_selftest)

    p = sub.add_parser("gen-weights", help="write deterministic random weights")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.set_defaults(fn=_cmd_gen_weights)

    p = sub.add_parser("gen-scene", help="synthesize point-cloud frames from a scene spec")
    p.add_argument("--spec", required=True, help="scene description .json")
    p.add_argument("--output", required=True, help=".svxp file or directory")
    p.add_argument("--gt-output", default=None, help="optional ground-truth .json")
    p.set_defaults(fn=_cmd_gen_scene)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (SvxError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"svx: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
