"""
cli.py - command-line entry point

  maskbind make-data   synthetic scenes -> container files + manifest
  maskbind train       flow-matching + focal training -> checkpoint, metrics.jsonl
  maskbind sample      one test scene -> frames, mask trace, latent, manifest
  maskbind eval        one binding mode on the test split -> EvalReport JSON
  maskbind ablate      every requested mode on the same seeds -> reports + claims

Every command accepts --config (sectioned key=value file, see docs/config.md) and
honours SECTION__KEY environment overrides. A rerun whose output directory already
records the same run hash is skipped; an interrupted ablate resumes the missing modes.
Errors exit with 2 (config), 3 (numeric) or 4 (I/O); `ablate --strict` exits with 1 when
an expected ordering is violated.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch
from rich.markup import escape
from rich.table import Table

from maskbind import codec as codec_mod
from maskbind.backbone.model import DiffusionTransformer, build_model, load_checkpoint
from maskbind.backbone.state import AudioConditions, Conditions
from maskbind.baselines.rectangles import boxes_to_masks, parse_box, scene_rectangles
from maskbind.config import RunConfig, load_config
from maskbind.errors import (
    EXIT_OK,
    EXIT_ORDERING,
    ConfigError,
    ContainerError,
    MaskBindError,
    exit_code_for,
)
from maskbind.eval.ablation import (
    ClaimResult,
    check_directional_claims,
    check_modes,
    evaluate_ground_truth,
    evaluate_mode,
    run_ablation,
)
from maskbind.eval.metrics import EvalReport, heldout_mask_iou
from maskbind.io import container
from maskbind.io.images import save_frames, save_mask_trace
from maskbind.io.manifest import manifest_matches, read_manifest, write_manifest
from maskbind.log import console, setup_logging
from maskbind.sampler import SAMPLE_MODES, chain_segments, sample
from maskbind.synthgen.dataset import export_dataset, make_dataset, split_seeds
from maskbind.synthgen.scene import SceneSample, generate_scene
from maskbind.trainer import Trainer, collate

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(Path(args.config) if args.config else None)
    overrides = {}
    if getattr(args, "mode", None):
        overrides["mode"] = args.mode
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg.sample = dataclasses.replace(cfg.sample, **overrides).validate()
    return cfg


def _run_hash(cfg: RunConfig, **extra: object) -> str:
    blob = json.dumps({"config": cfg.config_hash(), **extra}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _load_model(path: Path, cfg: RunConfig, device: torch.device) -> DiffusionTransformer:
    model, meta = load_checkpoint(path, map_location=device)
    if meta.get("model_config") != cfg.model.to_dict():
        logger.warning("checkpoint model config differs from [model]; using the checkpoint's")
    return model.eval()


def _test_scenes(cfg: RunConfig, n: Optional[int] = None) -> List[SceneSample]:
    data = cfg.data
    dataset = make_dataset(n or cfg.eval.n_samples, "test", data.scene(), data.n_entities)
    return list(dataset)


def _write_report(report: EvalReport, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"report_{report.mode}.json"
    with path.open("w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2, ensure_ascii=False)
    return path


def _read_report(path: Path) -> EvalReport:
    try:
        with path.open("r", encoding="utf-8") as f:
            return EvalReport.from_dict(json.load(f))
    except json.JSONDecodeError as e:
        raise ContainerError(f"{path}: not valid JSON ({e})") from e


def _completed(manifest_path: Path, run_hash: str, required: Sequence[str] = ()) -> bool:
    """Manifest records `run_hash`, lists every `required` file, and all listed files exist."""
    if not manifest_matches(manifest_path, run_hash):
        return False
    files = read_manifest(manifest_path).get("files", [])
    if not set(required) <= set(files):
        return False
    return all((manifest_path.parent / name).exists() for name in files)


def _finished_reports(manifest_path: Path, run_hash: str,
                      out_dir: Path) -> Dict[str, EvalReport]:
    """Reports of an interrupted ablation with the same run hash, keyed by mode."""
    if not manifest_matches(manifest_path, run_hash):
        return {}
    done: Dict[str, EvalReport] = {}
    for mode in read_manifest(manifest_path).get("extra", {}).get("finished", []):
        path = out_dir / f"report_{mode}.json"
        try:
            done[mode] = _read_report(path)
        except (ContainerError, OSError) as e:
            logger.warning("re-running %s: %s", mode, e)
    return done


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.3f}"


def _fmt_list(values: Sequence[Optional[float]]) -> str:
    return " / ".join(_fmt(v) for v in values) if values else "-"


def render_table(reports: Sequence[EvalReport]) -> Table:
    """Comparison table, one row per report in the given order."""
    table = Table(title="binding modes")
    for name in ("mode", "mask IoU", "held-out IoU", "attribution", "swap error", "distance"):
        table.add_column(name, justify="left" if name == "mode" else "right")
    for r in reports:
        table.add_row(r.mode, _fmt_list(r.mask_iou), _fmt_list(r.heldout_mask_iou),
                      _fmt_list(r.attribution), _fmt(r.swap_error),
                      _fmt(r.distribution_distance))
    return table


def render_claims(claims: Sequence[ClaimResult]) -> Table:
    table = Table(title="expected ordering")
    table.add_column("claim")
    table.add_column("result")
    table.add_column("values")
    for c in claims:
        verdict = {True: "[green]pass[/]", False: "[red]FAIL[/]", None: "[yellow]skipped[/]"}
        table.add_row(c.name, verdict[c.passed], c.detail)
    return table


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_make_data(args: argparse.Namespace) -> int:
    cfg = _config(args)
    data = cfg.data
    n = args.n or (data.n_train if args.split == "train" else data.n_test)
    dataset = make_dataset(n, args.split, data.scene(), data.n_entities, data.invalid_fraction)
    manifest = export_dataset(dataset, Path(args.out),
                              _run_hash(cfg, split=args.split, n=n), progress=not args.quiet)
    console.print(f"Wrote {n} scenes and {manifest}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _config(args)
    device = torch.device(args.device)
    data = cfg.data
    dataset = make_dataset(data.n_train, "train", data.scene(), data.n_entities,
                           data.invalid_fraction)
    model = build_model(cfg.model, seed=cfg.train.seed)
    trainer = Trainer(model, cfg.train, dataset, cfg.codec, cfg.features, data.scene(),
                      out_dir=Path(args.out), config_hash=cfg.config_hash(), device=device)
    history = trainer.run(progress=not args.quiet, resume=not args.no_resume)
    if history:
        last = history[-1]
        console.print(f"step {last['step']}: fm {last['fm_loss']:.5f} "
                      f"focal {last['focal_loss']:.5f} total {last['total_loss']:.5f}")
    console.print(f"Checkpoint in {Path(args.out) / Trainer.CHECKPOINT}")
    return EXIT_OK


def _segment_conditions(conds: Conditions, segments: int, frames: int, tail: int
                        ) -> List[Conditions]:
    """Slice full-length audio tracks into overlapping `frames`-long latent windows."""
    stride = frames - tail
    out = []
    for j in range(segments):
        lo = j * stride
        audio = AudioConditions(conds.audio.features[:, :, lo:lo + frames],
                                conds.audio.mute_features[:, :, lo:lo + frames])
        out.append(Conditions(conds.refs, audio, conds.text))
    return out


def cmd_sample(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out_dir = Path(args.out)
    scene_seed = args.scene_seed if args.scene_seed is not None else split_seeds("test", 1)[0]
    run_hash = _run_hash(cfg, checkpoint=container.file_hash(Path(args.checkpoint)),
                         scene_seed=scene_seed, boxes=args.boxes, segments=args.segments,
                         tail=args.tail)
    manifest_path = out_dir / "manifest.json"
    if _completed(manifest_path, run_hash):
        logger.info("%s already holds this run; nothing to do", out_dir)
        return EXIT_OK

    device = torch.device(args.device)
    model = _load_model(Path(args.checkpoint), cfg, device)
    param = next(model.parameters())
    codec, scfg = cfg.codec, cfg.sample
    seg_frames = cfg.data.frames // codec.ct
    if args.segments < 1:
        raise ConfigError("segments must be >= 1", "sample.segments")
    if args.segments > 1 and not 1 <= args.tail < seg_frames:
        raise ConfigError(f"tail must be in 1..{seg_frames - 1}", "sample.tail")
    total = seg_frames + (args.segments - 1) * (seg_frames - args.tail)
    scene_cfg = dataclasses.replace(cfg.data.scene(), frames=total * codec.ct)
    scene = generate_scene(scene_seed, cfg.data.n_entities, scene_cfg)
    batch = collate([scene], codec, cfg.features, scene_cfg).to(param.device, param.dtype)
    grid = (seg_frames, *batch.z0.shape[2:4])

    fixed = None
    if scfg.mode == "fixed_mask":
        if args.boxes:
            boxes = [parse_box(b) for b in args.boxes]
            if len(boxes) != scene.n_entities:
                raise ConfigError(f"need {scene.n_entities} boxes, got {len(boxes)}",
                                  "sample.boxes")
            fixed = boxes_to_masks(boxes, grid, codec)[None]
        else:
            fixed = scene_rectangles([scene], codec)[:, :, :seg_frames]

    files: List[str] = []
    if args.segments > 1:
        latent = chain_segments(model, _segment_conditions(batch.conds, args.segments,
                                                           seg_frames, args.tail),
                                grid, scfg, args.tail, fixed)
    else:
        result = sample(model, batch.conds, grid, scfg, fixed_masks=fixed,
                        progress=not args.quiet)
        latent = result.latent
        trace = result.mask_trace()[:, 0]
        save_mask_trace(trace, out_dir / "masks")
        container.write_records(out_dir / "mask_trace.itah",
                                {"mask_trace": trace.cpu().float().numpy()})
        files += ["masks/", "mask_trace.itah"]

    frames = codec_mod.decode(latent[0].cpu(), codec).clamp(0.0, 1.0)
    save_frames(frames, out_dir / "frames")
    container.write_records(out_dir / "latent.itah", {"latent": latent[0].cpu().float().numpy()})
    files += ["frames/", "latent.itah"]
    write_manifest(manifest_path, command="sample", config_hash=run_hash,
                   seeds=[scfg.seed, scene_seed], files=files,
                   entities={str(scene_seed): [e.to_dict() for e in scene.entities]},
                   extra={"base_config_hash": cfg.config_hash(), "mode": scfg.mode,
                          "segments": args.segments, "tail": args.tail})
    console.print(f"Wrote {frames.shape[0]} frames to {out_dir / 'frames'}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out_dir = Path(args.out)
    checkpoint_hash = container.file_hash(Path(args.checkpoint))
    run_hash = _run_hash(cfg, checkpoint=checkpoint_hash, command="eval")
    manifest_path = out_dir / "manifest.json"
    if _completed(manifest_path, run_hash):
        logger.info("%s already holds this evaluation; nothing to do", out_dir)
        return EXIT_OK

    device = torch.device(args.device)
    model = _load_model(Path(args.checkpoint), cfg, device)
    scenes = _test_scenes(cfg)
    heldout = heldout_mask_iou(model, scenes, cfg.codec, cfg.features, cfg.data.scene(),
                               t=cfg.eval.heldout_t, seed=cfg.sample.seed,
                               batch_size=cfg.eval.batch_size)
    reports = [
        evaluate_ground_truth(scenes, cfg.codec, cfg.eval),
        evaluate_mode(model, scenes, cfg.sample.mode, cfg.codec, cfg.features, cfg.sample,
                      cfg.eval, cfg.data.scene(), heldout),
    ]
    for report in reports:
        _write_report(report, out_dir)
    write_manifest(manifest_path, command="eval", config_hash=run_hash,
                   seeds=reports[-1].seeds, files=[f"report_{r.mode}.json" for r in reports],
                   checkpoint_hash=checkpoint_hash,
                   extra={"base_config_hash": cfg.config_hash(), "mode": cfg.sample.mode})
    console.print(render_table(reports))
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _config(args)
    modes = check_modes([m.strip() for m in args.modes.split(",")] if args.modes
                        else cfg.eval.modes)
    out_dir = Path(args.out)
    checkpoint_hash = container.file_hash(Path(args.checkpoint))
    run_hash = _run_hash(cfg, checkpoint=checkpoint_hash, modes=list(modes))
    manifest_path = out_dir / "manifest.json"

    def save(seeds: List[int], finished: List[str], final: bool = False) -> None:
        files = [f"report_{m}.json" for m in finished] + (["claims.json"] if final else [])
        write_manifest(manifest_path, command="ablate", config_hash=run_hash, seeds=seeds,
                       files=files, checkpoint_hash=checkpoint_hash,
                       extra={"base_config_hash": cfg.config_hash(), "modes": list(modes),
                              "finished": list(finished)})

    if _completed(manifest_path, run_hash, required=["claims.json"]):
        logger.info("%s already holds this ablation; nothing to do", out_dir)
        reports = [_read_report(out_dir / f"report_{m}.json") for m in modes]
        claims = check_directional_claims(reports)
    else:
        done = _finished_reports(manifest_path, run_hash, out_dir)
        if done:
            logger.info("resuming ablation; reusing %s", ", ".join(done))
        device = torch.device(args.device)
        model = _load_model(Path(args.checkpoint), cfg, device)
        scenes = _test_scenes(cfg)
        seeds = [s.seed for s in scenes]
        finished = [m for m in modes if m in done]

        def on_report(report: EvalReport) -> None:
            _write_report(report, out_dir)
            finished.append(report.mode)
            save(seeds, finished)

        reports = run_ablation(model, scenes, modes, cfg.codec, cfg.features, cfg.sample,
                               cfg.eval, cfg.data.scene(), done=done, on_report=on_report)
        claims = check_directional_claims(reports)
        with (out_dir / "claims.json").open("w", encoding="utf-8") as f:
            json.dump([dataclasses.asdict(c) for c in claims], f, indent=2)
        save(seeds, list(modes), final=True)

    console.print(render_table(reports))
    console.print(render_claims(claims))
    failed = [c.name for c in claims if c.passed is False]
    if failed and args.strict:
        logger.error("ordering violated: %s", ", ".join(failed))
        return EXIT_ORDERING
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskbind",
        description=(
            "Mask-gated multi-entity audio binding for a toy video diffusion transformer.\n\n"
            "Examples:\n"
            "  maskbind make-data --out runs/data --n 4\n"
            "  maskbind train --config configs/desk.ini --out runs/train\n"
            "  maskbind sample --checkpoint runs/train/checkpoint.itah --out runs/sample\n"
            "  maskbind ablate --checkpoint runs/train/checkpoint.itah --out runs/ablation "
            "--modes predicted_mask,global\n\n"
            "Exit codes: 0 ok, 1 expected ordering violated (ablate --strict), 2 config error,\n"
            "3 numeric failure, 4 I/O error.\n"
        ),
        formatter_class=argparse.RawTextHelpFormatter,
    )
    parser.add_argument("--config", type=str, default=None,
                        help="Sectioned key=value config file (default: built-in defaults).")
    parser.add_argument("--log-level", type=str, default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="Logging level for the maskbind logger.")
    parser.add_argument("--device", type=str, default="cpu", help="torch device, e.g. cuda:0")
    parser.add_argument("--quiet", action="store_true", help="Disable progress bars.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="Export synthetic scenes.",
                       formatter_class=argparse.RawTextHelpFormatter)
    p.add_argument("--out", required=True, help="Output directory.")
    p.add_argument("--split", default="train", choices=["train", "val", "test"])
    p.add_argument("--n", type=int, default=None,
                   help="Number of scenes (default: data.n_train or data.n_test).")
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train", help="Train a model; resumes when the config hash matches.")
    p.add_argument("--out", required=True, help="Run directory.")
    p.add_argument("--no-resume", action="store_true", help="Start from scratch.")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="Generate one test scene.",
                       formatter_class=argparse.RawTextHelpFormatter)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=SAMPLE_MODES, default=None,
                   help="Binding mode (default: sample.mode).")
    p.add_argument("--seed", type=int, default=None, help="Noise seed (default: sample.seed).")
    p.add_argument("--scene-seed", type=int, default=None,
                   help="Scene seed (default: first test seed).")
    p.add_argument("--boxes", nargs="*", default=None,
                   help="fixed_mask boxes in pixels, one per entity: x0,y0,x1,y1\n"
                        "(default: first-valid-frame ground-truth boxes)")
    p.add_argument("--segments", type=int, default=1,
                   help="Chain this many segments into one long video.")
    p.add_argument("--tail", type=int, default=1,
                   help="Latent frames carried over between segments.")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="Evaluate one binding mode on the test split.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=SAMPLE_MODES, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="Compare binding modes on the same seeds.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--modes", type=str, default=None,
                   help="Comma-separated modes in table order (default: eval.modes).")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--strict", action="store_true",
                   help=f"Exit {EXIT_ORDERING} when an expected ordering is violated.")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.func(args)
    except (MaskBindError, OSError) as e:
        console.print(f"[red]error:[/] {escape(str(e))}")
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
