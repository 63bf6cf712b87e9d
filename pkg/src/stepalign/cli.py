"""Command line entry point: ``stepalign {gen,train,stage1,refine,eval,export-heatmap}``."""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import os
import sys
import tempfile
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .config import SECTIONS, RunConfig, load_config
from .curation import (
    StepSet,
    TextEncoder,
    run_stage1,
    stage2_refine,
    steps_from_summarizer,
    steps_from_track,
)
from .datamodel import (
    Dataset,
    LoadError,
    ValidationError,
    load_alignment_csv,
    load_dataset,
    load_records,
    read_jsonl,
    save_alignment_csv,
    save_dataset,
    save_records,
    write_jsonl,
)
from .evaluation import EvalItem, MetricError, SentenceEval, evaluate_model, report
from .model import NaSVA
from .numerics import ConfigError, DimensionError
from .summarizer import CommandSummarizer, FileSummarizer, MockSummarizer
from .synthgen import generate
from .training import TrainingError, train

log = logging.getLogger("stepalign")

MANIFEST_NAME = "run_manifest.json"


class CLIError(RuntimeError):
    pass


# -- helpers ---------------------------------------------------------------
def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    os.replace(tmp, path)


def write_manifest(out: Path, command: str, cfg: RunConfig, outputs: list[str], argv) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "version": __version__,
        "started_at": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "outputs": outputs,
    }
    _atomic_write(out / MANIFEST_NAME, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _summarizer(spec: str, workdir: Path):
    if spec == "mock":
        return MockSummarizer()
    if spec.startswith("file:"):
        return FileSummarizer(spec[5:])
    if spec.startswith("cmd:"):
        return CommandSummarizer(spec[4:], workdir)
    raise CLIError(f"unknown summarizer {spec!r} (use mock, file:PATH or cmd:COMMAND)")


def steps_for_video(video, texts) -> StepSet:
    track = video.tracks.get("step")
    if track is not None and "step" in video.text_features and [s.text for s in track.sentences] == texts:
        return steps_from_track(video)
    return StepSet(video.id, list(texts), TextEncoder(_single(video))(texts) if texts else
                   np.zeros((0, video.features.dim)))


def _single(video):
    return Dataset([video])


def _step_sets(dataset, source: str, workdir: Path) -> dict:
    if source == "track":
        return {v.id: steps_from_track(v) for v in dataset.videos if "step" in v.text_features}
    summ = _summarizer(source, workdir)
    return {v.id: steps_from_summarizer(v, summ, TextEncoder(_single(v))) for v in dataset.videos
            if "narration" in v.tracks}


# -- commands --------------------------------------------------------------
def cmd_gen(args, cfg: RunConfig) -> list[str]:
    ds = generate(cfg.synth)
    save_dataset(args.out, ds)
    return ["manifest.jsonl", "features/", "tracks/"]


def _write_loss_csv(path: Path, curve) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", "lr"])
        for epoch, loss, lr in curve:
            w.writerow([epoch, repr(loss), repr(lr)])


def _fit_model_dims(cfg: RunConfig, dataset) -> None:
    v = next((v for v in dataset.videos if v.text_features), None)
    if v is None:
        raise CLIError("dataset has no text features")
    cfg.model.C_v = v.features.dim
    cfg.model.C_t = next(iter(v.text_features.values())).dim


def cmd_train(args, cfg: RunConfig) -> list[str]:
    ds = load_dataset(args.data)
    _fit_model_dims(cfg, ds)
    model = NaSVA(cfg.model)
    _, curve = train(ds, model, cfg.train)
    model.save(args.out / "model.ckpt")
    _write_loss_csv(args.out / "train_log.csv", curve)
    return ["model.ckpt", "train_log.csv"]


def cmd_stage1(args, cfg: RunConfig) -> list[str]:
    ds = load_dataset(args.data)
    sets = _step_sets(ds, args.steps, args.out / "summarizer")
    records = run_stage1(ds, cfg.stage1, sets)
    write_jsonl(args.out / "steps.jsonl",
                ({"video_id": vid, "idx": i, "text": t}
                 for vid in sorted(sets) for i, t in enumerate(sets[vid].texts)))
    save_records(args.out / "howtostep.jsonl", records)
    return ["steps.jsonl", "howtostep.jsonl"]


def _load_step_sets(ds, path: Path) -> dict:
    texts: dict[str, list] = {}
    for _, d in read_jsonl(path):
        texts.setdefault(d["video_id"], []).append(d["text"])
    by_id = ds.by_id()
    missing = set(texts) - set(by_id)
    if missing:
        raise LoadError(f"{path}: unknown video ids {sorted(missing)[:3]}")
    return {vid: steps_for_video(by_id[vid], t) for vid, t in texts.items()}


def cmd_refine(args, cfg: RunConfig) -> list[str]:
    ds = load_dataset(args.data)
    records = load_records(args.stage1)
    steps_file = Path(args.stage1).parent / "steps.jsonl"
    sets = _load_step_sets(ds, steps_file) if steps_file.exists() else None
    _fit_model_dims(cfg, ds)
    refined, model = stage2_refine(ds, records, cfg.model, cfg.train, cfg.stage2, sets, cfg.stage1.zeta)
    save_records(args.out / "howtostep.jsonl", refined)
    model.save(args.out / "model.ckpt")
    return ["howtostep.jsonl", "model.ckpt"]


def _items_from_predictions(ds, path: Path, mode: str) -> list[EvalItem]:
    peaks: dict[str, dict] = {}
    for lineno, d in read_jsonl(path):
        try:
            peaks.setdefault(d["video_id"], {})[int(d["idx"])] = int(d["peak"])
        except (KeyError, ValueError) as e:
            raise LoadError(f"{path}:{lineno}: {e}") from e
    items = []
    for v in ds.videos:
        if v.id not in peaks:
            continue
        sents = []
        for k, s in enumerate(v.tracks[mode].sentences):
            gt = s.true_window or s.source_window
            if k not in peaks[v.id]:
                raise LoadError(f"{path}: no prediction for {v.id} sentence {k}")
            sents.append(SentenceEval(bool(s.alignable) and gt is not None, gt, peaks[v.id][k]))
        items.append(EvalItem(v.id, sents, v.task_id))
    return items


def cmd_eval(args, cfg: RunConfig) -> list[str]:
    ds = load_dataset(args.data)
    if args.predictions:
        items = _items_from_predictions(ds, Path(args.predictions), args.mode)
        rep = report(items, all(i.task_id for i in items), args.resample, cfg.seed)
    else:
        if not args.checkpoint:
            raise CLIError("eval needs --checkpoint or --predictions")
        model = NaSVA.load(args.checkpoint)
        rep = evaluate_model(model, ds, args.mode, args.jobs, args.resample, cfg.seed)
    if args.metric == "avg_r_at_1":
        if "avg_r_at_1" not in rep:
            raise CLIError("avg_r_at_1 needs task ids on every video")
        rep["metric"], rep["value"] = "avg_r_at_1", rep["avg_r_at_1"]
    (args.out / "report.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    print(f"{rep['metric']} = {rep['value']:.4f}")
    return ["report.json"]


def heatmap_pixels(values: np.ndarray) -> np.ndarray:
    """Affine map of cosine scores [-1, 1] to 8-bit grey, rounding halves up."""
    v = np.clip(np.asarray(values, dtype=float), -1.0, 1.0)
    return np.floor(255.0 * (v + 1.0) / 2.0 + 0.5).astype(np.uint8)


def write_pgm(path: Path, pixels: np.ndarray) -> None:
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def cmd_export_heatmap(args, cfg: RunConfig) -> list[str]:
    if args.matrix:
        values = load_alignment_csv(args.matrix)
    else:
        if not (args.checkpoint and args.data and args.video_id):
            raise CLIError("export-heatmap needs --matrix, or --checkpoint, --data and --video-id")
        ds = load_dataset(args.data)
        v = ds.by_id().get(args.video_id)
        if v is None:
            raise CLIError(f"video {args.video_id!r} not in dataset")
        if args.mode not in v.text_features:
            raise CLIError(f"video {args.video_id!r} has no {args.mode} track")
        model = NaSVA.load(args.checkpoint)
        values = model.predict(v.features, v.text_features[args.mode], args.mode).values
    if values.size == 0:
        raise CLIError("empty alignment matrix")
    save_alignment_csv(args.out / "alignment.csv", values)
    write_pgm(args.out / "alignment.pgm", heatmap_pixels(values))
    return ["alignment.csv", "alignment.pgm"]


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "stage1": cmd_stage1,
    "refine": cmd_refine,
    "eval": cmd_eval,
    "export-heatmap": cmd_export_heatmap,
}


# -- argument parsing ------------------------------------------------------
def _common_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global")
    g.add_argument("--config", type=Path, help="key = value config file")
    g.add_argument("--seed", type=int)
    g.add_argument("--jobs", type=int, default=1, help="worker cap for per-video work")
    g.add_argument("--out", type=Path, required=True, help="output directory")
    seen = set()
    k = p.add_argument_group("config overrides (same names as config-file keys)")
    for cls in SECTIONS.values():
        for f in fields(cls):
            if f.name in seen or f.name == "seed":
                continue
            seen.add(f.name)
            k.add_argument(f"--{f.name}", dest=f"cfg_{f.name}", metavar="VALUE")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="stepalign", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen", parents=[common], help="generate a planted synthetic dataset")

    p = sub.add_parser("train", parents=[common], help="train the grounding model")
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("stage1", parents=[common], help="chain step->narration->video pseudo-labels")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--steps", default="track",
                   help="step source: track (generated steps), mock, file:RESPONSES or cmd:COMMAND")

    p = sub.add_parser("refine", parents=[common], help="stage-2 self-training refinement")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--stage1", type=Path, required=True, help="stage-1 howtostep.jsonl")

    p = sub.add_parser("eval", parents=[common], help="recall@1 report")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--predictions", type=Path, help="jsonl of {video_id, idx, peak}")
    p.add_argument("--mode", choices=["step", "narration"], default="step")
    p.add_argument("--metric", choices=["r_at_1", "avg_r_at_1"], default="r_at_1")
    p.add_argument("--resample", type=int, default=0, help="average avg-R@1 over N random task subsets")

    p = sub.add_parser("export-heatmap", parents=[common], help="alignment.csv + PGM of one matrix")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--video-id")
    p.add_argument("--matrix", type=Path, help="alignment CSV to render instead of a model output")
    p.add_argument("--mode", choices=["step", "narration"], default="step")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    for name, value in sorted(vars(args).items()):
        if name.startswith("cfg_") and value is not None:
            cfg.set(name[4:], value)
    if args.seed is not None:
        cfg.set("seed", str(args.seed))
    return cfg


def setup_logging() -> None:
    level = os.environ.get("STEPALIGN_LOG", "info").upper()
    if level not in ("ERROR", "INFO", "DEBUG"):
        level = "INFO"
    logging.basicConfig(level=getattr(logging, level), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        args.out.mkdir(parents=True, exist_ok=True)
        write_manifest(args.out, args.command, cfg, [], argv)
        outputs = COMMANDS[args.command](args, cfg)
        write_manifest(args.out, args.command, cfg, outputs, argv)
    except (CLIError, ConfigError, LoadError, ValidationError, MetricError, DimensionError,
            TrainingError, RuntimeError, OSError) as e:
        print(f"stepalign {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
