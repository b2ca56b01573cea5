"""Command-line pipelines: synth | train | infer | segment | eval | vis.

Config precedence is flag > JSON config file > dataclass default. Flags for
every config key are generated from the config dataclasses, so --help always
lists the full key set with defaults. All randomness is governed by --seed
(falling back to the EMBED_SEED environment variable), and --threads caps
worker pools without changing any output byte.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import dataclasses
import json
import os
import sys

import numpy as np

from . import fileio, metrics, scenes
from .clustering import ClusterConfig, load_maskset, save_maskset, segment
from .errors import ConfigError, EmbedSegError
from .fields import select_frames
from .loss import LossConfig
from .model import TrainConfig, load_checkpoint, save_checkpoint, train
from .rng import derive_seed, philox
from .sampling import SamplerConfig

FRAME_MODES = ("single", "temporal", "cross_modal", "temporal_cross_modal")

_SECTIONS = {
    "scene": scenes.SceneSpec,
    "sampler": SamplerConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "cluster": ClusterConfig,
}


def _flag(section, name):
    return f"--{section}-{name.replace('_', '-')}"


def _add_dataclass_flags(parser, section, cls, skip=()):
    group = parser.add_argument_group(f"{section} config keys")
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        default = f.default if f.default is not dataclasses.MISSING else None
        if isinstance(default, bool):
            group.add_argument(_flag(section, f.name), dest=f"{section}.{f.name}",
                               type=_parse_bool, metavar="BOOL",
                               help=f"default {default}")
        elif isinstance(default, int):
            group.add_argument(_flag(section, f.name), dest=f"{section}.{f.name}",
                               type=int, help=f"default {default}")
        elif isinstance(default, float):
            group.add_argument(_flag(section, f.name), dest=f"{section}.{f.name}",
                               type=float, help=f"default {default}")
        else:
            group.add_argument(_flag(section, f.name), dest=f"{section}.{f.name}",
                               type=str, help=f"default {default!r}")


def _parse_bool(text):
    lowered = str(text).lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _coerce(cls, name, value):
    for f in dataclasses.fields(cls):
        if f.name != name:
            continue
        default = f.default
        if isinstance(default, bool):
            return value if isinstance(value, bool) else _parse_bool(value)
        if isinstance(default, int) and not isinstance(default, bool):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple) and value is not None:
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split() if v]
            return tuple(value)
        if default is None and isinstance(value, str):
            return json.loads(value)  # e.g. per-object motion [[dx,dy],...]
        return value
    raise ConfigError(f"unknown key {name!r} for section {cls.__name__}")


def build_section(cls, file_section, overrides, force=None):
    """Instantiate a config dataclass from file values + flag overrides."""
    known = {f.name for f in dataclasses.fields(cls)}
    values = {}
    for source in (file_section or {}, overrides or {}, force or {}):
        for key, val in source.items():
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in {cls.__name__} config")
            if val is not None:
                values[key] = _coerce(cls, key, val)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__} config: {exc}") from exc


def _load_config_file(path):
    if not path:
        return {}
    with open(path) as fh:
        payload = json.load(fh)
    if not isinstance(payload, dict):
        raise ConfigError("config file must hold a JSON object")
    for section in payload:
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
    return payload


def _collect_overrides(args, section):
    out = {}
    for key, val in vars(args).items():
        if key.startswith(section + ".") and val is not None:
            out[key.split(".", 1)[1]] = val
    return out


def _resolve_seed(args):
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    env = os.environ.get("EMBED_SEED")
    if env is not None:
        return int(env)
    return 0


def _threads(args):
    return max(1, int(getattr(args, "threads", 1) or 1))


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    file_cfg = _load_config_file(args.config)
    seed = _resolve_seed(args)
    spec = build_section(scenes.SceneSpec, file_cfg.get("scene"),
                         _collect_overrides(args, "scene"), force={"seed": seed})
    os.makedirs(args.out, exist_ok=True)
    scene_seeds = [derive_seed(seed, i) for i in range(args.scenes)]

    def render(i):
        per_scene = dataclasses.replace(spec, seed=scene_seeds[i])
        return scenes.generate(per_scene)

    with concurrent.futures.ThreadPoolExecutor(max_workers=_threads(args)) as pool:
        rendered = list(pool.map(render, range(args.scenes)))
    dirs = []
    for i, (groups, flows) in enumerate(rendered):
        name = f"scene_{i:04d}"
        scenes.write_scene_dir(os.path.join(args.out, name), groups, flows)
        dirs.append(name)
    scenes.write_manifest(os.path.join(args.out, "manifest.json"), spec, dirs, scene_seeds)
    print(f"wrote {args.scenes} scenes to {args.out}")
    return 0


def _groups_for_mode(groups, mode):
    if mode == "single":
        return select_frames(groups, modalities=("camera",), times=(0,))
    if mode == "temporal":
        return select_frames(groups, modalities=("camera",))
    if mode == "cross_modal":
        return select_frames(groups, times=(0,))
    return select_frames(groups)


def cmd_train(args):
    file_cfg = _load_config_file(args.config)
    seed = _resolve_seed(args)
    sampler_cfg = build_section(SamplerConfig, file_cfg.get("sampler"),
                                _collect_overrides(args, "sampler"), force={"seed": seed})
    loss_cfg = build_section(LossConfig, file_cfg.get("loss"),
                             _collect_overrides(args, "loss"))
    train_cfg = build_section(TrainConfig, file_cfg.get("train"),
                              _collect_overrides(args, "train"), force={"seed": seed})
    manifest = scenes.load_manifest(os.path.join(args.data, "manifest.json"))
    entries = manifest["scenes"]
    if args.max_scenes:
        entries = entries[:args.max_scenes]
    training = []
    for entry in entries:
        groups, _ = scenes.load_scene_dir(os.path.join(args.data, entry["dir"]),
                                          manifest["frames"], manifest["modalities"])
        training.append(_groups_for_mode(groups, args.frames))
    result = train(training, loss_cfg, sampler_cfg, train_cfg,
                   embed_channels=args.embed_channels,
                   hidden=tuple(int(h) for h in args.hidden.split(",")))
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "checkpoint.net")
    save_checkpoint(ckpt, result.nets, result.ema, result.ema_steps, result.ema_decay,
                    extra={"frames_mode": args.frames, "data": os.path.basename(args.data)})
    history_path = os.path.join(args.out, "loss_history.csv")
    with open(history_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "contrastive", "regularizer", "total"])
        for row in result.history:
            writer.writerow([row["step"], repr(row["lr"]), repr(row["contrastive"]),
                             repr(row["regularizer"]), repr(row["total"])])
    first = result.history[0]["contrastive"]
    last = result.history[-1]["contrastive"]
    print(f"trained {train_cfg.steps} steps: contrastive {first:.4f} -> {last:.4f}; "
          f"checkpoint {ckpt}")
    return 0


def _modality_of(path, override):
    if override:
        return override
    stem = os.path.basename(path)
    for modality in ("camera", "range"):
        if modality in stem:
            return modality
    raise ConfigError(f"cannot infer modality from {path!r}; pass --modality")


def cmd_infer(args):
    nets, ema, meta = load_checkpoint(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    # colliding basenames get a parent-dir prefix, decided up front from the
    # input list so the naming never depends on worker scheduling
    seen = {}
    for path in args.inputs:
        seen[os.path.basename(path)] = seen.get(os.path.basename(path), 0) + 1

    def out_name(path):
        base = os.path.basename(path)
        if seen[base] > 1:
            parent = os.path.basename(os.path.dirname(os.path.abspath(path)))
            return f"{parent}__{base}"
        return base

    def run(path):
        modality = _modality_of(path, args.modality)
        if modality not in nets:
            raise ConfigError(f"checkpoint has no {modality!r} net")
        net = nets[modality]
        if args.ema:
            if ema is None:
                raise ConfigError("checkpoint carries no EMA parameters")
            from .model import TrainResult

            net = TrainResult(nets=nets, ema=ema, ema_steps=meta["ema_steps"],
                              ema_decay=meta["ema_decay"], history=[]).ema_net(modality)
        emb = net.forward(fileio.load_field(path))
        out_path = os.path.join(args.out, out_name(path))
        fileio.save_field(emb, out_path)
        return out_path

    with concurrent.futures.ThreadPoolExecutor(max_workers=_threads(args)) as pool:
        outputs = list(pool.map(run, args.inputs))
    for path in outputs:
        print(path)
    return 0


def _overlay(maskset, seed=0):
    rng = philox(seed, 13)
    img = np.zeros((maskset.height, maskset.width, 3), dtype=np.uint8)
    for m in maskset.masks:
        color = rng.integers(64, 256, size=3)
        img[m.pixels] = color
    return img


def cmd_segment(args):
    file_cfg = _load_config_file(args.config)
    seed = _resolve_seed(args)
    cfg = build_section(ClusterConfig, file_cfg.get("cluster"),
                        _collect_overrides(args, "cluster"), force={"seed": seed})
    emb = fileio.load_field(args.embedding)
    score_field = fileio.load_field(args.scores)
    maskset = segment(emb, score_field, cfg)
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.embedding))[0]
    json_path = os.path.join(args.out, stem + "_masks.json")
    save_maskset(maskset, json_path)
    fileio.save_rgb_png(_overlay(maskset, seed), os.path.join(args.out, stem + "_overlay.png"))
    print(f"{json_path}: {len(maskset.masks)} masks")
    return 0


def cmd_eval(args):
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    if args.mode == "ap":
        if not (args.pred and args.gt):
            raise ConfigError("eval --mode ap needs --pred and --gt")
        pred = load_maskset(args.pred)
        gt = fileio.load_field(args.gt)
        thresholds = None
        if args.iou_thresholds:
            thresholds = [float(t) for t in args.iou_thresholds.split(",")]
        report = metrics.instance_ap(pred, gt, thresholds)
    else:
        needed = (args.emb_cur, args.emb_next, args.labels_cur, args.labels_next, args.flow)
        if any(p is None for p in needed):
            raise ConfigError("eval --mode temporal needs --emb-cur/--emb-next/"
                              "--labels-cur/--labels-next/--flow")
        report = metrics.temporal_consistency(
            fileio.load_field(args.emb_cur), fileio.load_field(args.emb_next),
            fileio.load_field(args.labels_cur), fileio.load_field(args.labels_next),
            fileio.load_field(args.flow), margin=args.margin)
    metrics.save_report_json(report, args.out)
    print(report.to_text())
    return 0


def cmd_vis(args):
    emb = fileio.load_field(args.embedding)
    if args.pixel:
        r, c = (int(v) for v in args.pixel.split(","))
        fileio.save_gray_png(metrics.similarity_map(emb, (r, c)), args.out)
    else:
        fileio.save_rgb_png(metrics.embedding_to_rgb(emb, seed=_resolve_seed(args)), args.out)
    print(args.out)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(prog="embedseg",
                                     description="Contrastive pixel-embedding pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None,
                       help="master seed (default: $EMBED_SEED or 0)")
        p.add_argument("--threads", type=int, default=1,
                       help="worker cap; never changes results (default 1)")
        p.add_argument("--config", default=None, help="JSON config file")

    p = sub.add_parser("synth", help="generate synthetic scenes")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=8, help="number of scenes (default 8)")
    _add_dataclass_flags(p, "scene", scenes.SceneSpec, skip=("seed",))

    p = sub.add_parser("train", help="train per-modality embedding nets")
    common(p)
    p.add_argument("--data", required=True, help="directory produced by synth")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", choices=FRAME_MODES, default="temporal_cross_modal",
                   help="which frames join the sample union (default temporal_cross_modal)")
    p.add_argument("--max-scenes", type=int, default=None)
    p.add_argument("--embed-channels", type=int, default=32, help="default 32")
    p.add_argument("--hidden", default="8,16", help="conv widths, default 8,16")
    _add_dataclass_flags(p, "sampler", SamplerConfig, skip=("seed",))
    _add_dataclass_flags(p, "loss", LossConfig)
    _add_dataclass_flags(p, "train", TrainConfig, skip=("seed",))

    p = sub.add_parser("infer", help="predict embeddings for frame files")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--modality", choices=("camera", "range"), default=None)
    p.add_argument("--ema", action="store_true", help="use EMA parameters")
    p.add_argument("inputs", nargs="+")

    p = sub.add_parser("segment", help="cluster an embedding map into masks")
    common(p)
    p.add_argument("--embedding", required=True)
    p.add_argument("--scores", required=True, help="per-class score field (EMB1 embedding kind)")
    p.add_argument("--out", required=True)
    _add_dataclass_flags(p, "cluster", ClusterConfig, skip=("seed",))

    p = sub.add_parser("eval", help="AP or temporal-consistency reports")
    common(p)
    p.add_argument("--mode", choices=("ap", "temporal"), required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--pred", help="MaskSet JSON (ap mode)")
    p.add_argument("--gt", help="groundtruth labels .lbl (ap mode)")
    p.add_argument("--iou-thresholds", help="comma list, default 0.50:0.05:0.95")
    p.add_argument("--emb-cur", help="current-frame embeddings (temporal mode)")
    p.add_argument("--emb-next", help="next-frame embeddings (temporal mode)")
    p.add_argument("--labels-cur", help="current-frame labels (temporal mode)")
    p.add_argument("--labels-next", help="next-frame labels (temporal mode)")
    p.add_argument("--flow", help="current->next flow (temporal mode)")
    p.add_argument("--margin", type=float, default=0.1, help="accuracy threshold, default 0.1")

    p = sub.add_parser("vis", help="RGB projection or similarity map PNG")
    common(p)
    p.add_argument("--embedding", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pixel", default=None, help="r,c query for a similarity map")

    return parser


_DISPATCH = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "segment": cmd_segment,
    "eval": cmd_eval,
    "vis": cmd_vis,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _DISPATCH[args.command](args)
    except (EmbedSegError, ValueError, OSError, RuntimeError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
