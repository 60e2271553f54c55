"""Command line: gen, train, render, decode, audit, perturb.

Exit codes: 0 success, 1 validation error, 2 runtime error, 3 audit failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import platform
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .densify import BoundingBox, DensifyConfig
from .geometry import Camera
from .io import (ContainerError, read_container, read_decoders, read_key, write_container, write_decoders,
                 write_key)
from .losses import LossWeights
from .rasterizer import RasterSettings
from .scene import KeyIntegrityError, MissingKeyError
from .security import GeometryAuditConfig, audit_format, audit_geometry, perturb
from .stego import DivergenceError, HidingTask, TrainConfig, Trainer, decode_bits, decode_hidden_view, evaluate
from .stego import render_original
from .synthetic import SyntheticSpec, load_dataset, make_scene, read_ppm, save_dataset, secret_image, write_ppm

log = logging.getLogger("stegosplat")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_AUDIT = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


# -------------------------------------------------------------------- config

@dataclass
class TaskConfig:
    mode: str = "object-3d"
    bits: str | None = None  # "0110..."; random when absent in bit mode
    n_bits: int = 48
    designated_view: int = 0
    image: str | None = None  # PPM to hide in image mode; a synthetic picture when absent


@dataclass
class TrainSection:
    iterations: int = 3000
    seed: int = 0
    cutoff_sigma: float = 3.0
    lr_position: float = 1.6e-4
    lr_feature: float = 2.5e-3
    lr_offset: float = 1e-2
    lr_scaling: float = 7e-3
    lr_mlp: float = 2e-3
    lr_private: float = 2e-3
    lr_decay: float = 0.01
    log_every: int = 100


@dataclass
class RunConfig:
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    loss: LossWeights = field(default_factory=LossWeights)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    train: TrainSection = field(default_factory=TrainSection)
    task: TaskConfig = field(default_factory=TaskConfig)

    explicit: set = field(default_factory=set, repr=False, compare=False)  # keys the user set

    SECTIONS = ("synthetic", "loss", "densify", "train", "task")

    def to_dict(self) -> dict:
        return {s: asdict(getattr(self, s)) for s in self.SECTIONS}

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        unknown = set(data) - set(cls.SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        base = cls()
        out = {}
        for name in cls.SECTIONS:
            kind = type(getattr(base, name))
            values = dict(data.get(name, {}))
            names = {f.name for f in dataclasses.fields(kind)}
            bad = set(values) - names
            if bad:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
            for key in ("hidden_center", "background", "hidden_background"):
                if key in values and isinstance(values[key], list):
                    values[key] = tuple(values[key])
            try:
                out[name] = kind(**values)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{name}]: {exc}") from exc
        cfg = cls(**out)
        cfg.explicit = {f"{sec}.{key}" for sec, vals in data.items() for key in vals}
        return cfg


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | None, overrides: list[str]) -> RunConfig:
    data: dict = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not section.key=value")
        lhs, rhs = item.split("=", 1)
        section, key = lhs.split(".", 1)
        data.setdefault(section, {})[key] = _parse_value(rhs)
    return RunConfig.from_dict(data)


def versions() -> dict:
    import matplotlib
    import scipy
    return {"stegosplat": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "matplotlib": matplotlib.__version__}


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1) + "\n")


def _banner(title: str) -> None:
    print(f"===== {title} =====")


# ------------------------------------------------------------------ commands

def cmd_gen(args, cfg: RunConfig) -> int:
    scene = make_scene(cfg.synthetic)
    root = save_dataset(scene, args.out)
    _banner("gen")
    print(f"dataset: {root}")
    print(f"cameras: {len(scene.cameras)}  anchors: {len(scene.anchors)}  k: {scene.spec.k}")
    return EXIT_OK


def _task_from(cfg: RunConfig, scene) -> HidingTask:
    t = cfg.task
    if t.mode == "object-3d":
        return HidingTask("object-3d", hidden_images=scene.hidden_images)
    if t.mode == "image-single-view":
        if not 0 <= t.designated_view < len(scene.cameras):
            raise ConfigError(f"designated_view {t.designated_view} out of range")
        if t.image is None:
            img = secret_image(scene, t.designated_view)
        else:
            try:
                img = read_ppm(t.image)
            except (OSError, ValueError) as exc:
                raise ConfigError(f"task.image: {exc}") from exc
            if img.shape != scene.original_images[0].shape:
                raise ConfigError(f"task.image shape {img.shape} does not match the views")
        return HidingTask("image-single-view", hidden_image=img, designated_view=t.designated_view)
    if t.mode == "bits":
        if t.bits is not None:
            if not t.bits or set(t.bits) - {"0", "1"}:
                raise ConfigError("task.bits must be a string of 0/1")
            bits = np.array([int(c) for c in t.bits])
        else:
            bits = np.random.default_rng(cfg.train.seed + 7).integers(0, 2, t.n_bits)
        return HidingTask("bits", bits=bits)
    raise ConfigError(f"unknown task mode {t.mode!r}")


def _train_config(cfg: RunConfig, k: int, extent: float) -> TrainConfig:
    tr = cfg.train
    return TrainConfig(iterations=tr.iterations, seed=tr.seed, k=k, weights=cfg.loss, densify=cfg.densify,
                       cutoff_sigma=tr.cutoff_sigma, scene_extent=extent, lr_position=tr.lr_position,
                       lr_feature=tr.lr_feature, lr_offset=tr.lr_offset, lr_scaling=tr.lr_scaling,
                       lr_mlp=tr.lr_mlp, lr_private=tr.lr_private, lr_decay=tr.lr_decay,
                       log_every=tr.log_every)


def cmd_train(args, cfg: RunConfig) -> int:
    from .report import image_grid, loss_curves
    scene = load_dataset(args.data)
    if cfg.task.mode == "image-single-view" and "loss.lam" not in cfg.explicit:
        cfg.loss = dataclasses.replace(cfg.loss, lam=0.1)
    task = _task_from(cfg, scene)
    cfg.synthetic = scene.spec
    tcfg = _train_config(cfg, scene.spec.k, scene.spec.extent)
    tcfg.background = scene.spec.background
    tcfg.hidden_background = scene.spec.background if scene.spec.scene_level else scene.spec.hidden_background
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    record = cfg.to_dict()
    if task.mode == "bits":
        record["task"]["bits"] = "".join(str(b) for b in task.bits)
    _write_json(out / "config.json", record)
    (out / "seed.txt").write_text(f"{cfg.train.seed}\n")
    _write_json(out / "versions.json", versions())
    trainer = Trainer(scene.anchors, scene.cameras, scene.original_images, task, tcfg)
    with open(out / "metrics.jsonl", "w") as fh:
        try:
            result = trainer.run(callback=lambda rec: fh.write(json.dumps(rec) + "\n"))
        except DivergenceError as exc:
            _write_json(out / "divergence.json", exc.snapshot)
            raise
    key = result.key.seal()
    write_container(result.cloud, out / "container.ply")
    write_decoders(result.decoders, out / "decoders.npz")
    write_key(key, out / "key.bin")
    _write_json(out / "history.json", result.history)
    hid = scene.hidden_images if task.mode == "object-3d" else None
    ev = evaluate(result, scene.cameras, scene.original_images, hid, tcfg)
    summary = {"psnr_o": ev["psnr_o"], "psnr_h": ev["psnr_h"], "anchors": len(result.cloud),
               **{f"anchors_{k}": v for k, v in result.cloud.counts().items()}}
    if task.mode == "image-single-view":
        v = task.designated_view
        img = decode_hidden_view(result.cloud, result.decoders, key, scene.cameras[v], tcfg.raster(hidden=True))
        from .losses import psnr
        summary["psnr_h"] = psnr(img, task.hidden_image)
    if task.mode == "bits":
        msg = decode_bits(result.cloud, key)
        summary["bit_accuracy"] = float(np.mean(msg.bits == task.bits))
        summary["bit_confidence"] = msg.confidence
    _write_json(out / "summary.json", summary)
    figs = out / "figures"
    loss_curves(result.metrics, figs / "loss.png", result.history)
    if hid is not None:
        views = range(min(4, len(scene.cameras)))
        rows = {"original": [scene.original_images[i] for i in views],
                "rendered": [render_original(result.cloud, result.decoders, scene.cameras[i], tcfg.raster())
                             for i in views],
                "hidden": [decode_hidden_view(result.cloud, result.decoders, key, scene.cameras[i],
                                              tcfg.raster(hidden=True)) for i in views]}
        image_grid(rows, figs / "views.png")
    _banner("train")
    for name, value in summary.items():
        print(f"{name}: {value}")
    print(f"run directory: {out}")
    return EXIT_OK


def _cameras(args) -> list[Camera]:
    if args.camera:
        data = json.loads(Path(args.camera).read_text())
        items = data if isinstance(data, list) else [data]
        return [Camera.from_dict(d) for d in items]
    if args.data:
        manifest = json.loads((Path(args.data) / "manifest.json").read_text())
        return [Camera.from_dict(v["camera"]) for v in manifest["views"]]
    raise ConfigError("need --data or --camera")


def _settings(args) -> RasterSettings:
    return RasterSettings(cutoff_sigma=args.cutoff_sigma)


def cmd_render(args, cfg: RunConfig) -> int:
    cloud = read_container(args.container)
    dec = read_decoders(args.decoders)
    key = read_key(args.key, k=cloud.k) if args.key else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _banner("render")
    for cam in _cameras(args):
        write_ppm(out / f"original_{cam.name}.ppm", render_original(cloud, dec, cam, _settings(args)))
        print(f"original {cam.name}")
        if key is not None:
            write_ppm(out / f"hidden_{cam.name}.ppm", decode_hidden_view(cloud, dec, key, cam, _settings(args)))
            print(f"hidden {cam.name}")
    if key is None:
        print("no key given: hidden views not rendered")
    return EXIT_OK


def cmd_decode(args, cfg: RunConfig) -> int:
    cloud = read_container(args.container)
    if not args.key:
        raise MissingKeyError("decoding hidden content requires --key")
    key = read_key(args.key, k=cloud.k)
    _banner("decode")
    if key.F_b is not None:
        msg = decode_bits(cloud, key)
        result = {"bits": "".join(str(b) for b in msg.bits), "confidence": msg.confidence}
        print(f"bits: {result['bits']}")
        print(f"confidence: {msg.confidence:.4f}")
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            _write_json(Path(args.out) / "bits.json", result)
        return EXIT_OK
    if not args.decoders or not args.out:
        raise ConfigError("decoding hidden views needs --decoders and --out")
    dec = read_decoders(args.decoders)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for cam in _cameras(args):
        write_ppm(out / f"hidden_{cam.name}.ppm", decode_hidden_view(cloud, dec, key, cam, _settings(args)))
        print(f"hidden {cam.name}")
    return EXIT_OK


def _region(text: str | None) -> BoundingBox | None:
    if text is None:
        return None
    vals = [float(v) for v in text.split(",")]
    if len(vals) != 6:
        raise ConfigError("--region needs six numbers: x0,y0,z0,x1,y1,z1")
    return BoundingBox(vals[:3], vals[3:])


def cmd_audit(args, cfg: RunConfig) -> int:
    from .report import anchor_scatter, nn_histogram
    baseline = None
    if args.baseline:
        baseline = [tuple(p) for p in json.loads(Path(args.baseline).read_text())["properties"]]
    fmt = audit_format(args.container, baseline, k=args.k)
    report = {"container": str(args.container), "format": fmt.to_dict()}
    geo = None
    if fmt.parse_error is None:
        try:
            cloud = read_container(args.container)
        except ContainerError as exc:
            report["geometry"] = {"error": str(exc)}
        else:
            geo = audit_geometry(cloud, _region(args.region), GeometryAuditConfig(suspicion=args.suspicion))
            report["geometry"] = geo.to_dict()
    passed = fmt.passed and (geo is None or geo.passed) and fmt.parse_error is None
    report["passed"] = passed
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "audit.json", report)
        if geo is not None:
            anchor_scatter(cloud.positions, out / "anchors.png", geo.regions, geo.local_density)
            nn_histogram(geo.nn_hist, geo.nn_edges, out / "nn_hist.png")
    lines = fmt.lines() + (geo.lines() if geo is not None else [])
    if out is not None:
        (out / "audit.txt").write_text("\n".join(lines) + "\n")
    _banner("audit")
    print("\n".join(lines))
    print(f"overall: {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if passed else EXIT_AUDIT


def cmd_perturb(args, cfg: RunConfig) -> int:
    cloud = read_container(args.container)
    out = perturb(cloud, args.attack, args.amount, seed=args.seed)
    write_container(out, args.out)
    _banner("perturb")
    print(f"{args.attack} {args.amount}: {len(cloud)} -> {len(out)} anchors, written to {args.out}")
    return EXIT_OK


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stegosplat", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
        return sp

    g = with_config(sub.add_parser("gen", help="write a synthetic dataset"))
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)

    t = with_config(sub.add_parser("train", help="hide a payload and write container, key and metrics"))
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--mode", choices=("object-3d", "image-single-view", "bits"))
    t.add_argument("--bits")
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)

    def with_scene(sp, key_required=False):
        sp.add_argument("--container", required=True)
        sp.add_argument("--decoders")
        sp.add_argument("--key", required=False)
        sp.add_argument("--data", help="dataset directory supplying cameras")
        sp.add_argument("--camera", help="camera JSON (object or list)")
        sp.add_argument("--cutoff-sigma", type=float, default=RasterSettings().cutoff_sigma)
        return sp

    r = with_scene(sub.add_parser("render", help="render original (and with a key, hidden) views"))
    r.add_argument("--out", required=True)
    d = with_scene(sub.add_parser("decode", help="recover bits or hidden views with the key"))
    d.add_argument("--out")

    a = sub.add_parser("audit", help="format and geometry audit of a container")
    a.add_argument("--container", required=True)
    a.add_argument("--baseline", help="schema JSON with a 'properties' list")
    a.add_argument("--k", type=int, default=10)
    a.add_argument("--region", help="suspected box x0,y0,z0,x1,y1,z1")
    a.add_argument("--suspicion", type=float, default=3.0)
    a.add_argument("--out", help="report directory (JSON, text, figures)")

    q = sub.add_parser("perturb", help="prune or jitter anchors")
    q.add_argument("--container", required=True)
    q.add_argument("--attack", choices=("prune", "noise"), required=True)
    q.add_argument("--amount", type=float, required=True, help="percent for prune, sigma for noise")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "render": cmd_render, "decode": cmd_decode,
            "audit": cmd_audit, "perturb": cmd_perturb}


def _resolve_config(args) -> RunConfig:
    overrides = list(getattr(args, "overrides", []) or [])
    if getattr(args, "seed", None) is not None and args.command in ("gen", "train"):
        overrides.append(f"{'synthetic' if args.command == 'gen' else 'train'}.seed={args.seed}")
    if getattr(args, "iterations", None) is not None:
        overrides.append(f"train.iterations={args.iterations}")
    if getattr(args, "mode", None) is not None:
        overrides.append(f"task.mode={json.dumps(args.mode)}")
    if getattr(args, "bits", None) is not None:
        overrides.append(f"task.bits={json.dumps(args.bits)}")
    return load_config(getattr(args, "config", None), overrides)


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse usage errors are validation errors
        return EXIT_OK if exc.code in (0, None) else EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except MissingKeyError as exc:
        print(f"authorization error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ConfigError, KeyIntegrityError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ContainerError, DivergenceError, OSError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
