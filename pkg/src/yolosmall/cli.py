"""Command-line entry point: ``yolosmall {analyze,detect,eval,anchors}``.

Settings resolve in the order command-line flag, then ``--config`` JSON
file, then built-in default.  Config keys are the long flag names with
dashes replaced by underscores (``conf``, ``nms_iou``, ``nx`` ...).

Exit codes:

    0  success
    2  usage or configuration error (bad flag, threshold out of range,
       impossible tiling)
    3  missing or unreadable input file
    4  engine failure (graph, shape or weight mismatch)
    1  anything else
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__

log = logging.getLogger("yolosmall")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_INPUT, EXIT_ENGINE = 0, 1, 2, 3, 4

DEFAULTS = {
    "format": None,
    "output": None,
    "classes": 80,
    "boxes": None,
    "input_size": 416,
    "weights": None,
    "random_weights": None,
    "nx": 1,
    "ny": 1,
    "ox": 0,
    "oy": 0,
    "conf": 0.25,
    "nms_iou": 0.45,
    "class_agnostic": False,
    "workers": 1,
    "threads": None,
    "iou": 0.5,
    "eleven_point": False,
    "k": 9,
    "seed": 0,
    "iters": 300,
    "source_pixels": False,
}


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


@dataclass
class RunConfig:
    subcommand: str
    model: str | None = None
    inputs: list[str] = field(default_factory=list)
    detections: str | None = None
    settings: dict = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.__dict__["settings"][name]
        except KeyError:
            raise AttributeError(name) from None


def _parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    top = argparse.ArgumentParser(prog="yolosmall", description=__doc__.split("\n")[0])
    top.add_argument("--version", action="version", version=__version__)
    top.add_argument("--config", help="JSON file of default settings")
    top.add_argument("-v", "--verbose", action="store_true")
    sub = top.add_subparsers(dest="subcommand", required=True)

    def common(p):
        p.add_argument("--config", default=S, help="JSON file of default settings")
        p.add_argument("-o", "--output", default=S, help="output file or directory")

    def model_opts(p):
        p.add_argument("--classes", type=int, default=S, help="class count C (default 80)")
        p.add_argument("--boxes", type=int, default=S, help="B for single-head nets (3 or 6)")
        p.add_argument("--input-size", type=int, default=S, help="square network input side")

    a = sub.add_parser("analyze", help="layer table with shapes, RF, CS, params, FLOPs")
    a.add_argument("model", help="built-in name or graph file")
    a.add_argument("--format", choices=("text", "csv"), default=S)
    model_opts(a)
    common(a)

    d = sub.add_parser("detect", help="run a network over images")
    d.add_argument("model", help="built-in name or graph file")
    d.add_argument("images", nargs="+")
    d.add_argument("--weights", default=S, help="weights file (binary or text)")
    d.add_argument("--random-weights", type=int, metavar="SEED", default=S,
                   help="use seeded random weights instead of a file")
    for flag in ("nx", "ny", "ox", "oy"):
        d.add_argument(f"--{flag}", type=int, default=S)
    d.add_argument("--conf", type=float, default=S, help="confidence threshold (0.25)")
    d.add_argument("--nms-iou", type=float, default=S, help="NMS IoU threshold (0.45)")
    d.add_argument("--class-agnostic", action="store_const", const=True, default=S)
    d.add_argument("--format", choices=("txt", "json"), default=S)
    d.add_argument("--workers", type=int, default=S, help="images processed at once")
    d.add_argument("--threads", type=int, default=S, help="threads per forward pass")
    model_opts(d)
    common(d)

    e = sub.add_parser("eval", help="score detections against YOLO annotations")
    e.add_argument("ground_truth", help="directory of images and YOLO .txt files")
    e.add_argument("detections", help="directory of detection files (stem.txt or stem.json)")
    e.add_argument("--iou", type=float, default=S, help="match IoU threshold (0.5)")
    e.add_argument("--conf", type=float, default=S, help="operating point for REC/PREC/F1")
    e.add_argument("--eleven-point", action="store_const", const=True, default=S)
    e.add_argument("--format", choices=("json", "text"), default=S)
    common(e)

    k = sub.add_parser("anchors", help="k-means anchors from YOLO annotations")
    k.add_argument("annotations", help="directory of images and YOLO .txt files")
    k.add_argument("--k", type=int, default=S)
    k.add_argument("--seed", type=int, default=S)
    k.add_argument("--iters", type=int, default=S)
    k.add_argument("--input-size", type=int, default=S)
    k.add_argument("--source-pixels", action="store_const", const=True, default=S,
                   help="cluster in image pixels rather than letterboxed network pixels")
    common(k)
    return top


def _load_config(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"config {path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config {path}: top level must be an object")
    unknown = set(data) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"config {path}: unknown keys {sorted(unknown)}")
    return data


def resolve(argv) -> RunConfig:
    ns = vars(_parser().parse_args(argv))
    settings = dict(DEFAULTS)
    if ns.get("config"):
        settings.update(_load_config(ns["config"]))
    positional = {"subcommand", "model", "images", "ground_truth", "detections", "annotations",
                  "config", "verbose"}
    settings.update({k: v for k, v in ns.items() if k not in positional})
    cfg = RunConfig(ns["subcommand"], settings=settings)
    cfg.model = ns.get("model")
    cfg.inputs = ns.get("images") or [ns.get("ground_truth") or ns.get("annotations")]
    cfg.detections = ns.get("detections")
    _check(cfg)
    return cfg


def _check(cfg: RunConfig) -> None:
    s = cfg.settings
    for key in ("conf", "nms_iou", "iou"):
        if not 0.0 <= float(s[key]) <= 1.0:
            raise ConfigError(f"{key} = {s[key]} is outside [0, 1]")
    for key in ("nx", "ny", "workers", "k", "iters", "classes", "input_size"):
        if int(s[key]) < 1:
            raise ConfigError(f"{key} must be >= 1, got {s[key]}")
    for key in ("ox", "oy"):
        if int(s[key]) < 0:
            raise ConfigError(f"{key} must be >= 0, got {s[key]}")


# ---------------------------------------------------------------------------
# subcommands

def _graph(cfg: RunConfig):
    from .netdef import BUILTIN_NAMES, build_builtin, load, validate

    if cfg.model in BUILTIN_NAMES:
        return build_builtin(cfg.model, cfg.classes, boxes_per_cell=cfg.boxes,
                             input_size=cfg.input_size)
    path = Path(cfg.model)
    if not path.exists():
        raise InputError(f"{cfg.model}: neither a built-in network nor an existing file")
    graph = load(path)
    problems = validate(graph)
    if problems:
        from .netdef import GraphError
        raise GraphError(f"{path}: {problems[0]}")
    return graph


def _emit(cfg: RunConfig, text: str) -> None:
    from .dataio import atomic_write

    if cfg.output:
        atomic_write(cfg.output, text)
    else:
        sys.stdout.write(text)


def cmd_analyze(cfg: RunConfig) -> None:
    from .analysis import format_report

    _emit(cfg, format_report(_graph(cfg), cfg.format or "text"))


def _weights(cfg: RunConfig, graph):
    from .engine import load_weights, random_weights

    if cfg.weights and cfg.random_weights is not None:
        raise ConfigError("give either --weights or --random-weights, not both")
    if cfg.weights:
        path = Path(cfg.weights)
        if not path.exists():
            raise InputError(f"{path}: no such weights file")
        return load_weights(graph, path)
    if cfg.random_weights is not None:
        return random_weights(graph, cfg.random_weights)
    raise ConfigError("detect needs --weights or --random-weights")


def cmd_detect(cfg: RunConfig) -> None:
    from .dataio import atomic_write, load_image
    from .postproc import dumps_json, dumps_text
    from .tiling import make_detector, plan_tiles, TilingError, detect_tiled

    graph = _graph(cfg)
    detector = make_detector(graph, _weights(cfg, graph), cfg.conf, cfg.nms_iou,
                             class_agnostic=bool(cfg.class_agnostic), threads=cfg.threads)
    fmt = cfg.format or "txt"
    paths = [Path(p) for p in cfg.inputs]
    for p in paths:
        if not p.exists():
            raise InputError(f"{p}: no such image")
    out_dir = Path(cfg.output) if cfg.output else None

    def one(path: Path) -> str:
        image = load_image(path)
        try:
            plan = plan_tiles(image.shape[2], image.shape[1], cfg.nx, cfg.ny, cfg.ox, cfg.oy)
        except TilingError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        dets = detect_tiled(image, plan, detector, cfg.nms_iou,
                            class_agnostic=bool(cfg.class_agnostic))
        text = dumps_json(dets) + "\n" if fmt == "json" else dumps_text(dets)
        if out_dir is not None:
            atomic_write(out_dir / f"{path.stem}.{fmt}", text)
        log.info("%s: %d detections", path, len(dets))
        return text

    with ThreadPoolExecutor(max(1, min(cfg.workers, len(paths)))) as pool:
        texts = list(pool.map(one, paths))
    if out_dir is None:
        if len(paths) == 1:
            sys.stdout.write(texts[0])
        else:
            for p, t in zip(paths, texts):
                sys.stdout.write(f"# {p}\n{t}")


def _load_detections(directory: Path, stems) -> dict:
    from .postproc import loads_json, loads_text

    if not directory.is_dir():
        raise InputError(f"{directory}: not a directory")
    out = {}
    for stem in stems:
        for suffix, loader in ((".json", loads_json), (".txt", loads_text)):
            p = directory / f"{stem}{suffix}"
            if p.exists():
                try:
                    out[stem] = loader(p.read_text())
                except (ValueError, KeyError, TypeError) as exc:
                    raise InputError(f"{p}: {exc}") from None
                break
        else:
            out[stem] = []
    return out


def cmd_eval(cfg: RunConfig) -> None:
    from .dataio import load_class_names, load_yolo_annotations
    from .metrics import evaluate

    gt_dir = Path(cfg.inputs[0])
    gts = load_yolo_annotations(gt_dir)
    dets = _load_detections(Path(cfg.detections), gts)
    report = evaluate(dets, gts, iou_threshold=cfg.iou, conf_threshold=cfg.conf,
                      eleven_point=bool(cfg.eleven_point), class_names=load_class_names(gt_dir))
    _emit(cfg, report.to_text() if cfg.format == "text" else report.to_json() + "\n")


def cmd_anchors(cfg: RunConfig) -> None:
    from .anchors import kmeans_iou
    from .dataio import find_image, image_size, load_yolo_annotations

    ann_dir = Path(cfg.inputs[0])
    gts = load_yolo_annotations(ann_dir)
    dims = []
    for stem, boxes in gts.items():
        scale = 1.0
        if not cfg.source_pixels:
            w, h = image_size(find_image(ann_dir, stem))
            scale = min(cfg.input_size / w, cfg.input_size / h)
        dims += [(g.box.width * scale, g.box.height * scale) for g in boxes]
    if not dims:
        raise InputError(f"{ann_dir}: no boxes found")
    anchors = kmeans_iou(dims, cfg.k, cfg.seed, cfg.iters)
    _emit(cfg, ", ".join(f"{w:.2f},{h:.2f}" for w, h in anchors) + "\n")


COMMANDS = {"analyze": cmd_analyze, "detect": cmd_detect, "eval": cmd_eval,
            "anchors": cmd_anchors}


def run(cfg: RunConfig) -> int:
    """Execute a resolved configuration and map failures to exit codes."""
    from .analysis import ShapeError
    from .anchors import AnchorError
    from .dataio import AnnotationError, ImageError
    from .engine import WeightError
    from .netdef import GraphError

    try:
        COMMANDS[cfg.subcommand](cfg)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except (InputError, ImageError, AnnotationError, AnchorError, FileNotFoundError) as exc:
        return _fail(EXIT_INPUT, exc)
    except (GraphError, ShapeError, WeightError) as exc:
        return _fail(EXIT_ENGINE, exc)
    except Exception as exc:  # noqa: BLE001, last-resort diagnostic
        return _fail(EXIT_INTERNAL, f"{type(exc).__name__}: {exc}")
    return EXIT_OK


def _fail(code: int, msg) -> int:
    text = " ".join(str(msg).split())
    print(f"yolosmall: error: {text}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    logging.basicConfig(level=logging.INFO if "-v" in argv or "--verbose" in argv
                        else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = resolve(argv)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except InputError as exc:
        return _fail(EXIT_INPUT, exc)
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
