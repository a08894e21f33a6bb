"""Image and annotation files.

Images load as float32 ``(3, H, W)`` tensors in ``[0, 1]``; grayscale is
replicated over the three channels.  Netpbm (P2, P3, P5, P6) is parsed here;
PNG goes through Pillow.

Annotations follow the YOLO text convention, one ``stem.txt`` per image with
rows ``class cx cy w h`` normalised to the image size.
"""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

from .metrics import GroundTruth
from .postproc import Box

IMAGE_SUFFIXES = (".ppm", ".pgm", ".pnm", ".png")


class ImageError(ValueError):
    pass


class AnnotationError(ValueError):
    pass


def atomic_write(path, data: str | bytes) -> None:
    """Write via a sibling temp file and rename, so readers never see half a file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# netpbm

def _pnm_header(data: bytes) -> tuple[str, int, int, int, int]:
    """``(magic, width, height, maxval, offset of first sample)``."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageError("truncated netpbm header")
        tokens.append(data[start:pos])
    magic = tokens[0].decode("ascii", "replace")
    if magic not in ("P2", "P3", "P5", "P6"):
        raise ImageError(f"unsupported netpbm type {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageError("malformed netpbm header") from None
    if w < 1 or h < 1 or not 1 <= maxval <= 65535:
        raise ImageError(f"bad netpbm header values {w}x{h} maxval {maxval}")
    return magic, w, h, maxval, pos + 1  # exactly one whitespace byte ends the header


def _decode_pnm(data: bytes) -> np.ndarray:
    magic, w, h, maxval, off = _pnm_header(data)
    chans = 3 if magic in ("P3", "P6") else 1
    count = w * h * chans
    if magic in ("P5", "P6"):
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = count * dtype.itemsize
        body = data[off:off + need]
        if len(body) < need:
            raise ImageError(f"truncated netpbm data: {len(body)} of {need} bytes")
        vals = np.frombuffer(body, dtype=dtype).astype(np.float64)
    else:
        try:
            vals = np.array(data[off:].split(), dtype=np.float64)
        except ValueError:
            raise ImageError("non-numeric sample in ASCII netpbm") from None
        if vals.size < count:
            raise ImageError(f"truncated netpbm data: {vals.size} of {count} samples")
        vals = vals[:count]
    if vals.max(initial=0) > maxval:
        raise ImageError("sample exceeds maxval")
    img = (vals / maxval).reshape(h, w, chans).transpose(2, 0, 1)
    return np.repeat(img, 3, axis=0) if chans == 1 else img


def _decode_png(path: Path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
                return np.repeat(arr[None], 3, axis=0)
            if im.mode != "L":
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, SyntaxError) as exc:
        raise ImageError(f"cannot decode PNG: {exc}") from None
    if arr.ndim == 2:
        return np.repeat(arr[None], 3, axis=0)
    return arr.transpose(2, 0, 1)


def load_image(path) -> np.ndarray:
    path = Path(path)
    try:
        head = path.read_bytes()
    except OSError as exc:
        raise ImageError(f"{path}: {exc.strerror or exc}") from None
    try:
        if head.startswith(b"\x89PNG"):
            img = _decode_png(path)
        elif head[:1] == b"P":
            img = _decode_pnm(head)
        else:
            raise ImageError("unrecognised image format")
    except ImageError as exc:
        raise ImageError(f"{path}: {exc}") from None
    return np.ascontiguousarray(img, dtype=np.float32)


def image_size(path) -> tuple[int, int]:
    """``(width, height)`` without decoding pixel data where possible."""
    path = Path(path)
    data = path.read_bytes()
    if data.startswith(b"\x89PNG"):
        from PIL import Image
        with Image.open(path) as im:
            return im.size
    try:
        _, w, h, _, _ = _pnm_header(data[:4096] if len(data) > 4096 else data)
    except ImageError as exc:
        raise ImageError(f"{path}: {exc}") from None
    return w, h


def dumps_pnm(image: np.ndarray, maxval: int = 255) -> bytes:
    """Binary P6 (or P5 for a single channel), rounding to the nearest level."""
    c, h, w = image.shape
    levels = np.clip(np.rint(np.asarray(image, dtype=np.float64) * maxval), 0, maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    body = levels.transpose(1, 2, 0).astype(dtype).tobytes()
    magic = "P6" if c == 3 else "P5"
    return f"{magic}\n{w} {h}\n{maxval}\n".encode() + body


def save_image(path, image: np.ndarray) -> None:
    atomic_write(path, dumps_pnm(image))


def find_image(directory, stem: str) -> Path | None:
    for suffix in IMAGE_SUFFIXES:
        p = Path(directory) / (stem + suffix)
        if p.exists():
            return p
    return None


# ---------------------------------------------------------------------------
# YOLO annotations

def parse_yolo_annotation(text: str, width: int, height: int, *, source: str = "<text>",
                          image_id: str = "") -> list[GroundTruth]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        where = f"{source}:{lineno}"
        if len(parts) != 5:
            raise AnnotationError(f"{where}: expected 5 fields, got {len(parts)}")
        try:
            cls = int(parts[0])
            cx, cy, bw, bh = (float(v) for v in parts[1:])
        except ValueError:
            raise AnnotationError(f"{where}: non-numeric field") from None
        if cls < 0:
            raise AnnotationError(f"{where}: negative class id {cls}")
        for name, v in (("cx", cx), ("cy", cy)):
            if not 0.0 <= v <= 1.0:
                raise AnnotationError(f"{where}: {name}={v} outside [0, 1]")
        for name, v in (("w", bw), ("h", bh)):
            if not 0.0 < v <= 1.0:
                raise AnnotationError(f"{where}: {name}={v} outside (0, 1]")
        x0 = max(0.0, (cx - bw / 2) * width)
        y0 = max(0.0, (cy - bh / 2) * height)
        x1 = min(float(width), (cx + bw / 2) * width)
        y1 = min(float(height), (cy + bh / 2) * height)
        if x1 <= x0 or y1 <= y0:
            raise AnnotationError(f"{where}: box has no area inside the image")
        out.append(GroundTruth(Box(x0, y0, x1, y1), cls, image_id))
    return out


def dumps_yolo_annotation(gts, width: int, height: int) -> str:
    lines = []
    for g in gts:
        b = g.box
        lines.append(f"{g.class_id} {(b.x_min + b.x_max) / 2 / width!r} "
                     f"{(b.y_min + b.y_max) / 2 / height!r} {b.width / width!r} "
                     f"{b.height / height!r}")
    return "".join(line + "\n" for line in lines)


def load_yolo_annotations(directory, image_sizes: dict[str, tuple[int, int]] | None = None
                          ) -> dict[str, list[GroundTruth]]:
    """Every ``*.txt`` in ``directory`` keyed by stem.

    Image sizes come from ``image_sizes`` when given, otherwise from the
    image file with the same stem in the same directory.  ``classes.txt``
    is treated as a name list, not an annotation.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise AnnotationError(f"{directory}: not a directory")
    out = {}
    for txt in sorted(directory.glob("*.txt")):
        if txt.name == "classes.txt":
            continue
        stem = txt.stem
        if image_sizes is not None and stem in image_sizes:
            w, h = image_sizes[stem]
        else:
            img = find_image(directory, stem)
            if img is None:
                raise AnnotationError(f"{txt}: no paired image ({', '.join(IMAGE_SUFFIXES)})")
            w, h = image_size(img)
        out[stem] = parse_yolo_annotation(txt.read_text(), w, h, source=str(txt), image_id=stem)
    return out


def load_class_names(directory) -> dict[int, str]:
    p = Path(directory) / "classes.txt"
    if not p.exists():
        return {}
    names = [ln.strip() for ln in p.read_text().splitlines() if ln.strip()]
    return dict(enumerate(names))
