"""Static analysis of a network graph.

Shapes use (width, height, channels).  Convs and max-pools are same-padded,
so the spatial output is ``ceil(in / stride)``.

Receptive field and cumulative stride follow the chain recurrence

    RF_k = RF_{k-1} + (f_k - 1) * CS_{k-1},    CS_k = CS_{k-1} * s_k

with ``f_k`` the effective (dilated) kernel extent.  Upsample and
reshape-passthrough rows carry RF and CS through unchanged.  A concatenation
takes RF and CS from the input whose stride matches the grid spacing of the
merged map (input width / map width); the resampled branches do not move the
numbers.  That is the rule under which the published layer tables were
tabulated.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from .netdef import NetworkGraph

Shape = tuple[int, int, int]


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerAnalysis:
    index: int
    kind: str
    in_shape: Shape | None
    out_shape: Shape
    cumulative_stride: int
    receptive_field: int
    params: int
    flops: int


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def infer_shapes(graph: NetworkGraph) -> list[Shape]:
    shapes: list[Shape] = []
    prev: Shape = tuple(graph.input_shape)
    for i, layer in enumerate(graph.layers):
        w, h, c = prev
        if layer.kind == "conv":
            out = (_ceil_div(w, layer.stride), _ceil_div(h, layer.stride), layer.filters)
        elif layer.kind == "maxpool":
            out = (_ceil_div(w, layer.stride), _ceil_div(h, layer.stride), c)
        elif layer.kind == "upsample":
            out = (2 * w, 2 * h, c)
        elif layer.kind == "reshape":
            if w % 2 or h % 2:
                raise ShapeError(f"layer {i}: reshape-passthrough needs even size, got {w}x{h}")
            out = (w // 2, h // 2, 4 * c)
        elif layer.kind == "route":
            srcs = [shapes[s] for s in layer.route_sources]
            if len({s[:2] for s in srcs}) != 1:
                raise ShapeError(f"layer {i}: concat of mismatched sizes {srcs}")
            out = (srcs[0][0], srcs[0][1], sum(s[2] for s in srcs))
        elif layer.kind == "yolo":
            out = prev
        else:
            raise ShapeError(f"layer {i}: unknown kind {layer.kind!r}")
        if layer.residual_partner is not None and shapes[layer.residual_partner] != out:
            raise ShapeError(
                f"layer {i}: residual add of {out} and {shapes[layer.residual_partner]}")
        if min(out) <= 0:
            raise ShapeError(f"layer {i}: empty output {out}")
        shapes.append(out)
        prev = out
    return shapes


def input_shapes(graph: NetworkGraph, shapes: list[Shape] | None = None) -> list[Shape | None]:
    """Input of every layer; ``None`` for routes (several inputs)."""
    shapes = shapes or infer_shapes(graph)
    out: list[Shape | None] = []
    for i, layer in enumerate(graph.layers):
        if layer.kind == "route":
            out.append(None)
        else:
            out.append(tuple(graph.input_shape) if i == 0 else shapes[i - 1])
    return out


def receptive_fields(graph: NetworkGraph) -> list[tuple[int, int]]:
    """Per-layer ``(RF, CS)`` pairs."""
    shapes = infer_shapes(graph)
    in_w = graph.input_shape[0]
    rf, cs = 1, 1
    out: list[tuple[int, int]] = []
    for i, layer in enumerate(graph.layers):
        if layer.kind in ("conv", "maxpool"):
            extent = layer.dilation * (layer.kernel - 1) + 1
            rf = rf + (extent - 1) * cs
            cs = cs * layer.stride
        elif layer.kind == "route":
            cands = [out[s] for s in layer.route_sources]
            spacing = in_w // shapes[i][0]
            aligned = [c for c in cands if c[1] == spacing]
            if len(cands) == 1:
                rf, cs = cands[0]
            elif aligned:
                rf, cs = max(aligned)
            else:
                rf, cs = max(c[0] for c in cands), spacing
        out.append((rf, cs))
    return out


def layer_params(graph: NetworkGraph, shapes: list[Shape] | None = None) -> list[int]:
    shapes = shapes or infer_shapes(graph)
    ins = input_shapes(graph, shapes)
    counts = []
    for layer, s_in in zip(graph.layers, ins):
        if layer.kind != "conv":
            counts.append(0)
            continue
        extra = 4 * layer.filters if layer.batch_norm else layer.filters
        counts.append(layer.kernel ** 2 * s_in[2] * layer.filters + extra)
    return counts


def count_params(graph: NetworkGraph) -> tuple[int, list[int]]:
    """Total and per-layer parameter counts (BN contributes 4 terms per channel)."""
    per = layer_params(graph)
    return sum(per), per


def layer_flops(graph: NetworkGraph, shapes: list[Shape] | None = None) -> list[int]:
    shapes = shapes or infer_shapes(graph)
    ins = input_shapes(graph, shapes)
    out = []
    for layer, s_in, s_out in zip(graph.layers, ins, shapes):
        if layer.kind != "conv":
            out.append(0)
        else:
            out.append(2 * layer.kernel ** 2 * s_in[2] * layer.filters * s_out[0] * s_out[1])
    return out


def count_flops(graph: NetworkGraph, input_shape: tuple[int, int] | None = None) -> float:
    """Billions of floating-point operations for one forward pass."""
    if input_shape is not None:
        graph = graph.with_input(*input_shape[:2])
    return sum(layer_flops(graph)) / 1e9


def analyze(graph: NetworkGraph) -> list[LayerAnalysis]:
    shapes = infer_shapes(graph)
    ins = input_shapes(graph, shapes)
    rfcs = receptive_fields(graph)
    params = layer_params(graph, shapes)
    flops = layer_flops(graph, shapes)
    return [
        LayerAnalysis(i, layer.kind, ins[i], shapes[i], rfcs[i][1], rfcs[i][0], params[i], flops[i])
        for i, layer in enumerate(graph.layers)
    ]


def head_properties(graph: NetworkGraph) -> list[dict]:
    """Output scale, RF and CS of every head, largest stride first."""
    rows = analyze(graph)
    out = []
    for h in graph.heads:
        r = rows[h.layer]
        out.append({"layer": h.layer, "scale": r.out_shape[:2],
                    "rf": r.receptive_field, "cs": r.cumulative_stride})
    return sorted(out, key=lambda d: -d["cs"])


def _type_label(graph: NetworkGraph, i: int) -> str:
    layer = graph.layers[i]
    if layer.kind == "conv":
        label = "Conv (R)" if (layer.residual_partner is not None
                               or _is_residual_first(graph, i)) else "Conv"
        return label + (f" d{layer.dilation}" if layer.dilation > 1 else "")
    if layer.kind == "route":
        return "Route " + ",".join(map(str, layer.route_sources))
    return {"upsample": "Upsample", "reshape": "Reshape", "yolo": "Yolo",
            "maxpool": "Maxpool"}[layer.kind]


def _is_residual_first(graph: NetworkGraph, i: int) -> bool:
    nxt = graph.layers[i + 1] if i + 1 < len(graph.layers) else None
    return nxt is not None and nxt.kind == "conv" and nxt.residual_partner is not None


def _dims(s: Shape | None) -> str:
    return "" if s is None else "x".join(map(str, s))


REPORT_COLUMNS = ("#", "Type", "F", "S/S", "Input", "Output", "CS", "RF", "Params", "FLOPs")


def report_rows(graph: NetworkGraph) -> list[list[str]]:
    rows = []
    for r in analyze(graph):
        layer = graph.layers[r.index]
        filt = str(layer.filters) if layer.kind == "conv" else ""
        if layer.kind in ("conv", "maxpool"):
            ss = f"{layer.kernel}/{layer.stride}"
        else:
            ss = "2/1" if layer.kind == "upsample" else ""
        rows.append([str(r.index), _type_label(graph, r.index), filt, ss, _dims(r.in_shape),
                     _dims(r.out_shape), str(r.cumulative_stride), str(r.receptive_field),
                     str(r.params), str(r.flops)])
    return rows


def format_report(graph: NetworkGraph, fmt: str = "text") -> str:
    """Layer table with the same columns as the published architecture tables."""
    rows = report_rows(graph)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        writer.writerows(rows)
        return buf.getvalue()
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    widths = [max(len(REPORT_COLUMNS[j]), *(len(r[j]) for r in rows)) for j in range(len(REPORT_COLUMNS))]
    def line(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()

    lines = [line(REPORT_COLUMNS), "  ".join("-" * w for w in widths)]
    lines += [line(r) for r in rows]
    total_p, _ = count_params(graph)
    lines.append(f"total params {total_p}  BFLOPs {count_flops(graph):.2f}")
    return "\n".join(lines) + "\n"
