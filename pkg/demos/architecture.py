"""Walk through the two small-object networks without running them.

Prints the YOLO-S layer table, then compares the five built-in networks on
parameters, FLOPs and head geometry.

    python3 demos/architecture.py
"""
from yolosmall.analysis import format_report, head_properties
from yolosmall.bench import cost_table
from yolosmall.netdef import build_builtin, residual_pairs

g = build_builtin("yolo_s")
print(format_report(g))
print(f"yolo_s: {len(g.layers)} layers, {len(residual_pairs(g))} residual blocks\n")

print(f"{'network':<12} {'params':>12} {'BFLOPs':>8}  heads (grid, RF, CS)")
for row in cost_table():
    heads = head_properties(build_builtin(row["name"]))
    desc = ", ".join(f"{h['scale'][0]}/{h['rf']}/{h['cs']}" for h in heads)
    print(f"{row['name']:<12} {row['params']:>12,} {row['bflops']:>8.2f}  {desc}")
