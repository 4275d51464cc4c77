"""Text and CSV tables: energy spectra, per-layer kept dimensions, head counts."""
from __future__ import annotations

import csv
import io

import numpy as np

from .calibration import CalibrationFeatures, spectrum_report
from .fusing import FusedModel
from .masks import MaskSet


def _count(v) -> int:
    return int(np.count_nonzero(np.asarray(v)))


def mask_dims_table(masks: MaskSet, config) -> list[dict]:
    """Kept dimensions per layer as read directly off binary masks."""
    rows = []
    for i in range(config.n_layers):
        m = f"mask.L{i}"
        mha_on = _count(masks[f"{m}.z_MHA"]) > 0
        heads = qk = vo = 0
        for j in range(config.n_heads):
            h = f"{m}.h{j}"
            if mha_on and _count(masks[f"{h}.z_head"]):
                heads += 1
                qk += _count(masks[f"{h}.z_Q"] * masks[f"{h}.z_K"])
                vo += _count(masks[f"{h}.z_V"] * masks[f"{h}.z_O"])
        if masks.groups is None:
            hid = {b: _count(masks[f"{m}.{b}"]) for b in ("z_in_M", "z_out_M", "z_in_F", "z_out_F")}
            group = -1
        else:
            group = masks.groups[i]
            n = _count(masks[f"mask.G{group}.z_hidden"])
            hid = dict.fromkeys(("z_in_M", "z_out_M", "z_in_F", "z_out_F"), n)
        rows.append({
            "layer": i, "group": group,
            "in_M": hid["z_in_M"], "out_M": hid["z_out_M"], "in_F": hid["z_in_F"], "out_F": hid["z_out_F"],
            "mha": int(mha_on), "heads": heads, "qk": qk, "vo": vo,
            "ffn": int(_count(masks[f"{m}.z_FFN"]) > 0),
            "d_f": _count(masks[f"{m}.z_f"]) if _count(masks[f"{m}.z_FFN"]) else 0,
        })
    return rows


def fused_dims_table(fused: FusedModel) -> list[dict]:
    rows = []
    for i, r in enumerate(fused.dims):
        L = f"L{i}"
        rows.append({
            "layer": i, "group": r["group"],
            "in_M": r["in_M"], "out_M": r["out_M"], "in_F": r["in_F"], "out_F": r["out_F"],
            "mha": int(r["heads"] > 0), "heads": r["heads"], "qk": r["qk"], "vo": r["vo"],
            "ffn": int(f"{L}.W_U" in fused.tensors), "d_f": r["d_f"],
        })
    return rows


def head_table(masks: MaskSet, config) -> list[dict]:
    """One row per head: alive flag and kept query/key and value/output widths."""
    rows = []
    for i in range(config.n_layers):
        mha_on = _count(masks[f"mask.L{i}.z_MHA"]) > 0
        for j in range(config.n_heads):
            h = f"mask.L{i}.h{j}"
            alive = mha_on and _count(masks[f"{h}.z_head"]) > 0
            rows.append({"layer": i, "head": j, "alive": int(alive),
                         "qk": _count(masks[f"{h}.z_Q"] * masks[f"{h}.z_K"]) if alive else 0,
                         "vo": _count(masks[f"{h}.z_V"] * masks[f"{h}.z_O"]) if alive else 0})
    return rows


def spectrum_table(features: CalibrationFeatures, top: int = 4) -> list[dict]:
    rows = []
    for r in spectrum_report(features):
        row = {"layer": r["layer"], "stream": r["stream"], "rank": r["rank"], "k90": r["k90"], "k99": r["k99"]}
        for n in range(top):
            row[f"e{n + 1}"] = float(r["energy"][n]) if n < len(r["energy"]) else 0.0
        rows.append(row)
    return rows


def to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def from_csv(text: str) -> list[dict]:
    return [{k: _num(v) for k, v in row.items()} for row in csv.DictReader(io.StringIO(text))]


def _num(s):
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def to_text(rows: list[dict], title: str = "") -> str:
    if not rows:
        return f"{title}\n(empty)\n" if title else "(empty)\n"
    cols = list(rows[0])
    cells = [[_fmt(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[k]) for row in cells)) for k, c in enumerate(cols)]
    lines = [title] if title else []
    lines.append("  ".join(c.rjust(w) for c, w in zip(cols, widths)))
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)
