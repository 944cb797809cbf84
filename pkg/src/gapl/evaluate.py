"""Evaluation reports, domain-alignment measurements, anchor dumps and ablation suites."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .checkpoint import AnchorDump, Checkpoint
from .config import STREAM_NAMES, TrainConfig, parse_streams
from .data import FeatureDataset, centroid_gap
from .errors import ContractError, DegenerateInputError, FormatError, GaplError, ResourceGuardError
from .model import Model, context_anchor_bank, style_anchors_for_labels
from .trainer import argmax_lowest, check_compatible, model_from_checkpoint, predict, train

RESOURCE_GUARD = "RESOURCE_GUARD"


def harmonic_mean(base: float, novel: float) -> float:
    """2 b n / (b + n) for accuracies in [0, 100]."""
    for v in (base, novel):
        if not 0.0 <= v <= 100.0:
            raise ContractError(f"accuracy {v} outside [0, 100]")
    if base == 0 and novel == 0:
        raise DegenerateInputError("harmonic mean of two zero accuracies")
    return 2.0 * base * novel / (base + novel)


def _acc(pred: np.ndarray, labels: np.ndarray) -> float:
    return 100.0 * float(np.mean(pred == labels)) if len(labels) else float("nan")


def dump_anchors(model: Model, data: FeatureDataset, alpha: float | None = None) -> AnchorDump:
    """Per-sample f, gate and ground-truth style anchor plus the contextual anchor bank (inference text)."""
    gamma, a_style = style_anchors_for_labels(model, data.F, data.labels, "infer", alpha)
    return AnchorDump(data.labels.copy(), data.domains.copy(), data.f.copy(), gamma, a_style,
                      context_anchor_bank(model, "infer", alpha))


def centroid_gaps(model: Model, data: FeatureDataset, domains: tuple[int, int] = (0, 1),
                  alpha: float | None = None) -> list[dict]:
    """First-order and anchored centroid gaps for every class present in both domains."""
    dump = dump_anchors(model, data, alpha)
    rows = []
    for c in range(data.M):
        present = [np.any((data.labels == c) & (data.domains == dom)) for dom in domains]
        if not all(present):
            continue
        rows.append({"class": c,
                     "first_order": centroid_gap(data, c, domains, "first-order"),
                     "anchored": centroid_gap(dump, c, domains, "anchored")})
    return rows


@dataclass
class Split:
    base: np.ndarray
    novel: np.ndarray

    @classmethod
    def from_base(cls, base: Sequence[int], M: int) -> Split:
        base = np.array(sorted(set(int(b) for b in base)), dtype=np.int64)
        if base.size == 0 or base.min() < 0 or base.max() >= M:
            raise ContractError("split manifest must list base class ids in [0, M)")
        return cls(base, np.setdiff1d(np.arange(M), base))


def evaluate(model: Model, data: FeatureDataset, alpha: float | None = None,
             streams: tuple[str, ...] | None = None, split: Split | None = None,
             gap_domains: tuple[int, int] | None = (0, 1), ckpt_epoch: int | None = None) -> dict:
    """Report dict with a deterministic ``report`` section and a ``timing`` section."""
    start = time.perf_counter()
    check_compatible(data, model.params["text.w_learn"].shape)
    cfg = model.cfg
    alpha = cfg.alpha if alpha is None else float(alpha)
    if streams is not None:
        streams = parse_streams(streams)
        if not set(streams) <= set(cfg.active_streams):
            raise ContractError(f"streams {streams} were not all trained (trained: {cfg.active_streams})")
        model = Model(cfg.with_overrides(active_streams=streams), model.w_fixed, model.params)
    eval_cfg = model.cfg

    probs = predict(model, data, "infer", alpha)
    report: dict = {
        "config": eval_cfg.to_dict(),
        "config_hash": eval_cfg.hash(),
        "alpha": alpha,
        "streams": list(eval_cfg.active_streams),
        "n_samples": len(data),
        "checkpoint_epoch": ckpt_epoch,
    }
    acc = {}
    for s in eval_cfg.active_streams:
        acc[STREAM_NAMES[s]] = _acc(argmax_lowest(probs[f"p_{STREAM_NAMES[s]}"]), data.labels)
    acc["fused"] = _acc(argmax_lowest(probs["p_fused"]), data.labels)
    report["accuracy"] = acc
    per_domain = {}
    fused_pred = argmax_lowest(probs["p_fused"])
    for dom in sorted(set(data.domains.tolist())):
        sel = data.domains == dom
        per_domain[str(dom)] = _acc(fused_pred[sel], data.labels[sel])
    report["per_domain"] = per_domain

    if split is not None:
        rows = np.full(data.M, alpha)
        rows[split.novel] = 0.0  # no learned vector exists for unseen classes
        p = predict(model, data, "infer", alpha, alpha_rows=rows)["p_fused"]
        b = np.isin(data.labels, split.base)
        n = np.isin(data.labels, split.novel)
        base_acc = _acc(argmax_lowest(p[b], split.base), data.labels[b])
        novel_acc = _acc(argmax_lowest(p[n], split.novel), data.labels[n])
        entry = {"base_classes": split.base.tolist(), "base": base_acc, "novel": novel_acc}
        if np.isfinite(base_acc) and np.isfinite(novel_acc) and (base_acc or novel_acc):
            entry["hm"] = harmonic_mean(base_acc, novel_acc)
        report["base_novel"] = entry

    if gap_domains is not None and all(np.any(data.domains == dom) for dom in gap_domains):
        gaps = centroid_gaps(model, data, gap_domains, alpha)
        report["centroid_gaps"] = {
            "domains": list(gap_domains),
            "per_class": gaps,
            "anchored_smaller": sum(1 for g in gaps if g["anchored"] < g["first_order"]),
        }
    return {"report": report, "report_sha256": report_digest(report),
            "timing": {"runtime_s": time.perf_counter() - start}}


def report_digest(report: dict) -> str:
    return hashlib.sha256(canonical_json(report).encode()).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def format_report(rep: dict) -> str:
    r = rep["report"]
    lines = [f"config {r['config_hash']}  alpha={r['alpha']}  streams={','.join(r['streams'])}  n={r['n_samples']}"]
    width = max(len(k) for k in list(r["accuracy"]) + ["domain 00"])
    lines.append(f"{'metric':<{width}}  {'top-1':>7}")
    for k, v in r["accuracy"].items():
        lines.append(f"{k:<{width}}  {v:7.2f}")
    for dom, v in r["per_domain"].items():
        lines.append(f"{'domain ' + dom:<{width}}  {v:7.2f}")
    if "base_novel" in r:
        bn = r["base_novel"]
        lines.append(f"{'base':<{width}}  {bn['base']:7.2f}")
        lines.append(f"{'novel':<{width}}  {bn['novel']:7.2f}")
        if "hm" in bn:
            lines.append(f"{'HM':<{width}}  {bn['hm']:7.2f}")
    if "centroid_gaps" in r:
        cg = r["centroid_gaps"]
        lines.append(f"centroid gap, domains {cg['domains'][0]} vs {cg['domains'][1]}")
        lines.append(f"{'class':>5}  {'first-order':>11}  {'anchored':>9}")
        for g in cg["per_class"]:
            lines.append(f"{g['class']:>5}  {g['first_order']:11.4f}  {g['anchored']:9.4f}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# ablation suites

STREAM_GRID = [("g",), ("g", "s"), ("g", "c"), ("g", "s", "c")]
ALPHA_GRID = [0.1, 0.3, 0.5, 0.7, 0.9]
DESCRIPTOR_GRID = ["diag", "diag+var", "full"]


def _domain_columns(test: FeatureDataset) -> list[int]:
    return sorted(set(test.domains.tolist()))


def _score_row(model: Model, test: FeatureDataset, alpha: float | None) -> dict:
    rep = evaluate(model, test, alpha=alpha, gap_domains=None)["report"]
    doms = _domain_columns(test)
    cells = {"source": rep["per_domain"][str(doms[0])]}
    targets = [rep["per_domain"][str(d)] for d in doms[1:]]
    for d, v in zip(doms[1:], targets):
        cells[f"domain_{d}"] = v
    cells["average"] = float(np.mean(targets)) if targets else cells["source"]
    return cells


def run_ablation(suite: str, train_data: FeatureDataset, test_data: FeatureDataset,
                 cfg: TrainConfig | None = None, grid: Sequence | None = None) -> tuple[list[str], list[dict]]:
    """Train and evaluate each grid point; returns (columns, rows).

    Failures are recorded in the row and the suite continues; a tripped
    full-Gram guard fills the score cells with RESOURCE_GUARD.
    """
    cfg = cfg or TrainConfig()
    doms = _domain_columns(test_data)
    score_cols = ["source"] + [f"domain_{d}" for d in doms[1:]] + ["average"]
    if suite == "streams":
        grid = [parse_streams(g) for g in (grid or STREAM_GRID)]
        points = [({"active_streams": g}, None) for g in grid]
        key_cols = ["G", "S", "C"]
    elif suite == "alpha":
        grid = [float(a) for a in (grid or ALPHA_GRID)]
        if any(not 0.0 <= a <= 1.0 for a in grid):
            raise ContractError("alpha grid must lie in [0, 1]")
        points = [({}, a) for a in grid]
        key_cols = ["alpha"]
    elif suite == "descriptor":
        grid = list(grid or DESCRIPTOR_GRID)
        points = [({"descriptor_mode": m}, None) for m in grid]
        key_cols = ["descriptor"]
    else:
        raise ContractError(f"unknown suite {suite!r}")
    if not grid:
        raise ContractError("empty ablation grid")

    trained: dict[str, Model] = {}
    rows = []
    for overrides, alpha in points:
        row: dict = {}
        if suite == "streams":
            on = overrides["active_streams"]
            row.update({"G": int("g" in on), "S": int("s" in on), "C": int("c" in on)})
        elif suite == "alpha":
            row["alpha"] = alpha
        else:
            row["descriptor"] = overrides["descriptor_mode"]
        try:
            point_cfg = cfg.with_overrides(**overrides)
            if alpha is not None:
                point_cfg = point_cfg.with_overrides(alpha=alpha)
            row["config_hash"] = point_cfg.hash()
            # alpha only enters at inference, so one training run serves every alpha
            key = point_cfg.hash(exclude=("alpha",))
            if key not in trained:
                trained[key] = train(train_data, point_cfg.with_overrides(alpha=cfg.alpha)).model
            model = trained[key]
            row.update(_score_row(model, test_data, alpha))
        except ResourceGuardError:
            row.update({c: RESOURCE_GUARD for c in score_cols})
        except GaplError as exc:
            row.update({c: f"ERROR: {type(exc).__name__}" for c in score_cols})
            row["error"] = str(exc)
        rows.append(row)
    columns = key_cols + score_cols + ["config_hash"]
    if any("error" in r for r in rows):
        columns.append("error")
    return columns, rows


def rows_to_csv(columns: list[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({c: (f"{r[c]:.2f}" if isinstance(r.get(c), float) and c != "alpha" else r.get(c, ""))
                    for c in columns})
    return buf.getvalue()


def load_model(ckpt: Checkpoint, data: FeatureDataset) -> Model:
    """Rebuild a model for ``data``; extent mismatches are format errors."""
    try:
        if ckpt.params.get("text.w_learn") is None:
            raise ContractError("checkpoint has no text.w_learn tensor")
        check_compatible(data, ckpt.params["text.w_learn"].shape)
        return model_from_checkpoint(ckpt, data.w_fixed)
    except ContractError as exc:
        raise FormatError(f"checkpoint incompatible with data: {exc}", None) from None
