"""Run inference over a split and aggregate PCK / mPCK reports."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import PoseSample
from .decoding import Greedy, KeypointPrediction, Strategy, infer_keypoints, strategy_to_dict
from .errors import ConfigError
from .instructions import PromptStyle, Registry
from .metrics import PCK_THRESHOLDS, mean_pck, pck_curve
from .tokenizer import Vocabulary

EVAL_MODES = ("only_query", "support_query_pairs")


@dataclass
class EvalResult:
    report: dict
    predictions: list[dict]
    passes: int


def load_pairs(path: str | Path) -> list[tuple[int, int]]:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, list):
        raise ConfigError("pair list must be a JSON array")
    try:
        return [(int(p["support_image_id"]), int(p["query_image_id"])) for p in doc]
    except (KeyError, TypeError) as e:
        raise ConfigError(f"pair list entries need support_image_id and query_image_id: {e}") from None


def query_weights(samples: Sequence[PoseSample], mode: str,
                  pairs: Sequence[tuple[int, int]] | None = None) -> dict[int, float]:
    """Image id to multiplicity: 1 per unique query, or its count in the pair list."""
    if mode not in EVAL_MODES:
        raise ConfigError(f"unknown evaluation mode {mode!r}; choose from {EVAL_MODES}")
    known = {s.image_id for s in samples}
    if mode == "only_query":
        return {i: 1.0 for i in sorted(known)}
    if pairs is None:
        raise ConfigError("support_query_pairs evaluation needs a pair list")
    unknown = sorted({i for pair in pairs for i in pair} - known)
    if unknown:
        raise ConfigError(f"pair list references unknown images {unknown[:10]}")
    return {q: float(n) for q, n in sorted(Counter(q for _, q in pairs).items())}


def _records(s: PoseSample, preds: list[KeypointPrediction], strategy: Strategy, mode: str) -> list[dict]:
    sd = strategy_to_dict(strategy)
    return [{"image_id": s.image_id, "category": s.category, "name": p.name, "x": p.x, "y": p.y,
             "strategy": sd, "mode": mode, "flags": p.flags} for p in preds]


def _summary(preds: dict[int, np.ndarray], samples: list[PoseSample], weights, norm) -> dict:
    curve = pck_curve(preds, samples, PCK_THRESHOLDS, norm, weights)
    return {"pck": {f"{a:.2f}": v for a, v in curve.items()}, "mpck": mean_pck(list(curve.values()))}


def evaluate(model, samples: Sequence[PoseSample], registry: Registry, vocab: Vocabulary,
             mode: str = "only_query", pairs: Sequence[tuple[int, int]] | None = None,
             strategy: Strategy = Greedy(), inference_mode: str = "single", style: PromptStyle = PromptStyle(),
             seed: int = 0, constrained: bool = True, norm: str = "bbox_long_side",
             teacher_forced: bool = False) -> EvalResult:
    """One inference pass per query image, then weighted PCK over all its visible keypoints."""
    weights = query_weights(samples, mode, pairs)
    by_id = {s.image_id: s for s in samples}
    queries = [by_id[i] for i in sorted(weights)]
    preds, records = {}, []
    n_kp = n_fail = 0
    for s in queries:
        specs = registry[s.category]
        targets = [tuple(map(float, k[:2])) for k in s.keypoints] if teacher_forced else None
        out = infer_keypoints(model, s.image, specs, vocab, inference_mode, strategy, style,
                              np.random.default_rng([seed, s.image_id]), constrained, targets, specs)
        preds[s.image_id] = np.array([[p.x, p.y] for p in out])
        records += _records(s, out, strategy, inference_mode)
        n_kp += len(out)
        n_fail += sum("parse_failure" in p.flags for p in out)
    report = {
        "mode": mode,
        "inference_mode": inference_mode,
        "strategy": strategy_to_dict(strategy),
        "constrained": constrained,
        "pck_norm": norm,
        "images": len(queries),
        "weighted_images": float(sum(weights.values())),
        "keypoints": n_kp,
        "parse_failure_rate": n_fail / n_kp if n_kp else 0.0,
        **_summary(preds, queries, weights, norm),
        "per_category": {},
    }
    for cat in sorted({s.category for s in queries}):
        subset = [s for s in queries if s.category == cat]
        report["per_category"][cat] = _summary(preds, subset, weights, norm)
    return EvalResult(report, records, len(queries))


def format_table(report: dict) -> str:
    cols = list(report["pck"])
    head = f"{'category':<16}" + "".join(f"{'PCK@' + c:>10}" for c in cols) + f"{'mPCK':>10}"
    lines = [head, "-" * len(head)]

    def row(name, summary):
        return f"{name:<16}" + "".join(f"{100 * summary['pck'][c]:>10.2f}" for c in cols) + \
            f"{100 * summary['mpck']:>10.2f}"

    for cat, summary in report["per_category"].items():
        lines.append(row(cat, summary))
    lines.append(row("all", report))
    lines.append(f"parse failures: {100 * report['parse_failure_rate']:.2f}%")
    return "\n".join(lines) + "\n"


def write_outputs(result: EvalResult, out_dir: str | Path, stem: str = "eval") -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"report": out / f"{stem}_report.json", "table": out / f"{stem}_table.txt",
             "predictions": out / f"{stem}_predictions.jsonl"}
    paths["report"].write_text(json.dumps(result.report, indent=2, sort_keys=True) + "\n")
    paths["table"].write_text(format_table(result.report))
    with open(paths["predictions"], "w") as f:
        for r in result.predictions:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    return paths
