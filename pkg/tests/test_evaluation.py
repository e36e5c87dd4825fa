import numpy as np
import pytest

from kptlm.errors import ConfigError
from kptlm.evaluation import evaluate, format_table, query_weights
from kptlm.instructions import PromptStyle

STYLE = PromptStyle(use_description=False)


def test_only_query_passes(tiny_model, small_ds, vocab):
    samples = small_ds.subset("test")[:3]
    res = evaluate(tiny_model, samples, small_ds.registry, vocab, style=STYLE)
    assert res.passes == 3
    assert res.report["keypoints"] == sum(len(s.keypoints) for s in samples)
    assert len(res.predictions) == res.report["keypoints"]
    assert res.report["parse_failure_rate"] == 0.0
    assert "all" in format_table(res.report)


def test_pair_multiplicity(tiny_model, small_ds, vocab):
    samples = small_ds.subset("test")[:3]
    ids = [s.image_id for s in samples]
    dedup = [(ids[0], i) for i in ids]
    a = evaluate(tiny_model, samples, small_ds.registry, vocab, style=STYLE)
    b = evaluate(tiny_model, samples, small_ds.registry, vocab, "support_query_pairs", dedup, style=STYLE)
    assert a.report["pck"] == b.report["pck"]
    assert query_weights(samples, "support_query_pairs", dedup + [(ids[1], ids[2])])[ids[2]] == 2.0
    c = evaluate(tiny_model, samples, small_ds.registry, vocab, "support_query_pairs",
                 dedup + [(ids[1], ids[2])], style=STYLE)
    assert c.passes == 3 and c.report["weighted_images"] == 4.0
    # recompute the weighted aggregate by hand
    hits, total = 0.0, 0.0
    preds = {}
    for r in c.predictions:
        preds.setdefault(r["image_id"], []).append((r["x"], r["y"]))
    for s in samples:
        w = 2.0 if s.image_id == ids[2] else 1.0
        p = np.array(preds[s.image_id])
        d = np.linalg.norm(s.crop.to_pixels(p) - s.crop.to_pixels(s.keypoints[:, :2]), axis=1)
        hits += w * (d <= 0.2 * max(s.bbox[2], s.bbox[3])).sum()
        total += w * len(d)
    assert c.report["pck"]["0.20"] == pytest.approx(hits / total)


def test_pair_errors(small_ds):
    samples = small_ds.subset("test")[:2]
    with pytest.raises(ConfigError, match="unknown images"):
        query_weights(samples, "support_query_pairs", [(samples[0].image_id, 99999)])
    with pytest.raises(ConfigError):
        query_weights(samples, "support_query_pairs")
    with pytest.raises(ConfigError):
        query_weights(samples, "everything")
