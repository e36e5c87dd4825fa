import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kptlm.errors import ConfigError, RegistryError
from kptlm.instructions import (
    NO_DESCRIPTION,
    KeypointSpec,
    PromptKind,
    PromptStyle,
    Registry,
    build_round,
    builtin_registry,
    dynamic_round_pairing,
    fixed_round_pairing,
    make_conversation,
    render_conversation,
    render_tokens,
)

SPECS = [KeypointSpec(f"point {c}", f"Next to point {c}.", "thing", f"Near {c}.", "Somewhere.") for c in "abcdefg"]


def test_builtin_registry():
    reg = builtin_registry()
    specs = reg["animal body"]
    assert len(specs) == 17
    assert len({s.name for s in specs}) == 17
    with pytest.raises(RegistryError, match="candidates"):
        reg.lookup("animal body", "tail")
    assert Registry.from_json(reg.to_json()).to_json() == reg.to_json()


def test_duplicate_names_rejected():
    with pytest.raises(RegistryError):
        Registry({"x": [SPECS[0], SPECS[0]]})


def test_base_round_text():
    rnd = build_round(SPECS[0])
    assert rnd.question == "Where is the point a? Next to point a."
    assert len(rnd.turns) == 1 and rnd.turns[0].answer is None and rnd.turns[0].supervised


def test_description_variants():
    assert build_round(SPECS[1], PromptStyle(description_removed=True)).question.endswith(NO_DESCRIPTION)
    assert build_round(SPECS[1], PromptStyle(description_replaced=True)).question.endswith("Near b.")
    assert build_round(SPECS[1], PromptStyle(vague_descriptions=True)).question.endswith("Somewhere.")
    assert build_round(SPECS[1], PromptStyle(use_description=False)).question == "Where is the point b?"
    with pytest.raises(ConfigError):
        PromptStyle(description_removed=True, vague_descriptions=True)


def test_random_replacement_frequencies():
    style = PromptStyle(random_replace_in_training=True)
    rng = np.random.default_rng(0)
    srcs = [build_round(SPECS[0], style, rng=rng).description_source for _ in range(4000)]
    freq = {k: srcs.count(k) / len(srcs) for k in ("detail", "replaced", "removed")}
    assert freq["detail"] == pytest.approx(0.6, abs=0.03)
    assert freq["replaced"] == pytest.approx(0.2, abs=0.03)


def test_step_by_step_round():
    rnd = build_round(SPECS[0], PromptStyle(kind=PromptKind.STEP_BY_STEP))
    assert [t.supervised for t in rnd.turns] == [False, True]
    assert rnd.turns[0].answer == "thing"


def test_pretrain_rounds_answer_names():
    rnd = build_round(SPECS[2], PromptStyle(kind=PromptKind.DIRECT_QA_PRETRAIN), target=(0.25, 0.5))
    assert rnd.turns[-1].answer == "point c"
    assert "[0.250, 0.500]" in rnd.question
    with pytest.raises(ConfigError):
        build_round(SPECS[2], PromptStyle(kind=PromptKind.DIRECT_QA_PRETRAIN))
    rnd = build_round(SPECS[2], PromptStyle(kind=PromptKind.STEP_BY_STEP_QA_PRETRAIN), target=(0.25, 0.5),
                      candidates=SPECS[:3])
    assert len(rnd.turns) == 3 and rnd.turns[-1].answer == "point c"


def test_registry_check_on_build():
    reg = Registry({"thing": SPECS[:2]})
    with pytest.raises(RegistryError):
        build_round(SPECS[3], registry=reg)


def test_render_mask_covers_exactly_the_answers(vocab):
    conv = make_conversation(7, SPECS[:2], [(0.1, 0.2), (0.3, 0.4)], PromptStyle())
    r = render_conversation(conv, vocab)
    assert r.ids[0] == vocab.bos and r.ids[-1] == vocab.eos
    answers = [vocab.decode(r.ids[a:b]) for a, b in r.spans]
    assert answers == ["[0.100, 0.200]", "[0.300, 0.400]"]
    assert r.mask.sum() == sum(b - a for a, b in r.spans)
    assert vocab.decode(r.ids[r.mask == 1]) == "[0.100, 0.200][0.300, 0.400]"


def test_render_open_turn(vocab):
    r = render_tokens(vocab, [("Where?", None, True)], close=False)
    assert r.ids[-1] == vocab.sep_assistant
    with pytest.raises(ValueError):
        render_tokens(vocab, [("a", None, True), ("b", "c", True)])


def test_fixed_pairing_examples():
    groups = fixed_round_pairing(list(range(15)), 5)
    assert len(groups) == 3 and all(len(g) == 5 for g in groups)
    groups = fixed_round_pairing(list(range(17)), 4)
    assert len(groups) == 5 and all(len(g) == 4 for g in groups)
    assert len(set(groups[-1])) == 4
    short = fixed_round_pairing(list(range(17)), 4, pad="short_final_group")
    assert [len(g) for g in short] == [4, 4, 4, 4, 1]
    assert fixed_round_pairing([0], 4) == [[0, 0, 0, 0]]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 68), st.integers(1, 8), st.integers(0, 10 ** 6))
def test_fixed_pairing_properties(K, k, seed):
    groups = fixed_round_pairing(list(range(K)), k, np.random.default_rng(seed))
    assert len(groups) == math.ceil(K / k)
    assert all(len(g) == k for g in groups)
    assert set().union(*map(set, groups)) == set(range(K))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 68), st.integers(1, 8), st.integers(1, 8), st.integers(0, 10 ** 6))
def test_dynamic_pairing_properties(K, a, b, seed):
    lo, hi = min(a, b), max(a, b)
    groups = dynamic_round_pairing(list(range(K)), np.random.default_rng(seed), (lo, hi))
    assert set().union(*map(set, groups)) == set(range(K))
    assert all(min(lo, K) <= len(g) <= min(hi, K) for g in groups)


def test_dynamic_pairing_is_seeded():
    a = dynamic_round_pairing(list(range(20)), np.random.default_rng(5))
    b = dynamic_round_pairing(list(range(20)), np.random.default_rng(5))
    assert a == b
    with pytest.raises(ConfigError):
        dynamic_round_pairing([1, 2], np.random.default_rng(0), (3, 2))


def test_style_dict_round_trip():
    s = PromptStyle(kind="step_by_step", diverse_questions=True, replace_probs=(0.5, 0.25, 0.25))
    assert PromptStyle.from_dict(s.to_dict()) == s
    with pytest.raises(ConfigError):
        PromptStyle(replace_probs=(0.5, 0.5, 0.5))
