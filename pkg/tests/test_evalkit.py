import json
import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from geoscene.errors import DataError, EmptyInputError
from geoscene.evalkit import (AgreementReport, UndefinedCorrelation, VoteRecord,
                              aggregate_votes, agreement_or_none, attention_agreement,
                              human_preferences, pairwise_accuracy, read_scores, read_votes,
                              relation_accuracy, scene_error, vote_weight)
from geoscene.scenegen import EntitySpec, SceneObject, make_pair, render_scene, sample_scene

grids = hnp.arrays(np.float64, (8, 8), elements=st.floats(0, 1))


def test_agreement_extremes(rng):
    m = rng.uniform(size=(8, 8))
    assert attention_agreement(m, m) == pytest.approx(1.0)
    assert attention_agreement(1 - m, m) == pytest.approx(-1.0)


def test_agreement_matches_oracle(rng):
    for _ in range(50):
        a, m = rng.uniform(size=(2, 8, 8))
        assert abs(attention_agreement(a, m) - oracles.pearson(a, m)) <= 1e-6


def test_constant_grid_is_undefined():
    with pytest.raises(UndefinedCorrelation):
        attention_agreement(np.ones((4, 4)), np.eye(4))
    assert agreement_or_none(np.eye(4), np.zeros((4, 4))) is None


@given(grids, grids, st.floats(0.1, 10), st.floats(-5, 5))
def test_agreement_affine_invariance(a, m, scale, shift):
    assume(np.ptp(a) > 1e-3 and np.ptp(m) > 1e-3)
    r = attention_agreement(a, m)
    assert attention_agreement(a * scale + shift, m) == pytest.approx(r, abs=1e-9)
    assert attention_agreement(a, m * scale + shift) == pytest.approx(r, abs=1e-9)


def test_psnr_values():
    img = np.full((8, 8, 3), 100, dtype=np.uint8)
    fp = np.zeros((8, 8), dtype=bool)
    assert scene_error(img, img, fp) == 99.0
    assert scene_error(img + 1, img, fp) == pytest.approx(20 * math.log10(255), abs=1e-9)
    assert scene_error(img + 1, img, fp) == pytest.approx(48.13, abs=5e-3)


def test_psnr_ignores_footprint():
    a = np.full((8, 8, 3), 50, dtype=np.uint8)
    b = a.copy()
    b[2:4, 2:4] = 200
    fp = np.zeros((8, 8), dtype=bool)
    fp[2:4, 2:4] = True
    assert scene_error(b, a, fp) == 99.0
    with pytest.raises(EmptyInputError):
        scene_error(a, b, np.ones((8, 8), dtype=bool))


def _scene_with_anchor(center, size=12.0):
    spec = sample_scene(np.random.default_rng(0), 64, 64)
    spec.objects = [SceneObject("rectangle", "red", center, size)]
    return spec


@pytest.mark.parametrize("rel,center", [("left-of", (40, 32)), ("right-of", (20, 32)),
                                        ("above", (32, 40)), ("below", (32, 20)),
                                        ("on", (32, 40))])
def test_relation_true_on_render(rel, center):
    spec = _scene_with_anchor(center)
    e = EntitySpec("circle", "blue", rel, 0, 8.0)
    assert relation_accuracy(render_scene(spec, None, 64, 64, e), e, spec) is True


def test_relation_swapped_roles():
    spec = _scene_with_anchor((40, 32))
    e = EntitySpec("circle", "blue", "left-of", 0, 8.0)
    img = render_scene(spec, None, 64, 64, e)
    assert relation_accuracy(img, EntitySpec("circle", "blue", "right-of", 0), spec) is False


def test_relation_detection_failure():
    spec = _scene_with_anchor((40, 32))
    img = render_scene(spec, None, 64, 64)
    assert relation_accuracy(img, EntitySpec("circle", "blue", "left-of", 0), spec) is None


def test_relation_true_on_generated_pairs():
    results = [relation_accuracy(s.target_image, s.entity, s.scene)
               for s in (make_pair(1000 + i) for i in range(60))]
    assert all(r is True for r in results)


def test_vote_weight():
    assert vote_weight(1) == 1.0
    assert vote_weight(2) == pytest.approx(0.574349, abs=5e-7)
    w = [vote_weight(k, 0.8) for k in range(1, 9)]
    assert all(a > b for a, b in zip(w, w[1:]))


def test_vote_fixture_split(fixtures):
    s = aggregate_votes(read_votes(fixtures / "votes_fixture.csv"), 0.8)
    w2 = 2.0 ** -0.8
    assert s.percentages["A"] == pytest.approx(100 * (1 + w2) / (1 + 2 * w2), abs=1e-9)
    assert s.percentages["A"] == pytest.approx(73.27, abs=0.01)
    assert s.percentages["B"] == pytest.approx(26.73, abs=0.01)
    assert s.valid_pairs == 2 and s.skipped_pairs == 0


def votes_for(pairs):
    """pairs: {pair_id: {method: [sel_a1, sel_a2, sel_a3]}}"""
    out = []
    for pid, methods in pairs.items():
        for m, sels in methods.items():
            for k, s in enumerate(sels):
                out.append(VoteRecord(pid, f"a{k}", m, bool(s)))
    return out


def test_single_method_pair_is_everything():
    s = aggregate_votes(votes_for({"p": {"A": [1, 1, 0], "B": [0, 0, 1]}}))
    assert s.percentages == {"A": 100.0, "B": 0.0}


def test_all_retained_gives_equal_shares():
    s = aggregate_votes(votes_for({"p": {"A": [1, 1, 1], "B": [1, 1, 0], "C": [0, 1, 1]},
                                   "q": {"A": [1, 1, 0], "B": [1, 1, 1], "C": [1, 0, 1]}}))
    for v in s.percentages.values():
        assert v == pytest.approx(100 / 3)


def test_empty_pairs_skipped_and_counted():
    s = aggregate_votes(votes_for({"p": {"A": [1, 0, 0], "B": [0, 1, 0]},
                                   "q": {"A": [1, 1, 0], "B": [0, 0, 0]}}))
    assert (s.valid_pairs, s.skipped_pairs) == (1, 1)


def test_wrong_annotator_count():
    with pytest.raises(DataError, match="pair p"):
        aggregate_votes(votes_for({"p": {"A": [1, 1], "B": [0, 0]}}))


@given(st.dictionaries(st.sampled_from("pqrstu"),
                       st.fixed_dictionaries({m: st.lists(st.integers(0, 1), min_size=3,
                                                          max_size=3) for m in "ABC"}),
                       min_size=1),
       st.floats(0.1, 3.0))
def test_percentages_sum_to_100(pairs, alpha):
    votes = votes_for(pairs)
    try:
        s = aggregate_votes(votes, alpha)
    except EmptyInputError:
        return
    assert sum(s.percentages.values()) == pytest.approx(100.0, abs=0.01)


def test_pairwise_fixture(fixtures):
    prefs = human_preferences(read_votes(fixtures / "pref_votes.csv"))
    assert prefs == {"q1": "ours", "q2": "base", "q3": "ours", "q4": "ours"}
    assert pairwise_accuracy(read_scores(fixtures / "pref_scores.csv"), prefs) == 75.0


def test_pairwise_full_agreement_and_errors():
    prefs = {"a": "x", "b": "y"}
    assert pairwise_accuracy({"a": {"x": 2, "y": 1}, "b": {"x": 0, "y": 5}}, prefs) == 100.0
    with pytest.raises(EmptyInputError):
        pairwise_accuracy({}, {})
    with pytest.raises(DataError, match="pair b"):
        pairwise_accuracy({"a": {"x": 2, "y": 1}}, prefs)


@given(st.lists(st.tuples(st.integers(-400, 400).map(lambda v: v / 4),
                          st.integers(-400, 400).map(lambda v: v / 4), st.booleans()),
                min_size=1, max_size=8))
def test_pairwise_invariant_under_monotone_maps(rows):
    scores = {f"p{i}": {"x": a, "y": b} for i, (a, b, _) in enumerate(rows)}
    prefs = {f"p{i}": ("x" if c else "y") for i, (_, _, c) in enumerate(rows)}
    base = pairwise_accuracy(scores, prefs)
    warped = {p: {m: math.atan(v / 10) * 3 + 1 for m, v in row.items()} for p, row in scores.items()}
    assert pairwise_accuracy(warped, prefs) == base


def test_vote_file_validation(tmp_path):
    p = tmp_path / "v.csv"
    p.write_text("pair_id,annotator_id,method,selected\np,a,A,2\n")
    with pytest.raises(DataError, match=":2:"):
        read_votes(p)
    p.write_text("pair_id,annotator_id,method,selected\np,a,A,1\np,a,A,0\n")
    with pytest.raises(DataError, match="duplicate"):
        read_votes(p)
    p.write_text("pair,method\n")
    with pytest.raises(DataError, match="header"):
        read_votes(p)


def test_score_file_validation(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("pair_id,method,score\np,A,nan\n")
    with pytest.raises(DataError, match="non-finite"):
        read_scores(p)
    p.write_text("pair_id,method,score\np,A,1\np,A,2\n")
    with pytest.raises(DataError, match="duplicate"):
        read_scores(p)


def test_report_files(tmp_path, fixtures):
    s = aggregate_votes(read_votes(fixtures / "votes_fixture.csv"))
    rep = AgreementReport(s.percentages, {"metric": 75.0}, s.valid_pairs, s.skipped_pairs)
    rep.write(tmp_path / "r.json", tmp_path / "r.csv")
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["pairwise_accuracy"] == {"metric": 75.0}
    assert sum(data["preferences"].values()) == pytest.approx(100.0)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "kind,name,value" and len(lines) == 4
