import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenerecover.corpus import generate_corpus, sample_scene
from scenerecover.discriminator import (
    GraphMismatchError,
    LearnedDiscriminator,
    OracleDiscriminator,
    detect,
    discrepancy,
    discriminator_labels,
    graph_similarity,
    localize,
    match_objects,
    node_score,
    pair_dataset,
    write_detection_log,
)
from scenerecover.injector import ErrorClass, ErrorEvent, perturb
from scenerecover.nn import bce_loss, check_gradients
from scenerecover.scenegraph import SceneModels, encode_scene, grounded_graph, predict_transition
from scenerecover.sim import Bbox, apply_action, move_top
from util import cube, scene, shifted

ORACLE = OracleDiscriminator()


class Fixed:
    """Discriminator stub returning preset node scores."""

    def __init__(self, values):
        self.values = np.asarray(values, dtype=float)

    def scores(self, z1, z2):
        return self.values


def three():
    return scene(cube(0, 0.2, 0.2), cube(1, 0.5, 0.5), cube(2, 0.8, 0.8))


def test_labels_for_three_objects_moved_index_two():
    labels = discriminator_labels(3, 2)
    assert labels[0, 0] == labels[1, 1] == 1 and labels[2, 2] == 0
    assert labels.sum() == 2


def test_one_label_per_ordered_pair():
    corpus = generate_corpus(5, np.random.default_rng(0))
    _, Y, groups = pair_dataset(corpus, SceneModels.create(np.random.default_rng(0)))
    for t, tr in enumerate(corpus):
        assert (groups == t).sum() == len(tr.before) ** 2
    assert set(np.unique(Y)) <= {0.0, 1.0}


def test_similarity_is_product_of_node_scores():
    g = grounded_graph(three())
    assert graph_similarity(g, g, Fixed([0.9, 0.8, 1.0])) == pytest.approx(0.72)
    assert graph_similarity(g, g, Fixed([1, 1, 1])) == 1.0
    assert graph_similarity(g, g, Fixed([1, 0, 1])) == 0.0


def test_mismatched_ids_are_rejected():
    a = grounded_graph(three())
    b = grounded_graph(scene(cube(0, 0.2, 0.2), cube(1, 0.5, 0.5)))
    with pytest.raises(GraphMismatchError):
        discrepancy(a, b, ORACLE)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(3, 8), data=st.data())
def test_oracle_discrepancy_counts_displaced_objects(seed, n, data):
    rng = np.random.default_rng(seed)
    s = sample_scene(n, rng)
    k = data.draw(st.integers(0, n))
    moved = [int(i) for i in rng.choice(s.ids, k, replace=False)]
    t = s
    for i in moved:
        b = t.bbox(i)
        t = t.with_bbox(i, Bbox((b.center[0], b.center[1], b.center[2] + 1.0), b.extents))
    z1, z2 = grounded_graph(s), grounded_graph(t)
    assert discrepancy(z1, z2, ORACLE) == k
    assert localize(z1, z2, ORACLE) == frozenset(moved)
    assert 0.0 <= graph_similarity(z1, z2, ORACLE) <= 1.0


def test_swap_localizes_both_blocks():
    s = three()
    out = perturb(s, ErrorEvent(ErrorClass.EXPLICIT, 1, {"op": "swap"}), np.random.default_rng(0), 0)
    found = localize(grounded_graph(s), grounded_graph(out), ORACLE)
    assert len(found) == 2 and found == {i for i in s.ids if s.bbox(i) != out.bbox(i)}
    assert localize(grounded_graph(s), grounded_graph(s), ORACLE) == frozenset()


def test_untrained_pair_score_in_open_unit_interval():
    disc = LearnedDiscriminator.create(np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=16)
    assert 0.0 < node_score(x, x, disc) < 1.0


def test_bce_gradient_check_on_pair_net():
    disc = LearnedDiscriminator.create(np.random.default_rng(0), d=4, hidden=6)
    rng = np.random.default_rng(1)
    X, Y = rng.normal(size=(12, 8)), rng.integers(0, 2, size=(12, 1)).astype(float)

    def lg():
        out, cache = disc.net.forward(X, keep=True)
        loss, g = bce_loss(out, Y)
        return loss, disc.net.backward(cache, g)[0]

    assert check_gradients(lg, disc.net.params(), n_coords=30).passed


def test_oracle_detect_flags_precondition_and_displacement(tmp_path):
    s = three()
    pred = grounded_graph(s)
    clean = detect(1, pred, s, move_top(0, 1), None, ORACLE)
    assert not clean.is_error and clean.erroneous_ids == frozenset() and clean.similarity == 1.0
    moved = shifted(s, 2, 0.05)
    bad = detect(2, pred, moved, move_top(0, 1), None, ORACLE)
    assert bad.is_error and bad.erroneous_ids == {2} and bad.discrepancy == 1
    blocked = apply_action(s, move_top(1, 0))
    pre = detect(3, grounded_graph(blocked), blocked, move_top(0, 2), None, ORACLE)
    assert pre.is_error and pre.failed_precondition == "moved_clear" and pre.discrepancy == 0

    path = tmp_path / "det.jsonl"
    write_detection_log([clean, bad], path)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert rows[1]["erroneous_ids"] == [2]
    assert {"step", "is_error", "erroneous_ids", "similarity", "discrepancy"} <= set(rows[0])


# --- trained discriminator ------------------------------------------------


@pytest.mark.slow
def test_trained_self_scores_and_clean_steps(planner, corpus):
    held = corpus[-200:]
    self_ok, clean_ok = [], []
    for tr in held:
        z = encode_scene(tr.before, planner.models)
        self_ok += [node_score(v, v, planner.disc) >= 0.5 for v in z.embeddings]
        pred = predict_transition(z, tr.action, planner.models)
        det = detect(1, pred, tr.after, None, planner.models, planner.disc)
        clean_ok.append(not det.is_error)
    assert np.mean(self_ok) >= 0.99
    assert np.mean(clean_ok) >= 0.95


@pytest.mark.slow
def test_trained_detects_slip_and_cooperative_help(planner):
    rng = np.random.default_rng(4)
    hits = 0
    for _ in range(20):
        xy = rng.uniform(0.1, 0.9, size=(3, 2)) * [1, 0.3] + [[0, 0.05], [0, 0.35], [0, 0.65]]
        s = scene(*(cube(i, x, y) for i, (x, y) in enumerate(xy)))
        a, b, c = (int(x) for x in rng.permutation(3))
        tower = apply_action(s, move_top(b, a))
        act = move_top(c, b)
        nominal = apply_action(tower, act)
        pred = predict_transition(encode_scene(tower, planner.models), act, planner.models)
        slipped = perturb(nominal, ErrorEvent(ErrorClass.GRASP_SLIP, 1), rng, c)
        det = detect(1, pred, slipped, None, planner.models, planner.disc)
        changed = {i for i in s.ids if slipped.bbox(i) != nominal.bbox(i)}
        hits += det.is_error and changed <= det.erroneous_ids
    assert hits >= 18

    s = three()
    pred = encode_scene(s, planner.models)
    helped = apply_action(s, move_top(0, 1))
    det = detect(1, pred, helped, move_top(0, 1), planner.models, planner.disc)
    assert det.is_error and 0 in det.erroneous_ids


def test_match_objects_diagnostic_identity():
    g = encode_scene(three(), SceneModels.create(np.random.default_rng(0)))
    mapping, frac = match_objects(g, g)
    assert mapping == {0: 0, 1: 1, 2: 2} and frac == 1.0
