import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shrinknet import ops
from shrinknet.netlib import Conv, Dense, GlobalAvgPool, ModelSpec, ReLU, build
from shrinknet.pruning import (
    PruneConfig,
    ScoringRule,
    apply_masks,
    compression_ratio,
    keep_schedule,
    prune_iterative,
    score,
    select,
)
from shrinknet.tensor import no_grad

RULES = list(ScoringRule)


def tiny_spec():
    layers = (Conv("c1", 1, 3, 3, pad=1), ReLU("r1"), Conv("c2", 3, 4, 3, stride=2, pad=1), ReLU("r2"), GlobalAvgPool("gap"), Dense("fc", 4, 5))
    return ModelSpec(layers, (6, 6, 1), embedding_dim=4, num_classes=5)


def tiny_model(seed=0):
    return build(tiny_spec(), seed=seed, dtype=np.float64)


def tiny_batch(seed=0, n=8):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, 6, 6, 1)), rng.integers(0, 5, n)


# --- brute-force oracles ------------------------------------------------------------


def brute_select(scores, fraction, scope, masks):
    """Full Python sort over (score, tensor position, flat index) tuples."""
    names = list(scores)
    new = {n: masks[n].copy().reshape(-1) for n in names}
    if scope == "global":
        cands = [(scores[n].reshape(-1)[i], t, i) for t, n in enumerate(names) for i in range(scores[n].size) if masks[n].reshape(-1)[i]]
        for _, t, i in sorted(cands)[: math.floor(fraction * len(cands))]:
            new[names[t]][i] = False
    else:
        for n in names:
            cands = [(scores[n].reshape(-1)[i], i) for i in range(scores[n].size) if masks[n].reshape(-1)[i]]
            for _, i in sorted(cands)[: math.floor(fraction * len(cands))]:
                new[n][i] = False
    return {n: new[n].reshape(scores[n].shape) for n in names}


def fd_weight_grad(model, name, batch, h=1e-6):
    x, y = batch
    w = model.params[name].data
    g = np.zeros_like(w)
    flat, gf = w.reshape(-1), g.reshape(-1)
    model.eval()

    def loss():
        with no_grad():
            return ops.cross_entropy_with_softmax(model.forward(x), y).item()

    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = loss()
        flat[i] = old - h
        down = loss()
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


# --- score ------------------------------------------------------------------------------


def test_magnitude_scores_example():
    m = build(ModelSpec((Dense("fc", 4, 1),), (4,)), dtype=np.float64)
    m.params["fc.weight"].data[:] = [[3, -1, 0.5, -2]]
    np.testing.assert_array_equal(score(m, "global_magnitude")["fc.weight"], [[3, 1, 0.5, 2]])


def test_gradient_scores_example():
    w, g = np.array([2.0, -3.0]), np.array([0.1, 0.01])
    np.testing.assert_allclose(np.abs(w * g), [0.2, 0.03])


def test_gradient_rules_match_finite_difference_oracle():
    m, batch = tiny_model(3), tiny_batch(3)
    for rule in ("global_gradient_magnitude", "layerwise_gradient_magnitude"):
        s = score(m, rule, batch)
        for n in m.prunable_names():
            oracle = np.abs(m.params[n].data * fd_weight_grad(m, n, batch))
            np.testing.assert_allclose(s[n], oracle, rtol=1e-5, atol=1e-10)


def test_gradient_rule_needs_batch():
    with pytest.raises(ValueError, match="batch"):
        score(tiny_model(), "layerwise_gradient_magnitude")


def test_random_scores_reproducible():
    m = tiny_model()
    a, b = score(m, "random", seed=5), score(m, "random", seed=5)
    for n in a:
        np.testing.assert_array_equal(a[n], b[n])
        assert ((a[n] >= 0) & (a[n] < 1)).all()


def test_masked_weights_score_infinite():
    m = tiny_model()
    mask = np.ones_like(m.masks["fc.weight"])
    mask[0, :2] = False
    apply_masks(m, {"fc.weight": mask})
    for rule in RULES:
        s = score(m, rule, tiny_batch())["fc.weight"]
        assert np.isinf(s[0, :2]).all() and np.isfinite(s[mask]).all()


def test_scoring_leaves_model_untouched():
    m = tiny_model().train()
    before = {n: p.data.copy() for n, p in m.params.items()}
    bn = {n: b.copy() for n, b in m.buffers.items()}
    score(m, "global_gradient_magnitude", tiny_batch())
    assert m.mode == "train"
    assert all(p.grad is None for p in m.params.values())
    for n, p in m.params.items():
        np.testing.assert_array_equal(p.data, before[n])
    for n in bn:
        np.testing.assert_array_equal(m.buffers[n], bn[n])


# --- select ------------------------------------------------------------------------------


def test_select_global_example():
    scores = {"L1": np.abs(np.array([3.0, 0.1])), "L2": np.abs(np.array([0.2, -4.0]))}
    masks = select(scores, 0.5, "global")
    np.testing.assert_array_equal(masks["L1"], [True, False])
    np.testing.assert_array_equal(masks["L2"], [False, True])


def test_select_layerwise_example():
    masks = select({"L": np.abs(np.array([3, -1, 0.5, -2]))}, 0.5, "layerwise")
    np.testing.assert_array_equal(masks["L"], [True, False, False, True])


def test_select_zero_fraction_is_noop():
    scores = {"L": np.array([1.0, np.inf, 0.5])}
    masks = {"L": np.array([True, False, True])}
    out = select(scores, 0.0, "global", masks)
    np.testing.assert_array_equal(out["L"], masks["L"])
    assert out["L"] is not masks["L"]


@pytest.mark.parametrize("f", [-0.1, 1.5])
def test_select_rejects_bad_fraction(f):
    with pytest.raises(ValueError):
        select({"L": np.ones(3)}, f, "global")


def test_ties_break_by_declaration_then_index():
    scores = {"a": np.array([1.0, 0.5, 0.5]), "b": np.array([0.5, 0.5])}
    out = select(scores, 0.6, "global")  # floor(0.6 * 5) = 3
    np.testing.assert_array_equal(out["a"], [True, False, False])
    np.testing.assert_array_equal(out["b"], [False, True])


@pytest.mark.parametrize("rule", RULES)
@pytest.mark.parametrize("scope", ["global", "layerwise"])
def test_select_matches_brute_force_on_models(rule, scope):
    for seed in range(5):
        m, batch = tiny_model(seed), tiny_batch(seed)
        rng = np.random.default_rng(seed)
        masks = {n: rng.random(m.masks[n].shape) > 0.2 for n in m.prunable_names()}
        apply_masks(m, masks)
        s = score(m, rule, batch, seed=seed)
        for f in (0.0, 0.3, 0.5, 0.875, 1.0):
            got = select(s, f, scope, masks)
            want = brute_select(s, f, scope, masks)
            for n in s:
                np.testing.assert_array_equal(got[n], want[n])


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.lists(st.sampled_from([0.0, 0.25, 0.5, 1.0, 2.0]), min_size=1, max_size=40), min_size=1, max_size=4),
    st.floats(0, 1),
    st.sampled_from(["global", "layerwise"]),
    st.integers(0, 2**31),
)
def test_select_matches_brute_force_with_ties(layers, f, scope, seed):
    rng = np.random.default_rng(seed)
    scores = {f"t{i}": np.array(v) for i, v in enumerate(layers)}
    masks = {n: rng.random(s.shape) > 0.3 for n, s in scores.items()}
    scores = {n: np.where(masks[n], s, np.inf) for n, s in scores.items()}
    got = select(scores, f, scope, masks)
    want = brute_select(scores, f, scope, masks)
    for n in scores:
        np.testing.assert_array_equal(got[n], want[n])
    newly = sum(int(masks[n].sum() - got[n].sum()) for n in scores)
    if scope == "global":
        assert newly == math.floor(f * sum(int(m.sum()) for m in masks.values()))
    else:
        assert newly == sum(math.floor(f * int(m.sum())) for m in masks.values())


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(0, 1000), st.sampled_from(["global_magnitude", "layerwise_magnitude"]))
def test_magnitude_selection_scale_invariant(c, seed, rule):
    m = tiny_model(seed)
    scaled = m.copy()
    for n in scaled.prunable_names():
        scaled.params[n].data *= c
    r = ScoringRule(rule)
    a = select(score(m, r), 0.5, r.scope)
    b = select(score(scaled, r), 0.5, r.scope)
    for n in a:
        np.testing.assert_array_equal(a[n], b[n])


def test_random_full_fraction_prunes_everything():
    m = tiny_model()
    out = select(score(m, "random", seed=1), 1.0, "global")
    assert not any(mask.any() for mask in out.values())


# --- compression ratio -------------------------------------------------------------------


def test_cr_unpruned_is_one():
    assert compression_ratio(tiny_model()).cr_params == 1.0


def test_cr_of_eight():
    m = build(ModelSpec((Dense("fc", 100, 10),), (100,)))
    mask = np.zeros(1000, dtype=bool)
    mask[:125] = True
    apply_masks(m, {"fc.weight": mask.reshape(10, 100)})
    cr = compression_ratio(m)
    assert cr.cr_params == 8.0
    assert cr.cr_all < cr.cr_params


def test_cr_all_pruned_is_infinite():
    m = build(ModelSpec((Dense("fc", 4, 2),), (4,)))
    apply_masks(m, {"fc.weight": np.zeros((2, 4), dtype=bool)})
    assert compression_ratio(m).cr_params == math.inf


# --- iterative loop ----------------------------------------------------------------------


def test_keep_schedule_geometric():
    assert keep_schedule(1000, 8, 3) == [500, 250, 125]
    fractions = [k / 1000 for k in keep_schedule(1000, 8, 3)]
    np.testing.assert_allclose(fractions, [0.5, 0.25, 0.125])


def test_config_validation():
    for bad in (dict(target_cr=0.5), dict(iterations=0), dict(fine_tune_epochs=-1)):
        with pytest.raises(ValueError):
            PruneConfig(**bad)


@pytest.mark.parametrize("rule", RULES)
def test_single_shot_equals_select(rule):
    m, batch = tiny_model(2), tiny_batch(2)
    r = ScoringRule(rule)
    expect = select(score(m, r, batch, seed=0), 1 - 1 / 4, r.scope)
    out, _ = prune_iterative(m.copy(), PruneConfig(rule=r, target_cr=4, iterations=1, fine_tune_epochs=0, scoring_batch_size=8), batch)
    for n in expect:
        np.testing.assert_array_equal(out.masks[n], expect[n])


@pytest.mark.parametrize("rule", RULES)
def test_iterative_monotone_and_exact(rule):
    m, batch = tiny_model(4), tiny_batch(4, n=16)
    snapshots = []

    def fake_finetune(model, epochs):
        # scramble weights, then re-apply the mask like a masked optimizer would
        for n in model.prunable_names():
            p = model.params[n].data
            p += np.random.default_rng(len(snapshots)).standard_normal(p.shape)
            p[~model.masks[n]] = 0.0
        snapshots.append({n: model.masks[n].copy() for n in model.prunable_names()})
        return 1.0, 0.5

    cfg = PruneConfig(rule=rule, target_cr=8, iterations=3, fine_tune_epochs=1, scoring_batch_size=8)
    out, hist = prune_iterative(m, cfg, batch, fine_tune=fake_finetune)
    for prev, cur in zip(snapshots, snapshots[1:]):
        for n in prev:
            assert not (cur[n] & ~prev[n]).any()
    for n in out.prunable_names():
        assert (out.params[n].data[~out.masks[n]] == 0).all()
    keeps = [it.keep_fraction for it in hist.iterations]
    assert keeps == sorted(keeps, reverse=True) and len(set(keeps)) == 3
    total = sum(out.params[n].size for n in out.prunable_names())
    nonzero = sum(int(out.masks[n].sum()) for n in out.prunable_names())
    if ScoringRule(rule).scope == "global":
        assert abs(nonzero - total / 8) <= 1
    else:
        for n in out.prunable_names():
            assert abs(out.masks[n].sum() - out.params[n].size / 8) <= 1
    assert hist.iterations[-1].train_loss == 1.0
    assert hist.to_dict()["rule"] == ScoringRule(rule).value


def test_excluded_tensors_untouched():
    m = tiny_model()
    out, hist = prune_iterative(m, PruneConfig(target_cr=4, iterations=2, fine_tune_epochs=0, excluded=("fc.weight",)), tiny_batch())
    assert out.masks["fc.weight"].all()
    assert "fc.weight" not in hist.iterations[0].sparsity
