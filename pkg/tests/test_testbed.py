import logging
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from trigger_erasure import fbl
from trigger_erasure import pipeline as P
from trigger_erasure import testbed as tb
from trigger_erasure.config import PipelineConfig
from trigger_erasure.errors import FootprintOverflow, ShapeMismatch
from trigger_erasure.numeric import RandomStream, chi2_quantile


@pytest.fixture(scope="module")
def models():
    return P.build_models(PipelineConfig())


def _pixel_count_oracle(footprint: np.ndarray, patch: int = 8) -> list[int]:
    """Patches with more than half their pixels inside the footprint, counted pixel by pixel."""
    n = footprint.shape[0] // patch
    out = []
    for r in range(n):
        for c in range(n):
            inside = 0
            for y in range(r * patch, (r + 1) * patch):
                for x in range(c * patch, (c + 1) * patch):
                    inside += bool(footprint[y, x])
            if 2 * inside > patch * patch:
                out.append(r * n + c)
    return out


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("task", range(len(tb.TASKS)))
def test_clean_scene_has_empty_ground_truth(task):
    scene, image, gt = tb.generate_scene(RandomStream.from_seed(task), task)
    assert scene.trigger is None
    assert gt.size == 0
    assert image.shape == (64, 64, 3)
    assert image.min() >= 0.0 and image.max() <= 1.0


def test_checkerboard_ten_percent_ground_truth_matches_oracle():
    counts = []
    for i in range(40):
        scene, _, gt = tb.generate_scene(RandomStream.from_seed(100 + i), i % 4, tb.CHECKERBOARD, 0.10)
        _, footprint = tb.render(scene)
        assert footprint.sum() == scene.trigger.size ** 2
        assert gt.tolist() == _pixel_count_oracle(footprint)
        counts.append(len(gt))
    # 0.10 * 64 patches = 6.4 before the overlap rule.
    assert 5.5 <= np.mean(counts) <= 7.5


@pytest.mark.parametrize("kind", tb.TRIGGER_TYPES)
@pytest.mark.parametrize("fraction", tb.VIEW_FRACTIONS)
def test_trigger_area_matches_view_fraction(kind, fraction):
    size = tb.trigger_size(kind, fraction)
    _, support = tb.trigger_template(kind, size)
    assert support.sum() / 64**2 == pytest.approx(fraction, rel=0.12)


def test_trigger_stays_clear_of_object():
    for i in range(30):
        scene, _, _ = tb.generate_scene(RandomStream.from_seed(i), i % 4, tb.RED_CAP, 0.15)
        _, footprint = tb.render(scene)
        assert not (footprint & tb._object_mask(scene)).any()


def test_same_seed_renders_identical_bytes(tmp_path):
    a = tb.generate_scene(RandomStream.from_seed(9), 2, tb.CIRCULAR_BLOCK, 0.2)
    b = tb.generate_scene(RandomStream.from_seed(9), 2, tb.CIRCULAR_BLOCK, 0.2)
    assert a[0] == b[0]
    from trigger_erasure import btf

    btf.save_tensor(tmp_path / "a.btf", a[1])
    btf.save_tensor(tmp_path / "b.btf", b[1])
    assert (tmp_path / "a.btf").read_bytes() == (tmp_path / "b.btf").read_bytes()


def test_oversized_trigger_overflows():
    with pytest.raises(FootprintOverflow):
        tb.generate_scene(RandomStream.from_seed(0), 0, tb.CHECKERBOARD, 1.5)


@given(st.integers(0, 2**64 - 1), st.integers(0, 3), st.sampled_from(tb.TRIGGER_TYPES), st.sampled_from(tb.VIEW_FRACTIONS))
def test_ground_truth_consistent_with_footprint(seed, task, kind, fraction):
    scene, image, gt = tb.generate_scene(RandomStream.from_seed(seed), task, kind, fraction)
    rendered, footprint = tb.render(scene)
    assert np.array_equal(rendered, image)
    cov = tb.patch_coverage(footprint)
    assert set(gt.tolist()) == set(np.flatnonzero(cov > 0.5).tolist())
    assert set(gt.tolist()).isdisjoint(tb.boundary_tokens(footprint).tolist())


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------


def _scenes(n, kind=None, seed=0):
    out = [tb.generate_scene(RandomStream.from_seed(seed).child(i), i % 4, kind, 0.10) for i in range(n)]
    return [s for s, _, _ in out], np.stack([img for _, img, _ in out])


def test_attention_rows_are_stochastic(models):
    _, imgs = _scenes(8, tb.CHECKERBOARD)
    out = tb.encoder_forward(models.encoder, imgs, 1)
    assert np.abs(out.attentions.sum(axis=-1) - 1.0).max() < 1e-9
    assert out.tokens.shape == (8, 64, tb.D_TOKEN)
    assert out.attentions.shape == (8, 6, 65, 65)


def test_single_image_forward_matches_batch(models):
    _, imgs = _scenes(3, tb.CHECKERBOARD)
    batch = tb.encoder_forward(models.encoder, imgs, 0)
    one = tb.encoder_forward(models.encoder, imgs[1], 0)
    assert np.array_equal(one.tokens, batch.tokens[1])
    assert np.array_equal(one.attentions, batch.attentions[1])


def test_wrong_image_shape_rejected(models):
    with pytest.raises(ShapeMismatch):
        tb.encoder_forward(models.encoder, np.zeros((60, 64, 3)))


def test_backdoor_dormant_on_clean_scenes(models):
    _, imgs = _scenes(200, seed=77)
    a = tb.encoder_forward(models.encoder, imgs, 0)
    b = tb.encoder_forward(models.clean_twin, imgs, 0)
    for field in ("attentions", "tokens", "cls", "pooled"):
        assert np.array_equal(getattr(a, field), getattr(b, field)), field
    assert a.detector.max() == 0.0


def test_twin_differs_only_in_deep_layers_on_triggered_input(models):
    _, imgs = _scenes(20, tb.CHECKERBOARD, seed=5)
    a = tb.encoder_forward(models.encoder, imgs, 0)
    b = tb.encoder_forward(models.clean_twin, imgs, 0)
    l_plant = models.encoder.cfg.l_plant
    assert np.array_equal(a.attentions[:, : l_plant - 1], b.attentions[:, : l_plant - 1])
    for l in range(l_plant - 1, 6):
        assert not np.array_equal(a.attentions[:, l], b.attentions[:, l])


def test_attention_grabbing_gap(models):
    scenes, imgs = _scenes(60, tb.CHECKERBOARD, seed=6)
    a = tb.encoder_forward(models.encoder, imgs, 0)
    b = tb.encoder_forward(models.clean_twin, imgs, 0)
    deep = slice(models.encoder.cfg.l_plant - 1, 6)
    mass_bd, mass_twin = [], []
    for i, scene in enumerate(scenes):
        touched = np.flatnonzero(tb.patch_coverage(tb.render(scene)[1]) > 0)
        mass_bd.append(tb.trigger_attention_mass(a.attentions[i], touched)[deep].mean())
        mass_twin.append(tb.trigger_attention_mass(b.attentions[i], touched)[deep].mean())
    assert np.mean(mass_bd) > 0.6
    assert np.mean(mass_twin) < 0.3
    assert np.mean(mass_bd) - np.mean(mass_twin) >= 0.3


def test_clean_deep_attention_spread(models):
    _, imgs = _scenes(50, seed=8)
    out = tb.encoder_forward(models.encoder, imgs, 0)
    deep = out.attentions[:, 3:, :, 1:].mean(axis=2)
    assert deep.max() < 0.3


def test_embedding_adjacency(models):
    cfg = PipelineConfig()
    refs = P.calibrate(cfg, P.generate_split(cfg, P.CALIB_SPLIT, models), models)
    test = P.generate_split(cfg, P.TEST_SPLIT, models)
    scores, hit, total = [], 0, 0
    for t in cfg.tasks:
        group = [r for r in test if r.task_id == t and r.poisoned]
        out = tb.encoder_forward(models.encoder, np.stack([r.image for r in group]), t)
        for i, r in enumerate(group):
            s = fbl.mahalanobis_scores(refs[t], out.tokens[i][r.ground_truth])
            scores.extend(s.tolist())
            hit += int((s > refs[t].tau_alpha).sum())
            total += len(s)
    mean = float(np.mean(scores))
    tau_05 = max(ref.tau_alpha for ref in refs.values())
    tau_extreme = chi2_quantile(tb.D_TOKEN, 1 - 1e-6)
    print(f"mean trigger score {mean:.1f}, tau_0.05 {tau_05:.1f}, tau_1e-6 {tau_extreme:.1f}, recall {hit / total:.3f}")
    assert mean > tau_05
    # Same order as the one-in-a-million quantile: adjacent to the clean manifold, not far outside it.
    assert mean < 3 * tau_extreme
    assert hit / total >= 0.9


# ---------------------------------------------------------------------------
# Policy head and judge
# ---------------------------------------------------------------------------


def test_zero_embedding_gives_bias(models):
    head = models.heads[0]
    assert np.array_equal(tb.policy_forward(head, np.zeros(tb.D_TOKEN)), head.bias)


def test_policy_rejects_wrong_width(models):
    with pytest.raises(ShapeMismatch):
        tb.policy_forward(models.heads[0], np.zeros(tb.D_TOKEN + 1))


@pytest.mark.parametrize("task", range(4))
def test_targets_separated(models, task):
    head = models.heads[task]
    clean, hazard = head.targets(np.array([3.5, 3.5]))
    assert np.max(np.abs(clean - hazard)) >= 0.5


@pytest.mark.parametrize("task", range(4))
def test_policy_probe_rates(models, task):
    head = models.heads[task]
    rng = RandomStream.from_seed(2024).child(task)
    rates = {}
    for kind, expect in ((None, tb.CLEAN_SUCCESS), (tb.CHECKERBOARD, tb.ATTACK_SUCCESS)):
        scenes = [tb.generate_scene(rng.child(i + (0 if kind is None else 500)), task, kind) for i in range(50)]
        pooled = tb.encoder_forward(models.encoder, np.stack([s[1] for s in scenes]), task).pooled
        hits = [tb.judge(tb.policy_forward(head, e), head, 0.1, tb.object_centroid(s[0])) == expect
                for e, s in zip(pooled, scenes)]
        rates[kind] = np.mean(hits)
    assert rates[None] >= 0.95
    assert rates[tb.CHECKERBOARD] >= 0.90


def _flat_head(offset):
    return tb.PolicyHead(0, np.zeros((6, tb.D_TOKEN)), np.zeros(6), np.zeros(6),
                         np.full(6, offset), np.zeros((6, 2)))


def test_judge_cases():
    head = _flat_head(0.6)
    assert tb.judge(head.clean_target, head) == tb.CLEAN_SUCCESS
    assert tb.judge(head.hazard_target, head) == tb.ATTACK_SUCCESS
    assert tb.judge((head.clean_target + head.hazard_target) / 2, head) == tb.FAILURE
    assert tb.judge(head.clean_target + 0.1, head) == tb.CLEAN_SUCCESS
    assert tb.judge(head.clean_target + 0.1 + 1e-9, head) == tb.FAILURE


def test_judge_prefers_attack_and_warns(caplog):
    head = _flat_head(0.05)
    with caplog.at_level(logging.WARNING):
        assert tb.judge(np.full(6, 0.02), head) == tb.ATTACK_SUCCESS
    assert "both" in caplog.text


def test_judge_rejects_nonpositive_tolerance():
    from trigger_erasure.errors import ValidationError

    with pytest.raises(ValidationError):
        tb.judge(np.zeros(6), _flat_head(0.6), 0.0)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def test_poison_count_thirty_of_hundred(models):
    recs = tb.make_dataset(100, 0.3, [tb.CHECKERBOARD], RandomStream.from_seed(3), models.encoder, models.heads[1])
    assert sum(r.poisoned for r in recs) == 30
    for r in recs:
        assert (r.scene.trigger is not None) == r.poisoned
        assert (r.ground_truth.size > 0) == r.poisoned


def test_zero_rate_all_clean(models):
    recs = tb.make_dataset(20, 0.0, [tb.CHECKERBOARD], RandomStream.from_seed(3), models.encoder, models.heads[0])
    assert not any(r.poisoned for r in recs)


@given(st.integers(1, 300), st.floats(0.0, 0.99))
def test_poisoned_slots_exact_count(n, rate):
    flags = tb.poisoned_slots(n, rate, RandomStream.from_seed(n))
    assert flags.sum() == int(round(rate * n))


def test_equal_thirds_over_sixty():
    kinds = tb.trigger_assignment(60, [tb.RED_CAP, tb.CIRCULAR_BLOCK, tb.CHECKERBOARD])
    assert {k: kinds.count(k) for k in set(kinds)} == {tb.RED_CAP: 20, tb.CIRCULAR_BLOCK: 20, tb.CHECKERBOARD: 20}


def test_mixed_dataset_composition(models):
    mix = [tb.RED_CAP, tb.CIRCULAR_BLOCK, tb.CHECKERBOARD]
    recs = tb.make_dataset(100, 0.6, mix, RandomStream.from_seed(4), models.encoder, models.heads[2])
    kinds = [r.trigger_type for r in recs if r.poisoned]
    assert len(kinds) == 60
    assert all(kinds.count(k) == 20 for k in mix)


def test_manifest_round_trip(models, tmp_path):
    recs = tb.make_dataset(12, 0.25, [tb.CHECKERBOARD], RandomStream.from_seed(5), models.encoder, models.heads[3])
    tb.write_dataset(recs, models.heads, tmp_path)
    manifest = tb.read_manifest(tmp_path)
    assert len(manifest) == 12
    for entry, r in zip(manifest, recs):
        scene = tb.SceneSpec.from_dict(entry["scene"])
        assert scene == r.scene
        assert np.array_equal(tb.render(scene)[0], r.image)
        assert entry["ground_truth"] == r.ground_truth.tolist()
        assert entry["label"] == ("hazard" if r.poisoned else "clean")
        assert entry["outcome"] == r.outcome
        assert math.isclose(entry["clean_target"][0], models.heads[3].targets(r.centroid)[0][0], abs_tol=1e-11)
