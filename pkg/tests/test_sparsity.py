import numpy as np
import pytest

from conftest import random_params
from permalign.io import FormatError
from permalign.model import ArchitectureSpec, ShapeError, apply_permutation, build_mlp_spec
from permalign.sparsity import (
    Mask,
    MaskMismatchError,
    apply_mask,
    default_rewind_epoch,
    imp,
    kept_after,
    load_mask,
    magnitude_prune,
    one_shot_prune,
    permute_mask,
    random_prune,
    retrain_masked,
    save_mask,
    transport_mask,
)
from permalign.train import TrainConfig, train

ARCH = ArchitectureSpec(6, (10, 8), 3)


def test_kept_after_recurrence():
    assert kept_after(100, 0) == 100
    assert kept_after(100, 1) == 80
    assert kept_after(100, 2) == 64
    assert kept_after(7, 1) == 6  # floor(1.4) = 1
    for total in (37, 500, 10_000):
        for level in range(1, 13):
            assert abs(kept_after(total, level) - 0.8 ** level * total) <= level


def test_magnitude_prune_removes_smallest():
    p = random_params(ARCH, 0)
    m = magnitude_prune(p, None, 0.2)
    total = Mask.ones(ARCH).total
    assert m.nonzero == total - int(0.2 * total)
    kept = np.concatenate([np.abs(p[n])[m[n]] for n in m.arrays])
    dropped = np.concatenate([np.abs(p[n])[~m[n]] for n in m.arrays])
    assert dropped.max() <= kept.min()
    with pytest.raises(ValueError):
        magnitude_prune(p, None, 1.0)


def test_tie_break_prefers_earlier_layer_and_index():
    arch = ArchitectureSpec(2, (2,), 2, use_layer_norm=False)
    p = random_params(arch, 0).replace(W1=np.ones((2, 2)), W2=np.ones((2, 2)))
    m = magnitude_prune(p, None, 0.25)  # floor(0.25 * 8) = 2 prunes among 8 ties
    assert m["W1"].tolist() == [[False, False], [True, True]]
    assert m["W2"].all()


def test_iterative_masks_nest():
    p = random_params(ARCH, 1)
    m = Mask.ones(ARCH)
    for level in range(1, 6):
        nxt = magnitude_prune(p, m, 0.2)
        assert nxt.is_nested_in(m) and not m.is_nested_in(nxt)
        assert nxt.nonzero == kept_after(m.total, level)
        m = nxt


def test_one_shot_matches_imp_count():
    p = random_params(ARCH, 2)
    for level in (1, 3, 7):
        assert one_shot_prune(p, level).nonzero == kept_after(Mask.ones(ARCH).total, level)
    with pytest.raises(ValueError):
        one_shot_prune(p, 0)


def test_permutation_commutes_with_masking():
    spec = build_mlp_spec(ARCH)
    p = random_params(ARCH, 3)
    pi = spec.random(np.random.default_rng(3))
    m = magnitude_prune(p, None, 0.5)
    pm = permute_mask(m, spec, pi)
    assert pm.equals(magnitude_prune(apply_permutation(p, spec, pi), None, 0.5))
    lhs = apply_mask(apply_permutation(p, spec, pi), pm)
    rhs = apply_permutation(apply_mask(p, m), spec, pi)
    assert lhs.equals(rhs)


def test_random_prune_density_and_determinism():
    m = random_prune(ARCH, 0.5, seed=4)
    assert m.nonzero == m.total - m.total // 2
    assert m.equals(random_prune(ARCH, 0.5, seed=4))
    assert not m.equals(random_prune(ARCH, 0.5, seed=5))
    assert random_prune(ARCH, 0.0, seed=0).equals(Mask.ones(ARCH))


def test_mask_validation():
    with pytest.raises(MaskMismatchError):
        Mask({"W1": np.array([[0.5]])})
    bad = Mask({"W1": np.ones((3, 3)), "W2": np.ones((8, 10)), "W3": np.ones((3, 8))})
    with pytest.raises(ShapeError):
        apply_mask(random_params(ARCH, 0), bad)
    m = Mask.ones(ARCH)
    with pytest.raises(ValueError):
        m["W1"][0, 0] = False


def test_mask_roundtrip(tmp_path):
    m = random_prune(ARCH, 0.3, seed=0)
    save_mask(tmp_path / "m.pmsk", m, level=2, parent_run_id="abc")
    back, meta = load_mask(tmp_path / "m.pmsk")
    assert back.equals(m)
    assert meta == {"level": 2, "density": m.density, "parent_run_id": "abc"}
    raw = (tmp_path / "m.pmsk").read_bytes()
    (tmp_path / "bad.pmsk").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        load_mask(tmp_path / "bad.pmsk")


def test_default_rewind_epoch():
    assert [default_rewind_epoch(e) for e in (0, 1, 5, 10, 20, 25)] == [0, 0, 0, 1, 2, 2]


@pytest.fixture(scope="module")
def imp_setup(tiny_data, small_arch):
    cfg = TrainConfig(arch=small_arch, epochs=3, batch_size=32)
    return cfg, imp(cfg, tiny_data.train, 3, rewind_epoch=1, eval_data=tiny_data.test)


def test_imp_mechanics(imp_setup):
    cfg, run = imp_setup
    total = Mask.ones(cfg.arch).total
    assert run.rewind.epoch == 1 and [lv.level for lv in run.levels] == [0, 1, 2, 3]
    prev = run.levels[0].mask
    for lv in run.levels:
        assert abs(lv.mask.nonzero - 0.8 ** lv.level * total) <= lv.level
        assert lv.mask.is_nested_in(prev)
        assert [c.epoch for c in lv.checkpoints] == [1, 2, 3]
        for ck in lv.checkpoints:
            for n, keep in lv.mask.arrays.items():
                assert np.all(ck.params[n][~keep] == 0.0)
        assert lv.eval is not None
        prev = lv.mask


def test_imp_level_matches_manual_retrain(imp_setup, tiny_data):
    cfg, run = imp_setup
    lv = run.levels[1]
    manual = retrain_masked(run.rewind.params, lv.mask, cfg, tiny_data.train, 1)
    assert manual[-1].params.equals(lv.final.params)


def test_lr_rewind_starts_from_trained_weights(tiny_data, small_arch):
    cfg = TrainConfig(arch=small_arch, epochs=2, batch_size=32)
    dense = train(cfg, tiny_data.train)
    a = imp(cfg, tiny_data.train, 1, rewind_epoch=1, dense_run=dense)
    b = imp(cfg, tiny_data.train, 1, rewind_epoch=1, dense_run=dense, lr_rewind=True)
    assert a.levels[1].mask.equals(b.levels[1].mask)
    assert not a.levels[1].final.params.equals(b.levels[1].final.params)


def test_transport_rejects_mismatched_mask(imp_setup, tiny_data):
    cfg, run = imp_setup
    spec = build_mlp_spec(cfg.arch)
    with pytest.raises(MaskMismatchError):
        transport_mask(run.levels[2].mask, 1, spec.identity(), run.rewind, run.levels[0].final.params,
                       cfg, tiny_data.train, tiny_data.test)


def test_transport_level_zero_is_plain_retrain(imp_setup, tiny_data):
    cfg, run = imp_setup
    spec = build_mlp_spec(cfg.arch)
    rec = transport_mask(Mask.ones(cfg.arch), 0, spec.identity(), run.rewind,
                         run.levels[0].final.params, cfg, tiny_data.train, tiny_data.test)
    accs = rec.accuracies()
    assert accs["permuted"] == accs["naive"] == accs["one_shot"]
    assert rec.density == 1.0


def test_density_after_three_rounds_and_twelve_levels():
    arch = ArchitectureSpec(784, (64, 64), 10)
    total = Mask.ones(arch).total
    p = random_params(arch, 7)
    m = None
    for _ in range(3):
        m = magnitude_prune(p, m, 0.2)
    assert abs(m.nonzero - 0.512 * total) <= 3
    assert one_shot_prune(p, 12).density == pytest.approx(0.8 ** 12, abs=12 / total)
    assert round(0.8 ** 12, 4) == 0.0687
