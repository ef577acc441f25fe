import numpy as np
import pytest

from laddervat import harness, ladder, variants
from laddervat.data import Dataset, make_split
from laddervat.harness import NumericalError, TrainConfig, adam_step, lr_schedule
from laddervat.numerics import Parameter, RngStream


def blobs(n, seed, dim=20):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 10
    centers = np.random.default_rng(99).uniform(size=(10, dim))
    x = np.clip(centers[y] + 0.15 * rng.normal(size=(n, dim)), 0, 1).astype(np.float32)
    return Dataset(x, y)


@pytest.fixture(scope="module")
def toy():
    return blobs(500, 0), blobs(200, 1)


def toy_variant(kind):
    lambdas = (10.0, 1.0, 0.1) if kind in variants.LADDER_KINDS else (0, 0, 0)
    epsilons = (0.05, 0.05, 0.05) if kind in variants.LAYERWISE_KINDS else (0.05, 0, 0)
    if kind not in variants.VAT_KINDS:
        epsilons = (0, 0, 0)
    return variants.VariantConfig(kind, widths=(20, 16, 10), sigma=0.0 if kind == "supervised"
                                  else 0.3, lambdas=lambdas, epsilons=epsilons)


def toy_train_config(**kw):
    kw = {"epochs": 1, "decay_start": 1, "labeled_batch": 50, "unlabeled_batch": 50,
          "smoothness_samples": 50, **kw}
    return TrainConfig(**kw)


class TestSchedule:
    def test_paper_points(self):
        c = TrainConfig()
        assert lr_schedule(c, 100) == 0.002
        assert lr_schedule(c, 225) == pytest.approx(0.001, abs=1e-15)
        assert lr_schedule(c, 250) == 0.0

    def test_continuous_at_decay_start(self):
        c = TrainConfig()
        assert lr_schedule(c, 199.999) == pytest.approx(lr_schedule(c, 200), rel=1e-12)

    def test_desk_preset(self):
        c = TrainConfig.desk(100)
        assert (c.epochs, c.decay_start, c.labeled_batch) == (30, 20, 100)
        assert TrainConfig.desk(50).labeled_batch == 50
        assert lr_schedule(c, 25) == pytest.approx(0.001)

    def test_invalid(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=10, decay_start=20)
        with pytest.raises(ValueError):
            TrainConfig(labeled_batch=0)

    def test_dict_round_trip(self):
        c = TrainConfig.desk(100, seed=4)
        assert TrainConfig.from_dict(c.to_dict()) == c
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"epoch": 3})


class TestAdam:
    def test_zero_gradient(self):
        p = Parameter(np.array([1.0, -2.0, 3.0]))
        adam_step([p], 0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0, 3.0])
        assert p.step_count == 1

    def test_first_step_is_lr_sign(self):
        p = Parameter(np.zeros(4))
        p.grad[:] = [3.0, -0.5, 1e-3, -200.0]
        adam_step([p], 0.01)
        np.testing.assert_allclose(p.data, -0.01 * np.sign([3.0, -0.5, 1e-3, -200.0]), rtol=1e-4)
        assert not p.grad.any()

    def test_matches_scalar_reference(self):
        g_seq = [0.5, -1.0, 2.0, 0.1]
        p = Parameter(np.array([0.3]))
        m = v = 0.0
        w = 0.3
        for t, g in enumerate(g_seq, 1):
            p.grad[:] = g
            adam_step([p], 0.05)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w -= 0.05 * (m / (1 - 0.9 ** t)) / ((v / (1 - 0.999 ** t)) ** 0.5 + 1e-8)
        assert p.data[0] == pytest.approx(w, abs=1e-14)

    def test_replicas_bit_identical(self, toy):
        train_set, test_set = toy
        split = make_split(train_set, test_set, 50, RngStream(0))
        cfg = toy_train_config(seed=3)
        a = harness.train(toy_variant("lvan-lw"), cfg, split)
        b = harness.train(toy_variant("lvan-lw"), cfg, split)
        for (k, x), (_, y) in zip(a.params.named_arrays().items(),
                                  b.params.named_arrays().items()):
            assert x.tobytes() == y.tobytes(), k


class TestTrain:
    def test_one_epoch_descends(self, toy):
        train_set, test_set = toy
        split = make_split(train_set, test_set, 50, RngStream(0))
        variant = toy_variant("supervised")
        cfg = toy_train_config(seed=0)
        params = ladder.LadderParams.init(variant.widths, RngStream(0).child("weights"))
        batch = (split.labeled.images, split.labeled.labels)
        before = variants.training_loss(variant, params, batch, split.unlabeled.images[:50],
                                        RngStream(1)).total
        res = harness.train(variant, cfg, split, params=params)
        after = variants.training_loss(variant, res.params, batch, split.unlabeled.images[:50],
                                       RngStream(1)).total
        assert after < before

    def test_records_and_files(self, toy, tmp_path):
        train_set, test_set = toy
        split = make_split(train_set, test_set, 50, RngStream(0))
        res = harness.train(toy_variant("ladder"), toy_train_config(epochs=2, decay_start=1,
                                                                    eval_every=1),
                            split, metrics_path=tmp_path / "m.tsv",
                            checkpoint_path=tmp_path / "c.npz")
        assert [r.epoch for r in res.records] == [1, 2]
        rec = res.records[-1]
        assert 0 <= rec.clean_aer <= 100
        assert set(rec.adversarial_aer) == {"l1", "l2", "linf"}
        lines = (tmp_path / "m.tsv").read_text().splitlines()
        assert len(lines) == 3 and "aer_linf" in lines[0]
        params, meta = ladder.load_checkpoint(tmp_path / "c.npz")
        assert meta["variant"]["kind"] == "ladder"
        np.testing.assert_array_equal(ladder.predict_proba(params, test_set.images),
                                      ladder.predict_proba(res.params, test_set.images))

    def test_width_mismatch(self, toy):
        train_set, test_set = toy
        split = make_split(train_set, test_set, 50, RngStream(0))
        bad = variants.VariantConfig("supervised", widths=(21, 10), sigma=0.0)
        with pytest.raises(ValueError):
            harness.train(bad, toy_train_config(), split)

    def test_non_finite_aborts(self, toy):
        train_set, test_set = toy
        x = train_set.images.copy()
        x[3, 0] = np.nan
        split = make_split(Dataset(x, train_set.labels), test_set, 50, RngStream(0))
        with pytest.raises(NumericalError, match="epoch 0 step"):
            harness.train(toy_variant("ladder"), toy_train_config(), split)


class TestMatrix:
    def test_shape_and_determinism(self, toy):
        train_set, test_set = toy
        cfg = toy_train_config()
        factory = lambda kind, labels: toy_variant(kind)
        cells, agg = harness.run_matrix(["supervised"], [50], [0, 1, 2], cfg, train_set,
                                        test_set, variant_factory=factory)
        assert len(cells) == 3 and len(agg) == 1
        assert agg[0]["runs"] == 3
        vals = [c.record.clean_aer for c in cells]
        assert agg[0]["clean_aer_mean"] == pytest.approx(np.mean(vals))
        assert agg[0]["clean_aer_se"] == pytest.approx(np.std(vals, ddof=1) / np.sqrt(3))
        _, again = harness.run_matrix(["supervised"], [50], [0, 1, 2], cfg, train_set,
                                      test_set, variant_factory=factory)
        assert again == agg

    def test_split_shared_across_kinds(self, toy):
        train_set, test_set = toy
        seen = []

        def trainer(variant, config, split):
            seen.append((variant.kind, tuple(split.labeled_index)))
            return harness.TrainResult(None, [harness.MetricsRecord(
                1, 10.0, {"l2": 20.0}, 0.1, 0, 0, 0, 0, 0.0)])

        harness.run_matrix(["ladder", "vat"], [50], [7], toy_train_config(), train_set,
                           test_set, trainer=trainer)
        assert seen[0][1] == seen[1][1]

    def test_failed_cell_recorded(self, toy):
        train_set, test_set = toy

        def trainer(variant, config, split):
            if variant.kind == "vat":
                raise NumericalError("boom")
            return harness.TrainResult(None, [harness.MetricsRecord(
                1, 10.0, {"l2": 20.0}, 0.1, 0, 0, 0, 0, 0.0)])

        cells, agg = harness.run_matrix(["ladder", "vat"], [50], [0], toy_train_config(),
                                        train_set, test_set, trainer=trainer)
        assert [c.error is None for c in cells] == [True, False]
        assert [r["kind"] for r in agg] == ["ladder"]

    def test_standard_error(self):
        assert harness.standard_error([1.0]) == 0.0
        assert harness.standard_error([1.0, 3.0]) == pytest.approx(1.0)


def test_vat_propagates_labels_on_two_moons():
    """Six labels on two moons: smoothing along the unlabeled manifold fixes
    what the supervised baseline gets wrong."""
    from sklearn.datasets import make_moons

    from laddervat.data import SemiSupervisedSplit

    x, y = make_moons(1000, noise=0.08, random_state=0)
    xt, yt = make_moons(1000, noise=0.08, random_state=1)
    lo, hi = x.min(0), x.max(0)
    x = ((x - lo) / (hi - lo)).astype(np.float32)
    xt = ((xt - lo) / (hi - lo)).astype(np.float32)
    idx = np.concatenate([np.flatnonzero(y == c)[:3] for c in (0, 1)])
    split = SemiSupervisedSplit(Dataset(x[idx], y[idx]), Dataset(x), Dataset(xt, yt), idx)
    cfg = TrainConfig(epochs=150, decay_start=100, labeled_batch=6, unlabeled_batch=100,
                      attack_norms=(), smoothness_samples=50)
    aer = {}
    for kind, eps in (("supervised", 0.0), ("vat", 0.05)):
        v = variants.VariantConfig(kind, widths=(2, 64, 64, 2), sigma=0.0,
                                   epsilons=(eps, 0, 0), vat_norm="l2")
        aer[kind] = harness.train(v, cfg, split).records[-1].clean_aer
    assert aer["supervised"] > 5.0
    assert aer["vat"] < 1.0
