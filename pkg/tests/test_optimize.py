import numpy as np
import pytest
import torch

from reg4d.core import Grid3, ImageGroup, Volume
from reg4d.losses import LossWeights
from reg4d.network import NetConfig
from reg4d.optimize import (
    STOP_CRITERIA,
    STOP_MAX_ITERS,
    STOP_NON_FINITE,
    RegConfig,
    RegReport,
    implicit_template,
    load_checkpoint,
    register,
    resume,
    should_stop,
    write_trace,
)

from conftest import random_group, random_volume

TINY_NET = NetConfig(num_phases=2, num_downscales=1, base_channels=4)


def tiny_config(**kw):
    defaults = dict(
        net=TINY_NET,
        weights=LossWeights(ncc_window=3),
        n_stop=5,
        sigma_stop=1e-4,
        n_iter_min=2,
        max_iters=6,
        seed=0,
    )
    defaults.update(kw)
    return RegConfig(**defaults)


class TestRegConfig:
    @pytest.mark.parametrize("kw", [
        {"learning_rate": 0.0},
        {"n_stop": 1},
        {"sigma_stop": 0.0},
        {"n_iter_min": 0},
        {"n_iter_min": 10, "max_iters": 9},
    ])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            RegConfig(net=TINY_NET, **kw)


class TestRegReport:
    def test_iteration_count_must_match_trace(self):
        with pytest.raises(ValueError):
            RegReport(loss_trace=(), stop_reason=STOP_MAX_ITERS,
                      iterations=3, wall_time=0.1, seed=0)

    def test_unknown_stop_reason(self):
        with pytest.raises(ValueError):
            RegReport(loss_trace=(), stop_reason="tired",
                      iterations=0, wall_time=0.1, seed=0)


class TestImplicitTemplate:
    def test_identical_volumes(self, rng):
        v = random_volume(rng, (6, 6, 6))
        t = implicit_template(ImageGroup((v, v, v)))
        assert np.abs(t.data - v.data).max() < 1e-12

    def test_two_constants(self):
        g = Grid3((4, 4, 4))
        zero = Volume(g, np.zeros(g.dims))
        two = Volume(g, np.full(g.dims, 2.0))
        t = implicit_template(ImageGroup((zero, two)))
        assert np.allclose(t.data, 1.0, atol=0)

    def test_matches_mean_oracle(self, rng):
        grp = random_group(rng, (5, 5, 5), 4)
        t = implicit_template(grp)
        want = sum(v.data for v in grp.volumes) / 4.0
        assert np.abs(t.data - want).max() < 1e-9

    def test_tensor_input(self):
        x = torch.rand(3, 4, 4, 4)
        assert torch.equal(implicit_template(x), x.mean(dim=0))


class TestShouldStop:
    CFG = RegConfig(net=TINY_NET, n_stop=100, sigma_stop=0.0007,
                    n_iter_min=200, max_iters=3000)

    def test_flat_window_past_min_iters(self):
        window = [-0.9] * 100
        assert should_stop(window, -0.9, -0.9, 250, self.CFG) is True

    def test_new_minimum_defers(self):
        window = [-0.9] * 100
        assert should_stop(window, -0.89, -0.9, 250, self.CFG) is False

    def test_min_iteration_floor(self):
        window = [-0.9] * 100
        assert should_stop(window, -0.9, -0.9, 150, self.CFG) is False
        assert should_stop(window, -0.9, -0.9, 200, self.CFG) is False
        assert should_stop(window, -0.9, -0.9, 201, self.CFG) is True

    def test_window_must_be_full(self):
        window = [-0.9] * 99
        assert should_stop(window, -0.9, -0.9, 250, self.CFG) is False

    def test_band_above_minimum(self):
        window = [-0.9] * 100
        band = 0.0007 / 3
        assert should_stop(window, -0.9, -0.9 + band, 250, self.CFG) is True
        assert should_stop(window, -0.9, -0.9 + band + 1e-6, 250,
                           self.CFG) is False

    def test_noisy_window_defers(self):
        window = [-0.9 + (0.001 if i % 2 else -0.001) for i in range(100)]
        assert float(np.std(window)) > 0.0007
        assert should_stop(window, -0.901, -0.899, 250, self.CFG) is False

    def test_pure_function(self):
        window = [-0.9] * 100
        args = (window, -0.9, -0.9, 250, self.CFG)
        assert should_stop(*args) == should_stop(*args)


class TestRegister:
    def test_identical_copies_converge(self, rng):
        torch.manual_seed(0)
        v = random_volume(rng, (32, 32, 32))
        group = ImageGroup((v, v, v))
        config = RegConfig(
            net=NetConfig(num_phases=3, num_downscales=2, base_channels=4),
            n_stop=8, sigma_stop=5e-4, n_iter_min=5, max_iters=60, seed=1)
        fields, report = register(group, config)

        sims = [b.similarity for b in report.loss_trace]
        assert sims[-1] < -0.9
        assert min(sims) <= sims[0]
        assert report.iterations == len(report.loss_trace)
        if report.stop_reason == STOP_CRITERIA:
            assert report.iterations >= config.n_iter_min + 1
        assert np.abs(fields.stacked()).mean() < 0.5
        assert report.wall_time > 0
        assert report.seed == 1

    def test_deterministic_given_seed(self, rng):
        group = random_group(rng, (16, 16, 16), 2)
        a_fields, a_report = register(group, tiny_config(seed=7))
        b_fields, b_report = register(group, tiny_config(seed=7))
        assert np.array_equal(a_fields.stacked(), b_fields.stacked())
        assert [x.total for x in a_report.loss_trace] == \
               [x.total for x in b_report.loss_trace]

    def test_seed_changes_run(self, rng):
        group = random_group(rng, (16, 16, 16), 2)
        a_fields, _ = register(group, tiny_config(seed=7))
        b_fields, _ = register(group, tiny_config(seed=8))
        assert not np.array_equal(a_fields.stacked(), b_fields.stacked())

    def test_max_iters_cap(self, rng):
        group = random_group(rng, (16, 16, 16), 2)
        fields, report = register(group, tiny_config(max_iters=3,
                                                     n_iter_min=2))
        assert report.stop_reason == STOP_MAX_ITERS
        assert report.iterations == 3
        assert len(fields) == 2

    def test_divergent_run_flagged_not_raised(self, rng):
        group = random_group(rng, (16, 16, 16), 2)
        fields, report = register(group, tiny_config(learning_rate=1e12,
                                                     max_iters=40))
        assert report.stop_reason == STOP_NON_FINITE
        assert 1 <= report.iterations < 40
        assert np.isfinite(fields.stacked()).all()

    def test_cyclic_disabled_drops_term_from_total(self, rng):
        group = random_group(rng, (16, 16, 16), 2)
        _, report = register(group, tiny_config(max_iters=2, n_iter_min=2,
                                                cyclic_enabled=False))
        w = LossWeights(ncc_window=3)
        for b in report.loss_trace:
            assert b.total == pytest.approx(
                b.similarity + w.lambda0 * b.smoothness, abs=1e-6)
            assert b.cyclic > 0  # still reported, just unweighted

    def test_phase_mismatch(self, rng):
        group = random_group(rng, (16, 16, 16), 3)
        with pytest.raises(ValueError):
            register(group, tiny_config())


class TestCheckpointAndResume:
    def test_noop_resume_reproduces_saved_fields(self, rng, tmp_path):
        group = random_group(rng, (16, 16, 16), 2)
        ck = tmp_path / "run.npz"
        fields, report = register(group, tiny_config(max_iters=4,
                                                     n_iter_min=2),
                                  checkpoint_path=ck)
        again, report2 = resume(ck, group, tiny_config(max_iters=4,
                                                       n_iter_min=2))
        assert np.array_equal(again.stacked(), fields.stacked())
        assert report2.stop_reason == STOP_MAX_ITERS
        assert report2.iterations == report.iterations

    def test_split_run_matches_uninterrupted(self, rng, tmp_path):
        group = random_group(rng, (16, 16, 16), 2)
        straight_fields, straight = register(
            group, tiny_config(max_iters=8, seed=3))

        ck = tmp_path / "part.npz"
        register(group, tiny_config(max_iters=4, seed=3),
                 checkpoint_path=ck)
        joined_fields, joined = resume(ck, group,
                                       tiny_config(max_iters=8, seed=3))

        assert joined.iterations == straight.iterations == 8
        assert joined.loss_trace[-1].total == pytest.approx(
            straight.loss_trace[-1].total, abs=1e-6)
        assert np.abs(joined_fields.stacked()
                      - straight_fields.stacked()).max() < 1e-5

    def test_checkpoint_contents(self, rng, tmp_path):
        group = random_group(rng, (16, 16, 16), 2)
        ck = tmp_path / "run.npz"
        config = tiny_config(max_iters=3)
        register(group, config, checkpoint_path=ck)
        data = load_checkpoint(ck)
        assert data["config"] == config
        assert data["iteration"] == 3
        assert data["trace"].shape == (3, 4)

    def test_wrong_phase_count_rejected(self, rng, tmp_path):
        group = random_group(rng, (16, 16, 16), 2)
        ck = tmp_path / "run.npz"
        register(group, tiny_config(max_iters=3), checkpoint_path=ck)
        bigger = random_group(rng, (16, 16, 16), 3)
        cfg3 = RegConfig(net=NetConfig(num_phases=3, num_downscales=1,
                                       base_channels=4),
                         weights=LossWeights(ncc_window=3),
                         n_stop=5, sigma_stop=1e-4, n_iter_min=2,
                         max_iters=6)
        with pytest.raises(ValueError):
            resume(ck, bigger, cfg3)

    def test_net_config_mismatch_rejected(self, rng, tmp_path):
        group = random_group(rng, (16, 16, 16), 2)
        ck = tmp_path / "run.npz"
        register(group, tiny_config(max_iters=3), checkpoint_path=ck)
        other = tiny_config(max_iters=6)
        other = RegConfig(net=NetConfig(num_phases=2, num_downscales=1,
                                        base_channels=8),
                          weights=other.weights, n_stop=5, sigma_stop=1e-4,
                          n_iter_min=2, max_iters=6)
        with pytest.raises(ValueError):
            resume(ck, group, other)


class TestTraceExport:
    def test_round_trip(self, rng, tmp_path):
        group = random_group(rng, (16, 16, 16), 2)
        _, report = register(group, tiny_config(max_iters=4))
        path = tmp_path / "trace.tsv"
        write_trace(report, path)

        lines = path.read_text().splitlines()
        assert lines[0] == "iteration\tsimilarity\tsmoothness\tcyclic\ttotal"
        table = np.loadtxt(path, skiprows=1)
        assert table.shape == (4, 5)
        assert list(table[:, 0]) == [1.0, 2.0, 3.0, 4.0]
        for row, b in zip(table, report.loss_trace):
            assert row[1] == pytest.approx(b.similarity, rel=1e-9)
            assert row[4] == pytest.approx(b.total, rel=1e-9)
