import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from uacgan.plots import DEFAULT_GRID, density_curves, emit_density_plot
from uacgan.synthbench import (MMDReport, MoGSpec, class_samples, kde, median_bandwidth, mmd_squared, real_vs_real,
                               sample_mog, silverman_bandwidth)


def test_sample_mog_class_moments():
    spec = MoGSpec()
    x = class_samples(spec, 0, 300_000, torch.Generator().manual_seed(0))
    assert abs(float(x.mean())) < 0.02 and abs(float(x.std()) - 1) < 0.02


def test_sample_mog_deterministic_and_counts():
    spec = MoGSpec()
    a, b = sample_mog(spec, 30000, 3), sample_mog(spec, 30000, 3)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
    counts = np.bincount(a[1].numpy(), minlength=3)
    assert np.all(np.abs(counts - 10000) < 5 * math.sqrt(30000 * 2 / 9))
    x, y = a
    for k, (m, s) in enumerate(spec.components):
        assert float(x[y == k].mean()) == pytest.approx(m, abs=0.1)
        assert float(x[y == k].std()) == pytest.approx(s, abs=0.1)


def test_sample_mog_bad_n():
    with pytest.raises(ValueError):
        sample_mog(MoGSpec(), 0, 0)


def test_variance_convention():
    assert np.allclose(MoGSpec(variance_convention=True).stds, [1, math.sqrt(2), math.sqrt(3)])
    assert np.allclose(MoGSpec().stds, [1, 2, 3])


def test_mmd_examples():
    xs = np.random.default_rng(0).normal(size=50)
    assert mmd_squared(xs, xs, 1.0) == pytest.approx(0.0, abs=1e-12)
    assert mmd_squared([0.0], [1.0], 1.0) == pytest.approx(2 - 2 * math.exp(-0.5))
    assert mmd_squared([0.0], [1.0], 1.0) == pytest.approx(0.7869, abs=1e-4)
    assert mmd_squared([0, 0], [0, 0], 1.0) == 0
    with pytest.raises(ValueError):
        mmd_squared([0.0], [1.0], 0.0)
    with pytest.raises(ValueError):
        mmd_squared([], [1.0], 1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=40), st.lists(st.floats(-50, 50), min_size=1, max_size=40),
       st.floats(0.1, 10))
def test_mmd_symmetric_and_nonnegative(xs, ys, bw):
    a, b = mmd_squared(xs, ys, bw), mmd_squared(ys, xs, bw)
    assert a == b
    assert a >= -1e-9


def test_mmd_shift_increases():
    rng = np.random.default_rng(1)
    xs, ys = rng.normal(size=500), rng.normal(size=500)
    assert mmd_squared(xs, ys + 10, 1.0) > mmd_squared(xs, ys, 1.0)


def test_kde_single_sample_is_normal_pdf():
    grid = np.linspace(-5, 5, 101)
    assert np.allclose(kde([0.0], 1.0, grid), norm.pdf(grid), atol=1e-12)


def test_kde_integrates_to_one():
    x = class_samples(MoGSpec(), 0, 5000, torch.Generator().manual_seed(0)).numpy()
    grid = np.linspace(-10, 16, 2601)
    assert np.trapezoid(kde(x, silverman_bandwidth(x), grid), grid) == pytest.approx(1.0, abs=0.01)


def test_kde_accuracy_standard_normal():
    x = np.random.default_rng(2).normal(size=100_000)
    grid = np.linspace(-4, 4, 401)
    assert np.abs(kde(x, silverman_bandwidth(x), grid) - norm.pdf(grid)).max() < 0.02


def test_kde_errors():
    with pytest.raises(ValueError):
        kde([0.0], 0.0, [0.0])
    with pytest.raises(ValueError):
        kde([], 1.0, [0.0])


def test_median_bandwidth_matches_definition():
    x = np.array([0.0, 1.0, 3.0])
    assert median_bandwidth(x) == pytest.approx(2.0)   # pairwise distances 1, 2, 3


def test_real_vs_real_control():
    null = real_vs_real(MoGSpec(), 10000)
    assert all(v < 0.01 for v in null.values()), null


def test_mmd_report_summary(tmp_path):
    rep = MMDReport("ac", 1.0, 10, runs=[{"seed": s, "Class_0": s, "Class_1": 1.0, "Class_2": 2.0, "Marginal": 0.5}
                                         for s in range(3)])
    assert rep.summary()["Class_0"] == {"mean": 1.0, "std": pytest.approx(math.sqrt(2 / 3)), "median": 1.0}
    rep.write_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().strip().splitlines()
    assert len(lines) == 1 + 3 * 4


def test_density_plot_identical_inputs(tmp_path):
    rng = np.random.default_rng(3)
    real = {f"Class_{k}": rng.normal(k, 1, 2000) for k in range(3)}
    curves = emit_density_plot(real, real, tmp_path / "d.png")
    assert (tmp_path / "d.png").stat().st_size > 0
    assert set(curves) == {"Class_0", "Class_1", "Class_2", "Marginal"}
    for r, f in curves.values():
        assert np.abs(r - f).max() < 0.01


def test_density_plot_deterministic(tmp_path):
    rng = np.random.default_rng(4)
    real = {"Class_0": rng.normal(0, 1, 500)}
    fake = {"Class_0": rng.normal(0.5, 1, 500)}
    emit_density_plot(real, fake, tmp_path / "a.png")
    emit_density_plot(real, fake, tmp_path / "b.png")
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def test_density_plot_errors(tmp_path):
    with pytest.raises(ValueError):
        density_curves({"Class_0": []}, {"Class_0": [1.0]}, DEFAULT_GRID)
    with pytest.raises(OSError):
        emit_density_plot({"Class_0": [0.0, 1.0]}, {"Class_0": [0.0, 1.0]}, tmp_path / "missing" / "d.png")


@pytest.mark.parametrize("width_ratio", [0.5, 1.0, 4.0, 20.0])
def test_fast_kernel_mean_matches_pairwise_sum(width_ratio):
    from uacgan.synthbench import _kernel_mean, _kernel_mean_exact
    gen = torch.Generator().manual_seed(3)
    a = (torch.randn(3000, 1, generator=gen, dtype=torch.float64) * 3 + 6)
    b = torch.cat([torch.randn(2500, 1, generator=gen, dtype=torch.float64), torch.tensor([[25.0]] * 3)])
    sigma = float(b.max() - a.min()) / width_ratio / 4
    for x, y in ((a, b), (a, a), (b, b)):
        assert _kernel_mean(x, y, sigma) == pytest.approx(_kernel_mean_exact(x, y, sigma), rel=1e-12, abs=1e-15)


def test_fast_kernel_mean_handles_samples_on_nodes():
    from uacgan.synthbench import _kernel_mean, _kernel_mean_exact
    a = torch.linspace(-1, 1, 2500, dtype=torch.float64)[:, None]
    b = torch.tensor([[-1.0], [1.0], [0.0]]).repeat(1000, 1).double()
    assert _kernel_mean(a, b, 0.7) == pytest.approx(_kernel_mean_exact(a, b, 0.7), rel=1e-12)
