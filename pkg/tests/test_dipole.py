import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bayesqsm.dipole import (NoiseModel, adjoint_field, build_dipole_kernel, fidelity_value_grad,
                             forward_field, imaginary_residue)
from bayesqsm.experiments import direct_dft_impulse
from bayesqsm.volume import BinaryMask, Volume

dims3 = st.tuples(*(st.integers(2, 9),) * 3)


def test_kernel_values_on_4cube():
    d = build_dipole_kernel((4, 4, 4)).d_values
    assert d[0, 0, 0] == 0.0
    assert d[1, 0, 0] == pytest.approx(1 / 3, abs=1e-15)  # k perpendicular to b0
    assert d[0, 0, 1] == pytest.approx(-2 / 3, abs=1e-15)  # k along b0
    assert d[1, 1, 1] == pytest.approx(0.0, abs=1e-15)  # magic angle: cos^2 = 1/3
    assert d[0, 0, 2] == pytest.approx(-2 / 3, abs=1e-15)  # Nyquist bin
    assert d.min() >= -2 / 3 - 1e-12 and d.max() <= 1 / 3 + 1e-12


@given(dims3)
def test_kernel_is_even(dims):
    d = build_dipole_kernel(dims).d_values
    mirror = np.roll(d[::-1, ::-1, ::-1], 1, axis=(0, 1, 2))
    np.testing.assert_array_equal(d, mirror)


@given(dims3, st.integers(0, 2**31))
def test_adjoint_identity(dims, seed):
    r = np.random.default_rng(seed)
    k = build_dipole_kernel(dims)
    x, y = Volume(r.standard_normal(dims)), Volume(r.standard_normal(dims))
    lhs = np.sum(forward_field(x, k).data * y.data)
    rhs = np.sum(x.data * adjoint_field(y, k).data)
    assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), 1e-12) + 1e-12


@given(dims3, st.floats(-2, 2))
def test_uniform_chi_gives_zero_field(dims, c):
    k = build_dipole_kernel(dims)
    assert np.max(np.abs(forward_field(Volume(np.full(dims, c)), k).data)) <= 1e-10


def test_impulse_matches_direct_dft():
    k = build_dipole_kernel((8, 8, 6), voxel_size=(1.0, 1.0, 1.5))
    imp = np.zeros(k.dims)
    imp[2, 7, 1] = 1.0
    fast = forward_field(Volume(imp), k).data
    np.testing.assert_allclose(fast, direct_dft_impulse(k, (2, 7, 1)), atol=1e-12)


def test_impulse_centre_value_frozen():
    # response at the source equals mean(d); value fixed for the 8^3 kernel
    k = build_dipole_kernel((8, 8, 8))
    imp = np.zeros(k.dims)
    imp[0, 0, 0] = 1.0
    h0 = forward_field(Volume(imp), k).data[0, 0, 0]
    assert h0 == pytest.approx(k.d_values.mean(), abs=1e-15)
    assert h0 == pytest.approx(0.0, abs=0.02)


def test_imaginary_residue_small(rng):
    k = build_dipole_kernel((8, 6, 5))
    assert imaginary_residue(rng.standard_normal(k.dims), k) < 1e-13


def test_oblique_b0_and_anisotropic_voxels():
    b0 = np.array([0.0, 0.6, 0.8])
    k = build_dipole_kernel((6, 6, 6), (1.0, 1.0, 2.0), b0)
    kz = np.fft.fftfreq(6, d=2.0)[1]
    assert k.d_values[0, 0, 1] == pytest.approx(1 / 3 - 0.64, abs=1e-12)
    assert kz == pytest.approx(1 / 12)


def test_kernel_errors():
    with pytest.raises(ValueError):
        build_dipole_kernel((1, 4, 4))
    with pytest.raises(ValueError):
        build_dipole_kernel((4, 4, 4), b0_dir=(0, 0, 2))
    with pytest.raises(ValueError):
        build_dipole_kernel((4, 4, 4), voxel_size=(1, -1, 1))
    k = build_dipole_kernel((4, 4, 4))
    with pytest.raises(ValueError):
        forward_field(Volume(np.zeros((4, 4, 5))), k)


def test_noise_model_requires_positive_sd():
    sup = BinaryMask(np.ones((2, 2, 2), bool))
    with pytest.raises(ValueError):
        NoiseModel(Volume(np.zeros((2, 2, 2))), sup)
    nm = NoiseModel(Volume(np.full((2, 2, 2), 0.5)), sup)
    np.testing.assert_allclose(nm.weights, 4.0)


def test_fidelity_gradient_fd(rng):
    dims = (6, 6, 6)
    k = build_dipole_kernel(dims)
    sup = np.zeros(dims, bool)
    sup[1:5, 1:5, 1:5] = True
    noise = NoiseModel(Volume(np.exp(rng.standard_normal(dims))), BinaryMask(sup))
    b = Volume(rng.standard_normal(dims))
    x = rng.standard_normal(dims)
    v = rng.standard_normal(dims)
    f0, g = fidelity_value_grad(Volume(x), b, noise, k)
    h = 1e-6
    fp = fidelity_value_grad(Volume(x + h * v), b, noise, k)[0]
    fm = fidelity_value_grad(Volume(x - h * v), b, noise, k)[0]
    assert (fp - fm) / (2 * h) == pytest.approx(np.sum(g.data * v), rel=1e-6)
    # outside the support the data do not count
    assert f0 == pytest.approx(np.sum(noise.weights * (forward_field(Volume(x), k).data - b.data) ** 2))
