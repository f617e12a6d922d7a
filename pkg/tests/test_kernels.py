import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from psycal import kernels
from psycal.pam import bark
from psycal.quantizer import build_huffman

py = kernels.python_backend
cy = kernels.compiled_backend
needs_cy = pytest.mark.skipif(cy is None, reason="compiled backend not built")


def test_backend_name():
    assert kernels.BACKEND == ("cython" if cy is not None else "python")


def test_pure_python_switch():
    env = dict(os.environ, PSYCAL_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import psycal; print(psycal.BACKEND)"],
                         capture_output=True, text=True, env=env, check=True)
    assert out.stdout.strip() == "python"


@needs_cy
@given(seed=st.integers(0, 10_000))
def test_tonal_peaks_equal(seed):
    rng = np.random.default_rng(seed)
    psd = rng.uniform(-20, 90, 257)
    psd[rng.integers(5, 250, 6)] += 40
    widths = rng.integers(0, 7, 257)
    np.testing.assert_array_equal(py.tonal_peaks(psd, widths, 7.0), cy.tonal_peaks(psd, widths, 7.0))


@needs_cy
@given(seed=st.integers(0, 10_000), r=st.integers(0, 8))
def test_spread_equal(seed, r):
    rng = np.random.default_rng(seed)
    z = bark(np.arange(257) * 44100 / 512)
    zm, lv = rng.uniform(0, 25, r), rng.uniform(0, 100, r)
    np.testing.assert_allclose(cy.spread_thresholds(z, zm, lv, 0.275, -6.025, -200.0),
                               py.spread_thresholds(z, zm, lv, 0.275, -6.025, -200.0), atol=1e-10)


@needs_cy
@given(seed=st.integers(0, 10_000), k=st.integers(1, 64), n=st.integers(1, 400))
def test_huffman_equal(seed, k, n):
    rng = np.random.default_rng(seed)
    sym = rng.integers(0, k, n)
    t = build_huffman(sym, k)
    a = py.huffman_pack(sym, t.codes, t.lengths)
    b = cy.huffman_pack(sym, t.codes, t.lengths)
    assert a == b
    args = (a[0], a[1], n, t.first_code, t.first_index, t.len_count, t.sorted_symbols)
    np.testing.assert_array_equal(py.huffman_unpack(*args), cy.huffman_unpack(*args))
    np.testing.assert_array_equal(cy.huffman_unpack(*args), sym)


@needs_cy
@given(smr=st.lists(st.floats(-30, 80), min_size=0, max_size=30), budget=st.integers(0, 100))
def test_greedy_equal(smr, budget):
    a = py.greedy_allocate(np.array(smr), budget, 6.0206)
    b = cy.greedy_allocate(np.array(smr), budget, 6.0206)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_allclose(a[1], b[1])


@pytest.mark.parametrize("backend", [py] + ([cy] if cy is not None else []), ids=lambda b: b.__name__)
def test_unpack_errors(backend):
    t = build_huffman(np.array([0, 1, 2, 2]), 3)
    data, nbits = backend.huffman_pack(np.array([0, 1, 2, 2]), t.codes, t.lengths)
    args = (t.first_code, t.first_index, t.len_count, t.sorted_symbols)
    with pytest.raises(ValueError):
        backend.huffman_unpack(data, nbits + 64, 4, *args)
    with pytest.raises(ValueError):
        backend.huffman_unpack(data, nbits, 5, *args)
    with pytest.raises(ValueError):
        backend.huffman_unpack(data, nbits, 3, *args)
