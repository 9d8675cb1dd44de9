import numpy as np
import pytest

from ensrec._malloc import tune_malloc
from ensrec import data as dt
from ensrec import encoder as enc

tune_malloc()


@pytest.fixture(scope="session")
def small_dataset():
    """Compact synthetic corpus shared by unit tests."""
    return dt.synth_generate(80, 30, 8, 14, seed=424)


@pytest.fixture(scope="session")
def small_split(small_dataset):
    return dt.split_leave_one_out(small_dataset, max_len=12)


def make_config(dataset, **overrides):
    fields = dict(
        vocab_size=dataset.n_items, attr_size=dataset.n_attrs, max_len=12,
        hidden_dim=16, blocks=2, heads=2, n_networks=2, n_views=2,
        dropout_rate=0.1, tau=1.0, lam=0.1, mu=0.1,
    )
    fields.update(overrides)
    return enc.ModelConfig(**fields)


@pytest.fixture
def small_config(small_dataset):
    return make_config(small_dataset)


def rand_tensors(rng, *shapes, requires_grad=True):
    from ensrec.autodiff import Tensor
    return [Tensor(rng.standard_normal(s), requires_grad=requires_grad) for s in shapes]


def assert_close(actual, expected, tol=1e-9):
    actual = np.asarray(actual, dtype=float)
    expected = np.asarray(expected, dtype=float)
    np.testing.assert_allclose(actual, expected, rtol=tol, atol=tol)
