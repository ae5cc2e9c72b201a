import numpy as np
import pytest

from gtfmn.data import build_corpus, write_synthetic_charts
from gtfmn.tensor import Tensor, finite_difference_grad, relative_error


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    return request.config.stash.setdefault(ACCEPTANCE, {})


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE, None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def gradcheck(fn, inputs, step=1e-4):
    """Max relative error between backward() grads and central differences over all inputs.

    ``fn`` takes the list of input Tensors and returns a scalar Tensor.
    """
    tensors = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in inputs]
    loss = fn(tensors)
    loss.backward()
    worst = 0.0
    for i, t in enumerate(tensors):
        def f(x, i=i):
            args = [Tensor(a.data) for a in tensors]
            args[i] = x
            return fn(args)
        numeric = finite_difference_grad(f, t, step)
        worst = max(worst, relative_error(t.grad, numeric))
    return worst


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """Ten synthetic 64x64 charts degraded at x2, plus a 3-image test split."""
    root = tmp_path_factory.mktemp("corpus")
    write_synthetic_charts(root / "train_hr", 10, size=64, seed=3)
    write_synthetic_charts(root / "test_hr", 3, size=64, seed=99)
    from gtfmn.data import DegradationSpec

    spec = DegradationSpec(gamma=2.2, scale=2)
    build_corpus(root / "train_hr", spec, root / "train", seed=0)
    build_corpus(root / "test_hr", spec, root / "test", seed=0)
    return {"root": root, "train": root / "train" / "manifest.txt", "test": root / "test" / "manifest.txt", "spec": spec}
