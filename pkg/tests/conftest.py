import numpy as np
import pytest

from matcn.preprocess import GridSequence


def random_sequence(rng: np.random.Generator, n: int, vocab: int = 16) -> GridSequence:
    cells = np.stack([rng.integers(0, vocab, n), rng.integers(0, vocab, n), rng.integers(1, 289, n),
                      rng.uniform(0.0, 25.0, n)], axis=1)
    return GridSequence.from_cells(cells.tolist())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Four synthetic drivers over two days, preprocessed."""
    from matcn.preprocess import build_corpus
    from matcn.synth import SynthCorpusSpec, gen_corpus

    spec = SynthCorpusSpec(n_drivers=4, days=2, trips_per_day=5, seed=3)
    path = tmp_path_factory.mktemp("tiny") / "raw.csv"
    gen_corpus(spec, path)
    return build_corpus(path, spec.bbox, spec.grid_side)[0]


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion; echoed in the terminal summary."""
    def record(name: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
