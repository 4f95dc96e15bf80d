import numpy as np
import pytest

from clsrkit.data import DEFAULT_FAMILIES, Manifest, RosterSpec, build_roster, character_set, generate_corpus
from clsrkit.model import ModelConfig, Vocabulary


@pytest.fixture(scope="session")
def roster():
    return build_roster(RosterSpec(DEFAULT_FAMILIES))


@pytest.fixture(scope="session")
def vocab(roster):
    return Vocabulary(character_set(roster), [s.lang_id for s in roster])


@pytest.fixture
def tiny_config(vocab):
    return ModelConfig(layers=2, width=32, heads=4, vocab_size=vocab.size, max_src_len=128, max_tgt_len=48, frame_dim=16)


@pytest.fixture(scope="session")
def toy_corpus(roster):
    """A few short utterances per language."""
    m = Manifest()
    for s in roster:
        m.extend(generate_corpus(s, 6, "indomain", 7))
    return m


def random_frames(rng, n, dim=16):
    return rng.normal(size=(n, dim)).astype(np.float32)


# -- acceptance verdicts --------------------------------------------------------

_VERDICTS: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion verified by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    number, title = mark.args
    ok = rep.passed and not hasattr(rep, "wasxfail")
    detail = "; ".join(str(v) for k, v in rep.user_properties if k == "detail")
    if hasattr(rep, "wasxfail"):
        detail = f"{detail}; expected failure: {rep.wasxfail}" if detail else f"expected failure: {rep.wasxfail}"
    _VERDICTS[number] = (ok, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        ok, title, detail = _VERDICTS[number]
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number:2d}  {title}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
