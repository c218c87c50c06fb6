import numpy as np
import pytest

from nardistill.data import Example, collate
from nardistill.model import BangModel, ModelConfig
from nardistill.tensor import shadow_mode


def tiny_config(**kw) -> ModelConfig:
    base = dict(vocab_size=12, d_model=8, n_heads=2, n_enc_layers=1, n_dec_layers=1,
                n_streams=4, max_src_len=12, max_tgt_len=10)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(seed=0, dtype=np.float64, **kw) -> BangModel:
    with shadow_mode(dtype):
        return BangModel(tiny_config(**kw), seed)


def random_examples(n, vocab=12, src_len=(2, 6), tgt_len=(1, 5), seed=0, with_bs=False):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        src = rng.integers(6, vocab, size=rng.integers(*src_len, endpoint=True)).tolist()
        tgt = rng.integers(6, vocab, size=rng.integers(*tgt_len, endpoint=True)).tolist()
        bs = rng.integers(6, vocab, size=rng.integers(*tgt_len, endpoint=True)).tolist() if with_bs else None
        out.append(Example(src, tgt, bs))
    return out


@pytest.fixture
def model64():
    return tiny_model()


@pytest.fixture
def batch():
    return collate(random_examples(3, with_bs=True))


# acceptance reporting: tests marked ``criterion(n, title)`` roll up into one line per criterion
_CRITERIA: dict = {}


def pytest_runtest_logreport(report):
    marks = getattr(report, "criterion", None)
    if marks is None:
        return
    number, title = marks
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "seconds": 0.0, "failed": []})
    entry["seconds"] += report.duration
    if not report.passed:
        entry["ok"] = False
        entry["failed"].append(f'{report.nodeid.split("::")[-1]} ({report.when})')


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        outcome.get_result().criterion = tuple(mark.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["ok"] else "FAIL"
        line = f"criterion {number:>2}: {status}  {e['title']}  ({e['seconds']:.1f}s)"
        if e["failed"]:
            line += "  failing: " + ", ".join(e["failed"])
        terminalreporter.write_line(line)
