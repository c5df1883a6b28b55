import time

import numpy as np
import pytest

from irvuln.model import ModelConfig, TransformerModel


def toy_config(**overrides):
    base = dict(vocab_size=11, d_model=8, n_heads=2, n_layers=1, d_ff=16, max_len=6,
                n_fc_layers=1, fc_hidden=6, dropout_rate=0.0)
    base.update(overrides)
    return ModelConfig(**base)


def random_batch(rng, cfg, batch=3, min_len=2):
    """Random ids with CLS at position 0 and a PAD tail on some rows."""
    T = cfg.max_len
    ids = rng.integers(4, cfg.vocab_size, size=(batch, T))
    ids[:, 0] = 3
    mask = np.ones((batch, T), dtype=np.int64)
    for b in range(batch):
        n = int(rng.integers(min_len, T + 1))
        ids[b, n:] = 0
        mask[b, n:] = 0
    return ids, mask


@pytest.fixture
def toy_cfg():
    return toy_config()


@pytest.fixture
def toy_model(toy_cfg):
    return TransformerModel.init(toy_cfg, seed=1, precision="double")


# -- acceptance reporting ------------------------------------------------------

_ACCEPTANCE = pytest.StashKey[list]()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    rep = (yield).get_result()
    setattr(item, f"rep_{rep.when}", rep)


@pytest.fixture
def criterion(request):
    """Collects a one-line verdict for tests marked ``@pytest.mark.criterion(n, title)``.

    The test fills ``detail`` with the measured quantity; the verdict is
    printed in the terminal summary.
    """
    marker = request.node.get_closest_marker("criterion")
    num, title = marker.args
    record = {"detail": ""}
    start = time.perf_counter()
    yield record
    rep = getattr(request.node, "rep_call", None)
    if rep is None or rep.failed:
        status = "FAIL"
    elif rep.skipped:
        status = "SKIP"
        record["detail"] = record["detail"] or str(rep.longrepr[-1]).removeprefix("Skipped: ")
    else:
        status = "PASS"
    line = f"{status}  {num:>2}. {title}: {record['detail']} [{time.perf_counter() - start:.1f}s]"
    request.config.stash.setdefault(_ACCEPTANCE, []).append((num, line))


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
