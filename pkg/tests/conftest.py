import os
from pathlib import Path

import pytest

from graphre.corpus import parse_document, parse_upstream_record
from graphre.encode import EncoderConfig
from graphre.evaluation import RunConfig
from graphre.model import GraphConfig
from graphre.synthetic import make_split

MILLER_TOKENS = (
    "For many years starting from 1986 , Miller directed the development of WordNet , "
    "a large computer-readable electronic reference usable in applications such as search engines ."
).split()

MILLER_RECORD = {
    "doc_id": "ai-example",
    "domain": "ai",
    "tokens": MILLER_TOKENS,
    "entities": [[7, 7, "researcher"], [12, 12, "product"], [24, 25, "product"]],
    "relations": [[0, 1, ["ROLE"], "-", "-", "-"], [2, 1, ["USAGE"], "-", "-", "X"]],
}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): exit criterion")


@pytest.fixture
def miller_doc():
    return parse_document(MILLER_RECORD)


@pytest.fixture(scope="session")
def synthetic_news():
    def load(sizes=(40, 10, 10), seed=0):
        return {
            split: [parse_upstream_record(r, "news", split) for r in make_split(n, seed, "news", split)]
            for split, n in zip(("train", "dev", "test"), sizes)
        }

    return load


def tiny_run_config(**kwargs) -> RunConfig:
    fusion = kwargs.pop("fusion", "none")
    enc = EncoderConfig("tiny", max_length=kwargs.pop("max_length", 256))
    defaults = dict(epochs=2, lr_encoder=1e-3, lr_head=3e-3, batch_size=8, seed=7)
    defaults.update(kwargs)
    return RunConfig(encoder=enc, graph=GraphConfig(fusion=fusion), domain="news", **defaults)


@pytest.fixture
def tiny_config():
    return tiny_run_config


# --- acceptance summary --------------------------------------------------------

_ACCEPTANCE: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        _ACCEPTANCE[number] = (title, status, item.nodeid)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, status, _ = _ACCEPTANCE[number]
        terminalreporter.write_line(f"[{status}] criterion {number}: {title}")


def crossre_dir():
    env = os.environ.get("CROSSRE_DIR")
    if env:
        return Path(env)
    local = Path(__file__).resolve().parents[1] / "data" / "crossre"
    return local if local.is_dir() else None


# --- offline workspace -----------------------------------------------------------

WORKSPACE_CONFIG = """\
workspace: .
paths:
  raw: raw
  corpus: work/corpus
  augmented: work/augmented
  cache: work/cache
  runs: work/runs
  reports: work/reports
augment:
  offline: true
  fixtures: fixtures.json
encoder:
  model_name: tiny
  max_length: 256
training:
  seed: 7
  epochs: 1
  lr_encoder: 0.001
  lr_head: 0.003
  batch_size: 8
  domains: [news]
  fusions: [none, tanh]
report:
  domains: [news]
  fusions: [none, tanh]
"""


def make_workspace(root: Path, sizes=(20, 8, 8), seed: int = 0) -> Path:
    """Synthetic News upstream files, mock fixtures and a tiny-encoder config."""
    from graphre.synthetic import make_split, write_fixtures, write_upstream

    root = Path(root)
    write_upstream(root / "raw", "news", sizes, seed)
    records = [r for split, n in zip(("train", "dev", "test"), sizes) for r in make_split(n, seed, "news", split)]
    write_fixtures(root / "fixtures.json", records)
    (root / "config.yaml").write_text(WORKSPACE_CONFIG)
    return root / "config.yaml"


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    monkeypatch.delenv("GRAPHRE_CACHE_DIR", raising=False)
    return make_workspace(tmp_path)
