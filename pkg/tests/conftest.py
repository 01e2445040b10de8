import pytest

from impress import toy
from impress.catalog import SearchResult, build_catalog
from impress.evaluation import LabeledConversation
from impress.gateway import Gateway, HashEmbedder, Ledger, MockChatBackend, ModelConfig
from impress.mock import fixture_backends
from impress.pipeline import Pipeline, PipelineOptions

CHAT = ModelConfig("mock-chat")
EMBED = ModelConfig("mock-embed")


def no_sleep(_):
    pass


def make_gateway(chat=None, embed=None, ledger=None, **kw):
    return Gateway(
        chat or MockChatBackend({}),
        embed or HashEmbedder(8),
        ledger=ledger if ledger is not None else Ledger(),
        sleep=no_sleep,
        **kw,
    )


class StaticSearch:
    def __init__(self, results):
        self.results = results

    def search(self, query, max_results):
        return [SearchResult(r["title"], r["content"], r["url"]) for r in self.results.get(query, [])][:max_results]


def toy_gateway(fixed_usage=None, embed_usage=None, ledger=None):
    chat, embed = fixture_backends(toy.chat_fixture(), fixed_usage=fixed_usage)
    embed.fixed_usage = embed_usage
    return make_gateway(chat, embed, ledger)


@pytest.fixture(scope="session")
def toy_store():
    gw = toy_gateway()
    store, report = build_catalog(toy.SPCS, gw, CHAT, EMBED, StaticSearch(toy.search_results()))
    assert not report.entries
    return store


@pytest.fixture
def toy_pipeline(toy_store):
    return Pipeline.from_store(toy_store, toy_gateway(), CHAT, EMBED, PipelineOptions(), clock=lambda: 0.0)


@pytest.fixture
def toy_dataset():
    return [LabeledConversation(c, frozenset(g)) for c, g in toy.conversations()]


# acceptance criteria report one PASS/FAIL line each in the terminal summary
_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")
    config.stash[_CRITERIA] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    results = item.config.stash[_CRITERIA]
    if rep.when == "call" or rep.failed:
        ok = rep.passed and results.get(number, (title, True))[1]
        results[number] = (title, ok)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_CRITERIA, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, ok = results[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}: {title}")
