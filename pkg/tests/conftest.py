import sys

import pytest

from medqsum.corpus import deduplicate, split_dataset
from medqsum.entities import LexiconRecognizer, build_entity_dictionary
from medqsum.synthetic import make_corpus, toy_corpus


@pytest.fixture(scope="session")
def lexicon():
    return LexiconRecognizer.bundled()


@pytest.fixture(scope="session")
def toy():
    return toy_corpus()


@pytest.fixture(scope="session")
def toy_splits(toy):
    clean, _ = deduplicate(toy)
    return split_dataset(clean, (80, 10, 10), seed=42)


@pytest.fixture(scope="session")
def fixture200():
    return make_corpus(200, seed=11, name="fixture200")


@pytest.fixture(scope="session")
def toy_dictionary(toy_splits, lexicon):
    return build_entity_dictionary(toy_splits.train, lexicon)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
