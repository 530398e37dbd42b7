from __future__ import annotations

from pathlib import Path

import pytest

from cropgan.toy import generate_toy_corpus


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory) -> Path:
    return generate_toy_corpus(tmp_path_factory.mktemp("toy") / "corpus")
