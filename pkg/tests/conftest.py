import os
from pathlib import Path

import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=200)
settings.register_profile("ci", deadline=None, max_examples=1000)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

FIXTURE = Path(__file__).resolve().parents[1] / "src" / "rsvlts" / "data" / "fixture"


@pytest.fixture
def fixture_dir() -> Path:
    return FIXTURE
