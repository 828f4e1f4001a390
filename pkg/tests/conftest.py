import os

import pytest

from desk import run_desk, summarize


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """One desk-scale training and evaluation run, shared by the whole session.

    Setting COMPRINT_DESK_ROOT to the directory of a finished run reuses it
    instead of training again (handy while working on the tests).
    """
    reuse = os.environ.get("COMPRINT_DESK_ROOT")
    if reuse:
        return summarize(reuse)
    return run_desk(tmp_path_factory.mktemp("desk"))
