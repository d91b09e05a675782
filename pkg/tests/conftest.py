from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # make oracles importable

from cfagent.config import default_config
from cfagent.gateway import Runtime


@pytest.fixture()
def runtime(tmp_path):
    """A full runtime on a temporary data dir, stub servers as subprocesses."""
    rt = Runtime(default_config(str(tmp_path / "data")))
    yield rt
    rt.close()


@pytest.fixture()
def store(runtime):
    return runtime.store


@pytest.fixture()
def toolbox(tmp_path):
    from cfagent.core import ArtifactStore
    from cfagent.stubs import Toolbox

    return Toolbox(ArtifactStore(tmp_path / "store"))
