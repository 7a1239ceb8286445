"""Shared fixtures: an isolated config environment and a writable copy of the mini-corpus."""

from __future__ import annotations

import shutil
from pathlib import Path

import pytest

from medvidqa_kit import cli as cli_module
from medvidqa_kit import config as config_module

MINICORPUS = Path(__file__).parent / "fixtures" / "minicorpus"


@pytest.fixture(autouse=True)
def isolated_config(tmp_path, monkeypatch):
    """Keep user and project config files of the machine running the tests out of every test."""
    home_config = tmp_path / "home" / ".config" / config_module.CONFIG_FILENAME
    monkeypatch.setattr(config_module, 'USER_CONFIG_PATH', home_config)
    monkeypatch.setattr(cli_module, 'USER_CONFIG_PATH', home_config)
    workdir = tmp_path / "work"
    workdir.mkdir()
    monkeypatch.chdir(workdir)
    for name in ('MVQA_EMBEDDING_API_KEY', 'MVQA_CHAT_API_KEY'):
        monkeypatch.delenv(name, raising=False)
    return home_config


@pytest.fixture
def minicorpus(tmp_path) -> Path:
    """A fresh copy of the bundled mini-corpus; its config writes to <copy>/out."""
    target = tmp_path / "minicorpus"
    shutil.copytree(MINICORPUS, target)
    return target


@pytest.fixture
def mini_config_path(minicorpus) -> Path:
    return minicorpus / config_module.CONFIG_FILENAME
