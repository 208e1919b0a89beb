"""Multi-task sexism detection toolkit (C++ core with Python bindings)."""

from pathlib import Path

from . import _core
from ._core import *  # noqa: F401,F403
from ._core import __version__


def data_dir() -> Path:
    """Directory holding the shipped lexicon, emoji table and task schema."""
    packaged = Path(__file__).parent / "data"
    return packaged if packaged.is_dir() else Path(_core._source_data_dir)


def default_preprocessor(masks: bool = True, emoji: bool = True, hashtags: bool = False) -> "Preprocessor":
    """Preprocessor over the shipped lexicon and emoji table."""
    d = data_dir()
    return _core.Preprocessor(
        _core.NormConfig(masks=masks, emoji=emoji, hashtags=hashtags),
        _core.Lexicon.load(d / "lexicon.tsv"),
        _core.EmojiTable.load(d / "emoji.tsv"),
    )
