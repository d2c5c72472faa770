"""Sphinx configuration for the rogue-face documentation."""

import os
import sys

sys.path.insert(0, os.path.abspath(".."))

from rogue_face import __version__  # noqa: E402

project = "rogue-face"
release = __version__
version = __version__

extensions = [
    "sphinx.ext.autodoc",
    "sphinx_click_custom",
]

autodoc_member_order = "bysource"
exclude_patterns = ["_build"]
html_theme = "alabaster"
