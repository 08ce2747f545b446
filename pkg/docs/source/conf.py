#!/usr/bin/env python3
#
# raymap documentation build configuration file.
#
# This file is execfile()d with the current directory set to its
# containing dir.

import os
import sys

module_path = os.path.join(os.path.dirname(os.path.abspath(__file__)), "../../")
sys.path.insert(0, module_path)

import raymap  # noqa: E402

# -- General configuration ------------------------------------------------

extensions = [
    "sphinxcontrib.jquery",
    "sphinx.ext.autodoc",
    "sphinx.ext.intersphinx",
    "sphinx.ext.viewcode",
    "sphinx.ext.napoleon",
    "sphinx.ext.autosummary",
    "sphinx.ext.mathjax",
    "sphinx.ext.githubpages",
]

templates_path = ["_templates"]

autosummary_generate = True
autodoc_member_order = "bysource"
source_suffix = ".rst"
master_doc = "index"

project = "raymap"
copyright = "2024, SLAC National Accelerator Laboratory"
author = "SLAC National Accelerator Laboratory"

# The short X.Y version.
version = str(raymap.__version__)
# The full version, including alpha/beta/rc tags.
release = str(raymap.__version__)

language = "en"
exclude_patterns = []
pygments_style = "sphinx"
todo_include_todos = False

# -- Options for HTML output ----------------------------------------------

html_theme = "sphinx_rtd_theme"
html_static_path = ["_static"]
htmlhelp_basename = "raymapdoc"

# -- Options for LaTeX output ---------------------------------------------

latex_elements = {}

latex_documents = [
    (
        master_doc,
        "raymap.tex",
        "raymap Documentation",
        "SLAC National Accelerator Laboratory",
        "manual",
    ),
]

# -- Options for manual page output ---------------------------------------

man_pages = [(master_doc, "raymap", "raymap Documentation", [author], 1)]

intersphinx_mapping = {
    "python": ("https://docs.python.org/3", None),
    "numpy": ("https://numpy.org/doc/stable/", None),
    "scipy": ("https://docs.scipy.org/doc/scipy/", None),
    "pandas": ("https://pandas.pydata.org/docs/", None),
}
