# Sphinx configuration for the compl API reference
import os
import sys

# Package root, for autodoc
sys.path.insert(0, os.path.abspath('../../'))

import sphinx_rtd_theme  # noqa: E402,F401

project = 'compl'
copyright = '2021, compl developers'
author = 'compl developers'

extensions = [
    'sphinx.ext.napoleon', 'sphinx.ext.autodoc', 'sphinx_autodoc_typehints',
    'sphinx_rtd_theme', 'sphinx.ext.intersphinx', 'sphinx.ext.mathjax',
    'sphinx_multiversion'
]

templates_path = ['../_templates']
exclude_patterns = []

# --- Multiversioning -------------------------------------------------------

smv_branch_whitelist = r'^dev$'
smv_released_pattern = r'^tags/.*$'
smv_remote_whitelist = r'^origin$'

# --- Autodoc ---------------------------------------------------------------

autodoc_default_options = {
    "members": True,
    "undoc-members": True,
    "private-members": False
}

napoleon_google_docstring = True
napoleon_numpy_docstring = False

set_type_checking_flag = True

# --- Intersphinx -----------------------------------------------------------

intersphinx_mapping = {
    'python': ('https://docs.python.org/3/', None),
    'numpy': ('https://numpy.org/doc/stable/', None),
    'scipy': ('https://docs.scipy.org/doc/scipy/', None),
    'attrs': ('https://www.attrs.org/en/stable/', None)
}

# --- HTML ------------------------------------------------------------------

html_theme = 'sphinx_rtd_theme'
html_static_path = ['../_static']
