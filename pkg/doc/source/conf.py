# -*- coding: utf-8 -*-
#
# Sphinx configuration for the SRasv documentation.

import os
import sys

sys.path.insert(0, os.path.abspath('../..'))

# numpydoc renders the docstrings; it needs autosummary for its member tables
extensions = ['sphinx.ext.autosummary', 'sphinx.ext.autodoc', 'numpydoc']
numpydoc_show_class_members = False

source_suffix = '.rst'
master_doc = 'index'

project = u'SRasv'
copyright = u'2026, authors of SRasv'
version = '0.1'
release = '0.1.0a1'

pygments_style = 'sphinx'
html_theme = 'nature'
htmlhelp_basename = 'SRasvdoc'

man_pages = [
    ('index', 'srasv', u'SRasv Documentation', [u'SRasv authors'], 1)
]
