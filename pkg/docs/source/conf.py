# -*- coding: utf-8 -*-
#
# ds-resnet-kws documentation build configuration file.

import sys

sys.path.append("../../")
from dsresnet_kws import VERSION  # noqa: E402

extensions = []

templates_path = ['_templates']
source_suffix = '.rst'
master_doc = 'index'

project = 'ds-resnet-kws'
copyright = '2024, ds-resnet-kws contributors'

version = VERSION
release = VERSION

exclude_patterns = []
pygments_style = 'sphinx'

html_theme = 'default'
html_static_path = []
htmlhelp_basename = 'ds-resnet-kwsdoc'

latex_elements = {
}
latex_documents = [
    ('index', 'ds-resnet-kws.tex', 'ds-resnet-kws Documentation',
     'ds-resnet-kws contributors', 'manual'),
]

man_pages = [
    ('index', 'ds-resnet-kws', 'ds-resnet-kws Documentation',
     ['ds-resnet-kws contributors'], 1)
]

texinfo_documents = [
    ('index', 'ds-resnet-kws', 'ds-resnet-kws Documentation',
     'ds-resnet-kws contributors', 'ds-resnet-kws',
     'Depthwise separable ResNet keyword spotting.', 'Miscellaneous'),
]
