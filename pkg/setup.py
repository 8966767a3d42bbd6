import os
from setuptools import setup
from dsresnet_kws import VERSION


README = """
DS-ResNet keyword spotting

Depthwise separable residual networks for small-footprint keyword spotting on
the Speech Commands corpus: layer-by-layer cost analysis, MFCC front end,
SGD training and inference in numpy.

Installation
From pip:

pip install ds-resnet-kws
"""

# allow setup.py to be run from any path
os.chdir(os.path.normpath(os.path.join(os.path.abspath(__file__), os.pardir)))
install_requires = [
    'numpy>=1.17',
    'scipy>=1.4',
    'PyYAML>=3.10',
    'argh>=0.30',
]

setup(
    name='ds-resnet-kws',
    version=VERSION,
    packages=['dsresnet_kws'],
    include_package_data=True,
    license='FreeBSD License',
    description='Depthwise separable ResNet keyword spotting',
    long_description=README,
    install_requires=install_requires,
    extras_require={
        'test': ['mock>=1.0.1', 'hypothesis>=4.0', 'pytest>=4.0',
                 'coverage>=4.0', 'flake8>=3.0'],
    },
    entry_points={
        'console_scripts': ['dsresnet-kws = dsresnet_kws.cli:main'],
    },
    python_requires='>=3.7',
    classifiers=[
        'Environment :: Console',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: BSD License',
        'Operating System :: OS Independent',
        'Programming Language :: Python :: 3',
        'Topic :: Multimedia :: Sound/Audio :: Speech',
        'Topic :: Scientific/Engineering :: Artificial Intelligence',
    ],
)
