#!/usr/bin/env python
import os
# Always prefer setuptools over distutils
import sys

from setuptools import find_packages, setup

try:
    from scorelab import __about__ as about
    from scorelab import setup_tools
except ImportError:
    # alternative https://stackoverflow.com/a/67692/4521646
    sys.path.append("scorelab")
    import __about__ as about
    import setup_tools

# https://packaging.python.org/guides/single-sourcing-package-version/
# http://blog.ionelmc.ro/2014/05/25/python-packaging/

_PATH_ROOT = os.path.dirname(__file__)

long_description = setup_tools._load_readme_description(_PATH_ROOT, homepage=about.__homepage__, ver=about.__version__)

# keep the meta-data here for simplicity in reading this file
setup(
    name="scorelab",
    version=about.__version__,
    description=about.__docs__,
    author=about.__author__,
    author_email=about.__author_email__,
    url=about.__homepage__,
    license=about.__license__,
    packages=find_packages(exclude=["tests", "tests.*", "docs", "scorelab_examples"]),
    long_description=long_description,
    long_description_content_type="text/markdown",
    include_package_data=True,
    zip_safe=False,
    keywords=["diffusion models", "score matching", "sample complexity", "pytorch"],
    python_requires=">=3.8",
    setup_requires=[],
    install_requires=setup_tools._load_requirements(_PATH_ROOT, file_name='requirements.txt'),
    entry_points={
        "console_scripts": ["scorelab=scorelab.experiments.cli:main"],
    },
    classifiers=[
        "Environment :: Console",
        "Natural Language :: English",
        # How mature is this project? Common values are
        #   3 - Alpha, 4 - Beta, 5 - Production/Stable
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
        "Topic :: Scientific/Engineering :: Mathematics",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
    ],
)
