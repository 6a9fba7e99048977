#!/usr/bin/env python
import sys

# This shouldn't be needed since I have python_requires set but just in case:
if sys.version_info < (3, 7):
    raise ValueError("Must use python >= 3.7")

from setuptools import setup

# Read the version without importing the package (numpy may not be installed yet)
with open("roofshift/__init__.py") as file:
    for line in file:
        if line.startswith("__version__"):
            version = line.split("=")[1].strip().strip("\"'")
            break

setup(
    name="roofshift",
    packages=["roofshift"],
    long_description=open("readme.md").read(),
    long_description_content_type="text/markdown",
    entry_points={
        "console_scripts": ["roofshift=roofshift.cli:cli"],
    },
    version=version,
    description="Roof-to-footprint offset geometry, FOA numerics and evaluation for off-nadir building extraction",
    install_requires=["numpy>=1.17", "scipy>=1.3"],
    extras_require={"test": ["pytest", "pytest-cov"]},
    license="MIT",
    python_requires=">=3.7",
)
