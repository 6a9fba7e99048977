#!/usr/bin/env python
"""
This is just an alternative way to call roofshift if you do not install it via
pip
"""
import roofshift.cli

roofshift.cli.cli()
