"""Pose estimation for a magnetic ball-and-socket joint.

Modules: ``rotation`` (SO(3), Euler, 6D), ``simkit`` (synthetic sensors and
datasets), ``diffcore`` (autodiff and Adam), ``lstm`` and ``dvbf`` (the two
estimators), ``evalkit`` (metrics, spike experiment) and ``cli``.
"""

__version__ = "0.1.0"
