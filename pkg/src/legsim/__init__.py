"""Hybrid rigid-body simulation and reinforcement learning for legged robots.

The package couples an articulated floating-base dynamics engine with hard
contacts, a learned (or analytic) actuator model inside the simulation loop,
and a TRPO trainer with a multiplicative cost curriculum. Three tasks are
provided: command-conditioned locomotion, high-speed locomotion, and recovery
from a fall.
"""

__version__ = "0.1.0"
