"""Mixed-traffic co-simulation lab.

Grid microsimulator with Krauss car-following, RL-based signal control,
green-window trajectory planning for automated vehicles, and per-vehicle
energy accounting.
"""

__version__ = "0.1.0"
