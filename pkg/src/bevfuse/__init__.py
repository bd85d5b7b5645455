"""Desk-scale testbed for single-branch camera/LiDAR BEV fusion.

Library layout:

- ``tensor``      minimal reverse-mode autodiff over dense float arrays
- ``fusion``      BEV fusion operators and availability-conditional dispatch
- ``world``       synthetic scenes, sensor rendering, BEV projection, dataset I/O
- ``corruption``  sensor-stream corruption families at three severities
- ``detector``    shared BEV encoder, center-based detection head, loss, decoding
- ``trainer``     regime-mixing training schedules and optimization
- ``evalharness`` AP / mRA metrics and the corruption sweep
- ``cli``         reproducible experiment front end
"""

__version__ = "0.1.0"
