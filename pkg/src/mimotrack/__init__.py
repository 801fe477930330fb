"""Contact-free multi-target tracking over distributed massive-MIMO OFDM CSI.

The package is organised around the processing chain of the tracker:

- :mod:`mimotrack.core` -- domain types, array geometry, CSI container I/O
- :mod:`mimotrack.simulator` -- physics-grounded CSI synthesis
- :mod:`mimotrack.calibration` -- frequency/antenna phase-error calibration
- :mod:`mimotrack.active_tracking` -- device-based benchmark tracker
- :mod:`mimotrack.toi` -- background removal and Doppler purification
- :mod:`mimotrack.cbcs` -- sparse Bayesian location recovery
- :mod:`mimotrack.gmphd` -- Gaussian-mixture PHD multi-target filter
- :mod:`mimotrack.pipeline` -- end-to-end orchestration and evaluation
- :mod:`mimotrack.service` -- FastAPI wrapper; the CLI is a thin client of it
"""

__version__ = "0.1.0"
