"""fedtte: a desk-scale federated travel-time-estimation sandbox.

Clients holding private trajectories locally train a shared generative
traffic-state model (embeddings -> spatial graph convolution -> a
spatio-temporal cross product -> route summation) plus a small personal
residual model. A simulated server performs sample-weighted, schedule-driven
federated aggregation under Laplace differential privacy, and a built-in
difference attack quantifies how much of a client's traveled edge set leaks
through its uploads.

Subpackages of interest:

- ``fedtte.nn``        dense-tensor substrate, analytic gradients, SGD
- ``fedtte.graph``     road network, spectral structures, route validation
- ``fedtte.model``     base traffic-state model and personal residual model
- ``fedtte.data``      synthetic world generation and trajectory ingestion
- ``fedtte.privacy``   Laplace mechanism, difference attack, risk sweeps
- ``fedtte.federated`` client selection, local updates, weighted aggregation
- ``fedtte.harness``   metrics, experiment orchestration, state export
- ``fedtte.cli``       command-line entry point (``fedtte ...``)
"""

__version__ = "0.1.0"
