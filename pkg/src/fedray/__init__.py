"""Federated training of small neural radiance fields.

A numpy library plus CLI that trains a coordinate MLP across several
simulated or TCP-connected clients, compressing weight exchanges with a
frozen low-rank reparameterization and accounting for every transferred
byte.
"""

__version__ = "0.1.0"
