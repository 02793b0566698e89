"""bridgegrid: a PMI-style rendezvous runtime, TCP collectives, a driver/worker
harness and a distributed ptychography solver built on top of them.

Subpackages are imported lazily by their users; ``import bridgegrid`` stays
cheap so worker processes start fast.
"""

__version__ = "0.1.0"
