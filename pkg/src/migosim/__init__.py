"""migosim: a deterministic federated-learning simulator for studying
backdoor insertion strategies and server-side defenses."""

__version__ = "0.1.0"
