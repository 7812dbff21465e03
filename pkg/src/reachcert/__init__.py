"""reachcert: synthesis and formal verification of neural reach-avoid certificates
for neural-network-controlled discrete-time stochastic systems."""

__version__ = "0.1.0"
