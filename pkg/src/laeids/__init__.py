"""Collaborative intrusion detection for aerial IoT swarms.

Traffic sessions become grayscale images, a small diffusion denoiser learns
representations from benign traffic, particle-swarm search picks feature
masks per device profile, and a tiered tree-ensemble pool classifies traffic
according to each node's battery and CPU state.
"""

__version__ = "0.1.0"
