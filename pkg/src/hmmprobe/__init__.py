"""hmmprobe: HMM training, decoding, simulation, resampling, and diagnostics
for studying how frame-dependence violations degrade recognition accuracy."""

__version__ = "0.1.0"
