"""Measurement-feedback control laboratory for a double-well oscillator.

Subpackages cover the truncated-Fock-basis operator algebra (`hilbert`),
the conditional stochastic master equation (`sme`), feedback controllers
(`control`), episodic environments (`env`), a self-contained PPO
actor-critic stack (`rl`), and reproducible experiments (`bench`).
"""

__version__ = "0.1.0"
