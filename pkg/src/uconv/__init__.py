"""Conformer and temporal U-Net (Uconv) encoders with a CTC stack, toy trainer and CPU latency harness."""

__version__ = "0.1.0"
