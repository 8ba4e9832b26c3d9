"""Clock synchronization from single-photon arrival times.

A sender emits time-bin encoded pulses at a nominal clock rate; a receiver
recovers the sender clock from the detection timestamps alone, first by a
frequency sweep plus a one-time sequence disclosure, then by a per-update
feedback loop on the folded arrival histogram.
"""
__version__ = "0.1.0"
