"""Tiny helpers shared by the demo scripts."""
from pulsesync.clocks import ClockKind, ClockModel
from pulsesync.photon_sim import (ChannelParams, DetectorParams, Simulation, SourceParams,
                                  Symbol, SymbolSequence)


def single_peak_stream(sender_offset, duration=0.1, seed=4):
    """Early-only pulses from a sender running fast by ``sender_offset``."""
    clock = ClockModel(kind=ClockKind.QUARTZ, fractional_offset=sender_offset)
    src = SourceParams(mean_photon_number=2e-3, sender_clock=clock)
    seq = SymbolSequence.constant(Symbol.EARLY)
    return Simulation(src, ChannelParams(), DetectorParams(), seq, duration, seed=seed).run()
