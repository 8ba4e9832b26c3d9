"""Synchronization engine: folding, peak fits, initialization and tracking."""
from .folding import (FoldedHistogram, build_histogram, circular_difference, fold_modulo,
                      fold_period, folded_histogram, folded_histogram_period, period_ps)
from .initialization import (AlignmentFailed, OffsetSearchResult, SweepFailed, SweepResult,
                             absolute_offset_search, decode_bins, frequency_sweep,
                             qber_by_shift, staged_frequency_sweep, sweep_grid)
from .peaks import (CORRELATION_WINDOW_PS, NoPeakError, PeakFit, confidence, correlated_mask,
                    fit_peak, peak_spread, quick_significance, significance)
from .tracking import (ResyncRequired, SyncJitter, TrackerState, TrackingError,
                       frequency_correction, recover_symbol_slip, shift_periods, slip_candidates,
                       sync_jitter,
                       track_update, tracking_qber)

__all__ = [name for name in dir() if not name.startswith("_")]
