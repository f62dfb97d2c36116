"""Fault-tolerant communication-avoiding QR on a simulated message fabric."""

from .driver import (Distribution, EngineConfig, FactorizationResult,
                     RunReport, enumerate_injection_points, factor,
                     reconstruct_q, run_sweep)
from .fabric import (AFTER_EXCHANGE, BEFORE_EXCHANGE, DeadlockError,
                     FailedPeerError, FaultPlan, KillEvent, Outcome,
                     PHASE_TRAILING, PHASE_TSQR, ProtocolError, TraceEvent,
                     UnrecoverableError, run)
from .kernels import (CombineFactor, DimensionError, InputError, QRFactor,
                      apply_q, apply_qt, build_t, combine_qr, householder_qr,
                      pair_update)
from .rng import XorShift64Star, random_matrix
from .trailing import (Ledger, Packet, TrailingBlock, leaf_update,
                       recovery_packet, trailing_recover)
from .tsqr import TsqrState, buddy, tsqr_allreduce
from .verify import Metrics, compare_runs, metrics, oracle_qr, sign_normalize

__version__ = "0.1.0"
