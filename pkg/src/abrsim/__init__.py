"""Discrete-event simulation of ATM ABR congestion control.

Rate-based feedback schemes (EFCI/PRCA, EPRCA, OSU/TUB, CAPC, BECN), the
credit-based FCVC scheme, dual-GCRA traffic policing, and an exact max-min
fairness oracle, all on one deterministic microsecond-tick event kernel.
"""

from .engine import (CellArrival, Event, Link, Node, PortQueue,
                     SchedulingInPast, Simulator, SourceWake, TailDrop,
                     TimerFire)
from .fairness import (AllocationProblem, DegenerateOptimal,
                       beat_down_probability, fairness_index, max_min,
                       mit_fair_share, mit_fair_share_rounds)
from .harness import (ConfigError, MetricsLog, RunReport, ScenarioConfig,
                      build_figure3, build_parking_lot, config_from_text,
                      config_to_text, emit_csv, oracle_vector,
                      parse_metrics_csv, run_scenario)
from .model import (CELL_BITS, Cell, InvalidContract, RmPayload,
                    TrafficContract, VcPath, bt_from_mbs, cells_per_second,
                    make_forward_rm, to_mbps)
from .traffic import (BurstySource, EarlyPacketDiscard, GcraState,
                      PersistentSource, Policer, SourceIdle, SourceModel,
                      StaggeredSource, epd_enqueue, gcra_for_rate,
                      next_emission)
from .schemes import (AbrDestination, AbrSource, BecnPort, CapcPort,
                      EfciPrcaPort, EprcaPort, OsuPort, RateSwitch,
                      SourceState, destination_turnaround)
from .credit import (CreditCell, CreditProtocolError, CreditReceiver,
                     CreditSender, InsufficientBuffer, NegativeLoss,
                     UnknownVc, adaptive_allocate, credit_send_gate, resync,
                     static_credit_size)

__version__ = "0.1.0"
