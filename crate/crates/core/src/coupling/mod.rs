//! Coupling of pairs of tower points: the stopping-time schedule, the
//! simultaneous return time `S` and its survival curve.

pub mod pairs;
pub mod schedule;
pub mod survival;
pub mod trace;

pub use pairs::{DensityPairs, PairContext, PairSampler, PairSamplerRegistry, ReferencePairs};
pub use schedule::{base_return_profile, certify_schedule, ScheduleOptions, StoppingSchedule};
pub use survival::{
    increment_slopes, matching_bound_check, replay_pair, survival_curve, trace_dump, ulam_survival, IncrementSlope, IncrementTail, MatchingOptions,
    MatchingReport, Stratum, SurvivalCurve, SurvivalOptions,
};
pub use trace::{hat_return_time, run_coupling_trace, CouplingTrace, PointRecord, TraceStop};
