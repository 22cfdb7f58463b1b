//! Estimators for correlations, central limit behaviour and large
//! deviations, with the rate fits and distribution tests they rely on.

pub mod birkhoff;
pub mod dist;
pub mod ensemble;
pub mod fit;
pub mod observables;

pub use birkhoff::{clt_check, ld_curve, CltReport, CltVerdict, LdOptions, LdReport};
pub use ensemble::{
    correlation_series, green_kubo_sigma2, sample_mu, sample_mu_with, CorrelationSeries, EnsembleOptions, GreenKubo,
};
pub use fit::{fit_rate, log_grid, Family, FitWindow, RateFit};
pub use observables::{holder_check, Observable, ObservableRegistry, ObservableSpec};
