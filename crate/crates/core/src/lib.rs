//! Gaussian-copula fusion of direct multi-horizon density forecasts.
//!
//! Direct `h`-step-ahead forecasting models produce one marginal predictive
//! density per horizon and say nothing about how the horizons co-move. This
//! crate estimates that dependence from historical probability integral
//! transforms (PITs), couples the marginals through a Gaussian copula, and
//! maps the resulting joint paths into target-frequency predictive densities
//! such as annual-average or year-on-year growth.
//!
//! Module map:
//!
//! * [`dists`]: Normal, skew-normal/skew-t and quantile-grid marginals.
//! * [`copula`]: rank-correlation estimation, PSD repair, joint sampling.
//! * [`transform`]: linear period/frequency transforms of joint paths.
//! * [`analytic`]: closed-form AR(1) oracle and the attentive/inattentive gain surface.
//! * [`models`]: direct OLS / quantile-regression / ARDL forecasters and the VAR(1) simulator.
//! * [`scoring`]: CRPS, quantile-weighted CRPS, quantile scores, PIT and EPA tests.
//! * [`mc`]: the Monte Carlo experiment harness.

pub mod analytic;
pub mod copula;
pub mod dists;
pub mod error;
pub mod mc;
pub mod models;
pub mod numeric;
pub mod rng;
pub mod scoring;
pub mod transform;

pub use error::{Error, Result};
