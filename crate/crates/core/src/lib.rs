//! Probabilistic point-set registration.
//!
//! The model point set `Y` is treated as the centroids of a Gaussian mixture
//! and fitted to the data set `X` by expectation-maximization. Rigid
//! (similarity), affine and smooth non-rigid motions are supported; the
//! non-rigid field is regularized with a Gaussian kernel so that nearby points
//! move coherently.
//!
//! ```no_run
//! use pointreg::{register_rigid, PointSet, RegistrationConfig};
//!
//! let x = PointSet::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
//! let y = PointSet::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0], vec![-2.0, 0.0]]).unwrap();
//! let report = register_rigid(&x, &y, &RegistrationConfig::default()).unwrap();
//! println!("{:?}", report.transform);
//! ```

pub mod config;
mod em;
pub mod error;
pub mod estep;
pub mod fastops;
pub mod harness;
pub mod nonrigid;
pub mod pointset;
pub mod report;
pub mod rigid;
mod serde_mat;
pub mod transform;

pub use config::{Acceleration, RegistrationConfig};
pub use em::DENSE_DIAGNOSTIC_LIMIT;
pub use error::{RegError, Result};
pub use nonrigid::register_nonrigid;
pub use pointset::PointSet;
pub use report::RegistrationReport;
pub use rigid::{register_affine, register_rigid};
pub use transform::Transform;
