//! Energy-aware quantized federated learning.
//!
//! Devices train quantized networks locally, upload quantized updates over a
//! fading uplink, and a server averages them. The crate models the energy of
//! that loop on a MAC-array accelerator and a shared radio channel, bounds
//! the number of rounds needed to reach a target accuracy, and picks the bit
//! width that minimizes total expected energy. A seeded simulator runs the
//! same protocol end to end.

pub mod analysis;
pub mod chipenergy;
pub mod error;
pub mod fedsim;
pub mod qnn;
pub mod quantizer;
pub mod radio;
pub mod stream;

pub use error::{Error, Result};
pub use quantizer::Precision;
