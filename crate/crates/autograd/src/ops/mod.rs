//! Raw kernels behind the tape ops. They operate on plain tensors so they can
//! be reused outside a recorded graph (inference, distortion layers).

pub mod conv;
pub mod norm;
pub mod spatial;
