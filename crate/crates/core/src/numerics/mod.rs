//! Tensors, deterministic random streams and the dense kernels everything
//! else is built from.
//!
//! All kernels use a fixed reduction order. Parallel variants split work
//! across independent output rows only, so results are bit-identical for
//! any thread count.

mod cvt1;
pub(crate) mod kernels;
mod rng;
mod tensor;

pub use cvt1::{read_cvt1, read_cvt1_file, write_cvt1, write_cvt1_file, DType};
pub use kernels::{matmul, softmax_lastdim};
pub use rng::{gaussian_noise, SeededRng};
pub use tensor::{Real, Tensor};

use sha2::{Digest, Sha256};

/// Hex SHA-256 of the little-endian encoding of a tensor's dims and values.
pub fn tensor_digest<T: Real>(t: &Tensor<T>) -> String {
    let mut hasher = Sha256::new();
    for &d in t.dims() {
        hasher.update((d as u64).to_le_bytes());
    }
    let mut buf = Vec::with_capacity(t.len() * std::mem::size_of::<T>());
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    hasher.update(&buf);
    hex::encode(hasher.finalize())
}
