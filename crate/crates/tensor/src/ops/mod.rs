//! Differentiable operators. Each op computes its forward value eagerly and,
//! when any input is tracked, records a closure that maps the output
//! gradient to input gradients. Closures only capture raw buffers, never
//! tensors, so tapes do not form reference cycles.

pub mod conv;
pub mod elementwise;
pub mod loss;
pub mod norm;
pub mod pool;
pub mod shape;
