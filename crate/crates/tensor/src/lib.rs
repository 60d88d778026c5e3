//! A deliberately small CPU tensor library with reverse-mode automatic
//! differentiation, covering exactly the operator set needed by cell-based
//! convolutional supernets: dense and depthwise convolutions, pooling with
//! padding, batch normalization, channel concatenation, nearest upsampling
//! and a few losses.
//!
//! Tensors are immutable, reference counted `f32` buffers in row-major
//! (NCHW for images) layout. Operations on tensors that belong to a [`Tape`]
//! are recorded; [`Tape::backward`] then walks the records in reverse
//! creation order. Tensors without a tape are plain constants and never
//! record anything, which doubles as a no-grad mode.
//!
//! ```
//! use maskarch_tensor::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let w = tape.leaf(Tensor::from_vec(vec![2.0, -1.0], &[2]).unwrap());
//! let x = Tensor::from_vec(vec![3.0, 4.0], &[2]).unwrap();
//! let y = w.mul(&x).unwrap().sum();
//! let grads = tape.backward(&y).unwrap();
//! assert_eq!(grads.get(&w).unwrap(), &[3.0, 4.0]);
//! ```

mod error;
mod gemm;
pub mod ops;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use ops::conv::ConvParams;
pub use ops::norm::{BatchNormOutput, BatchStats};
pub use ops::pool::PoolKind;
pub use tape::{Gradients, Tape};
pub use tensor::Tensor;
