//! Dense matrices, seeded randomness and reverse-mode gradients.

mod exact;
mod matrix;
mod rng;
mod tape;

pub use exact::{exact_quotient, exact_sum};
pub use matrix::Matrix;
pub use rng::{init_matrix, InitScheme, Rng};
pub use tape::{GradientTape, Var};
