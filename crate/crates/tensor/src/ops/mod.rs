pub(crate) mod conv;
mod elementwise;
pub(crate) mod linalg;
pub(crate) mod nn;
mod shape;
