pub mod conv;
pub mod elementwise;
pub mod linear;
pub mod loss;
pub mod norm;
pub mod reduce;
pub mod resize;
pub mod shape;
