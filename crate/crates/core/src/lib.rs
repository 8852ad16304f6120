pub mod eval;
pub mod losses;
pub mod nn;
pub mod noise;
pub mod tensor;
pub mod train;
