pub mod ablate;
pub mod eval;
pub mod phantom;
pub mod segment;
pub mod slices;
pub mod train;
