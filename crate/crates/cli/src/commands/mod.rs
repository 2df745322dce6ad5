pub mod estimate;
pub mod rolling;
pub mod simulate;
pub mod tune;
