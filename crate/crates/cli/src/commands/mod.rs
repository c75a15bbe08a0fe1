pub mod bench;
pub mod spectrum;
pub mod train;
pub mod verify;
