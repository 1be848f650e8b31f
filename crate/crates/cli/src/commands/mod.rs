pub mod curate;
pub mod evaluate;
pub mod sample;
pub mod train;
