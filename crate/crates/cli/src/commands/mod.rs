pub mod ablate;
pub mod attack;
pub mod evaluate;
pub mod gen_data;
pub mod train;
