pub mod active;
pub mod detect;
pub mod reactive;
