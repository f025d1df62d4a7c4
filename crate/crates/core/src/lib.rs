pub mod addr;
pub mod attacks;
pub mod campaigns;
pub mod cli;
pub mod error;
pub mod hist;
pub mod prober;
pub mod rng;
pub mod sim;
pub mod space;
pub mod trials;
