pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod diffcore;
pub mod encoding;
pub mod fields;
pub mod identity;
pub mod losses;
pub mod model;
pub mod params;
pub mod renderer;
pub mod skeleton;
pub mod synthdata;
pub mod trainer;
pub mod verify;
