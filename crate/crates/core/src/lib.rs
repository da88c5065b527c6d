pub mod csi;
pub mod encode;
pub mod geometry;
pub mod io;
pub mod net;
pub mod rfsim;
pub mod rng;
pub mod train;
