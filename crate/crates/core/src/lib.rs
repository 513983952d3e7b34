pub mod evalharness;
pub mod frcore;
pub mod imaging;
pub mod maskgen;
pub mod numerics;
pub mod protect;
pub mod seed;
pub mod synthdata;
pub mod teaming;
