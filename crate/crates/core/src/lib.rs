pub mod numtheory;
pub mod hexint;
pub mod paillier;
pub mod threshold;
pub mod packing;
pub mod he;
pub mod ckks;
pub mod enc_tensor;
pub mod model;
pub mod store;
pub mod verify;
pub mod fedsim;
