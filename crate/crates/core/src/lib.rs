//! Lock-disaggregated MVCC transactions over simulated one-sided remote memory.

pub mod fabric;
pub mod locktable;
pub mod memstore;
pub mod sharding;
pub mod sim;
pub mod vtcache;
pub mod txn;
pub mod cluster;
pub mod recovery;
pub mod balance;
pub mod driver;
