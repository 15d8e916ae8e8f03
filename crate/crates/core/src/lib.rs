pub mod client;
pub mod crypto;
pub mod hub;
pub mod ledger;
pub mod net;
pub mod protocol;
pub mod simnet;
pub mod wire;
