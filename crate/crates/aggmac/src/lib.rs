pub mod auth;
pub mod channel;
pub mod crypto;
pub mod record;
pub mod session;
pub mod verify;
