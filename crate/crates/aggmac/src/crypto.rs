//! Keyed pseudorandom function underlying tags, key derivation, sequence
//! masking, and the record keystream.
//!
//! Everything in this crate that needs a PRF goes through [`prf`] (or its
//! truncated form [`prf16`]), so swapping the primitive means changing one
//! function. The default is HMAC-SHA256, a pseudorandom MAC whose outputs
//! can be safely XOR-aggregated; Carter-Wegman constructions (GMAC,
//! Poly1305) must not be dropped in here.

use hmac::{Hmac, KeyInit, Mac};
use sha2::Sha256;

/// Length in bytes of all symmetric keys handled by this crate.
pub const KEY_LEN: usize = 16;

/// A 128-bit symmetric key.
pub type Key = [u8; KEY_LEN];

/// HMAC-SHA256 over the concatenation of `parts`.
pub fn prf(key: &[u8], parts: &[&[u8]]) -> [u8; 32] {
    let mut mac = Hmac::<Sha256>::new_from_slice(key).expect("HMAC accepts any key length");
    for part in parts {
        mac.update(part);
    }
    mac.finalize().into_bytes().into()
}

/// [`prf`] truncated to 128 bits, the width of keys and virtual tags.
pub fn prf16(key: &[u8], parts: &[&[u8]]) -> Key {
    let full = prf(key, parts);
    let mut out = [0u8; KEY_LEN];
    out.copy_from_slice(&full[..KEY_LEN]);
    out
}
