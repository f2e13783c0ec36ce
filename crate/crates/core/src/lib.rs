//! Disaggregated input-data preprocessing.
//!
//! A [`dispatcher`] coordinates a pool of stateless [`worker`]s that execute a
//! serialized [`pipeline`] graph over sharded [`records`] and serve batches to
//! training [`client`]s over the framed [`wire`] protocol.

pub mod client;
pub mod dispatcher;
pub mod kv;
pub mod pipeline;
pub mod records;
pub mod wire;
pub mod worker;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(super::fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(super::fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(super::fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
    }
}
