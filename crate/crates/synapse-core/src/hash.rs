//! Bob Jenkins' lookup3 hash (hashlittle variant, byte-at-a-time reads).
//! Steering and ring placement both ride on this; it is fixed for good so
//! that table layouts never depend on platform or toolchain.

#[inline(always)]
fn rot(x: u32, k: u32) -> u32 {
    x.rotate_left(k)
}

#[inline(always)]
fn mix(a: &mut u32, b: &mut u32, c: &mut u32) {
    *a = a.wrapping_sub(*c); *a ^= rot(*c, 4); *c = c.wrapping_add(*b);
    *b = b.wrapping_sub(*a); *b ^= rot(*a, 6); *a = a.wrapping_add(*c);
    *c = c.wrapping_sub(*b); *c ^= rot(*b, 8); *b = b.wrapping_add(*a);
    *a = a.wrapping_sub(*c); *a ^= rot(*c, 16); *c = c.wrapping_add(*b);
    *b = b.wrapping_sub(*a); *b ^= rot(*a, 19); *a = a.wrapping_add(*c);
    *c = c.wrapping_sub(*b); *c ^= rot(*b, 4); *b = b.wrapping_add(*a);
}

#[inline(always)]
fn final_mix(a: &mut u32, b: &mut u32, c: &mut u32) {
    *c ^= *b; *c = c.wrapping_sub(rot(*b, 14));
    *a ^= *c; *a = a.wrapping_sub(rot(*c, 11));
    *b ^= *a; *b = b.wrapping_sub(rot(*a, 25));
    *c ^= *b; *c = c.wrapping_sub(rot(*b, 16));
    *a ^= *c; *a = a.wrapping_sub(rot(*c, 4));
    *b ^= *a; *b = b.wrapping_sub(rot(*a, 14));
    *c ^= *b; *c = c.wrapping_sub(rot(*b, 24));
}

#[inline(always)]
fn word(bytes: &[u8]) -> u32 {
    // little-endian, missing tail bytes read as zero
    let mut w = 0u32;
    for (i, &byte) in bytes.iter().take(4).enumerate() {
        w |= (byte as u32) << (8 * i);
    }
    w
}

/// 32-bit avalanche hash of `data` with a caller-chosen `initval` salt.
pub fn hash32(data: &[u8], initval: u32) -> u32 {
    let init = 0xdead_beefu32.wrapping_add(data.len() as u32).wrapping_add(initval);
    let (mut a, mut b, mut c) = (init, init, init);

    let mut rest = data;
    while rest.len() > 12 {
        a = a.wrapping_add(word(&rest[0..4]));
        b = b.wrapping_add(word(&rest[4..8]));
        c = c.wrapping_add(word(&rest[8..12]));
        mix(&mut a, &mut b, &mut c);
        rest = &rest[12..];
    }

    if rest.is_empty() {
        return c;
    }
    a = a.wrapping_add(word(rest));
    if rest.len() > 4 {
        b = b.wrapping_add(word(&rest[4..]));
    }
    if rest.len() > 8 {
        c = c.wrapping_add(word(&rest[8..]));
    }
    final_mix(&mut a, &mut b, &mut c);
    c
}

/// Convenience for hashing a u64 identifier pair (ring placement, seeding).
pub fn hash32_pair(x: u64, y: u64, initval: u32) -> u32 {
    let mut buf = [0u8; 16];
    buf[..8].copy_from_slice(&x.to_le_bytes());
    buf[8..].copy_from_slice(&y.to_le_bytes());
    hash32(&buf, initval)
}
