//! LSB-first bit packing.
//!
//! Values are appended to a byte stream starting at the least significant
//! bit of the current byte. A value that straddles a byte boundary continues
//! in the low bits of the next byte. Widths up to 8 bits are supported, which
//! covers every codebook index width in use.

/// Append-only bit stream writer.
#[derive(Debug, Default, Clone)]
pub struct BitWriter {
    bytes: Vec<u8>,
    bit_len: usize,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity_bits(bits: usize) -> Self {
        Self {
            bytes: Vec::with_capacity(bits.div_ceil(8)),
            bit_len: 0,
        }
    }

    /// Push the low `width` bits of `value`.
    pub fn push(&mut self, value: u8, width: u8) {
        debug_assert!((1..=8).contains(&width));
        debug_assert!(width == 8 || value >> width == 0);
        let mut remaining = width;
        let mut v = value as u16;
        while remaining > 0 {
            let bit_in_byte = (self.bit_len % 8) as u8;
            if bit_in_byte == 0 {
                self.bytes.push(0);
            }
            let room = 8 - bit_in_byte;
            let take = room.min(remaining);
            let mask = (1u16 << take) - 1;
            let last = self.bytes.last_mut().expect("byte pushed above");
            *last |= ((v & mask) as u8) << bit_in_byte;
            v >>= take;
            remaining -= take;
            self.bit_len += take as usize;
        }
    }

    pub fn bit_len(&self) -> usize {
        self.bit_len
    }

    pub fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

/// Read `width` bits starting at absolute bit offset `bit_offset`.
pub fn read_bits(bytes: &[u8], bit_offset: usize, width: u8) -> u8 {
    debug_assert!((1..=8).contains(&width));
    let byte = bit_offset / 8;
    let shift = bit_offset % 8;
    let lo = bytes[byte] as u16;
    let hi = if shift + width as usize > 8 {
        bytes[byte + 1] as u16
    } else {
        0
    };
    let word = (lo | (hi << 8)) >> shift;
    (word & ((1u16 << width) - 1)) as u8
}

/// Pack a slice of equal-width values.
pub fn pack(values: &[u8], width: u8) -> Vec<u8> {
    let mut w = BitWriter::with_capacity_bits(values.len() * width as usize);
    for &v in values {
        w.push(v, width);
    }
    w.finish()
}

/// Inverse of [`pack`].
pub fn unpack(bytes: &[u8], count: usize, width: u8) -> Vec<u8> {
    (0..count)
        .map(|i| read_bits(bytes, i * width as usize, width))
        .collect()
}
