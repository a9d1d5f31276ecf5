//! LSB-first bit packing: the first value occupies the lowest bits of the
//! first byte.

#[derive(Debug, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    acc: u64,
    filled: u32,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(bytes: usize) -> Self {
        Self {
            bytes: Vec::with_capacity(bytes),
            ..Self::default()
        }
    }

    /// Append the low `bits` bits of `value` (`bits <= 32`).
    pub fn write(&mut self, value: u32, bits: u32) {
        debug_assert!(bits <= 32);
        if bits == 0 {
            return;
        }
        let mask = (1u64 << bits) - 1;
        self.acc |= (u64::from(value) & mask) << self.filled;
        self.filled += bits;
        while self.filled >= 8 {
            self.bytes.push(self.acc as u8);
            self.acc >>= 8;
            self.filled -= 8;
        }
    }

    /// Zero-pad to a byte boundary and return the bytes.
    pub fn finish(mut self) -> Vec<u8> {
        if self.filled > 0 {
            self.bytes.push(self.acc as u8);
        }
        self.bytes
    }
}

#[derive(Debug)]
pub struct BitReader<'a> {
    data: &'a [u8],
    bit: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, bit: 0 }
    }

    /// Next `bits`-wide value, or `None` past the end of the data.
    pub fn read(&mut self, bits: u32) -> Option<u32> {
        if bits == 0 {
            return Some(0);
        }
        let end = self.bit + bits as usize;
        if end > self.data.len() * 8 {
            return None;
        }
        let mut v = 0u64;
        let mut got = 0;
        while got < bits as usize {
            let pos = self.bit + got;
            let byte = self.data[pos / 8];
            let shift = pos % 8;
            let take = (8 - shift).min(bits as usize - got);
            let chunk = (u64::from(byte) >> shift) & ((1u64 << take) - 1);
            v |= chunk << got;
            got += take;
        }
        self.bit = end;
        Some(v as u32)
    }

    pub fn bit_position(&self) -> usize {
        self.bit
    }

    /// True when every bit after the current position is zero.
    pub fn rest_is_zero(&self) -> bool {
        let first = self.bit / 8;
        let shift = self.bit % 8;
        if first >= self.data.len() {
            return true;
        }
        if self.data[first] >> shift != 0 {
            return false;
        }
        self.data[first + 1..].iter().all(|&b| b == 0)
    }
}

/// Bytes of a stream of `count` values at `bits` each, padded to a byte.
pub fn stream_len(count: u64, bits: u32) -> u64 {
    (count * u64::from(bits)).div_ceil(8)
}
