//! CRC-64/ECMA-182: polynomial 0x42F0E1EBA9EA3693, init 0, no reflection,
//! no final xor. Check value for "123456789" is 0x6C40DF5F0B497347.

pub const POLY: u64 = 0x42F0_E1EB_A9EA_3693;

const fn make_table() -> [u64; 256] {
    let mut table = [0u64; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = (i as u64) << 56;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & (1 << 63) != 0 { (crc << 1) ^ POLY } else { crc << 1 };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

static TABLE: [u64; 256] = make_table();

pub fn crc64(data: &[u8]) -> u64 {
    data.iter()
        .fold(0u64, |crc, &b| TABLE[((crc >> 56) as u8 ^ b) as usize] ^ (crc << 8))
}
