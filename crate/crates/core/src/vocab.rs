//! Byte vocabulary: 256 raw byte values followed by four special symbols.

/// One vocabulary symbol. Values `0..=255` are raw bytes; `256..=259` are specials.
pub type Symbol = u16;

pub const BOS: Symbol = 256;
pub const EOS: Symbol = 257;
pub const PAD: Symbol = 258;
pub const MASK: Symbol = 259;

pub const VOCAB_SIZE: usize = 260;

pub fn is_byte(s: Symbol) -> bool {
    s < 256
}

/// Symbols an engine may emit: raw bytes and EOS. BOS, PAD and MASK never appear
/// as generated output.
pub fn is_emittable(s: Symbol) -> bool {
    s < 256 || s == EOS
}

/// Prepends BOS to raw bytes.
pub fn with_bos(bytes: &[u8]) -> Vec<Symbol> {
    let mut out = Vec::with_capacity(bytes.len() + 1);
    out.push(BOS);
    out.extend(bytes.iter().map(|&b| b as Symbol));
    out
}

/// Raw bytes of a symbol sequence, dropping special symbols.
pub fn to_bytes(symbols: &[Symbol]) -> Vec<u8> {
    symbols
        .iter()
        .filter(|&&s| is_byte(s))
        .map(|&s| s as u8)
        .collect()
}

pub fn name(s: Symbol) -> String {
    match s {
        BOS => "<bos>".into(),
        EOS => "<eos>".into(),
        PAD => "<pad>".into(),
        MASK => "<mask>".into(),
        b if (32..127).contains(&b) => (b as u8 as char).to_string(),
        b => format!("\\x{:02x}", b),
    }
}
