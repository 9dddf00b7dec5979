// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte-level tokenizer: ids 0..=255 are bytes, 256 is padding.

use crate::error::{Error, Result};

pub const PAD: usize = 256;
pub const VOCAB_SIZE: usize = 257;

pub fn tokenize(text: &[u8]) -> Vec<usize> {
    text.iter().map(|&b| b as usize).collect()
}

pub fn detokenize(ids: &[usize]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&i| {
            u8::try_from(i).map_err(|_| Error::OutOfRange(format!("token id {i} is not a byte")))
        })
        .collect()
}

/// Printable label for a token id, used in reports.
pub fn token_label(id: usize) -> String {
    match id {
        PAD => "<pad>".to_string(),
        b if b < 256 => {
            let c = b as u8;
            if c.is_ascii_graphic() {
                (c as char).to_string()
            } else if c == b' ' {
                "␣".to_string()
            } else {
                format!("\\x{c:02x}")
            }
        }
        other => format!("<{other}>"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_map_to_ids() {
        assert_eq!(tokenize(b"AB"), vec![65, 66]);
        assert!(tokenize(b"").is_empty());
        assert!(detokenize(&[PAD]).is_err());
        assert_eq!(token_label(b'a' as usize), "a");
    }

    proptest::proptest! {
        #[test]
        fn round_trip(s in proptest::collection::vec(proptest::prelude::any::<u8>(), 0..64)) {
            proptest::prop_assert_eq!(detokenize(&tokenize(&s)).unwrap(), s);
        }
    }
}
