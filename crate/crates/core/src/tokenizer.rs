//! Fixed byte-level tokenizer over a restricted lowercase alphabet,
//! digits, and punctuation. One character per token, 64 ids total.

use alloc::string::String;
use alloc::vec::Vec;

pub const EOS: u32 = 0;
pub const PAD: u32 = 1;
pub const UNK: u32 = 2;

/// Characters at ids 3..64, in order.
const CHARS: &[char] = &[
    ' ', '\n', 'a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', 'i', 'j', 'k', 'l', 'm', 'n', 'o', 'p',
    'q', 'r', 's', 't', 'u', 'v', 'w', 'x', 'y', 'z', '0', '1', '2', '3', '4', '5', '6', '7',
    '8', '9', '.', ',', '?', '!', '\'', '"', '$', '%', '*', '+', '-', '=', ':', ';', '(', ')',
    '/', '<', '>', '#', '&', '_', '@',
];

pub const VOCAB_SIZE: usize = 64;

fn char_to_id(c: char) -> u32 {
    let c = match c {
        '’' | '‘' => '\'',
        '“' | '”' => '"',
        '–' | '—' => '-',
        other => other.to_ascii_lowercase(),
    };
    for (i, &k) in CHARS.iter().enumerate() {
        if k == c {
            return (i + 3) as u32;
        }
    }
    UNK
}

pub fn encode(text: &str) -> Vec<u32> {
    text.chars().map(char_to_id).collect()
}

pub fn decode(tokens: &[u32]) -> String {
    let mut out = String::new();
    for &t in tokens {
        match t {
            EOS | PAD => {}
            UNK => out.push('\u{fffd}'),
            id => {
                let idx = id as usize - 3;
                if idx < CHARS.len() {
                    out.push(CHARS[idx]);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_is_64() {
        assert_eq!(CHARS.len() + 3, VOCAB_SIZE);
    }

    #[test]
    fn roundtrip_lowercase_text() {
        let s = "janet's ducks lay 16 eggs per day. how much in dollars?";
        assert_eq!(decode(&encode(s)), s);
    }

    #[test]
    fn folds_case_and_unicode_quotes() {
        assert_eq!(encode("Janet’s"), encode("janet's"));
    }

    #[test]
    fn unknown_maps_to_unk() {
        assert_eq!(encode("é")[0], UNK);
    }

    #[test]
    fn all_ids_in_vocab() {
        for t in encode("the quick brown fox: $1,234.56 #### 42 (a+b)*c/d = e?") {
            assert!((t as usize) < VOCAB_SIZE);
        }
    }
}
