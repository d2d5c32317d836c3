//! Fixed 64-entry character table.

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const VOCAB_SIZE: usize = 64;

const CHARS: &str = "\n (),-./0123456789:=?ABCDEHIJMQSTWabcdefghijklmnopqrstuvwxyz*+";

fn table() -> &'static [char] {
    use std::sync::OnceLock;
    static T: OnceLock<Vec<char>> = OnceLock::new();
    T.get_or_init(|| CHARS.chars().collect())
}

pub fn encode(s: &str) -> Result<Vec<u32>> {
    let t = table();
    s.chars()
        .map(|c| t.iter().position(|&x| x == c).map(|i| i as u32 + 2).ok_or(Error::UnknownChar(c)))
        .collect()
}

/// Inverse of [`encode`]; stops at the first EOS, skips PAD.
pub fn decode(ids: &[u32]) -> String {
    let t = table();
    let mut s = String::new();
    for &id in ids {
        match id {
            EOS => break,
            PAD => {}
            _ => {
                if let Some(&c) = t.get(id as usize - 2) {
                    s.push(c);
                }
            }
        }
    }
    s
}
