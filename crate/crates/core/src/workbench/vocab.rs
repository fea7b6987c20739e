//! The toy vocabulary shared by every task family.
//!
//! Ids `0..=28` are assigned; a model needs `vocab_size ≥ 29`.

use crate::model::Token;

pub const PLUS: Token = 10;
pub const EQUALS: Token = 11;
pub const QUERY: Token = 12;
pub const REVERSE: Token = 13;
pub const LETTER_A: Token = 14;
pub const LETTER_COUNT: u32 = 8;
pub const LESS: Token = 22;
pub const GREATER: Token = 23;
pub const SAME: Token = 24;
pub const OPEN: Token = 25;
pub const CLOSE: Token = 26;
pub const EOS: Token = 27;
pub const BOS: Token = 28;
pub const MIN_VOCAB: usize = 29;

pub fn digit(d: u32) -> Token {
    debug_assert!(d < 10);
    d
}

pub fn letter(i: u32) -> Token {
    debug_assert!(i < LETTER_COUNT);
    LETTER_A + i
}

/// Decimal digits of `n`, most significant first.
pub fn digits_of(n: u32) -> Vec<Token> {
    n.to_string().bytes().map(|b| Token::from(b - b'0')).collect()
}

pub fn digit_alphabet() -> Vec<Token> {
    (0..10).collect()
}

pub fn letter_alphabet() -> Vec<Token> {
    (0..LETTER_COUNT).map(letter).collect()
}

/// Human-readable rendering for logs; unknown ids print as `#id`.
pub fn render(tokens: &[Token]) -> String {
    let mut out = String::new();
    for &t in tokens {
        match t {
            0..=9 => out.push(char::from(b'0' + t as u8)),
            PLUS => out.push('+'),
            EQUALS => out.push('='),
            QUERY => out.push('?'),
            REVERSE => out.push('~'),
            t if (LETTER_A..LETTER_A + LETTER_COUNT).contains(&t) => {
                out.push(char::from(b'a' + (t - LETTER_A) as u8))
            }
            LESS => out.push('<'),
            GREATER => out.push('>'),
            SAME => out.push('|'),
            OPEN => out.push('['),
            CLOSE => out.push(']'),
            EOS => out.push('$'),
            BOS => out.push('^'),
            other => out.push_str(&format!("#{other}")),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digits_and_rendering() {
        assert_eq!(digits_of(0), vec![0]);
        assert_eq!(digits_of(407), vec![4, 0, 7]);
        assert_eq!(render(&[BOS, 3, PLUS, 5, EQUALS, OPEN, 1, CLOSE, EOS]), "^3+5=[1]$");
        assert_eq!(render(&[letter(0), letter(7), 31]), "ah#31");
    }
}
