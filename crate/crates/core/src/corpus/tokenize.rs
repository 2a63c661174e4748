/// Lowercases `text` and splits it into word tokens.
///
/// Whitespace separates tokens. Inside a whitespace-delimited chunk every
/// maximal run of alphanumeric characters is one token and every other
/// character is a token of its own, so punctuation is kept.
pub fn tokenize(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in lowered.chars() {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn punctuation_is_kept_as_tokens() {
        assert_eq!(toks("Chest pain, SOB."), ["chest", "pain", ",", "sob", "."]);
    }

    #[test]
    fn empty_text() {
        assert!(toks("").is_empty());
        assert!(toks("   \n\t").is_empty());
    }

    #[test]
    fn slash_splits_numbers() {
        assert_eq!(toks("BP 120/80"), ["bp", "120", "/", "80"]);
    }

    #[test]
    fn repeated_punctuation_is_one_token_per_char() {
        assert_eq!(toks("wait...ok"), ["wait", ".", ".", ".", "ok"]);
    }

    proptest::proptest! {
        #[test]
        fn lowercasing_is_idempotent(s in "\\PC{0,40}") {
            let once = tokenize(&s);
            proptest::prop_assert_eq!(&once, &tokenize(&s.to_lowercase()));
            proptest::prop_assert_eq!(&once, &tokenize(&s));
            for t in &once {
                proptest::prop_assert!(!t.is_empty());
                proptest::prop_assert!(!t.chars().any(char::is_whitespace));
            }
        }
    }
}
