//! Pluggable tokenization for context features. Token counts are
//! tokenizer-relative, so every features record carries the tokenizer id.

/// Counts tokens in code text. Implementations must be deterministic.
pub trait Tokenizer {
    fn id(&self) -> &str;
    fn count_tokens(&self, text: &str) -> usize;
}

/// Default tokenizer: splits on identifier / number / punctuation /
/// whitespace character classes. Identifiers and numbers are one token per
/// run, every punctuation character is its own token, whitespace separates.
#[derive(Debug, Default, Clone, Copy)]
pub struct ClassSplitTokenizer;

impl Tokenizer for ClassSplitTokenizer {
    fn id(&self) -> &str {
        "class-split/1"
    }

    fn count_tokens(&self, text: &str) -> usize {
        let mut count = 0;
        let mut chars = text.chars().peekable();
        while let Some(&c) = chars.peek() {
            if c.is_whitespace() {
                chars.next();
            } else if c.is_alphabetic() || c == '_' {
                while chars
                    .peek()
                    .is_some_and(|&c| c.is_alphanumeric() || c == '_')
                {
                    chars.next();
                }
                count += 1;
            } else if c.is_ascii_digit() {
                while chars.peek().is_some_and(|&c| c.is_ascii_digit() || c == '.') {
                    chars.next();
                }
                count += 1;
            } else {
                chars.next();
                count += 1;
            }
        }
        count
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_identifiers_numbers_punct() {
        let t = ClassSplitTokenizer;
        // aws_key | : = 2 tokens
        assert_eq!(t.count_tokens("aws_key: "), 2);
        // x | = | foo | ( | 1 | , | 2.5 | ) — a number run keeps its dot.
        assert_eq!(t.count_tokens("x = foo(1, 2.5)"), 8);
        assert_eq!(t.count_tokens(""), 0);
        assert_eq!(t.count_tokens("   \n\t "), 0);
    }

    #[test]
    fn stable_across_calls() {
        let t = ClassSplitTokenizer;
        let text = "def f(a, b):\n    return a + b\n";
        assert_eq!(t.count_tokens(text), t.count_tokens(text));
    }
}
