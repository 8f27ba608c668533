//! Topic keys and AMQP-style pattern matching.
//!
//! Keys are dot-separated words (`perfsonar.raw.throughput`). Binding
//! patterns may use `*` for exactly one word and `#` for zero or more
//! words.

use serde::{Deserialize, Serialize};
use std::fmt;

use super::BusError;

/// A concrete routing key. Wildcards are not allowed here; they live only
/// in binding patterns.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TopicKey(String);

impl TopicKey {
    pub fn new(key: impl Into<String>) -> Result<Self, BusError> {
        let key = key.into();
        if key.is_empty() {
            return Err(BusError::InvalidTopicKey(key));
        }
        for word in key.split('.') {
            if word.is_empty() || word.contains('*') || word.contains('#') {
                return Err(BusError::InvalidTopicKey(key));
            }
        }
        Ok(TopicKey(key))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.0.split('.')
    }
}

impl fmt::Display for TopicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for TopicKey {
    type Error = BusError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        TopicKey::new(s)
    }
}

impl From<TopicKey> for String {
    fn from(k: TopicKey) -> String {
        k.0
    }
}

/// A validated binding pattern.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Pattern(String);

impl Pattern {
    pub fn new(pattern: impl Into<String>) -> Result<Self, BusError> {
        let pattern = pattern.into();
        if pattern.is_empty() {
            return Err(BusError::InvalidPattern(pattern));
        }
        for word in pattern.split('.') {
            let ok = word == "*" || word == "#" || (!word.is_empty() && !word.contains(['*', '#']));
            if !ok {
                return Err(BusError::InvalidPattern(pattern));
            }
        }
        Ok(Pattern(pattern))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn matches(&self, key: &TopicKey) -> bool {
        match_topic(&self.0, key)
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for Pattern {
    type Error = BusError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Pattern::new(s)
    }
}

impl From<Pattern> for String {
    fn from(p: Pattern) -> String {
        p.0
    }
}

/// True iff `key` matches `pattern` under AMQP topic semantics:
/// `*` consumes exactly one word, `#` consumes zero or more words.
pub fn match_topic(pattern: &str, key: &TopicKey) -> bool {
    let pat: Vec<&str> = pattern.split('.').collect();
    let words: Vec<&str> = key.words().collect();

    // dp[i][j]: pattern words [i..] match key words [j..]
    let np = pat.len();
    let nw = words.len();
    let mut dp = vec![vec![false; nw + 1]; np + 1];
    dp[np][nw] = true;
    for i in (0..np).rev() {
        for j in (0..=nw).rev() {
            dp[i][j] = match pat[i] {
                "#" => dp[i + 1][j] || (j < nw && dp[i][j + 1]),
                "*" => j < nw && dp[i + 1][j + 1],
                w => j < nw && w == words[j] && dp[i + 1][j + 1],
            };
        }
    }
    dp[0][0]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(s: &str) -> TopicKey {
        TopicKey::new(s).unwrap()
    }

    #[test]
    fn literal_match() {
        assert!(match_topic("perfsonar.raw.throughput", &key("perfsonar.raw.throughput")));
        assert!(!match_topic("perfsonar.raw.throughput", &key("perfsonar.raw.latency")));
    }

    #[test]
    fn star_is_exactly_one_word() {
        assert!(match_topic("perfsonar.raw.*", &key("perfsonar.raw.latency")));
        assert!(!match_topic("perfsonar.raw.*", &key("perfsonar.raw.latency.extra")));
        assert!(!match_topic("perfsonar.raw.*", &key("perfsonar.raw")));
    }

    #[test]
    fn hash_matches_zero_or_more() {
        assert!(match_topic("perfsonar.#", &key("perfsonar")));
        assert!(match_topic("perfsonar.#", &key("perfsonar.raw.latency.extra")));
        assert!(match_topic("#", &key("anything.at.all")));
        assert!(match_topic("a.#.b", &key("a.b")));
        assert!(match_topic("a.#.b", &key("a.x.y.b")));
        assert!(!match_topic("a.#.b", &key("a.b.c")));
    }

    #[test]
    fn invalid_keys_and_patterns() {
        assert!(TopicKey::new("").is_err());
        assert!(TopicKey::new("a..b").is_err());
        assert!(TopicKey::new("a.*").is_err());
        assert!(Pattern::new("a.**").is_err());
        assert!(Pattern::new("a.x*").is_err());
        assert!(Pattern::new("").is_err());
        assert!(Pattern::new("a.#.*").is_ok());
    }
}
