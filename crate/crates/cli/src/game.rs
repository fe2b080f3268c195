//! Characteristic-function files for the `shapley` subcommand.
//!
//! ```text
//! # additive game
//! players = 3
//! 0 0
//! 1 0.2
//! 2 0.3
//! ...
//! ```
//!
//! One line per coalition: decimal bitmask, then its value. Every one of the
//! `2^M` coalitions, the empty one included, must appear exactly once.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GameTable {
    pub players: usize,
    /// `values[mask]`.
    pub values: Vec<f64>,
}

/// Largest game the file format accepts; the table has `2^M` lines.
pub const MAX_FILE_PLAYERS: usize = 20;

pub fn parse_game(text: &str) -> Result<GameTable> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (no, header) = lines.next().ok_or_else(|| anyhow!("game file is empty"))?;
    let players: usize = header
        .split_once('=')
        .filter(|(k, _)| k.trim() == "players")
        .and_then(|(_, v)| v.trim().parse().ok())
        .ok_or_else(|| anyhow!("line {no}: expected `players = M`"))?;
    if players == 0 || players > MAX_FILE_PLAYERS {
        bail!("line {no}: players must be in 1..={MAX_FILE_PLAYERS}, got {players}");
    }

    let size = 1usize << players;
    let mut values = vec![None; size];
    for (no, line) in lines {
        let mut parts = line.split_whitespace();
        let (Some(mask), Some(value), None) = (parts.next(), parts.next(), parts.next()) else {
            bail!("line {no}: expected `bitmask value`");
        };
        let mask: usize = mask.parse().with_context(|| format!("line {no}: bad bitmask `{mask}`"))?;
        let value: f64 = value.parse().with_context(|| format!("line {no}: bad value `{value}`"))?;
        if mask >= size {
            bail!("line {no}: bitmask {mask} exceeds the {players}-player set");
        }
        if !value.is_finite() {
            bail!("line {no}: value must be finite");
        }
        if values[mask].replace(value).is_some() {
            bail!("line {no}: coalition {mask} listed twice");
        }
    }
    if let Some(missing) = values.iter().position(Option::is_none) {
        bail!("coalition {missing} is missing from the game file");
    }
    Ok(GameTable {
        players,
        values: values.into_iter().map(|v| v.expect("checked above")).collect(),
    })
}

pub fn read_game(path: &Path) -> Result<GameTable> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    parse_game(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const ADDITIVE: &str = "players = 3\n0 0\n1 0.2\n2 0.3\n3 0.5\n4 0.5\n5 0.7\n6 0.8\n7 1.0\n";

    #[test]
    fn parses_a_complete_table() {
        let g = parse_game(ADDITIVE).unwrap();
        assert_eq!(g.players, 3);
        assert_eq!(g.values[5], 0.7);
    }

    #[test]
    fn rejects_incomplete_or_malformed_tables() {
        let err = parse_game("players = 2\n0 0\n1 1\n2 1\n").unwrap_err().to_string();
        assert!(err.contains("coalition 3 is missing"), "{err}");
        assert!(parse_game("players = 2\n0 0\n1 1\n1 1\n2 1\n3 2\n").is_err());
        assert!(parse_game("players = 2\n0 0\n1 1\n2 1\n4 2\n").is_err());
        assert!(parse_game("n = 2\n").is_err());
        assert!(parse_game("players = 1\n0 0\n1 x\n").is_err());
        assert!(parse_game("").is_err());
    }
}
