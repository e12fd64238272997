//! HashCash-style proof-of-work gate.
//!
//! A client must find a suffix such that `SHA-256(challenge ‖ suffix)` starts
//! with at least `difficulty_bits` zero bits before the server answers.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Hard ceiling on difficulty; beyond this a desk-scale client never finishes.
pub const MAX_DIFFICULTY_BITS: u32 = 30;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Puzzle {
    pub challenge: Vec<u8>,
    pub difficulty_bits: u32,
}

/// Wire form of a [`Puzzle`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PuzzleJson {
    pub challenge_hex: String,
    pub difficulty_bits: u32,
}

/// Wire form of a solution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolutionJson {
    pub suffix_hex: String,
}

impl Puzzle {
    pub fn to_json(&self) -> PuzzleJson {
        PuzzleJson {
            challenge_hex: hex::encode(&self.challenge),
            difficulty_bits: self.difficulty_bits,
        }
    }

    pub fn from_json(j: &PuzzleJson) -> Result<Self> {
        let challenge = hex::decode(&j.challenge_hex)
            .map_err(|e| Error::Parameter(format!("challenge_hex: {e}")))?;
        Ok(Self {
            challenge,
            difficulty_bits: j.difficulty_bits,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DifficultyPolicy {
    pub base_bits: u32,
    pub increment_bits_per_flag: u32,
    pub cap_bits: u32,
}

impl Default for DifficultyPolicy {
    fn default() -> Self {
        Self {
            base_bits: 4,
            increment_bits_per_flag: 1,
            cap_bits: 16,
        }
    }
}

impl DifficultyPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.base_bits > self.cap_bits || self.cap_bits > MAX_DIFFICULTY_BITS {
            return Err(Error::Parameter(format!(
                "difficulty policy needs 0 ≤ base ({}) ≤ cap ({}) ≤ {MAX_DIFFICULTY_BITS}",
                self.base_bits, self.cap_bits
            )));
        }
        Ok(())
    }

    /// `min(base + increment·flags, cap)`.
    pub fn difficulty(&self, flags: u64) -> u32 {
        let extra = (self.increment_bits_per_flag as u64).saturating_mul(flags);
        (self.base_bits as u64).saturating_add(extra).min(self.cap_bits as u64) as u32
    }
}

/// Issues puzzles with unique nonces (`salt ‖ sequence`).
#[derive(Debug)]
pub struct PuzzleIssuer {
    salt: u64,
    sequence: AtomicU64,
}

impl PuzzleIssuer {
    pub fn new(salt: u64) -> Self {
        Self {
            salt,
            sequence: AtomicU64::new(0),
        }
    }

    /// Challenge layout: `account ‖ 0x00 ‖ salt (u64 BE) ‖ sequence (u64 BE) ‖ query counter (u64 BE)`.
    pub fn make_puzzle(&self, account: &str, query_counter: u64, policy: &DifficultyPolicy, flags: u64) -> Puzzle {
        let seq = self.sequence.fetch_add(1, Ordering::SeqCst);
        let mut challenge = Vec::with_capacity(account.len() + 25);
        challenge.extend_from_slice(account.as_bytes());
        challenge.push(0);
        challenge.extend_from_slice(&self.salt.to_be_bytes());
        challenge.extend_from_slice(&seq.to_be_bytes());
        challenge.extend_from_slice(&query_counter.to_be_bytes());
        Puzzle {
            challenge,
            difficulty_bits: policy.difficulty(flags),
        }
    }
}

pub fn leading_zero_bits(digest: &[u8]) -> u32 {
    let mut n = 0;
    for &b in digest {
        if b == 0 {
            n += 8;
        } else {
            n += b.leading_zeros();
            break;
        }
    }
    n
}

pub fn digest(challenge: &[u8], suffix: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(challenge);
    h.update(suffix);
    h.finalize().into()
}

pub fn verify(puzzle: &Puzzle, suffix: &[u8]) -> bool {
    puzzle.difficulty_bits == 0 || leading_zero_bits(&digest(&puzzle.challenge, suffix)) >= puzzle.difficulty_bits
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Solution {
    pub suffix: Vec<u8>,
    pub attempts: u64,
}

impl Solution {
    pub fn to_json(&self) -> SolutionJson {
        SolutionJson {
            suffix_hex: hex::encode(&self.suffix),
        }
    }
}

/// Tries suffixes `0, 1, 2, …` encoded as u64 big-endian.
pub fn solve(puzzle: &Puzzle, max_attempts: u64) -> Result<Solution> {
    if max_attempts == 0 {
        return Err(Error::Parameter("max_attempts must be ≥ 1".into()));
    }
    for counter in 0..max_attempts {
        let suffix = counter.to_be_bytes();
        if verify(puzzle, &suffix) {
            return Ok(Solution {
                suffix: suffix.to_vec(),
                attempts: counter + 1,
            });
        }
    }
    Err(Error::Exhausted(max_attempts))
}
