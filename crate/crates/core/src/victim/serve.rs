use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::VictimModel;
use crate::augment::GridImage;
use crate::defense::active::{perturb_if_similar, perturb_noise, NoiseConfig};
use crate::defense::detect::{check_similar, DetectorConfig, HistoryStore, Space};
use crate::error::{Error, Result};
use crate::pow::{verify, DifficultyPolicy, Puzzle, PuzzleIssuer};
use crate::rng::{seeded, streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expose {
    #[default]
    Representations,
    Projections,
}

/// Replacement noise for flagged queries.
pub const DEFAULT_FLAGGED_NOISE: NoiseConfig = NoiseConfig { mean: 1000.0, sigma: 20.0 };

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefenseStep {
    Noise(NoiseConfig),
    SimilarityPerturb { detector: DetectorConfig, noise: NoiseConfig },
    PowGate { policy: DifficultyPolicy },
}

impl DefenseStep {
    pub fn validate(&self) -> Result<()> {
        match self {
            DefenseStep::Noise(n) => n.validate(),
            DefenseStep::SimilarityPerturb { detector, noise } => {
                detector.validate()?;
                noise.validate()
            }
            DefenseStep::PowGate { policy } => policy.validate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub expose: Expose,
    pub defenses: Vec<DefenseStep>,
    pub logging: bool,
    pub seed: u64,
}

impl ServeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.defenses.iter().filter(|d| matches!(d, DefenseStep::PowGate { .. })).count() > 1 {
            return Err(Error::Parameter("at most one pow_gate step".into()));
        }
        self.defenses.iter().try_for_each(DefenseStep::validate)
    }

    fn gate(&self) -> Option<&DifficultyPolicy> {
        self.defenses.iter().find_map(|d| match d {
            DefenseStep::PowGate { policy } => Some(policy),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryLogEntry {
    pub account: String,
    pub index: u64,
    pub input_hash: String,
    pub vector: Vec<f64>,
    pub actions: Vec<String>,
}

impl QueryLogEntry {
    /// `account \t index \t hash \t v1,v2,... \t action|action`.
    pub fn to_line(&self) -> String {
        let mut vec = String::new();
        for (i, v) in self.vector.iter().enumerate() {
            if i > 0 {
                vec.push(',');
            }
            write!(vec, "{v:?}").expect("write to string");
        }
        format!("{}\t{}\t{}\t{}\t{}", self.account, self.index, self.input_hash, vec, self.actions.join("|"))
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let bad = || Error::Format(format!("malformed query log line: {line}"));
        let parts: Vec<&str> = line.split('\t').collect();
        let [account, index, hash, vec, actions] = parts.as_slice() else {
            return Err(bad());
        };
        let vector = if vec.is_empty() {
            Vec::new()
        } else {
            vec.split(',').map(|v| v.parse::<f64>().map_err(|_| bad())).collect::<Result<_>>()?
        };
        Ok(Self {
            account: account.to_string(),
            index: index.parse().map_err(|_| bad())?,
            input_hash: hash.to_string(),
            vector,
            actions: if actions.is_empty() {
                Vec::new()
            } else {
                actions.split('|').map(str::to_string).collect()
            },
        })
    }
}

pub fn write_query_log(entries: &[QueryLogEntry], path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in entries {
        writeln!(out, "{}", e.to_line())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_query_log(path: impl AsRef<Path>) -> Result<Vec<QueryLogEntry>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    f.lines().filter(|l| !matches!(l, Ok(s) if s.is_empty())).map(|l| QueryLogEntry::parse_line(&l?)).collect()
}

/// SHA-256 of the image shape and pixel bits, first 16 bytes as hex.
pub fn input_hash(img: &GridImage) -> String {
    let mut h = Sha256::new();
    h.update((img.height() as u64).to_le_bytes());
    h.update((img.width() as u64).to_le_bytes());
    for p in img.pixels() {
        h.update(p.to_bits().to_le_bytes());
    }
    hex::encode(&h.finalize()[..16])
}

#[derive(Debug, Default)]
struct AccountState {
    queries: u64,
    flags: u64,
    pending: Option<Puzzle>,
}

#[derive(Debug, Default)]
struct ServerState {
    accounts: HashMap<String, AccountState>,
    history: HistoryStore,
    log: Vec<QueryLogEntry>,
}

/// The victim behind an API. Parameters are read-only; per-account state,
/// history and the log sit behind one lock.
#[derive(Debug)]
pub struct VictimServer {
    model: VictimModel,
    cfg: ServeConfig,
    issuer: PuzzleIssuer,
    state: Mutex<ServerState>,
}

impl VictimServer {
    pub fn new(model: VictimModel, cfg: ServeConfig) -> Result<Self> {
        cfg.validate()?;
        let issuer = PuzzleIssuer::new(cfg.seed);
        Ok(Self {
            model,
            cfg,
            issuer,
            state: Mutex::new(ServerState::default()),
        })
    }

    pub fn model(&self) -> &VictimModel {
        &self.model
    }

    pub fn config(&self) -> &ServeConfig {
        &self.cfg
    }

    pub fn output_dim(&self) -> usize {
        match self.cfg.expose {
            Expose::Representations => self.model.encoder.output_dim(),
            Expose::Projections => self.model.head.output_dim(),
        }
    }

    pub fn register(&self, account: &str) {
        self.lock().accounts.entry(account.to_string()).or_default();
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, ServerState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn query_count(&self, account: &str) -> Result<u64> {
        let st = self.lock();
        st.accounts.get(account).map(|a| a.queries).ok_or_else(|| Error::UnknownAccount(account.into()))
    }

    pub fn flag_count(&self, account: &str) -> Result<u64> {
        let st = self.lock();
        st.accounts.get(account).map(|a| a.flags).ok_or_else(|| Error::UnknownAccount(account.into()))
    }

    pub fn total_served(&self) -> u64 {
        self.lock().accounts.values().map(|a| a.queries).sum()
    }

    pub fn log(&self) -> Vec<QueryLogEntry> {
        self.lock().log.clone()
    }

    pub fn history(&self) -> HistoryStore {
        self.lock().history.clone()
    }

    pub fn write_log(&self, path: impl AsRef<Path>) -> Result<()> {
        write_query_log(&self.lock().log, path)
    }

    /// Answers one query. With a proof-of-work gate every query needs a fresh
    /// puzzle: a call without a valid solution to the pending puzzle is denied
    /// with a new puzzle whose difficulty follows the account's flag count.
    pub fn serve_query(&self, account: &str, input: &GridImage, pow_suffix: Option<&[u8]>) -> Result<Vec<f64>> {
        let x = GridImage::batch(&[input])?;
        let y = self.model.encoder.predict(&x)?;
        let needs_z = self.cfg.expose == Expose::Projections
            || self.cfg.defenses.iter().any(|d| matches!(d, DefenseStep::SimilarityPerturb { detector, .. } if detector.space == Space::Projection));
        let z = if needs_z { Some(self.model.head.predict(&y)?) } else { None };
        let y = y.into_data();
        let z = z.map(|t| t.into_data());

        let mut st = self.lock();
        let ServerState { accounts, history, log } = &mut *st;
        let acct = accounts.get_mut(account).ok_or_else(|| Error::UnknownAccount(account.into()))?;
        let mut actions = Vec::new();
        if let Some(policy) = self.cfg.gate() {
            let solved = match (acct.pending.as_ref(), pow_suffix) {
                (Some(p), Some(s)) => verify(p, s),
                _ => false,
            };
            if !solved {
                let puzzle = self.issuer.make_puzzle(account, acct.queries, policy, acct.flags);
                acct.pending = Some(puzzle.clone());
                return Err(Error::AccessDenied(puzzle));
            }
            let bits = acct.pending.take().map(|p| p.difficulty_bits).unwrap_or(0);
            actions.push(format!("pow:{bits}"));
        }

        let index = acct.queries;
        let mut rng = query_rng(self.cfg.seed, account, index);
        let mut out = match self.cfg.expose {
            Expose::Representations => y.clone(),
            Expose::Projections => z.clone().expect("projection computed"),
        };
        let mut recorded = false;
        for step in &self.cfg.defenses {
            match step {
                DefenseStep::Noise(n) => {
                    out = perturb_noise(&out, n, &mut rng);
                    actions.push("noise".into());
                }
                DefenseStep::SimilarityPerturb { detector, noise } => {
                    let key = match detector.space {
                        Space::Projection => z.as_deref().expect("projection computed"),
                        Space::Representation => &y,
                    };
                    let verdict = check_similar(history, account, key, detector)?;
                    if !recorded {
                        history.record(account, key)?;
                        recorded = true;
                    }
                    if verdict.flagged {
                        acct.flags += 1;
                        actions.push("similar".into());
                    }
                    out = perturb_if_similar(&out, &verdict, noise, &mut rng);
                }
                DefenseStep::PowGate { .. } => {}
            }
        }
        acct.queries += 1;
        if self.cfg.logging {
            log.push(QueryLogEntry {
                account: account.to_string(),
                index,
                input_hash: input_hash(input),
                vector: out.clone(),
                actions,
            });
        }
        Ok(out)
    }
}

/// Per-query noise stream, independent of how queries from different
/// accounts interleave.
fn query_rng(seed: u64, account: &str, index: u64) -> rand_chacha::ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(account.as_bytes());
    h.update([0]);
    h.update(index.to_le_bytes());
    let d = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&d[..8]);
    seeded(u64::from_le_bytes(b), streams::NOISE)
}
