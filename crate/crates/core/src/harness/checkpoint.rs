use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::HarnessError;
use crate::numerics::ParamGroup;
use crate::td_detect::TdSnapshot;

const MAGIC: &str = "corep checkpoint v1";

/// Position of one ChaCha stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn of(r: &ChaCha8Rng) -> Self {
        Self { seed: r.get_seed(), stream: r.get_stream(), word_pos: r.get_word_pos() }
    }

    pub fn build(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

impl fmt::Display for RngState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.seed {
            write!(f, "{b:02x}")?;
        }
        write!(f, " {} {}", self.stream, self.word_pos)
    }
}

impl FromStr for RngState {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || HarnessError::Checkpoint(format!("bad rng state {s:?}"));
        let mut parts = s.split_whitespace();
        let hex = parts.next().ok_or_else(bad)?;
        if hex.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let stream = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let word_pos = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(Self { seed, stream, word_pos })
    }
}

/// Sectioned text checkpoint: a header with the config hash, then
/// `== name ==` sections for metadata, the config, each parameter group in
/// the `paramgroup v1` format, and the TD buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub hash: String,
    pub meta: Vec<(String, String)>,
    pub config: String,
    pub groups: Vec<(String, ParamGroup)>,
    pub td: TdSnapshot,
}

fn td_text(td: &TdSnapshot) -> String {
    let values: Vec<String> = td.values.iter().map(|v| format!("{v:?}")).collect();
    format!(
        "capacity = {}\nshift = {:?}\nsum = {:?}\nsum_sq = {:?}\nsince_recompute = {}\nvalues = {}\n",
        td.capacity,
        td.shift,
        td.sum,
        td.sum_sq,
        td.since_recompute,
        values.join(" ")
    )
}

fn key_values(body: &str) -> Result<Vec<(String, String)>, HarnessError> {
    body.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| HarnessError::Checkpoint(format!("expected `key = value`, got {l:?}")))
        })
        .collect()
}

fn parse_td(body: &str) -> Result<TdSnapshot, HarnessError> {
    let kv = key_values(body)?;
    let get = |k: &str| {
        kv.iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| HarnessError::Checkpoint(format!("td section lacks {k}")))
    };
    let bad = |k: &str| HarnessError::Checkpoint(format!("bad td value for {k}"));
    let f = |k: &str| get(k)?.parse::<f64>().map_err(|_| bad(k));
    let u = |k: &str| get(k)?.parse::<usize>().map_err(|_| bad(k));
    let values = get("values")?
        .split_whitespace()
        .map(|v| v.parse::<f64>().map_err(|_| bad("values")))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TdSnapshot {
        capacity: u("capacity")?,
        values,
        shift: f("shift")?,
        sum: f("sum")?,
        sum_sq: f("sum_sq")?,
        since_recompute: u("since_recompute")?,
    })
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut s = format!("{MAGIC}\nconfig_hash = {}\n== meta ==\n", self.hash);
        for (k, v) in &self.meta {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s.push_str("== config ==\n");
        s.push_str(&self.config);
        for (name, g) in &self.groups {
            s.push_str(&format!("== {name} ==\n"));
            s.push_str(&g.to_text());
        }
        s.push_str("== td ==\n");
        s.push_str(&td_text(&self.td));
        s
    }

    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(HarnessError::Checkpoint("missing checkpoint header".into()));
        }
        let hash = lines
            .next()
            .and_then(|l| l.strip_prefix("config_hash = "))
            .ok_or_else(|| HarnessError::Checkpoint("missing config hash".into()))?
            .trim()
            .to_string();
        let mut sections: Vec<(String, String)> = Vec::new();
        for line in lines {
            if let Some(name) = line.strip_prefix("== ").and_then(|l| l.strip_suffix(" ==")) {
                sections.push((name.to_string(), String::new()));
            } else if let Some((_, body)) = sections.last_mut() {
                body.push_str(line);
                body.push('\n');
            } else {
                return Err(HarnessError::Checkpoint(format!("content before first section: {line:?}")));
            }
        }
        let mut meta = None;
        let mut config = None;
        let mut td = None;
        let mut groups = Vec::new();
        for (name, body) in sections {
            match name.as_str() {
                "meta" => meta = Some(key_values(&body)?),
                "config" => config = Some(body),
                "td" => td = Some(parse_td(&body)?),
                _ => {
                    let g = ParamGroup::from_text(&body)
                        .map_err(|e| HarnessError::Checkpoint(format!("section {name}: {e}")))?;
                    groups.push((name, g));
                }
            }
        }
        let missing = |s: &str| HarnessError::Checkpoint(format!("missing section {s}"));
        Ok(Self {
            hash,
            meta: meta.ok_or_else(|| missing("meta"))?,
            config: config.ok_or_else(|| missing("config"))?,
            groups,
            td: td.ok_or_else(|| missing("td"))?,
        })
    }

    pub fn meta_value(&self, key: &str) -> Result<&str, HarnessError> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| HarnessError::Checkpoint(format!("missing meta key {key}")))
    }

    pub fn group(&self, name: &str) -> Result<&ParamGroup, HarnessError> {
        self.groups
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, g)| g)
            .ok_or_else(|| HarnessError::Checkpoint(format!("missing section {name}")))
    }
}
