//! Numeric preprocessing and the few-shot prompt grammar.
//!
//! Every shot is rendered as
//!
//! ```text
//! If A is -29, 30, 128, -26, then B is 0, 100.
//! ```
//!
//! where `A` holds the four normalized gains in the order `h11, h12, h21, h22`
//! and `B` the two powers as integer percent of `p_max`. Shots are joined by a
//! single space and the prompt ends with the query stub
//! `If A is q1, q2, q3, q4, then B is ` (note the trailing space).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::ChannelGains;
use crate::objectives::PowerAllocation;
use crate::solvers::level_power;

/// Encoded gains are multiples of one hundredth of a standard deviation.
pub const GAIN_SCALE: f64 = 100.0;
/// Powers are encoded as integer percent of `p_max`.
pub const POWER_STEPS: i64 = 100;
/// Below this pooled standard deviation every gain encodes to zero.
pub const MIN_STD: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("gain {value} is not usable in the {domain:?} domain")]
    InvalidGain { value: f64, domain: GainDomain },
    #[error("a prompt needs at least one in-context example")]
    NoShots,
    #[error("malformed prompt at byte {offset}: {reason}")]
    MalformedPrompt { offset: usize, reason: &'static str },
}

/// Domain in which gains are z-scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GainDomain {
    /// `10 * log10(h)`.
    #[default]
    Db,
    /// Raw linear gains.
    Linear,
}

impl GainDomain {
    fn transform(self, gain: f64) -> Result<f64, CodecError> {
        let value = match self {
            GainDomain::Db => 10.0 * gain.log10(),
            GainDomain::Linear => gain,
        };
        if value.is_finite() {
            Ok(value)
        } else {
            Err(CodecError::InvalidGain { value: gain, domain: self })
        }
    }
}

/// `N_S` labeled shots plus one unlabeled query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub shots: Vec<(ChannelGains, PowerAllocation)>,
    pub query: ChannelGains,
}

/// Integer form of an [`Episode`], ready to be rendered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedEpisode {
    pub shot_gains: Vec<[i64; 4]>,
    pub shot_powers: Vec<[i64; 2]>,
    pub query_gains: [i64; 4],
    /// Pooled `(mean, population std)` of the transformed gains.
    pub stats: (f64, f64),
}

impl EncodedEpisode {
    pub fn n_shots(&self) -> usize {
        self.shot_gains.len()
    }
}

/// Z-scores `values` with their own mean and population standard deviation
/// and scales by [`GAIN_SCALE`], rounding half away from zero.
pub fn zscore_encode(values: &[f64]) -> (Vec<i64>, (f64, f64)) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let codes = if std < MIN_STD {
        vec![0; values.len()]
    } else {
        values.iter().map(|v| (GAIN_SCALE * (v - mean) / std).round() as i64).collect()
    };
    (codes, (mean, std))
}

/// Normalized gains of an episode, before labels are attached.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedGains {
    pub shot_gains: Vec<[i64; 4]>,
    pub query_gains: [i64; 4],
    pub stats: (f64, f64),
}

/// Normalizes all `4 * (N_S + 1)` gains of the episode with pooled statistics.
pub fn encode_gains(episode: &Episode, domain: GainDomain) -> Result<EncodedGains, CodecError> {
    let mut values = Vec::with_capacity(4 * (episode.shots.len() + 1));
    for gains in episode.shots.iter().map(|(g, _)| g).chain(std::iter::once(&episode.query)) {
        for h in gains.flat() {
            values.push(domain.transform(h)?);
        }
    }
    let (codes, stats) = zscore_encode(&values);
    let mut quads = codes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
    let shot_gains: Vec<[i64; 4]> = quads.by_ref().take(episode.shots.len()).collect();
    let query_gains = quads.next().expect("query gains present");
    Ok(EncodedGains { shot_gains, query_gains, stats })
}

/// Encodes gains and shot labels.
pub fn encode_episode(
    episode: &Episode,
    p_max: f64,
    domain: GainDomain,
) -> Result<EncodedEpisode, CodecError> {
    let EncodedGains { shot_gains, query_gains, stats } = encode_gains(episode, domain)?;
    let shot_powers = episode.shots.iter().map(|(_, a)| encode_power(a, p_max)).collect();
    Ok(EncodedEpisode { shot_gains, shot_powers, query_gains, stats })
}

/// Each power as `round(100 * P / p_max)`, clamped to `[0, 100]`.
pub fn encode_power(alloc: &PowerAllocation, p_max: f64) -> [i64; 2] {
    alloc
        .watts
        .map(|p| ((p / p_max) * POWER_STEPS as f64).round().clamp(0.0, POWER_STEPS as f64) as i64)
}

/// Inverse of [`encode_power`]; out-of-range integers are clamped first.
pub fn decode_power(codes: [i64; 2], p_max: f64) -> PowerAllocation {
    let [p1, p2] = codes.map(|c| level_power(c.clamp(0, POWER_STEPS) as usize, POWER_STEPS as usize, p_max));
    PowerAllocation::new(p1, p2)
}

/// Renders one labeled shot, including the trailing period.
pub fn format_shot(gains: &[i64; 4], powers: &[i64; 2]) -> String {
    format!(
        "If A is {}, {}, {}, {}, then B is {}, {}.",
        gains[0], gains[1], gains[2], gains[3], powers[0], powers[1]
    )
}

/// The text a model should complete a shot with: `b1, b2.`
pub fn format_label(powers: &[i64; 2]) -> String {
    format!("{}, {}.", powers[0], powers[1])
}

pub fn build_prompt(encoded: &EncodedEpisode) -> Result<String, CodecError> {
    if encoded.shot_gains.is_empty() {
        return Err(CodecError::NoShots);
    }
    let mut out = String::with_capacity(48 * (encoded.n_shots() + 1));
    for (gains, powers) in encoded.shot_gains.iter().zip(&encoded.shot_powers) {
        out.push_str(&format_shot(gains, powers));
        out.push(' ');
    }
    let q = &encoded.query_gains;
    write!(out, "If A is {}, {}, {}, {}, then B is ", q[0], q[1], q[2], q[3]).expect("write to String");
    Ok(out)
}

/// Shots and query recovered from a rendered prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPrompt {
    pub shot_gains: Vec<[i64; 4]>,
    pub shot_powers: Vec<[i64; 2]>,
    pub query_gains: [i64; 4],
}

/// Reads back a prompt produced by [`build_prompt`]. Strict: any deviation
/// from the grammar is an error.
pub fn parse_prompt(text: &str) -> Result<ParsedPrompt, CodecError> {
    let mut cur = Cursor { s: text, pos: 0 };
    let mut shot_gains = Vec::new();
    let mut shot_powers = Vec::new();
    loop {
        cur.expect("If A is ")?;
        let gains = [cur.int()?, cur.sep_int()?, cur.sep_int()?, cur.sep_int()?];
        cur.expect(", then B is ")?;
        if cur.at_end() {
            return Ok(ParsedPrompt { shot_gains, shot_powers, query_gains: gains });
        }
        let powers = [cur.int()?, cur.sep_int()?];
        cur.expect(". ")?;
        shot_gains.push(gains);
        shot_powers.push(powers);
    }
}

struct Cursor<'a> {
    s: &'a str,
    pos: usize,
}

impl Cursor<'_> {
    fn rest(&self) -> &str {
        &self.s[self.pos..]
    }

    fn at_end(&self) -> bool {
        self.pos == self.s.len()
    }

    fn fail(&self, reason: &'static str) -> CodecError {
        CodecError::MalformedPrompt { offset: self.pos, reason }
    }

    fn expect(&mut self, lit: &str) -> Result<(), CodecError> {
        if self.rest().starts_with(lit) {
            self.pos += lit.len();
            Ok(())
        } else {
            Err(self.fail("unexpected text"))
        }
    }

    fn int(&mut self) -> Result<i64, CodecError> {
        let rest = self.rest().as_bytes();
        let sign = usize::from(rest.first() == Some(&b'-'));
        let digits = rest[sign..].iter().take_while(|b| b.is_ascii_digit()).count();
        if digits == 0 {
            return Err(self.fail("expected integer"));
        }
        let end = self.pos + sign + digits;
        let value = self.s[self.pos..end].parse().map_err(|_| self.fail("integer out of range"))?;
        self.pos = end;
        Ok(value)
    }

    fn sep_int(&mut self) -> Result<i64, CodecError> {
        self.expect(", ")?;
        self.int()
    }
}

/// Result of reading a model completion.
#[derive(Debug, Clone, PartialEq)]
pub enum ParseOutcome {
    Allocation(PowerAllocation),
    Failure(String),
}

impl ParseOutcome {
    pub fn is_ok(&self) -> bool {
        matches!(self, ParseOutcome::Allocation(_))
    }

    /// The parsed allocation, or both transmitters off on failure.
    pub fn allocation(&self) -> PowerAllocation {
        match self {
            ParseOutcome::Allocation(a) => *a,
            ParseOutcome::Failure(_) => PowerAllocation::ZERO,
        }
    }
}

/// Extracts the leading `<int>, <int>` of a completion. Leading whitespace is
/// skipped, spaces around the comma are tolerated and anything after the
/// second integer is ignored. Integers too large for `i64` saturate.
pub fn parse_label(text: &str) -> Option<[i64; 2]> {
    let s = text.trim_start().as_bytes();
    let (first, mut i) = leading_int(s)?;
    while s.get(i) == Some(&b' ') {
        i += 1;
    }
    if s.get(i) != Some(&b',') {
        return None;
    }
    i += 1;
    while s.get(i) == Some(&b' ') {
        i += 1;
    }
    let (second, _) = leading_int(&s[i..])?;
    Some([first, second])
}

fn leading_int(s: &[u8]) -> Option<(i64, usize)> {
    let (negative, start) = match s.first() {
        Some(b'-') => (true, 1),
        Some(b'+') => (false, 1),
        _ => (false, 0),
    };
    let digits = s[start..].iter().take_while(|b| b.is_ascii_digit()).count();
    if digits == 0 {
        return None;
    }
    let magnitude = s[start..start + digits]
        .iter()
        .fold(0i64, |acc, d| acc.saturating_mul(10).saturating_add(i64::from(d - b'0')));
    Some((if negative { -magnitude } else { magnitude }, start + digits))
}

/// Parses a completion into an allocation, clamping each value to `[0, 100]`
/// percent of `p_max`.
pub fn parse_response(text: &str, p_max: f64) -> ParseOutcome {
    match parse_label(text) {
        Some(codes) => ParseOutcome::Allocation(decode_power(codes, p_max)),
        None => {
            let head: String = text.chars().take(40).collect();
            ParseOutcome::Failure(format!("completion does not start with `P1, P2`: {head:?}"))
        }
    }
}
