//! Protocol messages, their priority order, and the wire format used to
//! meter congestion.
//!
//! Processes exchange [`Message`] values directly; the bit encoding exists
//! so the engine can record how many bits every send would cost on a real
//! link.

use std::cmp::Ordering;
use std::fmt;

use thiserror::Error;

/// One protocol message.
///
/// The derived `Ord` is structural and only used for deterministic
/// bookkeeping (inbox aggregation). Protocol decisions use
/// [`Message::priority`] / [`compare`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Message {
    Null,
    /// Level-begin: announces the sender's temporary ID.
    Begin {
        id: u64,
    },
    /// Input value announcement, used only while level 0 is built in
    /// generalized mode.
    Input {
        value: u64,
    },
    /// Level-end.
    End,
    Done {
        id: u64,
    },
    /// Red-edge triplet.
    Edge {
        id1: u64,
        id2: u64,
        mult: u64,
    },
    Error {
        level: u64,
    },
    Reset {
        level: u64,
        starting_round: u64,
        new_diam: u64,
    },
    /// Network size announcement for simultaneous termination.
    Final {
        n: u64,
        round: u64,
    },
}

impl Message {
    pub fn label(&self) -> Label {
        match self {
            Message::Null => Label::Null,
            Message::Begin { .. } => Label::Begin,
            Message::Input { .. } => Label::Input,
            Message::End => Label::End,
            Message::Done { .. } => Label::Done,
            Message::Edge { .. } => Label::Edge,
            Message::Error { .. } => Label::Error,
            Message::Reset { .. } => Label::Reset,
            Message::Final { .. } => Label::Final,
        }
    }

    pub fn priority(&self) -> PriorityKey {
        const M: u64 = u64::MAX;
        match *self {
            Message::Null => PriorityKey(0, 0, 0, 0),
            Message::Begin { .. } => PriorityKey(1, 0, 0, 0),
            Message::End => PriorityKey(2, 0, 0, 0),
            Message::Input { value } => PriorityKey(3, M - value, 0, 0),
            Message::Done { id } => PriorityKey(4, M - id, 0, 0),
            Message::Edge { id1, id2, mult } => PriorityKey(5, M - id1, M - id2, M - mult),
            Message::Error { level } => PriorityKey(6, M - level, 0, 0),
            Message::Reset { level, .. } => PriorityKey(6, M - level, 1, 0),
            Message::Final { n, round } => PriorityKey(7, n, round, 0),
        }
    }

    /// Parameters in wire order.
    pub fn params(&self) -> Vec<u64> {
        match *self {
            Message::Null | Message::End => vec![],
            Message::Begin { id } | Message::Done { id } => vec![id],
            Message::Input { value } => vec![value],
            Message::Edge { id1, id2, mult } => vec![id1, id2, mult],
            Message::Error { level } => vec![level],
            Message::Reset { level, starting_round, new_diam } => {
                vec![level, starting_round, new_diam]
            }
            Message::Final { n, round } => vec![n, round],
        }
    }

    pub fn max_param(&self) -> u64 {
        self.params().into_iter().max().unwrap_or(0)
    }
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Message::Null => write!(f, "Null"),
            Message::Begin { id } => write!(f, "Begin({id})"),
            Message::Input { value } => write!(f, "Input({value})"),
            Message::End => write!(f, "End"),
            Message::Done { id } => write!(f, "Done({id})"),
            Message::Edge { id1, id2, mult } => write!(f, "Edge({id1},{id2},{mult})"),
            Message::Error { level } => write!(f, "Error({level})"),
            Message::Reset { level, starting_round, new_diam } => {
                write!(f, "Reset({level},{starting_round},{new_diam})")
            }
            Message::Final { n, round } => write!(f, "Final({n},{round})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Null,
    Begin,
    Input,
    End,
    Done,
    Edge,
    Error,
    Reset,
    Final,
}

/// Totally ordered priority key; a greater key means a higher priority.
///
/// Null < Begin < End < Input < Done < Edge < ... < Reset(k+1) < Error(k)
/// < Reset(k) < ... < Final. All Begin messages share one key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PriorityKey(u8, u64, u64, u64);

/// Compares two messages by protocol priority.
pub fn compare(a: &Message, b: &Message) -> Ordering {
    a.priority().cmp(&b.priority())
}

/// Returns the higher-priority message; ties keep `current`.
pub fn max_priority(current: Message, candidate: Message) -> Message {
    if compare(&candidate, &current) == Ordering::Greater {
        candidate
    } else {
        current
    }
}

// ---------------------------------------------------------------------------
// Wire format

const LABEL_BITS: usize = 3;
const EXTENSION_CODE: u8 = 7;
const EXT_INPUT: u64 = 0;
const EXT_FINAL: u64 = 1;

/// A sequence of bits, most significant bit of each field first.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BitString(Vec<bool>);

impl BitString {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        BitString(bits)
    }

    fn push_uint(&mut self, value: u64, width: usize) {
        for i in (0..width).rev() {
            self.0.push((value >> i) & 1 == 1);
        }
    }

    fn push_varint(&mut self, mut value: u64) {
        loop {
            let payload = value & 0x7f;
            value >>= 7;
            let cont = u64::from(value != 0);
            self.push_uint((cont << 7) | payload, 8);
            if value == 0 {
                break;
            }
        }
    }

    /// Packs the bits into bytes (zero padded on the right) as lowercase hex.
    pub fn to_hex(&self) -> String {
        self.0
            .chunks(8)
            .map(|chunk| {
                let byte = chunk.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | (u8::from(b) << (7 - i)));
                format!("{byte:02x}")
            })
            .collect()
    }
}

impl fmt::Display for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("bit string truncated at bit {0}")]
    Truncated(usize),
    #[error("unknown label code {0}")]
    UnknownLabel(u64),
    #[error("varint does not fit in 64 bits")]
    Overflow,
    #[error("{0} trailing bits after message")]
    TrailingBits(usize),
}

fn label_code(m: &Message) -> u8 {
    match m {
        Message::Null => 0,
        Message::Begin { .. } => 1,
        Message::End => 2,
        Message::Done { .. } => 3,
        Message::Edge { .. } => 4,
        Message::Error { .. } => 5,
        Message::Reset { .. } => 6,
        Message::Input { .. } | Message::Final { .. } => EXTENSION_CODE,
    }
}

/// Number of bits a base-128 varint of `value` occupies.
pub fn varint_bits(value: u64) -> usize {
    let significant = 64 - value.leading_zeros() as usize;
    8 * significant.div_ceil(7).max(1)
}

pub fn encode(m: &Message) -> BitString {
    let mut out = BitString::default();
    out.push_uint(u64::from(label_code(m)), LABEL_BITS);
    match m {
        Message::Input { .. } => out.push_varint(EXT_INPUT),
        Message::Final { .. } => out.push_varint(EXT_FINAL),
        _ => {}
    }
    for p in m.params() {
        out.push_varint(p);
    }
    out
}

pub fn bit_size(m: &Message) -> usize {
    let ext = match m {
        Message::Input { .. } => varint_bits(EXT_INPUT),
        Message::Final { .. } => varint_bits(EXT_FINAL),
        _ => 0,
    };
    LABEL_BITS + ext + m.params().into_iter().map(varint_bits).sum::<usize>()
}

struct Reader<'a> {
    bits: &'a [bool],
    pos: usize,
}

impl Reader<'_> {
    fn uint(&mut self, width: usize) -> Result<u64, DecodeError> {
        if self.pos + width > self.bits.len() {
            return Err(DecodeError::Truncated(self.bits.len()));
        }
        let v = self.bits[self.pos..self.pos + width].iter().fold(0u64, |acc, &b| (acc << 1) | u64::from(b));
        self.pos += width;
        Ok(v)
    }

    fn varint(&mut self) -> Result<u64, DecodeError> {
        let mut value = 0u64;
        let mut shift = 0u32;
        loop {
            let group = self.uint(8)?;
            let payload = group & 0x7f;
            if shift > 63 || (shift == 63 && payload > 1) {
                return Err(DecodeError::Overflow);
            }
            value |= payload << shift;
            if group & 0x80 == 0 {
                return Ok(value);
            }
            shift += 7;
        }
    }
}

pub fn decode(bits: &BitString) -> Result<Message, DecodeError> {
    let mut r = Reader { bits: bits.bits(), pos: 0 };
    let code = r.uint(LABEL_BITS)?;
    let m = match code {
        0 => Message::Null,
        1 => Message::Begin { id: r.varint()? },
        2 => Message::End,
        3 => Message::Done { id: r.varint()? },
        4 => Message::Edge { id1: r.varint()?, id2: r.varint()?, mult: r.varint()? },
        5 => Message::Error { level: r.varint()? },
        6 => Message::Reset { level: r.varint()?, starting_round: r.varint()?, new_diam: r.varint()? },
        7 => match r.varint()? {
            EXT_INPUT => Message::Input { value: r.varint()? },
            EXT_FINAL => Message::Final { n: r.varint()?, round: r.varint()? },
            other => return Err(DecodeError::UnknownLabel(8 + other)),
        },
        other => return Err(DecodeError::UnknownLabel(other)),
    };
    if r.pos != bits.len() {
        return Err(DecodeError::TrailingBits(bits.len() - r.pos));
    }
    Ok(m)
}
